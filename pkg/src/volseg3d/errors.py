"""Exception hierarchy shared by every module of the package."""


class VolsegError(Exception):
    """Base class for all package errors."""


class DimensionError(VolsegError, ValueError):
    """Tensor or volume shapes do not agree."""


class GeometryError(VolsegError, ValueError):
    """Spatial sizes are incompatible with a kernel, stride or network depth."""


class ParameterError(VolsegError, ValueError):
    """A hyperparameter is outside its valid range."""


class NonFiniteError(VolsegError, FloatingPointError):
    """A NaN or Inf was produced where finite values are required."""


class GraphError(VolsegError, RuntimeError):
    """The computation graph is malformed (e.g. contains a cycle)."""


class OptimizerError(VolsegError, RuntimeError):
    """An optimizer update received unusable gradients."""


class GenerationError(VolsegError, RuntimeError):
    """Synthetic volume generation could not place any object."""


class ModelError(VolsegError, ValueError):
    """A checkpoint has the wrong role or an inconsistent architecture."""


class ConfigError(VolsegError, ValueError):
    """A configuration is invalid or refers to missing resources."""


class FormatError(VolsegError, OSError):
    """A file is missing required metadata or has an unknown layout."""


class CorruptFileError(VolsegError, OSError):
    """A file's payload does not match its declared metadata."""
