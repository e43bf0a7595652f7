"""Synthetic-data driven 3D nuclei segmentation on a numpy autodiff core."""

__version__ = "0.1.0"
