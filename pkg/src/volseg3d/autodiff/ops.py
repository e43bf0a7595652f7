"""Differentiable tensor ops: elementwise math, 3D convolutions, pooling, normalization."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, GeometryError, ParameterError
from .tensor import Tensor, as_tensor, make_result

# upper bound on im2col elements materialized at once
_IM2COL_LIMIT = 1 << 24


def _triple(v, what: str) -> tuple[int, int, int]:
    t = (v, v, v) if np.isscalar(v) else tuple(v)
    if len(t) != 3:
        raise ParameterError(f"{what} must be an int or a 3-tuple, got {v!r}")
    return tuple(int(i) for i in t)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce_pair(a, b):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and not b_t:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif b_t and not a_t:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# ------------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return make_result(np.asarray(a.data.sum(dtype=np.float64)), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size

    def backward(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return make_result(np.asarray(a.data.mean(dtype=np.float64)), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return make_result(data, tensors, backward, "concat")


# ------------------------------------------------------------------ activations
def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_result(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ParameterError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    out = np.logaddexp(0.0, x.data).astype(x.dtype)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(out, (x,), lambda g: (g * s,), "softplus")


def activation(kind: str, x: Tensor, slope: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ParameterError(f"unknown activation {kind!r}")


# ------------------------------------------------------------------ convolution
def _out_size(n: int, k: int, s: int, p: int, axis: str) -> int:
    span = n + 2 * p - k
    if span < 0:
        raise GeometryError(f"kernel {k} exceeds padded size {n + 2 * p} along {axis}")
    if span % s:
        raise GeometryError(f"({n} + 2*{p} - {k}) is not divisible by stride {s} along {axis}")
    return span // s + 1


def _windows(xp: np.ndarray, k, s) -> np.ndarray:
    v = sliding_window_view(xp, k, axis=(2, 3, 4))
    return v[:, :, :: s[0], :: s[1], :: s[2]]


def _chunk(n_rows: int, per_row: int) -> int:
    return max(1, min(n_rows, _IM2COL_LIMIT // max(per_row, 1)))


def _correlate(x: np.ndarray, w: np.ndarray, stride, padding) -> np.ndarray:
    """Raw cross-correlation: x (N,C,D,H,W), w (O,C,kd,kh,kw)."""
    n, c = x.shape[:2]
    k = w.shape[2:]
    dims = [_out_size(x.shape[2 + i], k[i], stride[i], padding[i], "DHW"[i]) for i in range(3)]
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2]))) if any(p) else x
    win = _windows(xp, k, stride)
    out = np.empty((n, w.shape[0], *dims), dtype=np.result_type(x, w))
    step = _chunk(dims[0], n * c * dims[1] * dims[2] * k[0] * k[1] * k[2])
    for d0 in range(0, dims[0], step):
        d1 = min(d0 + step, dims[0])
        part = np.tensordot(win[:, :, d0:d1], w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        out[:, :, d0:d1] = np.moveaxis(part, -1, 1)
    return out


def _correlate_weight_grad(x: np.ndarray, g: np.ndarray, k, stride, padding) -> np.ndarray:
    """d(correlate(x, w))/dw contracted with upstream g; returns (O,C,kd,kh,kw)."""
    n, c = x.shape[:2]
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2]))) if any(p) else x
    win = _windows(xp, k, stride)
    dims = g.shape[2:]
    gw = np.zeros((g.shape[1], c, *k), dtype=np.result_type(x, g))
    step = _chunk(dims[0], n * c * dims[1] * dims[2] * k[0] * k[1] * k[2])
    for d0 in range(0, dims[0], step):
        d1 = min(d0 + step, dims[0])
        gw += np.tensordot(g[:, :, d0:d1], win[:, :, d0:d1], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def _correlate_input_grad(g: np.ndarray, w: np.ndarray, stride, padding, in_dims) -> np.ndarray:
    """d(correlate(x, w))/dx contracted with upstream g; returns (N,C,*in_dims)."""
    n, o = g.shape[:2]
    k = w.shape[2:]
    gd_dims = [(g.shape[2 + i] - 1) * stride[i] + 1 for i in range(3)]
    if stride == (1, 1, 1):
        gd = g
    else:
        gd = np.zeros((n, o, *gd_dims), dtype=g.dtype)
        gd[:, :, :: stride[0], :: stride[1], :: stride[2]] = g
    # far-side remainder of the padded input not reached by any window
    rem = [in_dims[i] + 2 * padding[i] - (gd_dims[i] - 1) - k[i] for i in range(3)]
    pads = [(k[i] - 1, k[i] - 1 + rem[i]) for i in range(3)]
    gd = np.pad(gd, ((0, 0), (0, 0), *pads))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    gxp = _correlate(gd, wf, (1, 1, 1), (0, 0, 0))
    p = padding
    return gxp[:, :, p[0]: p[0] + in_dims[0], p[1]: p[1] + in_dims[1], p[2]: p[2] + in_dims[2]]


def _check_conv_shapes(x: Tensor, w: Tensor, b: Tensor | None, cin_axis: int, cout_axis: int, op: str):
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"{op} expects 5D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[cin_axis]:
        raise DimensionError(f"{op}: input has {x.shape[1]} channels but weight expects {w.shape[cin_axis]}")
    if b is not None and b.shape != (w.shape[cout_axis],):
        raise DimensionError(f"{op}: bias shape {b.shape} does not match {w.shape[cout_axis]} output channels")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlate ``x`` (N,Cin,D,H,W) with ``w`` (Cout,Cin,kd,kh,kw)."""
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if min(stride) < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    _check_conv_shapes(x, w, b, 1, 0, "conv3d")
    out = _correlate(x.data, w.data, stride, padding)
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gx = _correlate_input_grad(g, w.data, stride, padding, x.shape[2:]) if x.requires_grad else None
        gw = _correlate_weight_grad(x.data, g, w.shape[2:], stride, padding) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward, "conv3d")


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Transposed convolution; ``w`` is laid out (Cin, Cout, kd, kh, kw).

    The forward pass is exactly the input-gradient of :func:`conv3d` with the
    same weight, so the two ops are adjoint.
    """
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if min(stride) < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    _check_conv_shapes(x, w, b, 0, 1, "conv_transpose3d")
    k = w.shape[2:]
    out_dims = tuple((x.shape[2 + i] - 1) * stride[i] - 2 * padding[i] + k[i] for i in range(3))
    if min(out_dims) < 1:
        raise GeometryError(f"conv_transpose3d output size {out_dims} is not positive")
    out = _correlate_input_grad(x.data, w.data, stride, padding, out_dims)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gx = _correlate(g, w.data, stride, padding) if x.requires_grad else None
        # <g, A^T x> = <A g, x>: the weight grad of correlate(g, w) with upstream x
        gw = _correlate_weight_grad(g, x.data, k, stride, padding) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(np.ascontiguousarray(out), parents, backward, "conv_transpose3d")


# ------------------------------------------------------------------ pooling
def maxpool3d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max over (kernel)^3 windows; ties send the gradient to the first voxel in scan order."""
    k = _triple(kernel, "kernel")
    s = _triple(stride, "stride")
    if x.ndim != 5:
        raise DimensionError(f"maxpool3d expects a 5D input, got {x.shape}")
    dims = [_out_size(x.shape[2 + i], k[i], s[i], 0, "DHW"[i]) for i in range(3)]
    win = _windows(x.data, k, s)
    flat = win.reshape(*win.shape[:5], -1)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        kd, rest = np.divmod(idx, k[1] * k[2])
        kh, kw = np.divmod(rest, k[2])
        n, c = x.shape[:2]
        grid = np.meshgrid(np.arange(n), np.arange(c), *(np.arange(d) for d in dims), indexing="ij")
        coords = (grid[0], grid[1], grid[2] * s[0] + kd, grid[3] * s[1] + kh, grid[4] * s[2] + kw)
        gx = np.zeros(x.shape, dtype=x.dtype)
        np.add.at(gx, coords, g)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "maxpool3d")


# ------------------------------------------------------------------ normalization
def _normalize_backward(g_hat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    m = np.prod([g_hat.shape[a] for a in axes])
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axes, keepdims=True)
    return (inv_std / m) * (m * g_hat - s1 - xhat * s2)


def _affine(x: Tensor, gamma: Tensor, beta: Tensor, xhat: np.ndarray, backward_hat, op: str) -> Tensor:
    shape = (1, -1) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gx = backward_hat(g * gamma.data.reshape(shape)) if x.requires_grad else None
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        return gx, gg, gb

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, op)


def _check_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float, op: str):
    if eps <= 0:
        raise ParameterError(f"{op}: eps must be positive, got {eps}")
    if x.ndim != 5:
        raise DimensionError(f"{op} expects a 5D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"{op}: affine params {gamma.shape}/{beta.shape} do not match {c} channels")


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, D, H, W).

    In training mode ``running_mean``/``running_var`` are updated in place
    (unbiased variance); in eval mode they are used for normalization.
    """
    _check_norm(x, gamma, beta, eps, "batchnorm3d")
    if running_mean.shape != (x.shape[1],) or running_var.shape != (x.shape[1],):
        raise DimensionError("batchnorm3d: running statistics do not match channel count")
    axes = (0, 2, 3, 4)
    bshape = (1, -1, 1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        m = x.size // x.shape[1]
        unbiased = var.reshape(-1) * (m / (m - 1) if m > 1 else 1.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward_hat(gh):
            return _normalize_backward(gh, xhat, inv_std, axes)
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(bshape).astype(x.dtype)) * inv_std

        def backward_hat(gh):
            return gh * inv_std

    return _affine(x, gamma, beta, xhat, backward_hat, "batchnorm3d")


def instancenorm3d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, per_slice: bool = False) -> Tensor:
    """Per-sample, per-channel normalization over (D,H,W), or over (H,W) per slice."""
    _check_norm(x, gamma, beta, eps, "instancenorm3d")
    axes = (3, 4) if per_slice else (2, 3, 4)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    return _affine(x, gamma, beta, xhat, lambda gh: _normalize_backward(gh, xhat, inv_std, axes), "instancenorm3d")
