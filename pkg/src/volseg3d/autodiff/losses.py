"""Scalar loss functions. Reductions accumulate in float64 and return 0-d float64 tensors."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor, as_tensor, make_result

PROB_EPS = 1e-7
DICE_SMOOTH = 1e-7


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def bce_loss(s: Tensor, t, eps: float = PROB_EPS) -> Tensor:
    """Mean binary cross-entropy of probabilities ``s`` against targets ``t``.

    ``s`` is clamped to [eps, 1 - eps] before the logs; clamped voxels get no gradient.
    """
    t = as_tensor(t)
    _same_shape(s, t, "bce_loss")
    sd = s.data.astype(np.float64)
    td = t.data.astype(np.float64)
    sc = np.clip(sd, eps, 1.0 - eps)
    n = s.size
    loss = -(td * np.log(sc) + (1.0 - td) * np.log1p(-sc)).sum() / n
    inside = (sd >= eps) & (sd <= 1.0 - eps)

    def backward(g):
        gs = -(td / sc - (1.0 - td) / (1.0 - sc)) / n * inside
        return float(g) * gs, None

    return make_result(np.asarray(loss), (s, t), backward, "bce_loss")


def dice_loss(s: Tensor, t, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - (2 sum(t*s) + smooth) / (sum(t^2) + sum(s^2) + smooth)."""
    t = as_tensor(t)
    _same_shape(s, t, "dice_loss")
    sd = s.data.astype(np.float64)
    td = t.data.astype(np.float64)
    num = 2.0 * (td * sd).sum() + smooth
    den = (td * td).sum() + (sd * sd).sum() + smooth
    loss = 1.0 - num / den

    def backward(g):
        gs = -(2.0 * td * den - num * 2.0 * sd) / (den * den)
        return float(g) * gs, None

    return make_result(np.asarray(loss), (s, t), backward, "dice_loss")


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute difference."""
    b = as_tensor(b)
    _same_shape(a, b, "l1_loss")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = a.size

    def backward(g):
        gd = float(g) * np.sign(diff) / n
        return gd, -gd

    return make_result(np.asarray(np.abs(diff).sum() / n), (a, b), backward, "l1_loss")


def mse_loss(a: Tensor, b) -> Tensor:
    """Mean squared difference."""
    b = as_tensor(b)
    _same_shape(a, b, "mse_loss")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = a.size

    def backward(g):
        gd = float(g) * 2.0 * diff / n
        return gd, -gd

    return make_result(np.asarray((diff * diff).sum() / n), (a, b), backward, "mse_loss")
