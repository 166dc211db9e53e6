"""Feature distillation through a teacher's 1x1 head.

The teacher's head weights [C_out, C_in] rank which feature channels carry
signal. Per output row, the d largest-|value| entries form the sampled core
weights; projecting student and teacher features through their respective
weights and penalizing the squared difference distills only the directions
the head actually consumes. Losses and gradients run in float64 with
deterministic reduction order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError

NEAR_ZERO_THRESHOLD = 0.01

_REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class TeacherHead:
    """1x1 classification-head weights, kernel dims collapsed to [C_out, C_in]."""

    w_t: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.w_t)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise InputError(f"head weights must be (C_out, C_in), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InputError("head weights contain non-finite values")
        object.__setattr__(self, "w_t", w.astype(np.float64, copy=True))

    @property
    def c_out(self) -> int:
        return self.w_t.shape[0]

    @property
    def c_in(self) -> int:
        return self.w_t.shape[1]


@dataclass(frozen=True)
class CoreWeights:
    """Per-row top-d selection: values [C_out, d] and their original
    in-channel indices [C_out, d], ascending within each row."""

    s_w: np.ndarray
    selection: np.ndarray


def weight_histogram(
    head: TeacherHead, bins: int, value_range: tuple[float, float]
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-bin histogram of all head entries; out-of-range values clamp
    into the end bins. Returns (counts, bin_edges)."""
    lo, hi = value_range
    if bins < 1:
        raise InputError(f"bins must be >= 1, got {bins}")
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise InputError(f"invalid histogram range ({lo}, {hi})")
    clamped = np.clip(head.w_t.ravel(), lo, hi)
    return np.histogram(clamped, bins=bins, range=(lo, hi))


def near_zero_fraction(head: TeacherHead, threshold: float = NEAR_ZERO_THRESHOLD) -> float:
    """Fraction of head entries with |w| strictly below the threshold."""
    if threshold <= 0.0:
        raise InputError(f"threshold must be positive, got {threshold}")
    return float(np.mean(np.abs(head.w_t) < threshold))


def sample_core(head: TeacherHead, d: int) -> CoreWeights:
    """Keep the d largest-|value| entries of each output row.

    Ties break toward the lower original index; kept entries are re-packed
    in ascending original-index order so they line up positionally with the
    student's d channels.
    """
    if not 1 <= d <= head.c_in:
        raise InputError(f"d must be in [1, {head.c_in}], got {d}")
    order = np.argsort(-np.abs(head.w_t), axis=1, kind="stable")[:, :d]
    selection = np.sort(order, axis=1)
    s_w = np.take_along_axis(head.w_t, selection, axis=1)
    return CoreWeights(s_w=s_w, selection=selection)


def project(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """1x1 convolution: out[o](p) = sum_k w[o, k] * x[k](p)."""
    xa = np.asarray(x, dtype=np.float64)
    wa = np.asarray(w, dtype=np.float64)
    if xa.ndim != 3:
        raise InputError(f"expected (k, H, W) features, got {xa.shape}")
    if wa.ndim != 2:
        raise InputError(f"expected (C_out, k) weights, got {wa.shape}")
    if wa.shape[1] != xa.shape[0]:
        raise InputError(f"weights expect {wa.shape[1]} channels, features have {xa.shape[0]}")
    return np.einsum("ok,khw->ohw", wa, xa)


def _check_reduction(reduction: str) -> None:
    if reduction not in _REDUCTIONS:
        raise InputError(f"reduction must be one of {_REDUCTIONS}, got {reduction!r}")


def _squared_error(diff: np.ndarray, reduction: str) -> float:
    total = float(np.sum(diff * diff))
    if reduction == "mean":
        total /= diff.size
    return total


def _check_feature_pair(x_s: np.ndarray, x_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xs = np.asarray(x_s, dtype=np.float64)
    xt = np.asarray(x_t, dtype=np.float64)
    if xs.ndim != 3 or xt.ndim != 3:
        raise InputError(f"features must be (C, H, W), got {xs.shape} and {xt.shape}")
    if xs.shape[1:] != xt.shape[1:]:
        raise InputError(f"spatial dims differ: {xs.shape[1:]} vs {xt.shape[1:]}")
    return xs, xt


def loss_naive(
    x_s: np.ndarray, x_t: np.ndarray, adapter_w: np.ndarray, reduction: str = "sum"
) -> float:
    """Squared error between adapter-lifted student features and the teacher's."""
    _check_reduction(reduction)
    xs, xt = _check_feature_pair(x_s, x_t)
    adapted = project(xs, adapter_w)
    if adapted.shape != xt.shape:
        raise InputError(f"adapted shape {adapted.shape} does not match teacher {xt.shape}")
    return _squared_error(adapted - xt, reduction)


def loss_projected(
    x_s: np.ndarray,
    x_t: np.ndarray,
    adapter_w: np.ndarray,
    head: TeacherHead,
    reduction: str = "sum",
) -> float:
    """Squared error after pushing both sides through the teacher head."""
    _check_reduction(reduction)
    xs, xt = _check_feature_pair(x_s, x_t)
    adapted = project(xs, adapter_w)
    if adapted.shape[0] != head.c_in:
        raise InputError(f"adapter produces {adapted.shape[0]} channels, head expects {head.c_in}")
    if xt.shape[0] != head.c_in:
        raise InputError(f"teacher features have {xt.shape[0]} channels, head expects {head.c_in}")
    return _squared_error(project(adapted, head.w_t) - project(xt, head.w_t), reduction)


@dataclass(frozen=True)
class CoreLossResult:
    """Loss plus both projected feature maps [C_out, H, W] (float64)."""

    loss: float
    y_ct: np.ndarray
    y_t: np.ndarray


def _core_projections(
    x_s: np.ndarray, x_t: np.ndarray, head: TeacherHead, d: int
) -> tuple[np.ndarray, np.ndarray, CoreWeights]:
    xs, xt = _check_feature_pair(x_s, x_t)
    if xs.shape[0] != d:
        raise InputError(f"student features have {xs.shape[0]} channels, expected d = {d}")
    if xt.shape[0] != head.c_in:
        raise InputError(f"teacher features have {xt.shape[0]} channels, head expects {head.c_in}")
    core = sample_core(head, d)
    return project(xs, core.s_w), project(xt, head.w_t), core


def loss_core(
    x_s: np.ndarray, x_t: np.ndarray, head: TeacherHead, d: int, reduction: str = "sum"
) -> CoreLossResult:
    """Squared error between core-projected student and head-projected teacher."""
    _check_reduction(reduction)
    y_ct, y_t, _ = _core_projections(x_s, x_t, head, d)
    return CoreLossResult(loss=_squared_error(y_ct - y_t, reduction), y_ct=y_ct, y_t=y_t)


def loss_core_grad(
    x_s: np.ndarray, x_t: np.ndarray, head: TeacherHead, d: int, reduction: str = "sum"
) -> np.ndarray:
    """Analytic gradient of loss_core in the student features.

    dL/dx_s[k](p) = 2 * sum_o s_w[o, k] * (y_ct - y_t)[o](p); the teacher
    side is constant. Returns [d, H, W] float64.
    """
    _check_reduction(reduction)
    y_ct, y_t, core = _core_projections(x_s, x_t, head, d)
    resid = y_ct - y_t
    grad = 2.0 * np.einsum("ok,ohw->khw", core.s_w, resid)
    if reduction == "mean":
        grad /= resid.size
    return grad


@dataclass(frozen=True)
class FeatureLevel:
    """One pyramid level: student features [d, H, W], teacher [C_in, H, W]."""

    x_s: np.ndarray
    x_t: np.ndarray

    def __post_init__(self) -> None:
        _check_feature_pair(self.x_s, self.x_t)


def core_loss_over_levels(
    levels: Sequence[tuple[FeatureLevel, TeacherHead]], d: int, reduction: str = "sum"
) -> tuple[list[float], float]:
    """Per-level core losses and their exact total."""
    if not levels:
        raise InputError("at least one pyramid level is required")
    per_level = [
        loss_core(level.x_s, level.x_t, head, d, reduction).loss for level, head in levels
    ]
    return per_level, math.fsum(per_level)


@dataclass(frozen=True)
class LossBreakdown:
    """Detector losses (external scalars), weak losses, and feature loss."""

    l_cls: float
    l_reg: float
    l_weak: float
    l_feat: float
    l_total: float


def total_loss(l_cls: float, l_reg: float, l_weak: float, l_feat: float) -> LossBreakdown:
    """Compose the training objective; components must be finite and >= 0."""
    parts = (l_cls, l_reg, l_weak, l_feat)
    for name, value in zip(("l_cls", "l_reg", "l_weak", "l_feat"), parts):
        if not math.isfinite(value) or value < 0.0:
            raise InputError(f"{name} must be finite and >= 0, got {value}")
    return LossBreakdown(
        l_cls=l_cls, l_reg=l_reg, l_weak=l_weak, l_feat=l_feat, l_total=math.fsum(parts)
    )
