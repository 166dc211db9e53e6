"""Self-gating fusion masks from windowed structural statistics.

Each modality's gradient map is compared against the boosted union
reference with an SSIM-style score per pixel; a two-way softmax turns the
two scores into complementary gates that multiply the input images before
they are concatenated for a downstream detector.

All windowed moments use a uniform window with replicate borders, computed
in float64 (OpenCV box filter). Public mask tensors are float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import cv2
import numpy as np

from .errors import InputError
from .gradients import GradientField, gradient_field
from .tensor_io import MultispectralPair

DEFAULT_WINDOW = 7
DEFAULT_K1 = 0.01
DEFAULT_K2 = 0.03


@dataclass(frozen=True)
class SsimParams:
    """Stability constants for the similarity score.

    L is the dynamic range of the gradient maps (GradientField supplies
    it); xi1/xi2 keep the rational expression away from 0/0.
    """

    L: float
    k1: float = DEFAULT_K1
    k2: float = DEFAULT_K2
    window: int = DEFAULT_WINDOW

    def __post_init__(self) -> None:
        if not (self.k1 > 0.0 and self.k2 > 0.0):
            raise InputError(f"k1, k2 must be positive, got {self.k1}, {self.k2}")
        if not self.L > 0.0:
            raise InputError(f"dynamic range must be positive, got {self.L}")
        if self.window < 3 or self.window % 2 == 0:
            raise InputError(f"window must be odd and >= 3, got {self.window}")

    @property
    def xi1(self) -> float:
        return (self.k1 * self.L) ** 2

    @property
    def xi2(self) -> float:
        return (self.k2 * self.L) ** 2


@dataclass(frozen=True)
class WindowStats:
    """Windowed means, variances, and covariances against the reference.

    Variances are stored (the scores consume them directly); the matching
    standard deviations are derived on first access.
    """

    mu_rgb: np.ndarray
    mu_t: np.ndarray
    mu_ref: np.ndarray
    var_rgb: np.ndarray
    var_t: np.ndarray
    var_ref: np.ndarray
    cov_rgb_ref: np.ndarray
    cov_t_ref: np.ndarray

    @cached_property
    def sigma_rgb(self) -> np.ndarray:
        return np.sqrt(self.var_rgb)

    @cached_property
    def sigma_t(self) -> np.ndarray:
        return np.sqrt(self.var_t)

    @cached_property
    def sigma_ref(self) -> np.ndarray:
        return np.sqrt(self.var_ref)


@dataclass(frozen=True)
class GatingMasks:
    """Raw similarity scores in [-1, 1] and their softmax-normalized gates."""

    m_raw_rgb: np.ndarray
    m_raw_t: np.ndarray
    m_rgb: np.ndarray
    m_t: np.ndarray


def _box_mean(arr: np.ndarray, window: int) -> np.ndarray:
    """Mean over window x window neighborhoods, replicate border, same size."""
    return cv2.boxFilter(
        arr, ddepth=-1, ksize=(window, window), normalize=True,
        borderType=cv2.BORDER_REPLICATE,
    )


def window_stats(grad_field: GradientField, params: SsimParams) -> WindowStats:
    """Per-pixel uniform-window moments of both gradient maps and the reference."""
    h, w = grad_field.grad_rgb.shape
    if params.window > min(h, w):
        raise InputError(f"window {params.window} exceeds image {h}x{w}")
    g_rgb = np.ascontiguousarray(grad_field.grad_rgb, dtype=np.float64)
    g_t = np.ascontiguousarray(grad_field.grad_t, dtype=np.float64)
    ref = np.ascontiguousarray(grad_field.ref_boosted, dtype=np.float64)
    k = params.window

    mu_rgb = _box_mean(g_rgb, k)
    mu_t = _box_mean(g_t, k)
    mu_ref = _box_mean(ref, k)

    # var = E[x^2] - E[x]^2, clamped; cov = E[xy] - E[x]E[y].
    var_rgb = _box_mean(g_rgb * g_rgb, k)
    var_rgb -= mu_rgb * mu_rgb
    np.maximum(var_rgb, 0.0, out=var_rgb)
    var_t = _box_mean(g_t * g_t, k)
    var_t -= mu_t * mu_t
    np.maximum(var_t, 0.0, out=var_t)
    var_ref = _box_mean(ref * ref, k)
    var_ref -= mu_ref * mu_ref
    np.maximum(var_ref, 0.0, out=var_ref)

    cov_rgb_ref = _box_mean(g_rgb * ref, k)
    cov_rgb_ref -= mu_rgb * mu_ref
    cov_t_ref = _box_mean(g_t * ref, k)
    cov_t_ref -= mu_t * mu_ref

    return WindowStats(
        mu_rgb=mu_rgb,
        mu_t=mu_t,
        mu_ref=mu_ref,
        var_rgb=var_rgb,
        var_t=var_t,
        var_ref=var_ref,
        cov_rgb_ref=cov_rgb_ref,
        cov_t_ref=cov_t_ref,
    )


def _similarity(
    mu: np.ndarray,
    var: np.ndarray,
    cov: np.ndarray,
    mu_ref_sq: np.ndarray,
    var_ref_xi2: np.ndarray,
    mu_ref: np.ndarray,
    params: SsimParams,
) -> np.ndarray:
    # (2 mu mu_ref + xi1)(2 cov + xi2) / ((mu^2 + mu_ref^2 + xi1)(var + var_ref + xi2))
    num = mu * mu_ref
    num *= 2.0
    num += params.xi1
    cross = cov * 2.0
    cross += params.xi2
    num *= cross
    den = mu * mu
    den += mu_ref_sq
    den += params.xi1
    spread = var + var_ref_xi2
    den *= spread
    num /= den
    return num


def raw_masks(stats: WindowStats, params: SsimParams) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the two SSIM-style rational scores per pixel (float64)."""
    mu_ref_sq = stats.mu_ref * stats.mu_ref
    var_ref_xi2 = stats.var_ref + params.xi2
    m_raw_rgb = _similarity(
        stats.mu_rgb, stats.var_rgb, stats.cov_rgb_ref,
        mu_ref_sq, var_ref_xi2, stats.mu_ref, params,
    )
    m_raw_t = _similarity(
        stats.mu_t, stats.var_t, stats.cov_t_ref,
        mu_ref_sq, var_ref_xi2, stats.mu_ref, params,
    )
    return m_raw_rgb, m_raw_t


def normalize_masks(m_raw_rgb: np.ndarray, m_raw_t: np.ndarray) -> GatingMasks:
    """Two-way softmax across modalities; the gates sum to 1 per pixel."""
    a = np.asarray(m_raw_rgb, dtype=np.float64)
    b = np.asarray(m_raw_t, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"raw mask shapes differ: {a.shape} vs {b.shape}")
    top = np.maximum(a, b)
    ea = np.exp(a - top)
    eb = np.exp(b - top)
    denom = ea + eb
    ea /= denom
    eb /= denom
    return GatingMasks(
        m_raw_rgb=a.astype(np.float32),
        m_raw_t=b.astype(np.float32),
        m_rgb=ea.astype(np.float32),
        m_t=eb.astype(np.float32),
    )


def compute_gating_masks(
    pair: MultispectralPair,
    window: int = DEFAULT_WINDOW,
    k1: float = DEFAULT_K1,
    k2: float = DEFAULT_K2,
) -> GatingMasks:
    """Full mask pipeline: gradients, windowed stats, scores, normalization."""
    grad_field = gradient_field(pair.rgb, pair.thermal)
    params = SsimParams(L=grad_field.dynamic_range, k1=k1, k2=k2, window=window)
    stats = window_stats(grad_field, params)
    return normalize_masks(*raw_masks(stats, params))


def apply_gating(
    pair: MultispectralPair, masks: GatingMasks
) -> tuple[np.ndarray, np.ndarray]:
    """Multiply each modality by its gate; returns (rgb [3,H,W], thermal [H,W])."""
    if masks.m_rgb.shape != (pair.height, pair.width):
        raise InputError(
            f"mask shape {masks.m_rgb.shape} does not match pair {pair.height}x{pair.width}"
        )
    gated_rgb = (pair.rgb * masks.m_rgb[None, :, :]).astype(np.float32)
    gated_t = (pair.thermal * masks.m_t).astype(np.float32)
    return gated_rgb, gated_t


@dataclass(frozen=True)
class FusionResult:
    """Gated images plus the masks that produced them."""

    gated_rgb: np.ndarray
    gated_thermal: np.ndarray
    masks: GatingMasks
    params: SsimParams = field(repr=False)


def fuse_pair(
    pair: MultispectralPair,
    window: int = DEFAULT_WINDOW,
    k1: float = DEFAULT_K1,
    k2: float = DEFAULT_K2,
) -> FusionResult:
    """Gate a pair end to end and keep the masks for export."""
    grad_field = gradient_field(pair.rgb, pair.thermal)
    params = SsimParams(L=grad_field.dynamic_range, k1=k1, k2=k2, window=window)
    stats = window_stats(grad_field, params)
    masks = normalize_masks(*raw_masks(stats, params))
    gated_rgb, gated_t = apply_gating(pair, masks)
    return FusionResult(gated_rgb=gated_rgb, gated_thermal=gated_t, masks=masks, params=params)


def fused_feature(
    gated: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None
) -> np.ndarray:
    """Stride-1 same-size cross-correlation with replicate padding.

    Diagnostic stand-in for a detector's first conv over the 4 concatenated
    channels; not a performance path.
    """
    x = np.asarray(gated, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if x.ndim != 3:
        raise InputError(f"expected (C, H, W) input, got {x.shape}")
    if w.ndim != 4:
        raise InputError(f"expected (C_out, C_in, k, k) weights, got {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise InputError(f"kernel must be square with odd side, got {kh}x{kw}")
    if c_in != x.shape[0]:
        raise InputError(f"weights expect {c_in} channels, input has {x.shape[0]}")
    if not np.all(np.isfinite(w)):
        raise InputError("weights contain non-finite values")
    _, h, wid = x.shape
    r = kh // 2
    p = np.pad(x, ((0, 0), (r, r), (r, r)), mode="edge")
    out = np.zeros((c_out, h, wid), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            patch = p[:, dy : dy + h, dx : dx + wid]
            out += np.einsum("oc,chw->ohw", w[:, :, dy, dx], patch)
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape != (c_out,):
            raise InputError(f"bias shape {b.shape} does not match {c_out} outputs")
        out += b[:, None, None]
    return out.astype(np.float32)


def aggregate_channels(feature: np.ndarray) -> np.ndarray:
    """Collapse (D, H, W) to (H, W): per-pixel softmax over depth dotted with the values."""
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] < 1:
        raise InputError(f"expected (D, H, W) with D >= 1, got {f.shape}")
    top = f.max(axis=0, keepdims=True)
    e = np.exp(f - top)
    weights = e / e.sum(axis=0, keepdims=True)
    return np.sum(weights * f, axis=0).astype(np.float32)
