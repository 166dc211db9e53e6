"""Gradient-magnitude maps and the boosted union reference.

The gating pipeline compares each modality's gradient structure against a
shared reference: the pointwise max of both gradient maps, dilated by a 3x3
max filter. All maps here are 2-D (H, W) float64 for internal precision.

OpenCV supplies the stencil primitives (Sobel, dilation); they are exact
matches for the plain replicate-padded formulations and keep a full-frame
pass inside the latency budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import InputError

# BT.601 luma weights.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

_BOOST_KERNEL = np.ones((3, 3), dtype=np.uint8)


def luma(rgb: np.ndarray) -> np.ndarray:
    """Project a (3, H, W) image onto a single luma plane (H, W)."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise InputError(f"luma expects (3, H, W), got {arr.shape}")
    return np.tensordot(_LUMA_WEIGHTS, arr.astype(np.float64, copy=False), axes=1)


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude sqrt(gx^2 + gy^2) with replicate borders."""
    arr = np.ascontiguousarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise InputError(f"gradient_magnitude expects (H, W), got {arr.shape}")
    h, w = arr.shape
    if h < 3 or w < 3:
        raise InputError(f"image {h}x{w} too small for 3x3 gradient stencil")
    gx = cv2.Sobel(arr, cv2.CV_64F, 1, 0, ksize=3, borderType=cv2.BORDER_REPLICATE)
    gy = cv2.Sobel(arr, cv2.CV_64F, 0, 1, ksize=3, borderType=cv2.BORDER_REPLICATE)
    gx *= gx
    gy *= gy
    gx += gy
    return np.sqrt(gx, out=gx)


def union_reference(grad_a: np.ndarray, grad_b: np.ndarray) -> np.ndarray:
    """Elementwise max of two gradient maps."""
    a = np.asarray(grad_a, dtype=np.float64)
    b = np.asarray(grad_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.maximum(a, b)


def boost(ref: np.ndarray) -> np.ndarray:
    """3x3 windowed max (stride 1, replicate border); out >= in everywhere."""
    arr = np.ascontiguousarray(ref, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"boost expects (H, W), got {arr.shape}")
    return cv2.dilate(arr, _BOOST_KERNEL, borderType=cv2.BORDER_REPLICATE)


@dataclass(frozen=True)
class GradientField:
    """Per-modality gradient maps plus the raw and boosted union reference."""

    grad_rgb: np.ndarray
    grad_t: np.ndarray
    ref_raw: np.ndarray
    ref_boosted: np.ndarray
    dynamic_range: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.grad_rgb.shape


def gradient_field(rgb: np.ndarray, thermal: np.ndarray) -> GradientField:
    """Build the full gradient field for an image pair.

    The dynamic range is the global max over both modality gradient maps;
    an all-flat pair (range 0) falls back to 1.0 so the stability constants
    derived from it stay positive. The gating masks are invariant to that
    choice: with zero gradients every windowed moment vanishes and the
    similarity ratio reduces to 1 regardless of the constants.
    """
    g_rgb = gradient_magnitude(luma(rgb))
    g_t = gradient_magnitude(thermal)
    if g_rgb.shape != g_t.shape:
        raise InputError(f"modality shapes differ: {g_rgb.shape} vs {g_t.shape}")
    ref_raw = union_reference(g_rgb, g_t)
    ref_boosted = boost(ref_raw)
    dynamic_range = float(ref_raw.max())
    if dynamic_range == 0.0:
        dynamic_range = 1.0
    return GradientField(
        grad_rgb=g_rgb,
        grad_t=g_t,
        ref_raw=ref_raw,
        ref_boosted=ref_boosted,
        dynamic_range=dynamic_range,
    )
