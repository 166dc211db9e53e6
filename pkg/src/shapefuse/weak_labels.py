"""Weak-supervision targets and losses from box annotations.

Image-level multi-label vectors, sliding-crop classification with max
aggregation, soft-target mixing, the two mutual BCE losses, and box
rasterization to per-class masks. Targets and masks are float32 ndarrays;
loss arithmetic runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import InputError

DEFAULT_CROP_SIZE = 224
DEFAULT_STRIDE = 112
DEFAULT_LAMBDA = 0.1

# Floor for log arguments; saturated mispredictions stay finite.
CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class BoxAnnotation:
    """Axis-aligned box, half-open pixel coordinates [x0, x1) x [y0, y1)."""

    class_id: int
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise InputError(f"class id must be >= 0, got {self.class_id}")
        if self.x0 < 0 or self.y0 < 0:
            raise InputError(f"box origin must be >= 0, got ({self.x0}, {self.y0})")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise InputError(
                f"box must have positive area, got [{self.x0},{self.x1})x[{self.y0},{self.y1})"
            )

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def parse_annotations(doc: dict) -> tuple[int, int, list[BoxAnnotation]]:
    """Validate an annotation document {"width", "height", "boxes": [...]}.

    Fractional coordinates are widened to the covering pixel box, then
    clipped to the image; a box that clips to nothing is an error.
    """
    if not isinstance(doc, dict):
        raise InputError("annotation document must be a JSON object")
    try:
        width = int(doc["width"])
        height = int(doc["height"])
        raw_boxes = doc["boxes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"annotation document missing/invalid field: {exc}") from exc
    if width <= 0 or height <= 0:
        raise InputError(f"image size must be positive, got {width}x{height}")
    if not isinstance(raw_boxes, list):
        raise InputError("'boxes' must be a list")
    boxes = []
    for i, entry in enumerate(raw_boxes):
        if not isinstance(entry, dict):
            raise InputError(f"box {i} must be an object")
        try:
            k = int(entry["class"])
            x0 = math.floor(float(entry["x0"]))
            y0 = math.floor(float(entry["y0"]))
            x1 = math.ceil(float(entry["x1"]))
            y1 = math.ceil(float(entry["y1"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"box {i} missing/invalid field: {exc}") from exc
        x0, x1 = max(0, x0), min(width, x1)
        y0, y1 = max(0, y0), min(height, y1)
        if x1 <= x0 or y1 <= y0:
            raise InputError(f"box {i} lies outside the {width}x{height} image")
        boxes.append(BoxAnnotation(class_id=k, x0=x0, y0=y0, x1=x1, y1=y1))
    return width, height, boxes


def build_multilabel(annotations: Sequence[BoxAnnotation], c: int) -> np.ndarray:
    """Image-level target q: q[i] = 1 iff class i appears in any box."""
    if c < 1:
        raise InputError(f"class count must be >= 1, got {c}")
    q = np.zeros(c, dtype=np.float32)
    for box in annotations:
        if box.class_id >= c:
            raise InputError(f"class id {box.class_id} out of range for {c} classes")
        q[box.class_id] = 1.0
    return q


def _axis_offsets(dim: int, crop: int, stride: int) -> list[int]:
    offsets = list(range(0, dim - crop + 1, stride))
    if offsets[-1] + crop < dim:
        offsets.append(dim - crop)
    return offsets


@dataclass(frozen=True)
class CropGrid:
    """Deterministic sliding-window layout; every pixel is covered."""

    crop_size: int
    stride: int
    crops: tuple[tuple[int, int], ...]


def crop_grid(
    height: int,
    width: int,
    crop_size: int = DEFAULT_CROP_SIZE,
    stride: int = DEFAULT_STRIDE,
) -> CropGrid:
    """Sliding offsets advancing by stride, plus a flush-to-edge window per
    axis when the strided grid would leave a border uncovered."""
    if crop_size < 1 or stride < 1:
        raise InputError(f"crop_size and stride must be >= 1, got {crop_size}, {stride}")
    if stride > crop_size:
        # A stride wider than the window leaves interior pixels uncovered,
        # breaking the full-coverage guarantee.
        raise InputError(f"stride {stride} exceeds crop size {crop_size}")
    if height < crop_size or width < crop_size:
        raise InputError(f"image {height}x{width} smaller than crop {crop_size}")
    ys = _axis_offsets(height, crop_size, stride)
    xs = _axis_offsets(width, crop_size, stride)
    crops = tuple((x, y) for y in ys for x in xs)
    return CropGrid(crop_size=crop_size, stride=stride, crops=crops)


def crop_views(image: np.ndarray, grid: CropGrid) -> Iterator[np.ndarray]:
    """Yield crop views of an (H, W) or (C, H, W) image in grid order."""
    cs = grid.crop_size
    for x, y in grid.crops:
        yield image[..., y : y + cs, x : x + cs]


def da_clip_aggregate(per_crop_probs: np.ndarray) -> np.ndarray:
    """Columnwise max over crops: q_hat[i] = max_n probs[n, i]."""
    probs = np.asarray(per_crop_probs)
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise InputError(f"expected (n_crops, c) with n_crops >= 1, got {probs.shape}")
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise InputError("crop probabilities must lie in [0, 1]")
    return probs.max(axis=0)


def classify_crops(
    image: np.ndarray,
    classifier: Callable[[np.ndarray], np.ndarray],
    crop_size: int = DEFAULT_CROP_SIZE,
    stride: int = DEFAULT_STRIDE,
) -> tuple[np.ndarray, np.ndarray]:
    """Run a caller-supplied classifier over the crop grid.

    Returns (per_crop_probs [n_crops, c], aggregated [c]). The classifier
    maps one crop to a probability vector; it is treated as a black box.
    """
    grid = crop_grid(image.shape[-2], image.shape[-1], crop_size, stride)
    rows = []
    for crop in crop_views(image, grid):
        out = np.asarray(classifier(crop), dtype=np.float64).reshape(-1)
        rows.append(out)
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise InputError(f"classifier returned inconsistent class counts: {sorted(lengths)}")
    per_crop = np.stack(rows)
    return per_crop, da_clip_aggregate(per_crop)


def soft_target(q: np.ndarray, q_hat: np.ndarray, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Affine mix q_tilde = (1 - lam) * q + lam * q_hat."""
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"lambda must be in [0, 1], got {lam}")
    qa = np.asarray(q, dtype=np.float64)
    qb = np.asarray(q_hat, dtype=np.float64)
    if qa.shape != qb.shape:
        raise InputError(f"target shapes differ: {qa.shape} vs {qb.shape}")
    for name, arr in (("q", qa), ("q_hat", qb)):
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise InputError(f"{name} entries must lie in [0, 1]")
    return (1.0 - lam) * qa + lam * qb


def _bce_sum(target: np.ndarray, pred: np.ndarray) -> float:
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape:
        raise InputError(f"target/prediction shapes differ: {t.shape} vs {p.shape}")
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise InputError("targets must lie in [0, 1]")
    p = np.clip(p, 0.0, 1.0)
    # Floor each log argument separately: a perfect hard prediction scores
    # an exact 0 while a saturated miss stays finite at -log(eps).
    log_p = np.log(np.maximum(p, CLAMP_EPS))
    log_not_p = np.log(np.maximum(1.0 - p, CLAMP_EPS))
    return float(-np.sum(t * log_p + (1.0 - t) * log_not_p))


def bce_multilabel(target: np.ndarray, pred: np.ndarray) -> float:
    """Sum-form binary cross-entropy over a class vector."""
    t = np.asarray(target)
    if t.ndim != 1:
        raise InputError(f"expected a class vector, got shape {t.shape}")
    return _bce_sum(t, pred)


def mutual_losses(
    q: np.ndarray,
    q_hat_ad: np.ndarray,
    q_hat_bb: np.ndarray,
    lam: float = DEFAULT_LAMBDA,
) -> tuple[float, float]:
    """Cross-supervision losses between the adapter and backbone heads.

    Each side's prediction is softened into a target for the other side;
    the soft targets are constants (no gradient flows through them).
    Returns (H(q_tilde_ad, q_hat_bb), H(q_tilde_bb, q_hat_ad)).
    """
    q_tilde_ad = soft_target(q, q_hat_ad, lam)
    q_tilde_bb = soft_target(q, q_hat_bb, lam)
    return _bce_sum(q_tilde_ad, q_hat_bb), _bce_sum(q_tilde_bb, q_hat_ad)


def rasterize_boxes(
    annotations: Sequence[BoxAnnotation], c: int, height: int, width: int
) -> np.ndarray:
    """Per-class one-hot planes (c, H, W); overlapping same-class boxes union."""
    if c < 1:
        raise InputError(f"class count must be >= 1, got {c}")
    if height < 1 or width < 1:
        raise InputError(f"mask size must be positive, got {height}x{width}")
    g = np.zeros((c, height, width), dtype=np.float32)
    for box in annotations:
        if box.class_id >= c:
            raise InputError(f"class id {box.class_id} out of range for {c} classes")
        if box.x1 > width or box.y1 > height:
            raise InputError(
                f"box [{box.x0},{box.x1})x[{box.y0},{box.y1}) exceeds {width}x{height}"
            )
        g[box.class_id, box.y0 : box.y1, box.x0 : box.x1] = 1.0
    return g


def bce_mask(g: np.ndarray, g_hat: np.ndarray) -> float:
    """Sum-form BCE over all c*H*W mask elements."""
    t = np.asarray(g)
    if t.ndim != 3:
        raise InputError(f"expected (c, H, W) mask, got shape {t.shape}")
    return _bce_sum(t, g_hat)


def weak_loss_total(loss_ad_to_bb: float, loss_bb_to_ad: float, loss_mask: float) -> float:
    """Sum of the two mutual losses and the mask loss."""
    parts = (loss_ad_to_bb, loss_bb_to_ad, loss_mask)
    for value in parts:
        if value < 0.0 or not math.isfinite(value):
            raise InputError(f"loss components must be finite and >= 0, got {value}")
    return math.fsum(parts)
