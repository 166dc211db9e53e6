"""Dense float32 tensors: validation, binary interchange format, image decoding.

Tensors are plain numpy float32 arrays (C-contiguous, all values finite).
The interchange file layout is fixed and language-neutral:

    magic   b"ZTEN"
    version u16 little-endian, currently 1
    dtype   u8, 1 = IEEE-754 float32 little-endian
    ndim    u8, 1..8
    dims    ndim x u32 little-endian, outermost first
    payload row-major float32 values

Round-trip through write_tensor/read_tensor is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InputError, TensorFormatError

MAGIC = b"ZTEN"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1
MAX_NDIM = 8

# Guard against memory bombs from hostile headers (2^40 elements = 4 TiB).
_MAX_ELEMENTS = 1 << 40

_HEADER = struct.Struct("<4sHBB")

_SIXTEEN_BIT_MODES = ("I", "I;16", "I;16B", "I;16L", "I;16N")


def as_tensor(data, shape=None) -> np.ndarray:
    """Validate and convert array-like data into a float32 C-contiguous tensor.

    Rejects non-finite values and (optionally) enforces an expected shape.
    """
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.isfinite(arr).all():
        raise InputError("tensor contains NaN or Inf values")
    if shape is not None and arr.shape != tuple(shape):
        raise InputError(f"expected tensor shape {tuple(shape)}, got {arr.shape}")
    return arr


def write_tensor(t, path) -> None:
    """Write a tensor to `path` in the ZTEN interchange format."""
    arr = as_tensor(t)
    if arr.ndim > MAX_NDIM:
        raise InputError(f"tensor rank {arr.ndim} exceeds format limit {MAX_NDIM}")
    for extent in arr.shape:
        if extent <= 0 or extent > 0xFFFFFFFF:
            raise InputError(f"dimension {extent} not representable as u32")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_FLOAT32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(payload)


def read_tensor(path) -> np.ndarray:
    """Read a ZTEN tensor file; bit-exact inverse of write_tensor."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TensorFormatError("file too short for header")
    magic, version, dtype, ndim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    if not 1 <= ndim <= MAX_NDIM:
        raise TensorFormatError(f"ndim {ndim} outside 1..{MAX_NDIM}")
    dims_end = _HEADER.size + 4 * ndim
    if len(raw) < dims_end:
        raise TensorFormatError("file truncated inside dims block")
    dims = struct.unpack_from(f"<{ndim}I", raw, _HEADER.size)
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"zero extent in dims {dims}")
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_ELEMENTS:
        raise TensorFormatError(f"dims product {count} overflows supported size")
    expected = dims_end + 4 * count
    if len(raw) < expected:
        raise TensorFormatError(f"truncated payload: need {expected} bytes, have {len(raw)}")
    if len(raw) > expected:
        raise TensorFormatError(f"trailing garbage: expected {expected} bytes, have {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=dims_end)
    arr = arr.reshape(dims).astype(np.float32, copy=True)
    if not np.isfinite(arr).all():
        raise TensorFormatError("payload contains NaN or Inf values")
    return arr


def save_mask_png(mask, path) -> None:
    """Export a [0,1] map as an 8-bit grayscale PNG via round(255*v). Lossy."""
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"mask PNG export expects a 2-D map, got shape {arr.shape}")
    scaled = np.clip(np.rint(255.0 * arr), 0, 255).astype(np.uint8)
    Image.fromarray(scaled, mode="L").save(path, format="PNG")


@dataclass(frozen=True)
class MultispectralPair:
    """Aligned RGB planes and a thermal plane at identical resolution.

    rgb is (3, H, W), thermal is (H, W); both float32 in [0, 1].
    """

    rgb: np.ndarray
    thermal: np.ndarray

    def __post_init__(self):
        rgb = as_tensor(self.rgb)
        thermal = as_tensor(self.thermal)
        if rgb.ndim != 3 or rgb.shape[0] != 3:
            raise InputError(f"rgb must be (3, H, W), got {rgb.shape}")
        if thermal.ndim != 2:
            raise InputError(f"thermal must be (H, W), got {thermal.shape}")
        if rgb.shape[1:] != thermal.shape:
            raise InputError(
                f"rgb spatial dims {rgb.shape[1:]} != thermal dims {thermal.shape}"
            )
        for name, arr in (("rgb", rgb), ("thermal", thermal)):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise InputError(f"{name} values outside [0, 1]")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "thermal", thermal)

    @property
    def height(self) -> int:
        return self.thermal.shape[0]

    @property
    def width(self) -> int:
        return self.thermal.shape[1]


@dataclass(frozen=True)
class NormalizationSpec:
    """Per-channel mean/std in 0-255 pixel units for detector standardization."""

    mean_rgb: tuple[float, float, float]
    std_rgb: tuple[float, float, float]
    mean_t: float
    std_t: float

    def __post_init__(self):
        if len(self.mean_rgb) != 3 or len(self.std_rgb) != 3:
            raise InputError("mean_rgb and std_rgb must each hold 3 values")
        if any(s <= 0 for s in self.std_rgb) or self.std_t <= 0:
            raise InputError("standard deviations must be strictly positive")


# Dataset statistics for the two public RGB-T benchmarks (0-255 pixel units).
M3FD_NORMALIZATION = NormalizationSpec(
    mean_rgb=(128.2, 129.3, 125.3), std_rgb=(49.1, 50.2, 53.5), mean_t=84.1, std_t=50.6
)
FLIR_NORMALIZATION = NormalizationSpec(
    mean_rgb=(149.4, 148.7, 141.7), std_rgb=(49.3, 52.8, 59.0), mean_t=135.7, std_t=63.6
)


def _decode_8bit(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc
    if img.mode in _SIXTEEN_BIT_MODES:
        raise InputError(f"16-bit image not supported: {path}")
    return img


def load_image_pair(rgb_path, thermal_path) -> MultispectralPair:
    """Decode an aligned 8-bit image pair and scale values into [0, 1].

    A 3-channel thermal image collapses to one plane by channel mean (datasets
    store thermal replicated across channels, so the mean is the identity).
    """
    rgb_img = _decode_8bit(rgb_path).convert("RGB")
    t_img = _decode_8bit(thermal_path).convert("RGB")
    if rgb_img.size != t_img.size:
        raise InputError(
            f"image sizes differ: rgb {rgb_img.size} vs thermal {t_img.size}"
        )
    rgb = np.asarray(rgb_img, dtype=np.float64)  # (H, W, 3)
    rgb = np.transpose(rgb, (2, 0, 1)) / 255.0
    thermal = np.asarray(t_img, dtype=np.float64).mean(axis=2) / 255.0
    return MultispectralPair(rgb=as_tensor(rgb), thermal=as_tensor(thermal))


def standardize(pair: MultispectralPair, spec: NormalizationSpec):
    """Apply (255*v - mean) / std per channel; returns (rgb, thermal) float32."""
    mean = np.asarray(spec.mean_rgb, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(spec.std_rgb, dtype=np.float64).reshape(3, 1, 1)
    rgb = (255.0 * pair.rgb.astype(np.float64) - mean) / std
    thermal = (255.0 * pair.thermal.astype(np.float64) - spec.mean_t) / spec.std_t
    return as_tensor(rgb), as_tensor(thermal)


def ensure_parent(path) -> Path:
    """Create the parent directory of `path` if needed and return it as Path."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p
