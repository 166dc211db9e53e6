"""Self-gated RGB + thermal fusion toolkit."""

from .errors import InputError, ShapefuseError, TensorFormatError
from .gating import FusionResult, GatingMasks, compute_gating_masks, fuse_pair
from .tensor_io import MultispectralPair, read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "FusionResult",
    "GatingMasks",
    "InputError",
    "MultispectralPair",
    "ShapefuseError",
    "TensorFormatError",
    "__version__",
    "compute_gating_masks",
    "fuse_pair",
    "read_tensor",
    "write_tensor",
]
