"""Exception hierarchy shared across the package.

The split matters at the surfaces: the service maps InputError to HTTP 400
and everything else to 500; the CLI maps them to exit codes 2 and 3.
"""


class ShapefuseError(Exception):
    """Base class for all errors raised by this package."""


class InputError(ShapefuseError, ValueError):
    """Invalid caller-supplied data: bad files, shapes, ranges, parameters."""


class TensorFormatError(InputError):
    """Malformed or unsupported tensor interchange file."""
