"""Exception types shared across the package.

The CLI maps these onto its exit codes: FormatError -> 3,
ModelMismatchError -> 4, NumericError -> 5.
"""


class FlowCodecError(Exception):
    """Base class for package errors."""


class FormatError(FlowCodecError):
    """Malformed or truncated file content (bad magic, CRC, lengths)."""


class ModelMismatchError(FlowCodecError):
    """Bitstream or latents do not belong to the supplied model."""


class NumericError(FlowCodecError):
    """Numerical failure (divergence, value out of representable range)."""
