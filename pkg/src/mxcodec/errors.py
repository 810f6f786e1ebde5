"""Exception types shared across the codec."""

from __future__ import annotations


class MXCodecError(Exception):
    """Base class for all codec errors."""


class ShapeError(MXCodecError, ValueError):
    """A tensor does not satisfy a block-alignment or shape precondition."""


class QuantizationError(MXCodecError, ValueError):
    """An input value cannot be quantized (NaN, or an all-infinite block)."""

    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


class WireFormatError(MXCodecError, ValueError):
    """A serialized packet or tensor file is truncated or corrupt."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
