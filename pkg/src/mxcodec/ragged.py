"""Ragged per-expert MXFP4 tensors: contiguous splits plus offset tables."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .converter import FP8_BLOCK, DELTA, FP8BlockTensor, fp4_row_to_fp8_col, pad_rows
from .errors import ShapeError
from .quantizer import MX_BLOCK, MXFP4RowTensor, as_bf16_bits, quantize_row_tensor


@dataclass(frozen=True)
class RaggedFP4Tensor:
    """Variable-length row splits stored back to back with no padding.

    Offsets are in rows; byte offsets follow from ``cols``.
    """

    split_lens: tuple[int, ...]
    data: np.ndarray
    scales: np.ndarray

    def __post_init__(self) -> None:
        lens = tuple(int(n) for n in self.split_lens)
        if any(n < 0 for n in lens):
            raise ShapeError("split lengths must be non-negative")
        object.__setattr__(self, "split_lens", lens)
        # validates data/scales consistency
        MXFP4RowTensor(self.data, self.scales)
        if self.data.shape[0] != sum(lens):
            raise ShapeError(f"split lengths sum to {sum(lens)} but data has {self.data.shape[0]} rows")

    @property
    def num_splits(self) -> int:
        return len(self.split_lens)

    @property
    def split_offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.split_lens, dtype=np.int64)]))

    @property
    def total_rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1] * 2

    def byte_offsets(self) -> tuple[int, ...]:
        return tuple(o * self.cols // 2 for o in self.split_offsets)

    def as_row_tensor(self) -> MXFP4RowTensor:
        return MXFP4RowTensor(self.data, self.scales)

    @classmethod
    def from_row_tensor(cls, t: MXFP4RowTensor, split_lens: Sequence[int]) -> "RaggedFP4Tensor":
        return cls(tuple(split_lens), t.data, t.scales)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RaggedFP4Tensor):
            return NotImplemented
        return (
            self.split_lens == other.split_lens
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.scales, other.scales)
        )


def build_ragged(splits: Sequence, cols: int | None = None) -> RaggedFP4Tensor:
    """Quantize each split independently and store them contiguously.

    ``cols`` is needed only when every split is empty and shapeless.
    """
    mats = [as_bf16_bits(s) for s in splits]
    widths = {m.shape[1] for m in mats if m.ndim == 2}
    if cols is not None:
        widths.add(cols)
    if len(widths) > 1:
        raise ShapeError(f"splits disagree on cols: {sorted(widths)}")
    if not widths:
        raise ShapeError("cannot infer cols from an empty split list")
    (width,) = widths
    if width % MX_BLOCK:
        raise ShapeError(f"cols={width} is not a multiple of {MX_BLOCK}")
    parts = [quantize_row_tensor(m.reshape(m.size // width if width else 0, width)) for m in mats]
    data = np.concatenate([p.data for p in parts]) if parts else np.zeros((0, width // 2), np.uint8)
    scales = np.concatenate([p.scales for p in parts]) if parts else np.zeros((0, width // MX_BLOCK), np.uint8)
    return RaggedFP4Tensor(tuple(p.rows for p in parts), data, scales)


def split_view(t: RaggedFP4Tensor, i: int) -> MXFP4RowTensor:
    """Zero-copy row view of split ``i``."""
    if not 0 <= i < t.num_splits:
        raise IndexError(f"split {i} out of range for {t.num_splits} splits")
    offsets = t.split_offsets
    lo, hi = offsets[i], offsets[i + 1]
    return MXFP4RowTensor(t.data[lo:hi], t.scales[lo:hi])


def split_convert_to_fp8_col(t: RaggedFP4Tensor, i: int, delta: int = DELTA) -> FP8BlockTensor:
    """Pad split ``i`` to a multiple of 128 rows and run the fused column conversion."""
    view = split_view(t, i)
    return fp4_row_to_fp8_col(pad_rows(view, FP8_BLOCK), delta)
