"""Direct FP4 -> FP8 conversion with 32 -> 128 block scale alignment.

Four MXFP4 blocks of 32 feed one FP8 block of 128. The FP8 block scale is
``max(sub_scales) - delta`` (delta = 6 by default, clamped at byte 0) and each
element's FP8 exponent is computed directly from its FP4 exponent field:

    E = (E_fp4 - 1 + 7) - (target - SF_i)
    byte = sign << 7 | E << 3 | mant << 2

The FP4 mantissa bit lands on FP8 mantissa bit 2, so the NaN pattern
(mantissa 0b111 with exponent 15) is unreachable. Exponents at or below 0
go through the FP8 subnormal grid with nearest-even rounding and flush to
signed zero below half the minimum subnormal.

``fp4_row_to_fp8_col`` fuses the conversion with a transpose, one 128x128
tile at a time, so the only full-size traffic is one read of the packed
source and one write of the FP8 output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import _parallel
from .bitcodec import (
    DEFAULT_PARAMS,
    FP4_VALUES,
    FP8_MAX_MAGNITUDE,
    FP8_VALUES,
    encode_fp8,
    rtne_shift,
    ue8m0_to_binary32_bits,
    ue8m0_to_float,
    unpack_nibbles,
)
from .errors import ShapeError
from .quantizer import MX_BLOCK, MXFP4RowTensor

FP8_BLOCK = DEFAULT_PARAMS.fp8_block
SUB_BLOCKS = DEFAULT_PARAMS.sub_blocks
DELTA = DEFAULT_PARAMS.delta

Layout = Literal["row", "col"]


@dataclass
class TrafficCounter:
    """Bytes read from and written to full-size (off-tile) buffers."""

    bytes_read: int = 0
    bytes_written: int = 0
    stages: list[tuple[str, int, int]] = field(default_factory=list)

    def read(self, nbytes: int) -> None:
        self.bytes_read += int(nbytes)

    def write(self, nbytes: int) -> None:
        self.bytes_written += int(nbytes)

    def mark(self, stage: str) -> None:
        done_r = sum(s[1] for s in self.stages)
        done_w = sum(s[2] for s in self.stages)
        self.stages.append((stage, self.bytes_read - done_r, self.bytes_written - done_w))

    @property
    def total(self) -> int:
        return self.bytes_read + self.bytes_written


@dataclass(frozen=True)
class ScaleGroup:
    sub_scales: tuple[int, ...]
    target: int
    adjustments: tuple[int, ...]


@dataclass
class FP8BlockTensor:
    """E4M3 bytes with one UE8M0 scale per 128 elements along the contiguous axis.

    ``layout == "row"``: ``data`` is (rows, cols) and blocks run along rows.
    ``layout == "col"``: ``data`` is (cols, rows), i.e. the column-major image
    of the logical matrix, and blocks run along the original row axis.
    ``logical_rows``/``logical_cols`` always describe the logical matrix in
    its original orientation, without padding.
    """

    data: np.ndarray
    scales: np.ndarray
    layout: Layout = "row"
    logical_rows: int = -1
    logical_cols: int = -1

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.uint8)
        self.scales = np.asarray(self.scales, dtype=np.uint8)
        if self.layout not in ("row", "col"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.data.ndim != 2:
            raise ShapeError("FP8 data must be 2-D")
        runs, run_len = self.data.shape
        if run_len % FP8_BLOCK:
            raise ShapeError(f"contiguous length {run_len} is not a multiple of {FP8_BLOCK}")
        if self.scales.shape != (runs, run_len // FP8_BLOCK):
            raise ShapeError(f"scales shape {self.scales.shape} does not match data {self.data.shape}")
        rows, cols = self.shape
        if self.logical_rows < 0:
            self.logical_rows = rows
        if self.logical_cols < 0:
            self.logical_cols = cols

    @property
    def shape(self) -> tuple[int, int]:
        """Stored (padded) shape in the logical orientation."""
        runs, run_len = self.data.shape
        return (runs, run_len) if self.layout == "row" else (run_len, runs)

    @property
    def scales_binary32(self) -> np.ndarray:
        return ue8m0_to_binary32_bits(self.scales)

    def dequantize(self) -> np.ndarray:
        """Exact float64 values in the logical orientation, padding removed."""
        vals = FP8_VALUES[self.data] * np.repeat(ue8m0_to_float(self.scales), FP8_BLOCK, axis=1)
        if self.layout == "col":
            vals = vals.T
        return vals[: self.logical_rows, : self.logical_cols]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FP8BlockTensor):
            return NotImplemented
        return (
            self.layout == other.layout
            and (self.logical_rows, self.logical_cols) == (other.logical_rows, other.logical_cols)
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.scales, other.scales)
        )


# ---------------------------------------------------------------------------
# scalar algorithm
# ---------------------------------------------------------------------------


def align_scales(sub_scales: Sequence[int], delta: int = DELTA) -> ScaleGroup:
    subs = tuple(int(s) for s in sub_scales)
    if any(not 0 <= s <= 254 for s in subs):
        raise ValueError(f"scale bytes must be in [0, 254], got {subs}")
    # UE8M0 cannot go below byte 0; a clamped target only shrinks the adjustments
    target = max(max(subs) - delta, 0)
    return ScaleGroup(subs, target, tuple(target - s for s in subs))


def convert_code(code: int, adjustment: int) -> int:
    """FP8 E4M3 byte for FP4 ``code`` whose block scale sits ``adjustment`` below the target."""
    sign = (code >> 3) & 1
    exp4 = (code >> 1) & 3
    mant = code & 1
    if exp4 == 0:
        if mant == 0:
            return sign << 7
        # 0.5 = 1.0 * 2**-1: treat as a normal input one binade below exp field 1
        exp4, mant = 0, 0
    e = exp4 - DEFAULT_PARAMS.fp4_bias + DEFAULT_PARAMS.fp8_bias - adjustment
    if e > 15:
        return (sign << 7) | FP8_MAX_MAGNITUDE
    if e >= 1:
        return (sign << 7) | (e << 3) | (mant << 2)
    # significand 1.m as 8 + 4m in units of 2**(e-10); subnormal grid is 2**-9
    mag = rtne_shift(8 + (mant << 2), 1 - e)
    return (sign << 7) | mag


_ADJ_SPAN = 260
_CONVERT_LUT = np.array(
    [[convert_code(c, a) for a in range(-_ADJ_SPAN, _ADJ_SPAN + 1)] for c in range(16)],
    dtype=np.uint8,
)


def convert_codes(codes, adjustments) -> np.ndarray:
    """Vectorized :func:`convert_code` via a (code, adjustment) lookup table."""
    c = np.asarray(codes, dtype=np.uint8)
    a = np.clip(np.asarray(adjustments, dtype=np.int64), -_ADJ_SPAN, _ADJ_SPAN)
    return _CONVERT_LUT[c, a + _ADJ_SPAN]


def _targets(sub_scale_max: np.ndarray, delta: int) -> np.ndarray:
    return np.maximum(sub_scale_max.astype(np.int64) - delta, 0)


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------


def _check_multiple(multiple: int) -> None:
    if multiple not in (MX_BLOCK, FP8_BLOCK):
        raise ValueError(f"pad multiple must be {MX_BLOCK} or {FP8_BLOCK}, got {multiple}")


def pad_rows(src: MXFP4RowTensor, multiple: int = FP8_BLOCK) -> MXFP4RowTensor:
    _check_multiple(multiple)
    extra = -src.rows % multiple
    if not extra:
        return src
    data = np.concatenate([src.data, np.zeros((extra, src.data.shape[1]), np.uint8)])
    scales = np.concatenate([src.scales, np.zeros((extra, src.scales.shape[1]), np.uint8)])
    return MXFP4RowTensor(data, scales, src.logical_rows, src.logical_cols)


def pad_cols(src: MXFP4RowTensor, multiple: int = FP8_BLOCK) -> MXFP4RowTensor:
    _check_multiple(multiple)
    extra = -src.cols % multiple
    if not extra:
        return src
    data = np.concatenate([src.data, np.zeros((src.rows, extra // 2), np.uint8)], axis=1)
    scales = np.concatenate([src.scales, np.zeros((src.rows, extra // MX_BLOCK), np.uint8)], axis=1)
    return MXFP4RowTensor(data, scales, src.logical_rows, src.logical_cols)


# ---------------------------------------------------------------------------
# tensor conversions
# ---------------------------------------------------------------------------


def fp4_row_to_fp8_row(src: MXFP4RowTensor, delta: int = DELTA) -> FP8BlockTensor:
    """Row-preserving conversion; every four consecutive 32-blocks form one FP8 block."""
    if src.cols % FP8_BLOCK:
        raise ShapeError(f"cols={src.cols} is not a multiple of {FP8_BLOCK}; pad with pad_cols first")
    rows, cols = src.rows, src.cols
    groups = src.scales.reshape(rows, cols // FP8_BLOCK, SUB_BLOCKS)
    targets = _targets(groups.max(axis=2), delta)
    adjustments = targets[:, :, None] - groups.astype(np.int64)
    elem_adj = np.repeat(adjustments.reshape(rows, cols // MX_BLOCK), MX_BLOCK, axis=1)
    data = convert_codes(src.codes(), elem_adj)
    return FP8BlockTensor(data, targets.astype(np.uint8), "row", src.logical_rows, src.logical_cols)


def fp4_row_to_fp8_col(
    src: MXFP4RowTensor,
    delta: int = DELTA,
    counter: TrafficCounter | None = None,
    tile: int = FP8_BLOCK,
) -> FP8BlockTensor:
    """Fused dequantize + transpose + FP8 requantize, tile by tile.

    Each output run (one source column, 128 consecutive source rows) is split
    into four 32-runs whose sub-scales are the largest source block scale
    they touch; the FP8 scale is their max minus ``delta``. Every element is
    then converted with its own source scale as the adjustment base, so the
    result is exact whenever :func:`convert_code` is.
    """
    if src.rows % FP8_BLOCK:
        raise ShapeError(f"rows={src.rows} is not a multiple of {FP8_BLOCK}; pad with pad_rows first")
    if tile % MX_BLOCK or tile <= 0:
        raise ValueError("tile width must be a positive multiple of 32")
    rows, cols = src.rows, src.cols
    out = np.empty((cols, rows), dtype=np.uint8)
    out_scales = np.empty((cols, rows // FP8_BLOCK), dtype=np.uint8)
    counters: list[TrafficCounter] = []

    def band(lo: int, hi: int) -> None:
        local = TrafficCounter()
        for r0 in range(lo, hi, FP8_BLOCK):
            rb = r0 // FP8_BLOCK
            for c0 in range(0, cols, tile):
                c1 = min(c0 + tile, cols)
                packed = src.data[r0 : r0 + FP8_BLOCK, c0 // 2 : c1 // 2]
                blk_scales = src.scales[r0 : r0 + FP8_BLOCK, c0 // MX_BLOCK : c1 // MX_BLOCK]
                local.read(packed.nbytes + blk_scales.nbytes)
                # tile-local buffers stay on chip: no traffic charged
                codes_t = unpack_nibbles(packed).T
                scales_t = np.repeat(blk_scales, MX_BLOCK, axis=1).T
                sub_max = scales_t.reshape(c1 - c0, SUB_BLOCKS, MX_BLOCK).max(axis=2)
                targets = _targets(sub_max.max(axis=1), delta)
                fp8 = convert_codes(codes_t, targets[:, None] - scales_t.astype(np.int64))
                out[c0:c1, r0 : r0 + FP8_BLOCK] = fp8
                out_scales[c0:c1, rb] = targets
                local.write(fp8.nbytes + (c1 - c0))
        counters.append(local)

    _parallel.for_row_chunks(rows, band, granule=FP8_BLOCK)
    if counter is not None:
        for c in counters:
            counter.read(c.bytes_read)
            counter.write(c.bytes_written)
        counter.mark("fused")
    return FP8BlockTensor(out, out_scales, "col", src.logical_rows, src.logical_cols)


def transpose_convert_reference(
    src: MXFP4RowTensor,
    delta: int = DELTA,
    counter: TrafficCounter | None = None,
) -> FP8BlockTensor:
    """Unfused col conversion: dequantize, transpose, requantize as separate passes.

    The staging buffers hold (code, scale) byte pairs, exact and the same
    16 bits per element as a BF16 staging tensor. Requantization uses plain
    nearest-even rounding of exact reals, not the bitwise remapping.
    """
    if src.rows % FP8_BLOCK:
        raise ShapeError(f"rows={src.rows} is not a multiple of {FP8_BLOCK}; pad with pad_rows first")
    counter = counter if counter is not None else TrafficCounter()
    rows, cols = src.rows, src.cols

    counter.read(src.nbytes)
    codes = unpack_nibbles(src.data)
    elem_scales = np.repeat(src.scales, MX_BLOCK, axis=1)
    counter.write(codes.nbytes + elem_scales.nbytes)
    counter.mark("dequantize")

    counter.read(codes.nbytes + elem_scales.nbytes)
    codes_t = np.ascontiguousarray(codes.T)
    scales_t = np.ascontiguousarray(elem_scales.T)
    counter.write(codes_t.nbytes + scales_t.nbytes)
    counter.mark("transpose")

    counter.read(codes_t.nbytes + scales_t.nbytes)
    runs = scales_t.reshape(cols, rows // FP8_BLOCK, SUB_BLOCKS, MX_BLOCK)
    targets = _targets(runs.max(axis=(2, 3)), delta)
    values = FP4_VALUES[codes_t] * ue8m0_to_float(scales_t)
    block_scale = np.repeat(ue8m0_to_float(targets), FP8_BLOCK, axis=1)
    data = encode_fp8(values / block_scale)
    counter.write(data.nbytes + targets.size)
    counter.mark("requantize")
    return FP8BlockTensor(data, targets.astype(np.uint8), "col", src.logical_rows, src.logical_cols)


def row_convert_reference(src: MXFP4RowTensor, delta: int = DELTA) -> FP8BlockTensor:
    """Row conversion through exact reals and nearest-even FP8 rounding."""
    if src.cols % FP8_BLOCK:
        raise ShapeError(f"cols={src.cols} is not a multiple of {FP8_BLOCK}")
    rows, cols = src.rows, src.cols
    targets = _targets(src.scales.reshape(rows, cols // FP8_BLOCK, SUB_BLOCKS).max(axis=2), delta)
    values = FP4_VALUES[src.codes()] * ue8m0_to_float(src.element_scales())
    data = encode_fp8(values / np.repeat(ue8m0_to_float(targets), FP8_BLOCK, axis=1))
    return FP8BlockTensor(data, targets.astype(np.uint8), "row", src.logical_rows, src.logical_cols)
