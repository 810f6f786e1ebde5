"""Row-wise BF16 -> MXFP4 block quantization.

Each 1x32 block gets a UE8M0 scale ``2**ceil(log2(max|x| / 6))``, computed
from the BF16 exponent/mantissa fields of the block maximum rather than with
logarithms. Elements are mapped to E2M1 with round-to-nearest-even, working
on the binary32 fraction of each value: in the normal range the kept FP4
mantissa bit is fraction bit 22, the guard bit is bit 21 and the sticky bit
is the OR of bits 20..0. Below 1.0 the implicit bit is materialized
(``0x400000 | mant >> 1``) and the fraction shifted right until it lines up
with the FP4 subnormal grid.

Scales are always computed for a whole tensor before any codes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _parallel
from .bitcodec import DEFAULT_PARAMS, FP4_VALUES, float_to_bf16, pack_nibbles, ue8m0_to_float, unpack_nibbles
from .errors import QuantizationError, ShapeError

MX_BLOCK = DEFAULT_PARAMS.mx_block

_FRAC_BITS = 23
_FRAC_MASK = (1 << _FRAC_BITS) - 1
_IMPLICIT_HALF = 0x400000  # implicit bit moved to the top of the fraction

# test-only hook: when set, exact ties round away from the even code
_fault_flip_ties = False


@dataclass
class MXFP4RowTensor:
    """Row-major packed MXFP4 tensor.

    ``data`` has shape (rows, cols/2) with two codes per byte, ``scales`` has
    shape (rows, cols/32) with one UE8M0 byte per block. ``logical_rows`` and
    ``logical_cols`` record the unpadded extent after :func:`pad_rows` or
    :func:`pad_cols`.
    """

    data: np.ndarray
    scales: np.ndarray
    logical_rows: int = -1
    logical_cols: int = -1

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.uint8)
        self.scales = np.asarray(self.scales, dtype=np.uint8)
        if self.data.ndim != 2 or self.scales.ndim != 2:
            raise ShapeError("data and scales must be 2-D")
        rows, half = self.data.shape
        if self.scales.shape != (rows, half * 2 // MX_BLOCK) or (half * 2) % MX_BLOCK:
            raise ShapeError(
                f"scales shape {self.scales.shape} inconsistent with data shape {self.data.shape}"
            )
        if self.logical_rows < 0:
            self.logical_rows = rows
        if self.logical_cols < 0:
            self.logical_cols = half * 2
        if self.logical_rows > rows or self.logical_cols > half * 2:
            raise ShapeError("logical extent exceeds stored extent")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1] * 2

    @property
    def nbytes(self) -> int:
        return self.data.nbytes + self.scales.nbytes

    def codes(self) -> np.ndarray:
        return unpack_nibbles(self.data)

    def element_scales(self) -> np.ndarray:
        return np.repeat(self.scales, MX_BLOCK, axis=1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MXFP4RowTensor):
            return NotImplemented
        return (
            self.logical_rows == other.logical_rows
            and self.logical_cols == other.logical_cols
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.scales, other.scales)
        )


def as_bf16_bits(src) -> np.ndarray:
    """BF16 bit patterns for ``src``; uint16 input is taken as already-BF16."""
    arr = np.asarray(src)
    if arr.dtype == np.uint16:
        return arr
    return float_to_bf16(arr)


# ---------------------------------------------------------------------------
# scales
# ---------------------------------------------------------------------------


def _scale_from_max_bits(max_bits: np.ndarray) -> np.ndarray:
    # max = 1.f * 2**(E-127); 6 = 1.1b * 2**2
    # ceil(log2(max/6)) = E-127-2 if 1.f <= 1.5 else E-127-1
    field_ = (max_bits >> 7).astype(np.int64)
    frac = (max_bits & 0x7F).astype(np.int64)
    byte = field_ - 2 + (frac > 0x40)
    byte = np.where(field_ == 0, 0, byte)  # zero or subnormal max: clamp low
    return np.clip(byte, 0, 254).astype(np.uint8)


def compute_scales(bits: np.ndarray) -> np.ndarray:
    """UE8M0 scale bytes for every 32-block along the last axis."""
    bits = np.asarray(bits, dtype=np.uint16)
    if bits.shape[-1] % MX_BLOCK:
        raise ShapeError(f"last dimension {bits.shape[-1]} is not a multiple of {MX_BLOCK}")
    blocks = bits.reshape(bits.shape[:-1] + (bits.shape[-1] // MX_BLOCK, MX_BLOCK))
    mag = blocks & 0x7FFF
    nan = mag > 0x7F80
    if np.any(nan):
        idx = np.unravel_index(int(np.argmax(nan.reshape(-1))), bits.shape)
        raise QuantizationError(f"NaN input at element {tuple(int(i) for i in idx)}", idx)
    finite = mag < 0x7F80
    all_inf = ~finite.any(axis=-1)
    if np.any(all_inf):
        blk = np.unravel_index(int(np.argmax(all_inf.reshape(-1))), all_inf.shape)
        raise QuantizationError(f"block {tuple(int(i) for i in blk)} is entirely infinite", blk)
    # infinities saturate later; the scale comes from the finite elements
    peak = np.where(finite, mag, 0).max(axis=-1)
    return _scale_from_max_bits(peak)


def compute_block_scale(block) -> int:
    """Scale byte for a single block of 32 BF16 values (bit patterns or reals)."""
    bits = as_bf16_bits(block).reshape(-1)
    if bits.size != MX_BLOCK:
        raise ShapeError(f"a block holds {MX_BLOCK} values, got {bits.size}")
    return int(compute_scales(bits)[0])


# ---------------------------------------------------------------------------
# element mapping
# ---------------------------------------------------------------------------


def _round_increment(kept: int, guard: int, sticky: int) -> int:
    if _fault_flip_ties and guard and not sticky:
        return 1 - (kept & 1)
    return guard & (sticky | (kept & 1))


def quantize_value(x_bits: int, scale_byte: int) -> int:
    """FP4 code nearest to ``bf16(x_bits) / 2**(scale_byte-127)``, ties to even.

    Values beyond 6 (only possible with a caller-chosen scale) and infinities
    saturate to +-6. NaN raises :class:`QuantizationError`.
    """
    sign = (x_bits >> 15) & 1
    exp_field = (x_bits >> 7) & 0xFF
    frac = (x_bits & 0x7F) << 16  # binary32 fraction
    if exp_field == 0xFF:
        if frac:
            raise QuantizationError("NaN input")
        return (sign << 3) | 0x7
    if exp_field == 0:
        if frac == 0:
            return sign << 3
        # binary32 subnormal: normalize so the leading one becomes implicit
        lead = frac.bit_length()
        exp_unbiased = lead - 1 - 149
        frac = (frac << (_FRAC_BITS + 1 - lead)) & _FRAC_MASK
    else:
        exp_unbiased = exp_field - 127
    e = exp_unbiased - (scale_byte - 127)  # exponent of x / scale

    if e >= 3:
        return (sign << 3) | 0x7
    if e >= 0:
        kept = frac >> 22
        guard = (frac >> 21) & 1
        sticky = int(frac & 0x1FFFFF != 0)
        mag = (((e + 1) << 1) | kept) + _round_increment(kept, guard, sticky)
    else:
        lost = frac & 1
        frac = _IMPLICIT_HALF | (frac >> 1)
        shift = -1 - e
        if shift >= _FRAC_BITS:
            lost |= 1
            frac = 0
        else:
            lost |= int(frac & ((1 << shift) - 1) != 0)
            frac >>= shift
        kept = frac >> 22
        guard = (frac >> 21) & 1
        sticky = int(frac & 0x1FFFFF != 0) | lost
        mag = kept + _round_increment(kept, guard, sticky)
    return (sign << 3) | min(mag, 0x7)


def quantize_codes(bits, scale_bytes) -> np.ndarray:
    """Vectorized :func:`quantize_value`; ``scale_bytes`` broadcasts against ``bits``."""
    b = np.asarray(bits, dtype=np.uint16).astype(np.int64)
    s = np.asarray(scale_bytes).astype(np.int64)
    b, s = np.broadcast_arrays(b, s)
    sign = (b >> 15) & 1
    exp_field = (b >> 7) & 0xFF
    frac = (b & 0x7F) << 16
    if np.any((exp_field == 0xFF) & (frac != 0)):
        raise QuantizationError("NaN input")

    sub = (exp_field == 0) & (frac != 0)
    lead = np.zeros_like(frac)
    if np.any(sub):
        lead = np.where(sub, np.floor(np.log2(np.maximum(frac, 1))).astype(np.int64) + 1, 0)
        frac = np.where(sub, (frac << np.maximum(_FRAC_BITS + 1 - lead, 0)) & _FRAC_MASK, frac)
    exp_unbiased = np.where(sub, lead - 1 - 149, exp_field - 127)
    e = exp_unbiased - (s - 127)

    # normal FP4 range, e in [0, 2]
    kept_n = frac >> 22
    guard_n = (frac >> 21) & 1
    sticky_n = (frac & 0x1FFFFF) != 0
    mag_n = (((e + 1) << 1) | kept_n) + _vector_increment(kept_n, guard_n, sticky_n)

    # subnormal FP4 range, e < 0
    shift = np.clip(-1 - e, 0, 40)
    lost = frac & 1
    wide = _IMPLICIT_HALF | (frac >> 1)
    lost = lost | ((wide & ((np.int64(1) << shift) - 1)) != 0)
    wide = wide >> shift
    kept_s = wide >> 22
    guard_s = (wide >> 21) & 1
    sticky_s = ((wide & 0x1FFFFF) != 0) | (lost != 0)
    mag_s = kept_s + _vector_increment(kept_s, guard_s, sticky_s)

    mag = np.where(e >= 0, mag_n, mag_s)
    mag = np.where(e >= 3, 7, np.minimum(mag, 7))
    mag = np.where((exp_field == 0) & (frac == 0), 0, mag)
    mag = np.where(exp_field == 0xFF, 7, mag)
    return ((sign << 3) | mag).astype(np.uint8)


def _vector_increment(kept, guard, sticky):
    if _fault_flip_ties:
        tie = (guard == 1) & ~sticky
        return np.where(tie, 1 - (kept & 1), guard & (sticky | (kept & 1)))
    return guard & (sticky.astype(np.int64) | (kept & 1))


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------


def quantize_row_tensor(src) -> MXFP4RowTensor:
    """Quantize a (rows, cols) BF16 matrix into row-wise MXFP4 blocks.

    ``src`` may hold BF16 bit patterns (uint16) or reals, which are first
    rounded to BF16. Rows are processed in parallel chunks (see
    ``MXCODEC_THREADS``); the result does not depend on the chunking.
    """
    bits = as_bf16_bits(src)
    if bits.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {bits.shape}")
    rows, cols = bits.shape
    if cols % MX_BLOCK:
        raise ShapeError(f"cols={cols} is not a multiple of {MX_BLOCK}")
    scales = compute_scales(bits)
    data = np.empty((rows, cols // 2), dtype=np.uint8)

    def work(lo: int, hi: int) -> None:
        elem_scales = np.repeat(scales[lo:hi], MX_BLOCK, axis=1)
        data[lo:hi] = pack_nibbles(quantize_codes(bits[lo:hi], elem_scales))

    _parallel.for_row_chunks(rows, work)
    return MXFP4RowTensor(data, scales)


def dequantize_to_real(t: MXFP4RowTensor) -> np.ndarray:
    """Exact float64 values ``fp4(code) * 2**(scale-127)`` for the logical region."""
    vals = FP4_VALUES[t.codes()] * ue8m0_to_float(t.element_scales())
    return vals[: t.logical_rows, : t.logical_cols]
