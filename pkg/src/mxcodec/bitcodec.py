"""Field-level codecs for FP4 (E2M1), FP8 (E4M3), UE8M0 scales and BF16.

Bit layouts::

    FP4  E2M1   s eem          bias 1, exp field 0 is subnormal (value = m * 0.5)
    FP8  E4M3   s eeee mmm     bias 7, exp field 0 is subnormal, s1111111 is NaN
    UE8M0       eeeeeeee       2**(byte - 127), byte 255 is NaN
    BF16        s eeeeeeee mmmmmmm   upper half of a binary32

Two FP4 codes share a byte: the lower-index element sits in the low nibble.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True)
class FormatParams:
    fp4_bias: int = 1
    fp8_bias: int = 7
    fp4_max: float = 6.0
    mx_block: int = 32
    fp8_block: int = 128
    delta: int = 6
    ue8m0_bias: int = 127

    def __post_init__(self) -> None:
        if self.fp8_block % self.mx_block:
            raise ValueError("mx_block must divide fp8_block")

    @property
    def sub_blocks(self) -> int:
        return self.fp8_block // self.mx_block


DEFAULT_PARAMS = FormatParams()

FP8_NAN_MAGNITUDE = 0x7F
FP8_MAX_MAGNITUDE = 0x7E  # 448
UE8M0_NAN = 255


# ---------------------------------------------------------------------------
# FP4 E2M1
# ---------------------------------------------------------------------------


def encode_fp4(sign: int, exp: int, mant: int) -> int:
    if sign not in (0, 1) or mant not in (0, 1) or not 0 <= exp <= 3:
        raise ValueError(f"FP4 field out of range: sign={sign} exp={exp} mant={mant}")
    return (sign << 3) | (exp << 1) | mant


def fp4_fields(code: int) -> tuple[int, int, int]:
    return (code >> 3) & 1, (code >> 1) & 3, code & 1


def decode_fp4(code: int) -> float:
    """Decode a 4-bit E2M1 code. The result is exact (a dyadic rational)."""
    if not 0 <= code <= 0xF:
        raise ValueError(f"FP4 code out of range: {code}")
    sign, exp, mant = fp4_fields(code)
    if exp == 0:
        mag = mant * 0.5
    else:
        mag = (1.0 + mant * 0.5) * 2.0 ** (exp - DEFAULT_PARAMS.fp4_bias)
    return -mag if sign else mag


FP4_VALUES = np.array([decode_fp4(c) for c in range(16)], dtype=np.float64)


# ---------------------------------------------------------------------------
# FP8 E4M3
# ---------------------------------------------------------------------------


def decode_fp8(byte: int) -> float:
    if not 0 <= byte <= 0xFF:
        raise ValueError(f"FP8 byte out of range: {byte}")
    sign = byte >> 7
    exp = (byte >> 3) & 0xF
    mant = byte & 0x7
    if exp == 0xF and mant == 0x7:
        return math.nan
    if exp == 0:
        mag = math.ldexp(mant, -9)
    else:
        mag = math.ldexp(8 + mant, exp - DEFAULT_PARAMS.fp8_bias - 3)
    return -mag if sign else mag


def is_fp8_nan(byte) -> bool | np.ndarray:
    return (np.asarray(byte) & 0x7F) == FP8_NAN_MAGNITUDE


FP8_VALUES = np.array([decode_fp8(b) for b in range(256)], dtype=np.float64)


def encode_fp8(values) -> np.ndarray:
    """Round reals to E4M3 bytes, nearest-even, saturating at +-448.

    NaN maps to the NaN pattern. Used by the FP8 baseline quantizer and the
    unfused reference conversion; the direct FP4->FP8 path never calls it.
    """
    v = np.asarray(values, dtype=np.float64)
    sign = np.signbit(v).astype(np.uint8) << 7
    mag = np.abs(v)
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        _, e = np.frexp(mag)
        unbiased = e.astype(np.int64) - 1
        # subnormal quantum is 2**-9, the normal quantum 2**(E-3)
        quantum_exp = np.maximum(unbiased, -6) - 3
        n = np.rint(np.ldexp(mag, -quantum_exp))
        n = np.where(np.isfinite(n), n, 1 << 20)
        n = n.astype(np.int64)
        base = np.where(unbiased < -6, 0, ((unbiased + 7) << 3) - 8)
        out = np.minimum(base + n, FP8_MAX_MAGNITUDE)
        out = np.where(mag == 0, 0, out)
    out = out.astype(np.uint8) | sign
    out = np.where(np.isnan(v), FP8_NAN_MAGNITUDE | sign, out)
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# UE8M0 scales
# ---------------------------------------------------------------------------


class UE8M0Value(NamedTuple):
    value: float
    bf16_bits: int
    binary32_bits: int


def decode_ue8m0(byte: int) -> UE8M0Value:
    """Decode a UE8M0 scale byte; 255 yields a NaN sentinel, not an error."""
    if not 0 <= byte <= 0xFF:
        raise ValueError(f"UE8M0 byte out of range: {byte}")
    if byte == UE8M0_NAN:
        return UE8M0Value(math.nan, 0x7FC0, 0x7FC00000)
    if byte == 0:
        # 2**-127 is a binary32/BF16 subnormal: fraction MSB only
        return UE8M0Value(math.ldexp(1.0, -127), 0x0040, 0x00400000)
    return UE8M0Value(math.ldexp(1.0, byte - 127), byte << 7, byte << 23)


def ue8m0_to_float(scales) -> np.ndarray:
    s = np.asarray(scales).astype(np.int64)
    return np.ldexp(1.0, s - DEFAULT_PARAMS.ue8m0_bias)


def ue8m0_to_binary32_bits(scales) -> np.ndarray:
    """Binary32 bit patterns of UE8M0 scales by shifting into the exponent field."""
    s = np.asarray(scales).astype(np.uint32)
    return np.where(s == 0, np.uint32(0x00400000), s << np.uint32(23)).astype(np.uint32)


def binary32_bits_to_ue8m0(bits) -> np.ndarray:
    b = np.asarray(bits).astype(np.uint32)
    if np.any(b >> 31):
        raise ValueError("negative scale is not a UE8M0 value")
    sub = b == 0x00400000
    if np.any(((b & 0x7FFFFF) != 0) & ~sub):
        raise ValueError("binary32 scale is not a power of two")
    return np.where(sub, 0, b >> 23).astype(np.uint8)


# ---------------------------------------------------------------------------
# BF16 / binary32
# ---------------------------------------------------------------------------


def bf16_to_float(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << np.uint32(16)
    return b.view(np.float32)


def bf16_to_float_scalar(bits: int) -> float:
    return float(np.array([bits << 16], dtype=np.uint32).view(np.float32)[0])


def binary32_to_float(bits) -> np.ndarray:
    return np.asarray(bits, dtype=np.uint32).view(np.float32)


def float_to_bf16(values) -> np.ndarray:
    """Round reals to BF16 bit patterns with round-to-nearest-even.

    Rounds directly from float64, so there is no double rounding through
    binary32. Overflow goes to infinity.
    """
    v = np.asarray(values, dtype=np.float64)
    mag = np.abs(v)
    with np.errstate(invalid="ignore", over="ignore"):
        _, e = np.frexp(mag)
        quantum_exp = np.maximum(e.astype(np.int64) - 1, -126) - 7
        rounded = np.ldexp(np.rint(np.ldexp(mag, -quantum_exp)), quantum_exp)
        rounded = np.where(np.isfinite(mag), rounded, mag)
        f32 = rounded.astype(np.float32)
    bits = (f32.view(np.uint32) >> np.uint32(16)).astype(np.uint16)
    bits = bits | (np.signbit(v).astype(np.uint16) << np.uint16(15))
    return np.where(np.isnan(v), np.uint16(0x7FC0), bits).astype(np.uint16)


# ---------------------------------------------------------------------------
# rounding and packing
# ---------------------------------------------------------------------------


def rtne_shift(value: int, shift: int) -> int:
    """Drop ``shift`` low bits of a non-negative integer, rounding nearest-even.

    Uses the last/guard/sticky construction: increment = G & (S | L).
    """
    if shift <= 0:
        return value << -shift
    kept = value >> shift
    guard = (value >> (shift - 1)) & 1
    sticky = int(value & ((1 << (shift - 1)) - 1) != 0)
    last = kept & 1
    return kept + (guard & (sticky | last))


def pack_nibbles(codes: Sequence[int] | np.ndarray) -> np.ndarray:
    """Pack FP4 codes two per byte along the last axis (low nibble first)."""
    c = np.asarray(codes, dtype=np.uint8)
    if c.ndim == 0:
        raise ValueError("pack_nibbles expects a sequence of codes")
    if c.shape[-1] % 2:
        raise ValueError(f"cannot pack an odd number of FP4 codes ({c.shape[-1]})")
    if c.size and c.max() > 0xF:
        raise ValueError("FP4 code out of range")
    return (c[..., 0::2] | (c[..., 1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed, count: int | None = None) -> np.ndarray:
    p = np.asarray(packed, dtype=np.uint8)
    out = np.empty(p.shape[:-1] + (p.shape[-1] * 2,), dtype=np.uint8)
    out[..., 0::2] = p & 0xF
    out[..., 1::2] = p >> 4
    if count is not None:
        if count > out.shape[-1]:
            raise ValueError(f"requested {count} codes from {p.shape[-1]} bytes")
        out = out[..., :count]
    return out
