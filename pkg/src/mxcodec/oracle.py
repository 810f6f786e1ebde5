"""Exact-arithmetic reference implementations.

Every FP4/FP8/BF16/UE8M0 value is a dyadic rational, so the oracle works on
``sign * significand * 2**exponent`` triples with Python integers and never
rounds. It is deliberately slow and simple: exhaustive candidate searches
instead of bit tricks. The fast paths in :mod:`mxcodec.quantizer` and
:mod:`mxcodec.converter` are checked against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .bitcodec import FP8_NAN_MAGNITUDE, bf16_to_float


@dataclass(frozen=True)
class ExactValue:
    """``sign * significand * 2**exponent`` with an odd (or zero) significand."""

    sign: int
    significand: int
    exponent: int

    def __post_init__(self) -> None:
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if self.significand < 0:
            raise ValueError("significand must be non-negative")
        if self.significand and not self.significand & 1:
            raise ValueError("significand must be odd (canonical form)")
        if self.significand == 0 and self.exponent != 0:
            raise ValueError("zero must have exponent 0")

    @classmethod
    def make(cls, sign: int, significand: int, exponent: int) -> "ExactValue":
        if significand == 0:
            return cls(sign, 0, 0)
        tz = (significand & -significand).bit_length() - 1
        return cls(sign, significand >> tz, exponent + tz)

    @classmethod
    def from_float(cls, x: float) -> "ExactValue":
        if not math.isfinite(x):
            raise ValueError(f"{x} has no exact dyadic value")
        sign = -1 if math.copysign(1.0, x) < 0 else 1
        num, den = abs(x).as_integer_ratio()
        return cls.make(sign, num, -(den.bit_length() - 1))

    @classmethod
    def from_bf16(cls, bits: int) -> "ExactValue":
        return cls.from_float(float(bf16_to_float(np.uint16(bits))))

    @classmethod
    def power_of_two(cls, exponent: int) -> "ExactValue":
        return cls(1, 1, exponent)

    def is_zero(self) -> bool:
        return self.significand == 0

    def scaled_int(self, exponent: int) -> int:
        """Signed integer n with value == n * 2**exponent (exponent must be low enough)."""
        if self.significand == 0:
            return 0
        shift = self.exponent - exponent
        if shift < 0:
            raise ValueError("exponent too large for an exact integer image")
        return self.sign * (self.significand << shift)

    def to_fraction(self) -> Fraction:
        return self.sign * Fraction(self.significand) * Fraction(2) ** self.exponent

    def __float__(self) -> float:
        return self.sign * math.ldexp(self.significand, self.exponent)


# (sign, exp, mant) -> magnitude in units of 0.5
_FP4_HALF_UNITS = (0, 1, 2, 3, 4, 6, 8, 12)


def fp4_exact(code: int) -> ExactValue:
    sign = -1 if code & 0x8 else 1
    return ExactValue.make(sign, _FP4_HALF_UNITS[code & 0x7], -1)


def fp8_exact(byte: int) -> ExactValue | None:
    """Exact E4M3 value from first principles; None for the NaN patterns."""
    sign = -1 if byte & 0x80 else 1
    exp = (byte >> 3) & 0xF
    mant = byte & 0x7
    if exp == 0xF and mant == 0x7:
        return None
    if exp == 0:
        return ExactValue.make(sign, mant, -9)
    return ExactValue.make(sign, 8 + mant, exp - 7 - 3)


def oracle_quantize(x: ExactValue | float, scale: ExactValue) -> int:
    """Nearest FP4 code to ``x / scale`` by exhaustive search over all 16 codes.

    Ties go to the code whose mantissa bit is 0; the +0/-0 tie follows the
    sign of ``x``. Infinite ``x`` is the limit of the search (largest code).
    """
    if scale.sign < 0 or scale.significand != 1:
        raise ValueError("scale must be a positive power of two")
    if isinstance(x, float):
        if math.isnan(x):
            raise ValueError("NaN has no nearest code")
        if math.isinf(x):
            return 0xF if x < 0 else 0x7
        x = ExactValue.from_float(x)
    x_negative = x.sign < 0
    # candidate value = sign * half_units * 2**(scale.exponent - 1)
    base = min(x.exponent, scale.exponent - 1)
    target = x.scaled_int(base)
    unit = 1 << (scale.exponent - 1 - base)
    best_key = None
    best_code = 0
    for code in range(16):
        cand = _FP4_HALF_UNITS[code & 0x7] * unit
        if code & 0x8:
            cand = -cand
        key = (abs(target - cand), code & 1, (code >> 3) != x_negative)
        if best_key is None or key < best_key:
            best_key, best_code = key, code
    return best_code


def oracle_block_scale(values: list[ExactValue], fp4_max: int = 6) -> int:
    """Smallest UE8M0 byte whose scale keeps every |x|/scale <= fp4_max.

    Searches the exponent directly instead of taking logarithms; clamps to
    the byte range [0, 254]. An all-zero block gets byte 0.
    """
    peak = max((abs(v.to_fraction()) for v in values), default=Fraction(0))
    if peak == 0:
        return 0
    for byte in range(0, 255):
        if peak <= fp4_max * Fraction(2) ** (byte - 127):
            return byte
    return 254


@lru_cache(maxsize=None)
def _oracle_convert_rel(code: int, rel_exp: int) -> int:
    # value = fp4(code) * 2**rel_exp, measured against FP8 values at the target scale
    v = fp4_exact(code)
    v = ExactValue.make(v.sign, v.significand, v.exponent + rel_exp)
    v_negative = v.sign < 0
    candidates = [(b, fp8_exact(b)) for b in range(256)]
    base = min([v.exponent, -9])
    target = v.scaled_int(base)
    best_key = None
    best_byte = 0
    for byte, cand in candidates:
        if cand is None:
            continue
        diff = abs(target - cand.scaled_int(base))
        key = (diff, byte & 1, (byte >> 7 == 1) != v_negative)
        if best_key is None or key < best_key:
            best_key, best_byte = key, byte
    return best_byte


def oracle_convert(code: int, sf_i: int, target: int) -> int:
    """Nearest E4M3 byte for ``fp4(code) * 2**(sf_i-127)`` at scale ``2**(target-127)``.

    Exhaustive over the 254 non-NaN bytes, ties to even mantissa, zero sign
    following the input sign. Defines the flush-to-zero boundary.
    """
    if not (0 <= sf_i <= 254 and 0 <= target <= 254):
        raise ValueError("scale bytes must be <= 254")
    if not 0 <= code <= 0xF:
        raise ValueError(f"FP4 code out of range: {code}")
    out = _oracle_convert_rel(code, sf_i - target)
    assert out & 0x7F != FP8_NAN_MAGNITUDE
    return out


@dataclass(frozen=True)
class RoundtripReport:
    max_abs: float
    max_rel_to_block_max: float
    mean_abs: float


def roundtrip_report(src, block: int = 32) -> RoundtripReport:
    """Exact quantize->dequantize error statistics for a BF16 matrix.

    Uses only the oracle scale search and oracle nearest-code search.
    ``src`` holds BF16 bit patterns with shape (rows, cols).
    """
    bits = np.asarray(src, dtype=np.uint16)
    if bits.ndim != 2 or bits.shape[1] % block:
        raise ValueError(f"expected (rows, k*{block}) BF16 matrix, got {bits.shape}")
    floats = bf16_to_float(bits).astype(np.float64)
    if not np.all(np.isfinite(floats)):
        raise ValueError("roundtrip_report requires finite inputs")
    max_abs = Fraction(0)
    max_rel = Fraction(0)
    total = Fraction(0)
    count = 0
    for row in floats:
        for start in range(0, row.size, block):
            vals = [ExactValue.from_float(float(x)) for x in row[start : start + block]]
            byte = oracle_block_scale(vals)
            scale = ExactValue.power_of_two(byte - 127)
            peak = max(abs(v.to_fraction()) for v in vals)
            block_err = Fraction(0)
            for v in vals:
                code = oracle_quantize(v, scale)
                err = abs(v.to_fraction() - fp4_exact(code).to_fraction() * scale.to_fraction())
                block_err = max(block_err, err)
                total += err
                count += 1
            max_abs = max(max_abs, block_err)
            if peak:
                max_rel = max(max_rel, block_err / peak)
    mean = total / count if count else Fraction(0)
    return RoundtripReport(float(max_abs), float(max_rel), float(mean))
