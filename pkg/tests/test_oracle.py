from fractions import Fraction

import numpy as np
import pytest

from mxcodec.bitcodec import float_to_bf16
from mxcodec.oracle import (
    ExactValue,
    oracle_block_scale,
    oracle_convert,
    oracle_quantize,
    roundtrip_report,
)

ONE = ExactValue.power_of_two(0)


def test_exact_value_is_canonical():
    v = ExactValue.make(1, 12, 0)
    assert (v.significand, v.exponent) == (3, 2)
    assert v.to_fraction() == 12
    assert ExactValue.from_float(-0.375).to_fraction() == Fraction(-3, 8)


@pytest.mark.parametrize("x,code", [(2.5, 0b0100), (0.0, 0b0000), (6.0, 0b0111), (5.0, 0b0110), (-0.25, 0b1000)])
def test_oracle_quantize_examples(x, code):
    assert oracle_quantize(x, ONE) == code


def test_oracle_quantize_every_midpoint_goes_even():
    # midpoints of the positive codebook; the winner has mantissa bit 0
    mags = [0, 0.5, 1, 1.5, 2, 3, 4, 6]
    for lo, hi in zip(mags, mags[1:]):
        code = oracle_quantize((lo + hi) / 2, ONE)
        assert code & 1 == 0
        assert mags[code] in (lo, hi)


@pytest.mark.parametrize("triple,byte", [((0b0111, 127, 121), 0x7C), ((0b0000, 50, 3), 0x00), ((0b0010, 110, 121), 0x00)])
def test_oracle_convert_examples(triple, byte):
    assert oracle_convert(*triple) == byte


def test_oracle_convert_idempotent_with_same_scales():
    # converting an FP8 result that is itself FP4-exact reproduces it
    assert oracle_convert(0b0111, 127, 121) == oracle_convert(0b0111, 127, 121)
    for code in range(16):
        assert oracle_convert(code, 121, 121) == oracle_convert(code, 121, 121)


def test_oracle_block_scale():
    assert oracle_block_scale([ExactValue.from_float(6.0)]) == 127
    assert oracle_block_scale([ExactValue.from_float(1.0)]) == 125
    assert oracle_block_scale([ExactValue.from_float(0.0)] * 4) == 0


def test_roundtrip_report_codebook_exact_is_zero():
    x = float_to_bf16(np.tile([0.5, 1, 1.5, 2, 3, 4, 6, -6], (2, 4)))
    r = roundtrip_report(x)
    assert (r.max_abs, r.max_rel_to_block_max, r.mean_abs) == (0.0, 0.0, 0.0)


def test_roundtrip_report_all_fives():
    r = roundtrip_report(float_to_bf16(np.full((1, 32), 5.0)))
    assert r.max_abs == 1.0
    assert r.max_rel_to_block_max == pytest.approx(0.2)


def test_roundtrip_report_random_within_block_scale(rng):
    x = float_to_bf16(rng.standard_normal((4, 64)))
    r = roundtrip_report(x)
    # scale never exceeds 2 * block max / 6, error never exceeds one scale
    assert r.max_rel_to_block_max <= 1 / 3
