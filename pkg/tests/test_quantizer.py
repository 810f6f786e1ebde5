import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mxcodec import quantizer
from mxcodec.bitcodec import FP4_VALUES, bf16_to_float, float_to_bf16, ue8m0_to_float
from mxcodec.errors import QuantizationError, ShapeError
from mxcodec.oracle import ExactValue, oracle_quantize
from mxcodec.quantizer import (
    MXFP4RowTensor,
    compute_block_scale,
    dequantize_to_real,
    quantize_codes,
    quantize_row_tensor,
    quantize_value,
)

from conftest import bf16_bits


@pytest.mark.parametrize("peak,byte", [(6.0, 127), (1.0, 125)])
def test_block_scale_examples(peak, byte):
    block = np.zeros(32)
    block[5] = peak
    assert compute_block_scale(float_to_bf16(block)) == byte


def test_zero_block_scale_is_zero_byte():
    t = quantize_row_tensor(np.zeros((1, 32)))
    assert t.scales.tolist() == [[0]] and not t.data.any()


@pytest.mark.parametrize("x,code", [(2.5, 0b0100), (5.0, 0b0110), (-0.25, 0b1000)])
def test_quantize_value_examples(x, code):
    assert quantize_value(bf16_bits(x), 127) == code


def test_quantize_value_nan_raises_and_inf_saturates():
    with pytest.raises(QuantizationError):
        quantize_value(0x7FC0, 127)
    assert quantize_value(0x7F80, 127) == 0b0111
    assert quantize_value(0xFF80, 127) == 0b1111


@settings(max_examples=300)
@given(st.integers(0, 0xFFFF), st.integers(0, 254))
def test_quantize_value_matches_oracle(bits, scale):
    if (bits >> 7) & 0xFF == 0xFF and bits & 0x7F:
        return
    x = float(bf16_to_float(np.array([bits], np.uint16))[0])
    assert quantize_value(bits, scale) == oracle_quantize(x, ExactValue.power_of_two(scale - 127))


def test_vectorized_matches_scalar_over_all_patterns():
    bits = np.arange(1 << 16, dtype=np.uint16)
    bits = bits[~(((bits >> 7) & 0xFF) == 0xFF) | ((bits & 0x7F) == 0)]
    sample = bits[::97]
    for scale in (0, 60, 127, 200, 254):
        fast = quantize_codes(sample, scale)
        assert all(int(f) == quantize_value(int(b), scale) for b, f in zip(sample, fast))


def test_row_of_sixes():
    t = quantize_row_tensor(np.full((1, 32), 6.0))
    assert t.scales.tolist() == [[127]]
    assert t.data.tolist() == [[0x77] * 16]


def test_empty_tensor():
    t = quantize_row_tensor(np.zeros((0, 64)))
    assert t.data.shape == (0, 32) and t.scales.shape == (0, 2)


def test_bad_cols_and_nan_index():
    with pytest.raises(ShapeError):
        quantize_row_tensor(np.zeros((2, 40)))
    x = np.zeros((2, 32))
    x[1, 7] = np.nan
    with pytest.raises(QuantizationError) as err:
        quantize_row_tensor(x)
    assert err.value.index == (1, 7)


def test_inf_saturates_after_finite_scale():
    x = np.zeros((1, 32))
    x[0, 0] = np.inf
    x[0, 1] = 3.0
    t = quantize_row_tensor(x)
    assert t.scales[0, 0] == 126
    assert dequantize_to_real(t)[0, 0] == 6 * 0.5
    with pytest.raises(QuantizationError):
        quantize_row_tensor(np.full((1, 32), -np.inf))


@pytest.mark.parametrize("code,scale,value", [(0b0111, 127, 6.0), (0b0001, 121, 2.0**-7)])
def test_dequantize_examples(code, scale, value):
    t = MXFP4RowTensor(np.full((1, 16), code * 0x11, np.uint8), np.full((1, 1), scale, np.uint8))
    assert np.all(dequantize_to_real(t) == value)


def test_scale_minimality_and_roundtrip_bounds(rng):
    x = float_to_bf16(rng.standard_normal((64, 256)) * np.exp2(rng.integers(-20, 20, (64, 1))))
    t = quantize_row_tensor(x)
    xs = bf16_to_float(x).astype(np.float64)
    scale = np.repeat(ue8m0_to_float(t.scales), 32, axis=1)
    peak = np.abs(xs).reshape(64, -1, 32).max(axis=2)
    ratio = peak / ue8m0_to_float(t.scales)
    assert np.all((ratio > 3) & (ratio <= 6))
    err = np.abs(xs - dequantize_to_real(t))
    assert np.all(err <= scale)
    small = np.abs(xs) <= 2 * scale
    assert np.all(err[small] <= 0.25 * scale[small])
    # every nonzero block reaches magnitude >= 2
    mags = np.abs(FP4_VALUES[t.codes()]).reshape(64, -1, 32).max(axis=2)
    assert np.all(mags >= 2)


def test_memory_ratio():
    t = quantize_row_tensor(np.ones((128, 256)))
    fp8 = 128 * 256 + 128 * 256 // 128 * 4
    assert t.nbytes / fp8 == pytest.approx(0.53125 / 1.03125)
    assert t.nbytes * 33 == fp8 * 17


def test_thread_count_does_not_change_output(rng, monkeypatch):
    x = rng.standard_normal((300, 128))
    monkeypatch.setenv("MXCODEC_THREADS", "1")
    one = quantize_row_tensor(x)
    monkeypatch.setenv("MXCODEC_THREADS", "8")
    many = quantize_row_tensor(x)
    assert one == many


def test_fault_hook_changes_ties(monkeypatch):
    monkeypatch.setattr(quantizer, "_fault_flip_ties", True)
    assert quantize_value(bf16_bits(2.5), 127) != 0b0100
