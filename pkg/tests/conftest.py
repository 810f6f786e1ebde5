import struct
from fractions import Fraction

import numpy as np
import pytest

# Independently tabulated E2M1 values, indexed by the 3-bit magnitude.
FP4_MAGNITUDES = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]


def fp8_reference(byte: int):
    """E4M3 value from first principles as a Fraction, or None for NaN."""
    sign = -1 if byte & 0x80 else 1
    exp = (byte >> 3) & 0xF
    mant = byte & 0x7
    if exp == 0xF and mant == 0x7:
        return None
    if exp == 0:
        return sign * Fraction(mant, 8) * Fraction(2) ** -6
    return sign * (1 + Fraction(mant, 8)) * Fraction(2) ** (exp - 7)


def bf16_bits(x: float) -> int:
    """Truncating BF16 view of a float32-representable value."""
    return struct.unpack("<I", struct.pack("<f", x))[0] >> 16


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][3:])):
            terminalreporter.write_line(line)
