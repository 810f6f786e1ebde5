"""Seeded randomized equivalence checks against the oracle and reference paths."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import quantizer
from .bitcodec import bf16_to_float, float_to_bf16, is_fp8_nan
from .converter import DELTA, convert_codes, fp4_row_to_fp8_col, transpose_convert_reference
from .dispatch_sim import HEADER_SIZE, deserialize, payload_bytes, serialize
from .oracle import ExactValue, _oracle_convert_rel, oracle_quantize
from .quantizer import MXFP4RowTensor, quantize_row_tensor
from .ragged import build_ragged

SUITES = ("quantizer", "converter", "fused", "serialize")


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    failures: int = 0
    nan_patterns: int = 0
    counterexample: dict | None = None


@dataclass
class FuzzSummary:
    seed: int
    iters: int
    suites: list[SuiteResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.failures == 0 and s.nan_patterns == 0 for s in self.suites)

    def lines(self) -> list[str]:
        out = [f"seed={self.seed} iters={self.iters}"]
        for s in self.suites:
            out.append(
                f"suite={s.name} cases={s.cases} failures={s.failures} nan_patterns={s.nan_patterns}"
            )
            if s.counterexample is not None:
                out.append(f"counterexample {s.name} " + json.dumps(s.counterexample, sort_keys=True))
        out.append("result=" + ("PASS" if self.passed else "FAIL"))
        return out


def _random_bf16_near_scale(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    scales = rng.integers(0, 255, n)
    exp_field = np.clip(scales + rng.integers(-5, 4, n), 0, 254)
    bits = (rng.integers(0, 2, n) << 15) | (exp_field << 7) | rng.integers(0, 128, n)
    wild = rng.random(n) < 0.1
    any_bits = rng.integers(0, 1 << 16, n)
    any_bits = np.where(((any_bits >> 7) & 0xFF) == 0xFF, any_bits & 0x807F, any_bits)
    bits = np.where(wild, any_bits, bits)
    return bits.astype(np.uint16), scales


def fuzz_quantizer(rng: np.random.Generator, iters: int) -> SuiteResult:
    res = SuiteResult("quantizer", cases=iters)
    bits, scales = _random_bf16_near_scale(rng, iters)
    fast = quantizer.quantize_codes(bits, scales)
    floats = bf16_to_float(bits).astype(np.float64)
    bad = []
    for i in range(iters):
        want = oracle_quantize(float(floats[i]), ExactValue.power_of_two(int(scales[i]) - 127))
        if want != fast[i]:
            bad.append((int(scales[i]), int(bits[i]) & 0x7FFF, int(bits[i]), int(fast[i]), want))
    res.failures = len(bad)
    if bad:
        scale, _, b, got, want = min(bad)
        res.counterexample = {"bf16_bits": f"0x{b:04x}", "scale_byte": scale, "got": got, "expected": want}
    return res


def fuzz_converter(rng: np.random.Generator, iters: int, delta: int = DELTA) -> SuiteResult:
    res = SuiteResult("converter", cases=iters)
    codes = rng.integers(0, 16, iters)
    peak = rng.integers(0, 255, iters)
    gaps = rng.integers(0, 32, (iters, 4))
    gaps[np.arange(iters), rng.integers(0, 4, iters)] = 0
    subs = np.clip(peak[:, None] - gaps, 0, 254)
    pos = rng.integers(0, 4, iters)
    target = np.maximum(subs.max(axis=1) - delta, 0)
    sf = subs[np.arange(iters), pos]
    fast = convert_codes(codes, target - sf)
    res.nan_patterns = int(np.count_nonzero(is_fp8_nan(fast)))
    rel = sf - target
    pairs, inverse = np.unique(np.stack([codes, rel], axis=1), axis=0, return_inverse=True)
    table = np.array([_oracle_convert_rel(int(c), int(r)) for c, r in pairs], dtype=np.uint8)
    want = table[inverse.reshape(-1)]
    bad = np.nonzero(want != fast)[0]
    res.failures = int(bad.size)
    if bad.size:
        i = min(bad, key=lambda j: (codes[j] & 7, int(target[j] - sf[j])))
        res.counterexample = {
            "code": int(codes[i]), "sub_scales": subs[i].tolist(), "position": int(pos[i]),
            "got": int(fast[i]), "expected": int(want[i]),
        }
    return res


def _random_fp4_tensor(rng: np.random.Generator, rows: int, cols: int) -> MXFP4RowTensor:
    x = rng.standard_normal((rows, cols)) * np.exp2(rng.integers(-12, 12, (rows, 1)))
    x *= np.exp2(rng.integers(-4, 4, (1, cols)))
    return quantize_row_tensor(x)


def fuzz_fused(rng: np.random.Generator, iters: int, delta: int = DELTA) -> SuiteResult:
    res = SuiteResult("fused", cases=iters)
    for _ in range(iters):
        rows = 128 * int(rng.integers(1, 3))
        cols = 32 * int(rng.integers(1, 9))
        t = _random_fp4_tensor(rng, rows, cols)
        got = fp4_row_to_fp8_col(t, delta)
        want = transpose_convert_reference(t, delta)
        res.nan_patterns += int(np.count_nonzero(is_fp8_nan(got.data)))
        if got == want:
            continue
        res.failures += 1
        if res.counterexample is None:
            res.counterexample = _shrink_fused(t, got, want, delta)
    return res


def _shrink_fused(t: MXFP4RowTensor, got, want, delta: int) -> dict:
    diff = np.argwhere(got.data != want.data)
    if diff.size == 0:
        c, rb = np.argwhere(got.scales != want.scales)[0]
        r = rb * 128
    else:
        c, r = diff[0]
    r0, c0 = int(r) // 128 * 128, int(c) // 32 * 32
    sub = MXFP4RowTensor(t.data[r0 : r0 + 128, c0 // 2 : c0 // 2 + 16], t.scales[r0 : r0 + 128, c0 // 32 : c0 // 32 + 1])
    still = fp4_row_to_fp8_col(sub, delta) != transpose_convert_reference(sub, delta)
    return {
        "shape": [t.rows, t.cols],
        "first_mismatch": [int(r), int(c)],
        "minimal_block": {"row0": r0, "col0": c0, "reproduces": bool(still),
                          "scales": sub.scales.reshape(-1).tolist(), "data": sub.data.tobytes().hex()},
    }


def fuzz_serialize(rng: np.random.Generator, iters: int) -> SuiteResult:
    res = SuiteResult("serialize", cases=iters)
    for _ in range(iters):
        cols = 128 * int(rng.integers(1, 4))
        lens = rng.integers(0, 9, int(rng.integers(1, 6)))
        splits = [float_to_bf16(rng.standard_normal((int(n), cols))) for n in lens]
        t = build_ragged(splits, cols=cols)
        dests = np.diff(np.concatenate([[0], np.sort(rng.integers(0, t.total_rows + 1, 3)), [t.total_rows]]))
        packets = serialize(t, dests.tolist())
        back = deserialize(packets, t.split_lens)
        sizes_ok = all(len(p) == HEADER_SIZE + payload_bytes("fp4", int(n), cols) for p, n in zip(packets, dests))
        if back != t or not sizes_ok:
            res.failures += 1
            if res.counterexample is None:
                res.counterexample = {"cols": cols, "split_lens": lens.tolist(), "dest_counts": dests.tolist(),
                                      "roundtrip_ok": back == t, "sizes_ok": sizes_ok}
    return res


def run_fuzz(seed: int, iters: int, suites: Sequence[str] = SUITES) -> FuzzSummary:
    """Run each named suite for ``iters`` cases with a generator derived from ``seed``."""
    unknown = set(suites) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown fuzz suites: {sorted(unknown)}")
    summary = FuzzSummary(seed, iters)
    runners = {"quantizer": fuzz_quantizer, "converter": fuzz_converter,
               "fused": fuzz_fused, "serialize": fuzz_serialize}
    for k, name in enumerate(SUITES):
        if name in suites:
            rng = np.random.default_rng([seed, k])
            summary.suites.append(runners[name](rng, iters))
    return summary

