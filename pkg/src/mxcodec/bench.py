"""Desk-scale timing plus instrumented bytes-moved for the conversion kernels.

Wall time on a CPU says little about GPU kernels; the comparable quantity is
the full-size memory traffic each variant generates.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .bitcodec import float_to_bf16
from .converter import (
    FP8_BLOCK,
    TrafficCounter,
    fp4_row_to_fp8_col,
    fp4_row_to_fp8_row,
    pad_cols,
    pad_rows,
    transpose_convert_reference,
)
from .quantizer import MX_BLOCK, quantize_row_tensor

OPS = ("quantize", "row-convert", "col-convert", "col-convert-unfused")


@dataclass(frozen=True)
class BenchRecord:
    op: str
    rows: int
    cols: int
    repeat: int
    median_s: float
    bytes_moved: int
    bytes_per_s: float

    def record(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def parse_shape(text: str) -> tuple[int, int]:
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 2:
        raise ValueError(f"shape must look like ROWSxCOLS, got {text!r}")
    rows, cols = (int(p) for p in parts)
    if rows < 0 or cols < 0:
        raise ValueError("shape must be non-negative")
    return rows, cols


def run_bench(op: str, rows: int, cols: int, repeat: int = 3, seed: int = 0) -> BenchRecord:
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}; choose from {', '.join(OPS)}")
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    cols = -(-cols // MX_BLOCK) * MX_BLOCK
    rng = np.random.default_rng(seed)
    src = float_to_bf16(rng.standard_normal((rows, cols)))

    if op == "quantize":
        def call() -> int:
            t = quantize_row_tensor(src)
            return src.nbytes + t.nbytes
    else:
        t = quantize_row_tensor(src)
        if op == "row-convert":
            t = pad_cols(t, FP8_BLOCK)

            def call() -> int:
                out = fp4_row_to_fp8_row(t)
                return t.nbytes + out.data.nbytes + out.scales.nbytes
        else:
            t = pad_rows(t, FP8_BLOCK)
            fn = fp4_row_to_fp8_col if op == "col-convert" else transpose_convert_reference

            def call() -> int:
                counter = TrafficCounter()
                fn(t, counter=counter)
                return counter.total

    times = []
    moved = 0
    for _ in range(repeat):
        start = time.perf_counter()
        moved = call()
        times.append(time.perf_counter() - start)
    median = statistics.median(times)
    rate = moved / median if median > 0 else 0.0
    return BenchRecord(op, rows, cols, repeat, median, moved, rate)
