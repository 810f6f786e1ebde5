"""Command-line front end.

Exit codes: 0 success, 1 verification failure, 2 usage or shape error.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

import numpy as np

from .bench import OPS, parse_shape, run_bench
from .converter import (
    FP8_BLOCK,
    FP8BlockTensor,
    fp4_row_to_fp8_col,
    fp4_row_to_fp8_row,
    pad_cols,
    pad_rows,
    row_convert_reference,
    transpose_convert_reference,
)
from .bitcodec import float_to_bf16, is_fp8_nan
from .dispatch_sim import payload_bytes
from .errors import MXCodecError
from .fileformat import read_tensor, write_tensor
from .fuzz import SUITES, run_fuzz
from .quantizer import MXFP4RowTensor, dequantize_to_real, quantize_row_tensor
from .ragged import RaggedFP4Tensor, build_ragged, split_view

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _split_lens(text: str | None, rows: int) -> list[int] | None:
    if text is None:
        return None
    lens = [int(x) for x in text.split(",") if x.strip()]
    if any(n < 0 for n in lens) or sum(lens) != rows:
        raise UsageError(f"--splits {text!r} must be non-negative and sum to {rows} rows")
    return lens


def cmd_quantize(args) -> int:
    src = read_tensor(args.input)
    if not isinstance(src, np.ndarray):
        raise UsageError(f"{args.input} is not a BF16 tensor file")
    lens = _split_lens(args.splits, src.shape[0])
    if lens is None:
        out = quantize_row_tensor(src)
    else:
        bounds = np.cumsum([0] + lens)
        out = build_ragged([src[a:b] for a, b in zip(bounds[:-1], bounds[1:])], cols=src.shape[1])
    size = write_tensor(args.output, out)
    print(f"wrote {args.output}: {size} bytes")
    return EXIT_OK


def _load_mxt4(path) -> MXFP4RowTensor | RaggedFP4Tensor:
    t = read_tensor(path)
    if not isinstance(t, (MXFP4RowTensor, RaggedFP4Tensor)):
        raise UsageError(f"{path} is not an MXT4 file")
    return t


def cmd_dequantize(args) -> int:
    t = _load_mxt4(args.input)
    if isinstance(t, RaggedFP4Tensor):
        t = t.as_row_tensor()
    size = write_tensor(args.output, float_to_bf16(dequantize_to_real(t)))
    print(f"wrote {args.output}: {size} bytes")
    return EXIT_OK


def _source_for(t, split: int | None) -> MXFP4RowTensor:
    if isinstance(t, RaggedFP4Tensor):
        return t.as_row_tensor() if split is None else split_view(t, split)
    if split is not None:
        raise UsageError("--split applies to ragged MXT4 files only")
    return t


def _convert(src: MXFP4RowTensor, layout: str, pad: bool, delta: int) -> FP8BlockTensor:
    if layout == "row":
        if src.cols % FP8_BLOCK and not pad:
            raise UsageError(f"cols={src.cols} is not a multiple of {FP8_BLOCK}; rerun with --pad")
        return fp4_row_to_fp8_row(pad_cols(src, FP8_BLOCK), delta)
    if src.rows % FP8_BLOCK and not pad:
        raise UsageError(f"rows={src.rows} is not a multiple of {FP8_BLOCK}; rerun with --pad")
    return fp4_row_to_fp8_col(pad_rows(src, FP8_BLOCK), delta)


def cmd_convert(args) -> int:
    src = _source_for(_load_mxt4(args.input), args.split)
    out = _convert(src, args.layout, args.pad, args.delta)
    size = write_tensor(args.output, out)
    print(f"wrote {args.output}: {size} bytes, layout={out.layout}, logical={out.logical_rows}x{out.logical_cols}")
    return EXIT_OK


def cmd_verify(args) -> int:
    """Recompute the conversion through the exact-arithmetic reference and compare bitwise."""
    src = _source_for(_load_mxt4(args.source), args.split)
    got = read_tensor(args.converted)
    if not isinstance(got, FP8BlockTensor):
        raise UsageError(f"{args.converted} is not an F8BT file")
    if got.layout == "row":
        want = row_convert_reference(pad_cols(src, FP8_BLOCK), args.delta)
    else:
        want = transpose_convert_reference(pad_rows(src, FP8_BLOCK), args.delta)
    nan_count = int(np.count_nonzero(is_fp8_nan(got.data)))
    if got == want and nan_count == 0:
        print(f"verify: OK ({got.data.size} elements, layout={got.layout})")
        return EXIT_OK
    mismatches = int(np.count_nonzero(got.data != want.data)) if got.data.shape == want.data.shape else -1
    print(f"verify: FAIL (mismatched bytes={mismatches}, nan patterns={nan_count})")
    return EXIT_VERIFY


def cmd_payload_report(args) -> int:
    formats = [f.strip() for f in args.formats.split(",") if f.strip()]
    sizes = {}
    for fmt in formats:
        sizes[fmt] = payload_bytes(fmt, args.M, args.K)
    print(f"{'format':<8}{'M':>10}{'K':>10}{'bytes':>16}{'bytes/(M*K)':>14}")
    for fmt, n in sizes.items():
        per = n / (args.M * args.K) if args.M * args.K else 0.0
        print(f"{fmt:<8}{args.M:>10}{args.K:>10}{n:>16}{per:>14.6f}")
    if "fp4" in sizes and "fp8" in sizes:
        ratio = sizes["fp4"] / sizes["fp8"] if sizes["fp8"] else 17 / 33
        print(f"ratio fp4/fp8 = {ratio:.6f} (17/33 = {17 / 33:.6f})")
    return EXIT_OK


def cmd_fuzz(args) -> int:
    suites = [s.strip() for s in args.suites.split(",")] if args.suites else list(SUITES)
    summary = run_fuzz(args.seed, args.iters, suites)
    for line in summary.lines():
        print(line)
    return EXIT_OK if summary.passed else EXIT_VERIFY


def cmd_bench(args) -> int:
    rows, cols = parse_shape(args.shape)
    for op in (OPS if args.op == "all" else [args.op]):
        print(run_bench(op, rows, cols, args.repeat, args.seed).record())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mxcodec", description="MXFP4 codec and FP4->FP8 conversion tools")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="BF16 file -> MXT4 file")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--splits", help="comma-separated rows per split; writes a ragged MXT4")
    q.set_defaults(func=cmd_quantize)

    d = sub.add_parser("dequantize", help="MXT4 file -> BF16 file")
    d.add_argument("input")
    d.add_argument("output")
    d.set_defaults(func=cmd_dequantize)

    c = sub.add_parser("convert", help="MXT4 file -> F8BT file")
    c.add_argument("input")
    c.add_argument("output")
    c.add_argument("--layout", choices=("row", "col"), default="row")
    c.add_argument("--pad", action="store_true", help="zero-pad to the 128 alignment instead of failing")
    c.add_argument("--split", type=int, help="convert only this split of a ragged file")
    c.add_argument("--delta", type=int, default=6)
    c.set_defaults(func=cmd_convert)

    v = sub.add_parser("verify", help="check an F8BT file against the reference conversion of its MXT4 source")
    v.add_argument("source")
    v.add_argument("converted")
    v.add_argument("--split", type=int)
    v.add_argument("--delta", type=int, default=6)
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("payload-report", help="A2A payload bytes for an M x K activation")
    r.add_argument("--M", type=int, required=True)
    r.add_argument("--K", type=int, required=True)
    r.add_argument("--formats", "--format", default="fp8,fp4")
    r.set_defaults(func=cmd_payload_report)

    f = sub.add_parser("fuzz", help="randomized equivalence suites")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--iters", type=int, default=1000)
    f.add_argument("--suites", help=f"comma-separated subset of {','.join(SUITES)}")
    f.set_defaults(func=cmd_fuzz)

    b = sub.add_parser("bench", help="timing and bytes-moved records")
    b.add_argument("--op", choices=OPS + ("all",), default="all")
    b.add_argument("--shape", default="1024x1024")
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, MXCodecError, ValueError) as exc:
        print(f"mxcodec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"mxcodec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
