import json

import numpy as np
import pytest

from mxcodec import quantizer
from mxcodec.bitcodec import float_to_bf16
from mxcodec.cli import main
from mxcodec.converter import fp4_row_to_fp8_col
from mxcodec.fileformat import HEADER_SIZE, FileFormatError, decode_tensor, encode_tensor, read_tensor, write_tensor
from mxcodec.fuzz import run_fuzz
from mxcodec.quantizer import quantize_row_tensor
from mxcodec.ragged import build_ragged


@pytest.fixture
def bf16_file(tmp_path, rng):
    def make(rows, cols, values=None):
        x = rng.standard_normal((rows, cols)) if values is None else values
        path = tmp_path / f"in_{rows}x{cols}.bf16"
        write_tensor(path, float_to_bf16(x))
        return path
    return make


def test_file_roundtrip_all_formats(rng):
    x = float_to_bf16(rng.standard_normal((5, 64)))
    q = quantize_row_tensor(x)
    r = build_ragged([rng.standard_normal((n, 64)) for n in (2, 0, 3)])
    f = fp4_row_to_fp8_col(quantize_row_tensor(rng.standard_normal((128, 64))))
    for t in (x, q, r, f):
        back = decode_tensor(encode_tensor(t))
        assert (np.array_equal(back, t) if isinstance(t, np.ndarray) else back == t)


def test_corrupt_file_errors(rng):
    blob = encode_tensor(quantize_row_tensor(rng.standard_normal((2, 32))))
    with pytest.raises(FileFormatError):
        decode_tensor(b"NOPE" + blob[4:])
    with pytest.raises(FileFormatError):
        decode_tensor(blob[:-1])


def test_quantize_file_size(tmp_path, bf16_file, capsys):
    out = tmp_path / "q.mxt4"
    assert main(["quantize", str(bf16_file(4, 32)), str(out)]) == 0
    assert out.stat().st_size == HEADER_SIZE + 4 * 32 // 32 + 4 * 32 // 2
    back = tmp_path / "back.bf16"
    assert main(["dequantize", str(out), str(back)]) == 0
    assert read_tensor(back).shape == (4, 32)


def test_quantize_empty_file(tmp_path, bf16_file):
    out = tmp_path / "e.mxt4"
    assert main(["quantize", str(bf16_file(0, 64)), str(out)]) == 0
    assert read_tensor(out).data.shape == (0, 32)


def test_quantize_nan_reports_index(tmp_path, bf16_file, capsys):
    x = np.zeros((3, 32))
    x[2, 5] = np.nan
    code = main(["quantize", str(bf16_file(3, 32, x)), str(tmp_path / "n.mxt4")])
    assert code == 2
    assert "(2, 5)" in capsys.readouterr().err


def test_quantize_ragged_and_split_convert(tmp_path, bf16_file):
    q = tmp_path / "r.mxt4"
    assert main(["quantize", str(bf16_file(10, 64)), str(q), "--splits", "3,0,7"]) == 0
    assert read_tensor(q).split_lens == (3, 0, 7)
    c = tmp_path / "r.f8bt"
    assert main(["convert", str(q), str(c), "--layout", "col", "--pad", "--split", "2"]) == 0
    assert read_tensor(c).logical_rows == 7
    assert main(["verify", str(q), str(c), "--split", "2"]) == 0
    assert main(["quantize", str(bf16_file(10, 64)), str(q), "--splits", "3,3"]) == 2


def test_convert_uniform_row_file(tmp_path, bf16_file):
    q, c = tmp_path / "u.mxt4", tmp_path / "u.f8bt"
    main(["quantize", str(bf16_file(1, 128, np.full((1, 128), 6.0))), str(q)])
    assert main(["convert", str(q), str(c)]) == 0
    t = read_tensor(c)
    assert t.data.tolist() == [[0x7C] * 128] and t.scales.tolist() == [[121]]


def test_convert_alignment_requires_pad(tmp_path, bf16_file):
    q, c = tmp_path / "a.mxt4", tmp_path / "a.f8bt"
    main(["quantize", str(bf16_file(5, 96)), str(q)])
    assert main(["convert", str(q), str(c)]) == 2
    assert main(["convert", str(q), str(c), "--layout", "col"]) == 2
    for layout in ("row", "col"):
        assert main(["convert", str(q), str(c), "--layout", layout, "--pad"]) == 0
        assert main(["verify", str(q), str(c)]) == 0


def test_convert_empty_file(tmp_path, bf16_file):
    q, c = tmp_path / "e.mxt4", tmp_path / "e.f8bt"
    main(["quantize", str(bf16_file(0, 128)), str(q)])
    assert main(["convert", str(q), str(c)]) == 0
    assert main(["verify", str(q), str(c)]) == 0


def test_verify_detects_tampering(tmp_path, bf16_file, capsys):
    q, c = tmp_path / "t.mxt4", tmp_path / "t.f8bt"
    main(["quantize", str(bf16_file(128, 128)), str(q)])
    main(["convert", str(q), str(c), "--layout", "col"])
    t = read_tensor(c)
    t.data[3, 3] ^= 0x08
    write_tensor(c, t)
    assert main(["verify", str(q), str(c)]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_payload_report(capsys):
    assert main(["payload-report", "--M", "256", "--K", "256"]) == 0
    out = capsys.readouterr().out
    assert "67584" in out and "34816" in out and "0.515152" in out
    assert main(["payload-report", "--M", "0", "--K", "128"]) == 0
    assert main(["payload-report", "--M", "4", "--K", "100"]) == 2


def test_fuzz_deterministic_and_zero_iters(capsys):
    assert main(["fuzz", "--seed", "7", "--iters", "30"]) == 0
    first = capsys.readouterr().out
    assert main(["fuzz", "--seed", "7", "--iters", "30"]) == 0
    assert capsys.readouterr().out == first
    assert main(["fuzz", "--iters", "0"]) == 0
    assert "result=PASS" in capsys.readouterr().out
    assert main(["fuzz", "--suites", "bogus"]) == 2


def test_fuzz_detects_injected_fault(monkeypatch, capsys):
    monkeypatch.setattr(quantizer, "_fault_flip_ties", True)
    assert main(["fuzz", "--seed", "1", "--iters", "2000", "--suites", "quantizer"]) == 1
    out = capsys.readouterr().out
    assert "counterexample quantizer" in out and "result=FAIL" in out
    assert not run_fuzz(1, 2000, ["quantizer"]).passed


def test_bench_records(capsys):
    assert main(["bench", "--op", "col-convert", "--shape", "128x128", "--repeat", "1"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["repeat"] == 1 and rec["bytes_moved"] == 128 * 64 + 128 * 4 + 128 * 128 + 128
    assert main(["bench", "--shape", "0x0", "--repeat", "1"]) == 0
    recs = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(recs) == 4 and all(r["bytes_moved"] == 0 for r in recs)
    assert main(["bench", "--shape", "12"]) == 2


def test_bench_fused_moves_less(capsys):
    main(["bench", "--op", "all", "--shape", "512x512", "--repeat", "1"])
    recs = {r["op"]: r for r in map(json.loads, capsys.readouterr().out.splitlines())}
    assert recs["col-convert"]["bytes_moved"] <= 0.4 * recs["col-convert-unfused"]["bytes_moved"]
