"""On-disk tensor files: BF16, MXT4 (MXFP4) and F8BT (FP8 block tensors).

All fields little-endian. Common 42-byte header::

    offset size  field
         0    4  magic: b"BF16" | b"MXT4" | b"F8BT"
         4    2  version (1)
         6    2  flags: bit 0 ragged (MXT4 only), bit 1 column-major (F8BT only)
         8    8  rows     stored extent, original orientation
        16    8  cols
        24    8  logical rows (unpadded)
        32    8  logical cols
        40    2  block size (1 for BF16, 32 for MXT4, 128 for F8BT)

Ragged MXT4 files continue with a u32 split count and one u64 length per
split. Then the regions:

    BF16  rows*cols u16 bit patterns, row-major
    MXT4  rows*cols/32 UE8M0 scale bytes, then rows*cols/2 packed code bytes
    F8BT  one UE8M0 scale byte per 128-run, then rows*cols E4M3 bytes, both in
          storage order (row-major, or column-major when flag bit 1 is set)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .converter import FP8_BLOCK, FP8BlockTensor
from .errors import WireFormatError
from .quantizer import MX_BLOCK, MXFP4RowTensor
from .ragged import RaggedFP4Tensor

VERSION = 1
FLAG_RAGGED = 1 << 0
FLAG_COLUMN_MAJOR = 1 << 1

_HEADER = struct.Struct("<4sHHQQQQH")
HEADER_SIZE = _HEADER.size


class FileFormatError(WireFormatError):
    pass


@dataclass(frozen=True)
class TensorFileHeader:
    magic: bytes
    flags: int
    rows: int
    cols: int
    logical_rows: int
    logical_cols: int
    block_size: int
    split_lens: tuple[int, ...] = ()
    version: int = VERSION

    @property
    def ragged(self) -> bool:
        return bool(self.flags & FLAG_RAGGED)

    @property
    def column_major(self) -> bool:
        return bool(self.flags & FLAG_COLUMN_MAJOR)

    def pack(self) -> bytes:
        out = _HEADER.pack(
            self.magic, self.version, self.flags, self.rows, self.cols,
            self.logical_rows, self.logical_cols, self.block_size,
        )
        if self.ragged:
            out += struct.pack(f"<I{len(self.split_lens)}Q", len(self.split_lens), *self.split_lens)
        return out

    def region_lengths(self) -> tuple[int, int]:
        """(scale bytes, data bytes) implied by the header."""
        n = self.rows * self.cols
        if self.magic == b"BF16":
            return 0, 2 * n
        if self.magic == b"MXT4":
            return n // MX_BLOCK, n // 2
        return n // FP8_BLOCK, n


def _parse_header(buf: bytes) -> tuple[TensorFileHeader, int]:
    if len(buf) < HEADER_SIZE:
        raise FileFormatError("truncated header", len(buf))
    magic, version, flags, rows, cols, lrows, lcols, block = _HEADER.unpack_from(buf)
    if magic not in (b"BF16", b"MXT4", b"F8BT"):
        raise FileFormatError(f"unknown magic {magic!r}", 0)
    if version != VERSION:
        raise FileFormatError(f"unsupported version {version}", 4)
    expected_block = {b"BF16": 1, b"MXT4": MX_BLOCK, b"F8BT": FP8_BLOCK}[magic]
    if block != expected_block:
        raise FileFormatError(f"block size {block} invalid for {magic.decode()}", 40)
    if lrows > rows or lcols > cols:
        raise FileFormatError("logical extent exceeds stored extent", 24)
    offset = HEADER_SIZE
    split_lens: tuple[int, ...] = ()
    if flags & FLAG_RAGGED:
        if magic != b"MXT4":
            raise FileFormatError("ragged flag is only valid for MXT4", 6)
        if len(buf) < offset + 4:
            raise FileFormatError("truncated split table", len(buf))
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if len(buf) < offset + 8 * n:
            raise FileFormatError("truncated split table", len(buf))
        split_lens = struct.unpack_from(f"<{n}Q", buf, offset)
        offset += 8 * n
        if sum(split_lens) != rows:
            raise FileFormatError(f"split lengths sum to {sum(split_lens)}, header says {rows} rows", HEADER_SIZE)
    header = TensorFileHeader(magic, flags, rows, cols, lrows, lcols, block, tuple(split_lens), version)
    if magic == b"MXT4" and cols % MX_BLOCK:
        raise FileFormatError(f"cols={cols} not a multiple of {MX_BLOCK}", 16)
    return header, offset


AnyTensor = Union[np.ndarray, MXFP4RowTensor, RaggedFP4Tensor, FP8BlockTensor]


def encode_tensor(t: AnyTensor) -> bytes:
    if isinstance(t, np.ndarray):
        if t.dtype != np.uint16 or t.ndim != 2:
            raise ValueError("BF16 files hold 2-D uint16 bit patterns")
        rows, cols = t.shape
        h = TensorFileHeader(b"BF16", 0, rows, cols, rows, cols, 1)
        return h.pack() + t.astype("<u2").tobytes()
    if isinstance(t, RaggedFP4Tensor):
        rows, cols = t.total_rows, t.cols
        h = TensorFileHeader(b"MXT4", FLAG_RAGGED, rows, cols, rows, cols, MX_BLOCK, t.split_lens)
        return h.pack() + t.scales.tobytes() + t.data.tobytes()
    if isinstance(t, MXFP4RowTensor):
        h = TensorFileHeader(b"MXT4", 0, t.rows, t.cols, t.logical_rows, t.logical_cols, MX_BLOCK)
        return h.pack() + t.scales.tobytes() + t.data.tobytes()
    if isinstance(t, FP8BlockTensor):
        rows, cols = t.shape
        flags = FLAG_COLUMN_MAJOR if t.layout == "col" else 0
        h = TensorFileHeader(b"F8BT", flags, rows, cols, t.logical_rows, t.logical_cols, FP8_BLOCK)
        return h.pack() + t.scales.tobytes() + t.data.tobytes()
    raise TypeError(f"cannot encode {type(t).__name__}")


def decode_tensor(buf: bytes) -> AnyTensor:
    header, offset = _parse_header(buf)
    scale_len, data_len = header.region_lengths()
    end = offset + scale_len + data_len
    if len(buf) < end:
        raise FileFormatError(f"truncated body: {len(buf)} of {end} bytes", len(buf))
    if len(buf) > end:
        raise FileFormatError(f"{len(buf) - end} trailing bytes", end)
    scales = np.frombuffer(buf, np.uint8, scale_len, offset)
    body = offset + scale_len
    rows, cols = header.rows, header.cols
    if header.magic == b"BF16":
        return np.frombuffer(buf, "<u2", rows * cols, body).astype(np.uint16).reshape(rows, cols)
    if header.magic == b"MXT4":
        data = np.frombuffer(buf, np.uint8, data_len, body).reshape(rows, cols // 2).copy()
        scales = scales.reshape(rows, cols // MX_BLOCK).copy()
        if header.ragged:
            return RaggedFP4Tensor(header.split_lens, data, scales)
        return MXFP4RowTensor(data, scales, header.logical_rows, header.logical_cols)
    runs, run_len = (cols, rows) if header.column_major else (rows, cols)
    if run_len % FP8_BLOCK:
        raise FileFormatError(f"contiguous length {run_len} not a multiple of {FP8_BLOCK}", 8)
    data = np.frombuffer(buf, np.uint8, data_len, body).reshape(runs, run_len).copy()
    scales = scales.reshape(runs, run_len // FP8_BLOCK).copy()
    layout = "col" if header.column_major else "row"
    return FP8BlockTensor(data, scales, layout, header.logical_rows, header.logical_cols)


def write_tensor(path: str | Path, t: AnyTensor) -> int:
    blob = encode_tensor(t)
    Path(path).write_bytes(blob)
    return len(blob)


def read_tensor(path: str | Path) -> AnyTensor:
    return decode_tensor(Path(path).read_bytes())
