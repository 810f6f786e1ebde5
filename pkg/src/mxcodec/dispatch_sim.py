"""In-process expert-parallel All-to-All dispatch/combine simulator.

Tokens are quantized once on their source rank, serialized into one wire
packet per destination rank and deserialized on arrival. Packets carry a
fixed little-endian header, then a scale region and a data region::

    offset size  field
         0    4  magic b"MXWP"
         4    2  version (1)
         6    1  format tag (0 = fp4, 1 = fp8)
         7    1  scale element size in bytes (1 = UE8M0, 4 = binary32)
         8    2  block size (32 or 128)
        10    2  reserved (0)
        12    8  token count
        20    8  cols
        28    8  scale region length
        36    8  data region length
        44       scale region, then data region

Region lengths are redundant with (format, token count, cols, scale size)
and are checked on decode. Routing layout, token ids and gate weights are
exchanged out of band and are not part of the payload accounting.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence, Union

import numpy as np

from . import _parallel
from .bitcodec import (
    binary32_bits_to_ue8m0,
    bf16_to_float,
    encode_fp8,
    float_to_bf16,
    ue8m0_to_binary32_bits,
    ue8m0_to_float,
)
from .converter import FP8_BLOCK, DELTA, FP8BlockTensor, fp4_row_to_fp8_row
from .errors import QuantizationError, ShapeError, WireFormatError
from .quantizer import MX_BLOCK, MXFP4RowTensor, as_bf16_bits, quantize_row_tensor
from .ragged import RaggedFP4Tensor, split_view

Format = Literal["fp4", "fp8"]

MAGIC = b"MXWP"
VERSION = 1
_HEADER = struct.Struct("<4sHBBHHQQQQ")
HEADER_SIZE = _HEADER.size
_FORMAT_TAGS = {"fp4": 0, "fp8": 1}
_TAG_FORMATS = {v: k for k, v in _FORMAT_TAGS.items()}
FP8_SCALE_BYTES = 4  # the FP8 baseline ships binary32 scales


def payload_bytes(fmt: Format, m: int, k: int) -> int:
    """Activation + scale bytes for an M x K tensor, excluding headers.

    fp8: M*K + (M*K/128)*4 = M*K*33/32; fp4: M*K/2 + (M*K/32)*1 = M*K*17/32.
    """
    if m < 0 or k < 0:
        raise ValueError("shape must be non-negative")
    if k % FP8_BLOCK:
        raise ShapeError(f"K={k} is not a multiple of {FP8_BLOCK}")
    n = m * k
    if fmt == "fp8":
        return n + n // FP8_BLOCK * FP8_SCALE_BYTES
    if fmt == "fp4":
        return n // 2 + n // MX_BLOCK
    raise ValueError(f"unknown format {fmt!r}")


# ---------------------------------------------------------------------------
# wire packets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PacketHeader:
    fmt: Format
    token_count: int
    cols: int
    scale_elem_size: int
    block_size: int
    version: int = VERSION

    def region_lengths(self) -> tuple[int, int]:
        if self.fmt == "fp4":
            blocks = self.token_count * (self.cols // MX_BLOCK)
            return blocks * self.scale_elem_size, self.token_count * self.cols // 2
        blocks = self.token_count * -(-self.cols // FP8_BLOCK)
        return blocks * self.scale_elem_size, self.token_count * self.cols

    @property
    def packet_size(self) -> int:
        return HEADER_SIZE + sum(self.region_lengths())


@dataclass(frozen=True)
class WirePacket:
    header: PacketHeader
    scale_region: bytes
    data_region: bytes

    @property
    def payload_size(self) -> int:
        return len(self.scale_region) + len(self.data_region)

    def to_bytes(self) -> bytes:
        h = self.header
        head = _HEADER.pack(
            MAGIC,
            h.version,
            _FORMAT_TAGS[h.fmt],
            h.scale_elem_size,
            h.block_size,
            0,
            h.token_count,
            h.cols,
            len(self.scale_region),
            len(self.data_region),
        )
        return head + self.scale_region + self.data_region

    @classmethod
    def from_bytes(cls, buf: bytes | memoryview) -> "WirePacket":
        buf = memoryview(buf)
        if len(buf) < HEADER_SIZE:
            raise WireFormatError(f"truncated header: {len(buf)} of {HEADER_SIZE} bytes", len(buf))
        magic, version, tag, elem, block, _, tokens, cols, scale_len, data_len = _HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise WireFormatError(f"bad magic {bytes(magic)!r}", 0)
        if version != VERSION:
            raise WireFormatError(f"unsupported version {version}", 4)
        if tag not in _TAG_FORMATS:
            raise WireFormatError(f"unknown format tag {tag}", 6)
        if elem not in (1, 4):
            raise WireFormatError(f"unsupported scale element size {elem}", 7)
        fmt = _TAG_FORMATS[tag]
        expected_block = MX_BLOCK if fmt == "fp4" else FP8_BLOCK
        if block != expected_block:
            raise WireFormatError(f"block size {block} invalid for {fmt}", 8)
        if cols % expected_block:
            raise WireFormatError(f"cols={cols} not a multiple of {expected_block}", 20)
        header = PacketHeader(fmt, tokens, cols, elem, block, version)
        want_scale, want_data = header.region_lengths()
        if scale_len != want_scale:
            raise WireFormatError(f"scale region length {scale_len}, layout needs {want_scale}", 28)
        if data_len != want_data:
            raise WireFormatError(f"data region length {data_len}, layout needs {want_data}", 36)
        end = HEADER_SIZE + scale_len + data_len
        if len(buf) < end:
            raise WireFormatError(f"truncated packet: {len(buf)} of {end} bytes", len(buf))
        if len(buf) > end:
            raise WireFormatError(f"{len(buf) - end} trailing bytes", end)
        scale_region = bytes(buf[HEADER_SIZE : HEADER_SIZE + scale_len])
        data_region = bytes(buf[HEADER_SIZE + scale_len : end])
        return cls(header, scale_region, data_region)


def _scale_region(scales: np.ndarray, elem_size: int) -> bytes:
    if elem_size == 1:
        return np.ascontiguousarray(scales, dtype=np.uint8).tobytes()
    return ue8m0_to_binary32_bits(scales).astype("<u4").tobytes()


def _read_scales(region: bytes, elem_size: int, shape: tuple[int, int]) -> np.ndarray:
    # element size comes from the header; nothing assumes 4-byte scales
    if elem_size == 1:
        flat = np.frombuffer(region, dtype=np.uint8)
    else:
        try:
            flat = binary32_bits_to_ue8m0(np.frombuffer(region, dtype="<u4"))
        except ValueError as exc:
            raise WireFormatError(f"scale region: {exc}", HEADER_SIZE) from exc
    return flat.reshape(shape).copy()


def fp4_packet(t: MXFP4RowTensor, scale_elem_size: int = 1) -> WirePacket:
    header = PacketHeader("fp4", t.rows, t.cols, scale_elem_size, MX_BLOCK)
    return WirePacket(header, _scale_region(t.scales, scale_elem_size), t.data.tobytes())


def fp8_packet(t: FP8BlockTensor, scale_elem_size: int = FP8_SCALE_BYTES) -> WirePacket:
    if t.layout != "row":
        raise ValueError("only row-layout FP8 tensors are dispatched")
    rows, cols = t.data.shape
    header = PacketHeader("fp8", rows, cols, scale_elem_size, FP8_BLOCK)
    return WirePacket(header, _scale_region(t.scales, scale_elem_size), t.data.tobytes())


def packet_tensor(p: WirePacket) -> MXFP4RowTensor | FP8BlockTensor:
    h = p.header
    if h.fmt == "fp4":
        data = np.frombuffer(p.data_region, dtype=np.uint8).reshape(h.token_count, h.cols // 2).copy()
        scales = _read_scales(p.scale_region, h.scale_elem_size, (h.token_count, h.cols // MX_BLOCK))
        return MXFP4RowTensor(data, scales)
    data = np.frombuffer(p.data_region, dtype=np.uint8).reshape(h.token_count, h.cols).copy()
    scales = _read_scales(p.scale_region, h.scale_elem_size, (h.token_count, h.cols // FP8_BLOCK))
    return FP8BlockTensor(data, scales, "row")


Dispatchable = Union[RaggedFP4Tensor, MXFP4RowTensor, FP8BlockTensor]


def _row_slice(t: Dispatchable, lo: int, hi: int):
    if isinstance(t, RaggedFP4Tensor):
        t = t.as_row_tensor()
    if isinstance(t, MXFP4RowTensor):
        return MXFP4RowTensor(t.data[lo:hi], t.scales[lo:hi])
    return FP8BlockTensor(t.data[lo:hi], t.scales[lo:hi], "row")


def serialize(t: Dispatchable, dest_counts: Sequence[int]) -> list[bytes]:
    """One packet per destination; destination d gets the next ``dest_counts[d]`` rows."""
    rows = t.total_rows if isinstance(t, RaggedFP4Tensor) else t.data.shape[0]
    if sum(dest_counts) != rows or any(c < 0 for c in dest_counts):
        raise ValueError(f"destination counts {list(dest_counts)} do not cover {rows} rows")
    packets = []
    lo = 0
    for count in dest_counts:
        part = _row_slice(t, lo, lo + count)
        pkt = fp4_packet(part) if isinstance(part, MXFP4RowTensor) else fp8_packet(part)
        packets.append(pkt.to_bytes())
        lo += count
    return packets


def deserialize(packets: Sequence[bytes], split_lens: Sequence[int] | None = None):
    """Concatenate packets back into one tensor.

    FP4 packets give an :class:`MXFP4RowTensor`, or a :class:`RaggedFP4Tensor`
    when ``split_lens`` (exchanged out of band) is given. FP8 packets give a
    row-layout :class:`FP8BlockTensor`.
    """
    parts = [packet_tensor(WirePacket.from_bytes(p)) for p in packets]
    if not parts:
        raise ValueError("no packets to deserialize")
    kinds = {type(p) for p in parts}
    widths = {p.data.shape[1] for p in parts}
    if len(kinds) > 1 or len(widths) > 1:
        raise WireFormatError("packets disagree on format or cols", 0)
    data = np.concatenate([p.data for p in parts])
    scales = np.concatenate([p.scales for p in parts])
    if isinstance(parts[0], FP8BlockTensor):
        return FP8BlockTensor(data, scales, "row")
    if split_lens is not None:
        return RaggedFP4Tensor(tuple(split_lens), data, scales)
    return MXFP4RowTensor(data, scales)


# ---------------------------------------------------------------------------
# FP8 baseline quantization
# ---------------------------------------------------------------------------


def quantize_fp8_rows(src) -> FP8BlockTensor:
    """BF16 -> FP8 E4M3 with a power-of-two scale per 1x128 block (baseline path)."""
    bits = as_bf16_bits(src)
    if bits.ndim != 2 or bits.shape[1] % FP8_BLOCK:
        raise ShapeError(f"expected (rows, k*{FP8_BLOCK}) matrix, got {bits.shape}")
    mag = (bits & 0x7FFF).reshape(bits.shape[0], bits.shape[1] // FP8_BLOCK, FP8_BLOCK)
    if np.any(mag > 0x7F80):
        raise QuantizationError("NaN input")
    peak = np.where(mag < 0x7F80, mag, 0).max(axis=2)
    # 448 = 1.11b * 2**8
    exp_field = (peak >> 7).astype(np.int64)
    byte = exp_field - 8 + ((peak & 0x7F) > 0x60)
    scales = np.clip(np.where(exp_field == 0, 0, byte), 0, 254).astype(np.uint8)
    vals = bf16_to_float(bits).astype(np.float64)
    data = encode_fp8(vals / np.repeat(ue8m0_to_float(scales), FP8_BLOCK, axis=1))
    return FP8BlockTensor(data, scales, "row")


# ---------------------------------------------------------------------------
# routing and the A2A simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoutingAssignment:
    """Top-1 routing: one expert per token, one rank per expert."""

    expert_of_token: np.ndarray
    rank_of_expert: np.ndarray

    def __post_init__(self) -> None:
        e = np.asarray(self.expert_of_token, dtype=np.int64)
        r = np.asarray(self.rank_of_expert, dtype=np.int64)
        if e.ndim != 1 or r.ndim != 1:
            raise ValueError("routing tables must be 1-D")
        if e.size and (e.min() < 0 or e.max() >= r.size):
            raise ValueError("token routed to a nonexistent expert")
        if r.size and r.min() < 0:
            raise ValueError("negative rank index")
        object.__setattr__(self, "expert_of_token", e)
        object.__setattr__(self, "rank_of_expert", r)

    @property
    def num_tokens(self) -> int:
        return self.expert_of_token.size

    @property
    def num_experts(self) -> int:
        return self.rank_of_expert.size

    @classmethod
    def contiguous_placement(cls, expert_of_token, num_experts: int, num_ranks: int) -> "RoutingAssignment":
        ranks = np.arange(num_experts) * num_ranks // num_experts
        return cls(np.asarray(expert_of_token), ranks)

    @classmethod
    def random(cls, num_tokens: int, num_experts: int, num_ranks: int, rng: np.random.Generator):
        return cls.contiguous_placement(rng.integers(0, num_experts, num_tokens), num_experts, num_ranks)


@dataclass(frozen=True)
class LinkStat:
    src: int
    dst: int
    bytes: int
    tokens: int
    wire_bytes: int

    def record(self) -> str:
        return json.dumps(
            {"src": self.src, "dst": self.dst, "bytes": self.bytes, "tokens": self.tokens,
             "wire_bytes": self.wire_bytes},
            sort_keys=True,
        )


@dataclass
class RankInbox:
    """Everything one rank received, grouped by its local experts."""

    rank: int
    experts: tuple[int, ...]
    split_lens: tuple[int, ...]
    token_ids: np.ndarray
    tensor: RaggedFP4Tensor | FP8BlockTensor


@dataclass
class A2AResult:
    fmt: Format
    inboxes: list[RankInbox]
    links: list[LinkStat]
    source_tensors: list[MXFP4RowTensor | FP8BlockTensor] = field(repr=False)

    @property
    def total_bytes(self) -> int:
        return sum(link.bytes for link in self.links)

    @property
    def remote_bytes(self) -> int:
        return sum(link.bytes for link in self.links if link.src != link.dst)

    def records(self) -> list[str]:
        return [link.record() for link in self.links]


def source_rank_of_tokens(num_tokens: int, num_ranks: int) -> np.ndarray:
    return np.arange(num_tokens) * num_ranks // max(num_tokens, 1)


def simulate_a2a(
    tokens,
    routing: RoutingAssignment,
    num_ranks: int,
    fmt: Format = "fp4",
    direction: Literal["forward", "backward"] = "forward",
) -> A2AResult:
    """Dispatch ``tokens`` (BF16, M x K) to the ranks hosting their experts.

    Each source rank owns a contiguous slice of tokens, quantizes it once and
    sends one packet to every rank (empty packets included). The gradient
    direction only supports fp8.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    if direction == "backward" and fmt != "fp8":
        raise ValueError("gradient-path dispatch uses the fp8 flow; fp4 is forward-only")
    if fmt not in _FORMAT_TAGS:
        raise ValueError(f"unknown format {fmt!r}")
    bits = as_bf16_bits(tokens)
    if bits.ndim != 2:
        raise ShapeError("tokens must be a 2-D matrix")
    m, k = bits.shape
    if k % FP8_BLOCK:
        raise ShapeError(f"K={k} is not a multiple of {FP8_BLOCK}")
    if routing.num_tokens != m:
        raise ValueError(f"routing covers {routing.num_tokens} tokens, tensor has {m}")
    if routing.num_experts and routing.rank_of_expert.max() >= num_ranks:
        raise ValueError("expert placed on a nonexistent rank")

    src_of_token = source_rank_of_tokens(m, num_ranks)
    dst_of_token = routing.rank_of_expert[routing.expert_of_token] if m else np.zeros(0, np.int64)
    quantize = quantize_row_tensor if fmt == "fp4" else quantize_fp8_rows

    def send(src: int):
        local = np.nonzero(src_of_token == src)[0]
        q = quantize(bits[local])
        out = []
        for dst in range(num_ranks):
            pick = local[dst_of_token[local] == dst]
            order = np.lexsort((pick, routing.expert_of_token[pick]))
            pick = pick[order]
            rows = np.searchsorted(local, pick)
            part = _gather_rows(q, rows)
            pkt = (fp4_packet(part) if fmt == "fp4" else fp8_packet(part)).to_bytes()
            out.append((dst, pick, pkt))
        return q, out

    threads = min(_parallel.thread_count(), max(num_ranks, 1))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            sent = list(pool.map(send, range(num_ranks)))
    else:
        sent = [send(src) for src in range(num_ranks)]

    links: list[LinkStat] = []
    mailbox: dict[int, list[tuple[np.ndarray, bytes]]] = {d: [] for d in range(num_ranks)}
    for src, (_, out) in enumerate(sent):
        for dst, pick, pkt in out:
            payload = WirePacket.from_bytes(pkt).payload_size
            links.append(LinkStat(src, dst, payload, int(pick.size), len(pkt)))
            mailbox[dst].append((pick, pkt))

    inboxes = [_receive(dst, mailbox[dst], routing, fmt, k) for dst in range(num_ranks)]
    return A2AResult(fmt, inboxes, links, [q for q, _ in sent])


def _gather_rows(t, rows: np.ndarray):
    if isinstance(t, MXFP4RowTensor):
        return MXFP4RowTensor(t.data[rows], t.scales[rows])
    return FP8BlockTensor(t.data[rows], t.scales[rows], "row")


def _receive(dst: int, arrivals, routing: RoutingAssignment, fmt: Format, cols: int) -> RankInbox:
    experts = tuple(int(e) for e in np.nonzero(routing.rank_of_expert == dst)[0])
    token_ids = np.concatenate([pick for pick, _ in arrivals]) if arrivals else np.zeros(0, np.int64)
    merged = deserialize([pkt for _, pkt in arrivals])
    # regroup by local expert; stable so source order is kept within an expert
    order = np.argsort(routing.expert_of_token[token_ids], kind="stable")
    token_ids = token_ids[order]
    counts = np.bincount(routing.expert_of_token[token_ids], minlength=routing.num_experts)
    split_lens = tuple(int(counts[e]) for e in experts)
    data, scales = merged.data[order], merged.scales[order]
    if fmt == "fp4":
        tensor: RaggedFP4Tensor | FP8BlockTensor = RaggedFP4Tensor(split_lens, data, scales)
    else:
        tensor = FP8BlockTensor(data.reshape(len(order), cols), scales.reshape(len(order), cols // FP8_BLOCK), "row")
    return RankInbox(dst, experts, split_lens, token_ids, tensor)


# ---------------------------------------------------------------------------
# expert compute and combine
# ---------------------------------------------------------------------------


def expert_forward_emulated(
    received: RaggedFP4Tensor,
    expert_weights: Sequence[np.ndarray],
    delta: int = DELTA,
) -> np.ndarray:
    """FP4 -> FP8 blocks -> exact reals -> float64 GEMM -> BF16, per split.

    ``expert_weights[i]`` is the (K, N) weight of split ``i``. Returns BF16
    bit patterns of shape (total_rows, N) in split order.
    """
    if len(expert_weights) != received.num_splits:
        raise ShapeError(f"{len(expert_weights)} weight matrices for {received.num_splits} splits")
    outs = []
    width = None
    for i, w in enumerate(expert_weights):
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != received.cols:
            raise ShapeError(f"weight {i} has shape {w.shape}, expected ({received.cols}, N)")
        if width is not None and w.shape[1] != width:
            raise ShapeError("expert weights disagree on output width")
        width = w.shape[1]
        x = fp4_row_to_fp8_row(split_view(received, i), delta).dequantize()
        outs.append(float_to_bf16(x @ w))
    if not outs:
        return np.zeros((0, 0), np.uint16)
    return np.concatenate(outs)


def _fp8_forward(inbox: RankInbox, expert_weights: Sequence[np.ndarray]) -> np.ndarray:
    x = inbox.tensor.dequantize()
    offsets = np.concatenate([[0], np.cumsum(inbox.split_lens)])
    outs = []
    for j, e in enumerate(inbox.experts):
        w = np.asarray(expert_weights[e], dtype=np.float64)
        outs.append(float_to_bf16(x[offsets[j] : offsets[j + 1]] @ w))
    return np.concatenate(outs)


def combine(outputs, token_ids, gate_weights, num_tokens: int) -> np.ndarray:
    """Scatter expert outputs back to token order, gate-weight and sum, round once to BF16.

    ``outputs`` holds BF16 bit patterns, one row per dispatched (token,
    expert) entry; ``gate_weights`` is indexed by token. Accumulates in
    float64.
    """
    out = np.asarray(outputs, dtype=np.uint16)
    ids = np.asarray(token_ids, dtype=np.int64)
    gates = np.asarray(gate_weights, dtype=np.float64)
    if out.shape[0] != ids.size:
        raise ShapeError(f"{out.shape[0]} output rows for {ids.size} token ids")
    covered = np.bincount(ids, minlength=num_tokens) if ids.size else np.zeros(num_tokens, np.int64)
    if covered.size > num_tokens or not np.all(covered[:num_tokens] > 0):
        missing = np.nonzero(covered[:num_tokens] == 0)[0]
        raise ValueError(f"missing token coverage for tokens {missing[:8].tolist()}")
    width = out.shape[1] if out.ndim == 2 else 0
    acc = np.zeros((num_tokens, width), dtype=np.float64)
    np.add.at(acc, ids, gates[ids, None] * bf16_to_float(out).astype(np.float64))
    return float_to_bf16(acc)


def run_moe_layer(
    tokens,
    routing: RoutingAssignment,
    num_ranks: int,
    expert_weights: Sequence[np.ndarray],
    gate_weights,
    fmt: Format = "fp4",
) -> tuple[np.ndarray, A2AResult]:
    """quantize -> dispatch -> (FP4 -> FP8) -> emulated GEMM -> combine."""
    result = simulate_a2a(tokens, routing, num_ranks, fmt)
    outs, ids = [], []
    for inbox in result.inboxes:
        if not inbox.token_ids.size:
            continue
        if fmt == "fp4":
            ws = [expert_weights[e] for e in inbox.experts]
            outs.append(expert_forward_emulated(inbox.tensor, ws))
        else:
            outs.append(_fp8_forward(inbox, expert_weights))
        ids.append(inbox.token_ids)
    return combine(np.concatenate(outs), np.concatenate(ids), gate_weights, routing.num_tokens), result


def reference_moe_layer(tokens, routing: RoutingAssignment, expert_weights, gate_weights) -> np.ndarray:
    """BF16-only reference: no quantization, float64 GEMM rounded to BF16."""
    bits = as_bf16_bits(tokens)
    x = bf16_to_float(bits).astype(np.float64)
    ys = np.stack([float_to_bf16(x[t] @ np.asarray(expert_weights[e], np.float64))
                   for t, e in enumerate(routing.expert_of_token)])
    return combine(ys, np.arange(routing.num_tokens), gate_weights, routing.num_tokens)
