import json
from fractions import Fraction

import numpy as np
import pytest

from mxcodec.bitcodec import bf16_to_float, float_to_bf16
from mxcodec.dispatch_sim import (
    HEADER_SIZE,
    RoutingAssignment,
    WirePacket,
    combine,
    deserialize,
    expert_forward_emulated,
    fp8_packet,
    payload_bytes,
    quantize_fp8_rows,
    reference_moe_layer,
    run_moe_layer,
    serialize,
    simulate_a2a,
)
from mxcodec.errors import ShapeError, WireFormatError
from mxcodec.quantizer import quantize_row_tensor
from mxcodec.ragged import build_ragged, split_view


def test_payload_examples():
    assert payload_bytes("fp8", 256, 256) == 67584
    assert payload_bytes("fp4", 256, 256) == 34816
    assert Fraction(34816, 67584) == Fraction(17, 33)
    assert payload_bytes("fp4", 0, 128) == 0
    with pytest.raises(ShapeError):
        payload_bytes("fp4", 4, 96)
    with pytest.raises(ValueError):
        payload_bytes("fp16", 4, 128)


def test_serialize_roundtrip_and_sizes(rng):
    t = build_ragged([rng.standard_normal((n, 256)) for n in (5, 0, 9, 2)])
    dests = [4, 0, 12]
    packets = serialize(t, dests)
    assert [len(p) - HEADER_SIZE for p in packets] == [payload_bytes("fp4", n, 256) for n in dests]
    assert deserialize(packets, t.split_lens) == t
    empty = WirePacket.from_bytes(packets[1])
    assert empty.header.token_count == 0 and empty.payload_size == 0


def test_single_destination_data_is_verbatim(rng):
    t = quantize_row_tensor(rng.standard_normal((6, 128)))
    (pkt,) = serialize(t, [6])
    p = WirePacket.from_bytes(pkt)
    assert p.data_region == t.data.tobytes()
    assert p.scale_region == t.scales.tobytes()


def test_fp8_packets_use_binary32_scales(rng):
    t = quantize_fp8_rows(float_to_bf16(rng.standard_normal((3, 256))))
    p = fp8_packet(t)
    assert p.header.scale_elem_size == 4
    assert len(p.scale_region) == 3 * 2 * 4
    assert len(p.to_bytes()) == HEADER_SIZE + payload_bytes("fp8", 3, 256)
    assert deserialize([p.to_bytes()]) == t
    # the same layout with one-byte scales also decodes
    assert deserialize([fp8_packet(t, scale_elem_size=1).to_bytes()]) == t


def test_corrupt_packets_report_offsets(rng):
    pkt = serialize(quantize_row_tensor(rng.standard_normal((2, 128))), [2])[0]
    cases = {
        b"XXXX" + pkt[4:]: 0,
        pkt[:10]: 10,
        pkt[:-1]: len(pkt) - 1,
        pkt + b"\0": len(pkt),
        pkt[:6] + b"\x07" + pkt[7:]: 6,
    }
    for buf, offset in cases.items():
        with pytest.raises(WireFormatError) as err:
            WirePacket.from_bytes(buf)
        assert err.value.offset == offset
        assert f"offset {offset}" in str(err.value)


def test_one_rank_identity(rng):
    x = float_to_bf16(rng.standard_normal((10, 128)))
    routing = RoutingAssignment(np.zeros(10, np.int64), np.zeros(1, np.int64))
    res = simulate_a2a(x, routing, 1)
    assert res.remote_bytes == 0
    assert res.inboxes[0].tensor.as_row_tensor() == quantize_row_tensor(x)


def test_uniform_routing_balances_links(rng):
    m, ranks = 64, 4
    x = float_to_bf16(rng.standard_normal((m, 128)))
    routing = RoutingAssignment.contiguous_placement(np.arange(m) % ranks, ranks, ranks)
    res = simulate_a2a(x, routing, ranks)
    per_token = payload_bytes("fp4", 1, 128)
    sizes = [link.bytes for link in res.links]
    assert max(sizes) - min(sizes) <= per_token
    for line in res.records():
        rec = json.loads(line)
        assert set(rec) >= {"src", "dst", "bytes", "tokens"}


def test_fp4_vs_fp8_totals(rng):
    x = float_to_bf16(rng.standard_normal((48, 256)))
    routing = RoutingAssignment.random(48, 4, 2, rng)
    a = simulate_a2a(x, routing, 2, "fp4")
    b = simulate_a2a(x, routing, 2, "fp8")
    assert a.total_bytes == payload_bytes("fp4", 48, 256)
    assert a.total_bytes * 33 == b.total_bytes * 17


def test_quantize_once(rng):
    x = float_to_bf16(rng.standard_normal((40, 128)))
    routing = RoutingAssignment.random(40, 4, 2, rng)
    res = simulate_a2a(x, routing, 2)
    local = quantize_row_tensor(x)
    for inbox in res.inboxes:
        got = inbox.tensor.as_row_tensor()
        assert np.array_equal(got.data, local.data[inbox.token_ids])
        assert np.array_equal(got.scales, local.scales[inbox.token_ids])
    ids = np.sort(np.concatenate([i.token_ids for i in res.inboxes]))
    assert np.array_equal(ids, np.arange(40))


def test_backward_refuses_fp4(rng):
    x = float_to_bf16(rng.standard_normal((4, 128)))
    routing = RoutingAssignment(np.zeros(4, np.int64), np.zeros(1, np.int64))
    with pytest.raises(ValueError):
        simulate_a2a(x, routing, 1, "fp4", direction="backward")
    assert simulate_a2a(x, routing, 1, "fp8", direction="backward").total_bytes == payload_bytes("fp8", 4, 128)


def test_rank_scheduling_does_not_matter(rng, monkeypatch):
    x = float_to_bf16(rng.standard_normal((50, 128)))
    routing = RoutingAssignment.random(50, 6, 3, rng)
    monkeypatch.setenv("MXCODEC_THREADS", "1")
    a = simulate_a2a(x, routing, 3)
    monkeypatch.setenv("MXCODEC_THREADS", "3")
    b = simulate_a2a(x, routing, 3)
    assert a.records() == b.records()
    assert all(p.tensor == q.tensor for p, q in zip(a.inboxes, b.inboxes))


def test_expert_forward_examples(rng):
    x = np.tile([0.5, 1.0, -1.5, 6.0], (3, 32))
    t = build_ragged([x])
    out = expert_forward_emulated(t, [np.eye(128)])
    assert np.array_equal(bf16_to_float(out), x)
    assert not bf16_to_float(expert_forward_emulated(t, [np.zeros((128, 8))])).any()
    with pytest.raises(ShapeError):
        expert_forward_emulated(t, [np.eye(64)])


def test_combine_examples(rng):
    y = float_to_bf16(rng.standard_normal((5, 8)))
    perm = rng.permutation(5)
    assert np.array_equal(combine(y[perm], perm, np.ones(5), 5), y)
    # two experts per token with gates (1, 0)
    z = float_to_bf16(rng.standard_normal((5, 8)))
    ids = np.concatenate([np.arange(5), np.arange(5)])
    out = combine(np.concatenate([y, z]), ids, np.ones(5), 5)
    ref = float_to_bf16(bf16_to_float(y).astype(np.float64) + bf16_to_float(z))
    assert np.array_equal(out, ref)
    with pytest.raises(ValueError):
        combine(y[:4], np.arange(4), np.ones(5), 5)


def test_combine_matches_plain_reduction(rng):
    y = float_to_bf16(rng.standard_normal((30, 16)))
    ids = rng.permutation(30)
    gates = rng.random(30)
    want = np.zeros((30, 16))
    for row, t in enumerate(ids):
        want[t] += gates[t] * bf16_to_float(y[row:row + 1])[0]
    assert np.array_equal(combine(y, ids, gates, 30), float_to_bf16(want))


def test_moe_layer_identity_experts_exact_values(rng):
    x = float_to_bf16(np.tile([1.0, -2.0, 3.0, 0.5], (16, 32)))
    routing = RoutingAssignment.random(16, 4, 2, rng)
    eye = [np.eye(128)] * 4
    out, _ = run_moe_layer(x, routing, 2, eye, np.ones(16))
    assert np.array_equal(out, x)
    assert np.array_equal(reference_moe_layer(x, routing, eye, np.ones(16)), x)
