import numpy as np
import pytest
import torch

from partforge.geometry import Aabb, Vec3, iou
from partforge.layout import (
    BoxCodec,
    LayoutSequence,
    PartTokenSet,
    add_box_id,
    add_box_ids,
    assemble_layout,
    boxes_to_layout_json,
    codec_roundtrip_error,
    decode_and_filter,
    encode_box,
    hexahedron_validity_iou,
    layout_json_to_boxes,
    top_k_by_volume,
    train_box_codec,
)


def box(mn, mx) -> Aabb:
    return Aabb(Vec3(*mn), Vec3(*mx))


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    c = BoxCodec(tokens_per_part=4, width=32)
    train_box_codec(c, steps=3000, batch=128, lr=5e-3, seed=0)
    return c


@pytest.fixture()
def raw_codec():
    torch.manual_seed(1)
    return BoxCodec(tokens_per_part=4, width=32)


# ----------------------------------------------------------------- encoding

def test_encode_box_deterministic(raw_codec):
    b = box((0, 0, 0), (0.5, 0.5, 0.5))
    a = encode_box(raw_codec, b)
    c = encode_box(raw_codec, b)
    assert torch.equal(a.tokens, c.tokens)
    assert a.tokens.shape == (4, 32)


def test_encode_box_injective_smoke(raw_codec):
    a = encode_box(raw_codec, box((0, 0, 0), (0.5, 0.5, 0.5)))
    b = encode_box(raw_codec, box((0, 0, 0), (0.7, 0.5, 0.5)))
    assert not torch.allclose(a.tokens, b.tokens)


def test_encode_box_rejects_degenerate(raw_codec):
    from partforge.geometry import DegenerateBoxError

    with pytest.raises(DegenerateBoxError):
        encode_box(raw_codec, box((0, 0, 0), (0, 1, 1)))


def test_trained_codec_roundtrip_under_tolerance(codec):
    assert codec_roundtrip_error(codec, n_boxes=256, seed=7) <= 0.01


def test_trained_codec_zero_tokens_decode_degenerate(codec):
    verts = codec.decode_tokens(torch.zeros(4, 32))
    frac, aabb = hexahedron_validity_iou(verts.detach().numpy())
    assert aabb is None or aabb.volume() < 1e-4


# ------------------------------------------------------------------- box ids

def test_add_box_id_zero_table_is_identity():
    ts = PartTokenSet(2, torch.randn(4, 8))
    table = torch.zeros(5, 8)
    out = add_box_id(ts, table)
    assert torch.equal(out.tokens, ts.tokens)


def test_add_box_id_twice_adds_twice():
    gen = torch.Generator().manual_seed(0)
    ts = PartTokenSet(1, torch.randn(4, 8, generator=gen))
    table = torch.randn(5, 8, generator=gen)
    out = add_box_id(add_box_id(ts, table), table)
    assert torch.allclose(out.tokens, ts.tokens + 2 * table[1], atol=1e-6)


def test_add_box_id_matches_rowwise_oracle():
    gen = torch.Generator().manual_seed(1)
    ts = PartTokenSet(3, torch.randn(6, 8, generator=gen))
    table = torch.randn(5, 8, generator=gen)
    out = add_box_id(ts, table)
    for row_out, row_in in zip(out.tokens, ts.tokens):
        assert torch.allclose(row_out, row_in + table[3], atol=1e-7)


def test_add_box_id_rejects_out_of_range():
    ts = PartTokenSet(9, torch.zeros(2, 8))
    with pytest.raises(ValueError):
        add_box_id(ts, torch.zeros(5, 8))


def test_add_box_ids_skips_padded_slots(raw_codec):
    seq = assemble_layout(raw_codec, [box((0, 0, 0), (0.4, 0.4, 0.4))], capacity=3)
    table = torch.randn(4, 32, generator=torch.Generator().manual_seed(2))
    out = add_box_ids(seq, table)
    for slot, real in zip(out.slots, out.mask):
        if not real:
            assert torch.equal(slot.tokens, torch.zeros_like(slot.tokens))


# ------------------------------------------------------------------ assembly

def test_assemble_layout_full_capacity(raw_codec):
    boxes = [box((i * 0.05, 0, 0), (i * 0.05 + 0.04, 0.04, 0.04)) for i in range(3)]
    seq = assemble_layout(raw_codec, boxes, capacity=3)
    assert len(seq.slots) == 4
    assert seq.mask == [True, True, True, True]


def test_assemble_layout_padding_and_mask(raw_codec):
    boxes = [box((0, 0, 0), (0.2, 0.2, 0.2)), box((0.5, 0.5, 0.5), (0.9, 0.9, 0.9))]
    seq = assemble_layout(raw_codec, boxes, capacity=30)
    assert len(seq.slots) == 31
    assert sum(seq.mask) == 3  # global + 2 parts
    for slot, real in zip(seq.slots, seq.mask):
        if not real:
            assert torch.equal(slot.tokens, torch.zeros_like(slot.tokens))


def test_assemble_layout_rejects_empty(raw_codec):
    with pytest.raises(ValueError):
        assemble_layout(raw_codec, [], capacity=4)


def test_assemble_layout_overflow_keeps_largest(raw_codec):
    rng = np.random.default_rng(0)
    boxes = []
    for i in range(35):
        lo = rng.uniform(-1, 0.4, 3)
        ext = rng.uniform(0.05, 0.5, 3)
        boxes.append(Aabb.from_arrays(lo, np.minimum(lo + ext, 1.0)))
    keep = top_k_by_volume(boxes, 30)
    # independent sort oracle
    vols = [(-b.volume(), i) for i, b in enumerate(boxes)]
    expect = sorted(sorted(vols)[:30], key=lambda t: t[1])
    assert keep == [i for _, i in expect]
    seq = assemble_layout(raw_codec, boxes, capacity=30)
    assert len(seq.slots) == 31 and all(seq.mask)


def test_assemble_layout_length_is_capacity_plus_one(raw_codec):
    for count in (1, 2, 5):
        boxes = [box((0.1 * i, 0, 0), (0.1 * i + 0.08, 0.3, 0.3)) for i in range(count)]
        seq = assemble_layout(raw_codec, boxes, capacity=5)
        assert len(seq.slots) == 6


# ----------------------------------------------------------------- filtering

def test_validity_iou_exact_for_cuboid():
    verts = box((0.1, 0.2, 0.3), (0.5, 0.6, 0.7)).corners()
    frac, aabb = hexahedron_validity_iou(verts)
    assert frac == pytest.approx(1.0)
    assert np.allclose(aabb.min_array(), [0.1, 0.2, 0.3])


def test_validity_iou_degenerate_vertices():
    verts = np.tile(np.array([0.3, 0.3, 0.3]), (8, 1))
    frac, aabb = hexahedron_validity_iou(verts)
    assert frac == 0.0 and aabb is None


def test_validity_iou_sheared_half():
    # Shear x += z maps the unit cube to volume 1 inside an AABB of volume 2.
    verts = box((0, 0, 0), (1, 1, 1)).corners().copy()
    verts[:, 0] += verts[:, 2]
    frac, _ = hexahedron_validity_iou(verts)
    assert frac == pytest.approx(0.5, abs=0.02)


def test_decode_and_filter_keeps_exact_boxes(codec):
    b = box((-0.3, -0.2, 0.0), (0.4, 0.5, 0.6))
    seq = assemble_layout(codec, [b], capacity=3)
    out = decode_and_filter(codec, seq, validity_iou=0.85, nms_iou=0.7, samples_per_axis=32)
    assert len(out) == 1
    assert np.allclose(out[0].min_array(), b.min_array(), atol=0.01)


def test_decode_and_filter_drops_degenerate_and_padding(codec):
    b = box((0, 0, 0), (0.5, 0.5, 0.5))
    seq = assemble_layout(codec, [b], capacity=4)
    # overwrite slot 2 with a token block decoding to coincident vertices (zeros)
    seq.slots[2] = PartTokenSet(2, torch.zeros_like(seq.slots[1].tokens))
    seq.mask[2] = True
    out = decode_and_filter(codec, seq, samples_per_axis=32)
    assert len(out) == 1


def test_decode_and_filter_applies_nms(codec):
    b = box((0, 0, 0), (0.5, 0.5, 0.5))
    seq = assemble_layout(codec, [b, b], capacity=4)  # duplicates: IoU ~ 1
    out = decode_and_filter(codec, seq, samples_per_axis=32)
    assert len(out) == 1
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            assert iou(out[i], out[j]) <= 0.7


def test_decode_and_filter_sheared_slot_discarded(codec):
    b = box((0, 0, 0), (0.5, 0.5, 0.5))
    seq = assemble_layout(codec, [b], capacity=2)

    class ShearCodec:
        m, d = codec.m, codec.d

        def decode_tokens(self, tokens):
            verts = codec.decode_tokens(tokens)
            sheared = verts.clone()
            sheared[:, 0] += sheared[:, 2]
            return sheared

    out = decode_and_filter(ShearCodec(), seq, validity_iou=0.85, samples_per_axis=32)
    assert out == []


# ---------------------------------------------------------------- exchange

def test_layout_json_roundtrip():
    boxes = [box((0, 0, 0), (0.5, 0.5, 0.5)), box((-0.4, -0.4, -0.4), (0.0, 0.1, 0.2))]
    payload = boxes_to_layout_json(boxes)
    back = layout_json_to_boxes(payload)
    for a, b in zip(boxes, back):
        assert np.allclose(a.min_array(), b.min_array())
        assert np.allclose(a.max_array(), b.max_array())
