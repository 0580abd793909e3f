import numpy as np
import pytest
import torch

from partforge.encoding import (
    CenterCornerKey,
    EmbeddingTable,
    QuantCoord,
    cell_key,
    cell_keys_array,
    embed,
    quantize,
)
from partforge.geometry import Aabb, Vec3


def box(mn, mx) -> Aabb:
    return Aabb(Vec3(*mn), Vec3(*mx))


UNIT = box((-1, -1, -1), (1, 1, 1))


def test_worked_example_unit_box_cell_zero():
    key = cell_key(UNIT, (0, 0, 0), n=64, r=2048)
    assert key.center.as_tuple() == (16, 16, 16)
    corner_coords = {c.as_tuple() for c in key.corners}
    assert corner_coords == {(a, b, c) for a in (0, 32) for b in (0, 32) for c in (0, 32)}
    # binary ordering: corner i flips x for bit0, y for bit1, z for bit2
    assert key.corners[0].as_tuple() == (0, 0, 0)
    assert key.corners[1].as_tuple() == (32, 0, 0)
    assert key.corners[2].as_tuple() == (0, 32, 0)
    assert key.corners[7].as_tuple() == (32, 32, 32)


def test_unit_box_key_equals_global_branch_key():
    for cell in [(0, 0, 0), (5, 9, 13), (15, 15, 15)]:
        a = cell_key(UNIT, cell, n=16)
        b = cell_key(box((-1, -1, -1), (1, 1, 1)), cell, n=16)
        assert a == b


def test_boundary_plus_one_clamps_to_last_lattice_cell():
    assert quantize(np.array([1.0]), r=2048)[0] == 2047
    key = cell_key(UNIT, (63, 63, 63), n=64, r=2048)
    assert key.corners[7].as_tuple() == (2047, 2047, 2047)


def test_cell_out_of_range_rejected():
    with pytest.raises(ValueError):
        cell_key(UNIT, (16, 0, 0), n=16)
    with pytest.raises(ValueError):
        cell_key(UNIT, (-1, 0, 0), n=16)


def test_corners_bracket_center():
    b = box((-0.3, 0.1, -0.9), (0.4, 0.35, -0.2))
    keys = cell_keys_array(b, [(i, i % 4, i % 8) for i in range(16)], n=16)
    center = keys[:, 0]
    lo = keys[:, 1]
    hi = keys[:, 8]
    assert np.all(lo <= center) and np.all(center <= hi)


def test_scale_awareness_same_center_different_extent():
    # Constructed so cell (0,0,0) of both boxes has the same global center
    # (1/16 per axis) while cell extents differ (1/8 vs 1/16).
    big = box((0, 0, 0), (0.5, 0.5, 0.5))
    small = box((0.03125, 0.03125, 0.03125), (0.28125, 0.28125, 0.28125))
    key_big = cell_key(big, (0, 0, 0), n=4)
    key_small = cell_key(small, (0, 0, 0), n=4)
    assert key_big.center == key_small.center
    assert key_big != key_small  # corners differ: extent is encoded


def test_global_branch_corner_spacing_is_lattice_over_n():
    n, r = 64, 2048
    keys = cell_keys_array(UNIT, [(i, 0, 0) for i in range(n)], n=n, r=r)
    first_corner_x = keys[:, 1, 0]  # corner 0 x coordinate per cell
    spacing = np.diff(first_corner_x)
    assert np.all(spacing == r // n)


def test_sub_box_patch_key_quantization():
    # Part box [0, 0.5]^3 on a 4-cell patch lattice: first cell spans
    # canonical [-1, -0.5]; global endpoints 0 and 0.0625 wait: min + (c+1)/2 * 0.5.
    b = box((0, 0, 0), (0.5, 0.5, 0.5))
    key = cell_key(b, (0, 0, 0), n=4, r=2048)
    # canonical -1 -> global 0 -> lattice floor((1)/2*2048) = 1024
    # canonical -0.5 -> global 0.125 -> floor(1.125/2*2048) = 1152
    # center -0.75 -> global 0.0625 -> floor(1.0625/2*2048) = 1088
    assert key.corners[0].as_tuple() == (1024, 1024, 1024)
    assert key.corners[7].as_tuple() == (1152, 1152, 1152)
    assert key.center.as_tuple() == (1088, 1088, 1088)


def test_key_serializes_to_27_u16():
    key = cell_key(UNIT, (3, 2, 1), n=8)
    raw = key.to_bytes()
    assert len(raw) == 54
    vals = np.frombuffer(raw, dtype="<u2")
    assert tuple(vals[:3]) == key.center.as_tuple()


def test_key_requires_eight_corners():
    with pytest.raises(ValueError):
        CenterCornerKey(QuantCoord(0, 0, 0), tuple(QuantCoord(0, 0, 0) for _ in range(7)))


# ------------------------------------------------------------------ embedding

@pytest.fixture(scope="module")
def table():
    return EmbeddingTable(r=64, dim=16, k_max=4)


def test_embed_deterministic(table):
    key = cell_key(UNIT, (1, 2, 3), n=8, r=64)
    a = embed(table, key, 2)
    b = embed(table, key, 2)
    assert torch.equal(a, b)


def test_embed_id_difference(table):
    key = cell_key(UNIT, (1, 2, 3), n=8, r=64)
    diff = embed(table, key, 1) - embed(table, key, 0)
    expect = table.id_table[1] - table.id_table[0]
    assert torch.allclose(diff, expect, atol=1e-6)


def test_embed_matches_nine_lookup_oracle(table):
    key = cell_key(box((-0.4, -0.2, 0.0), (0.3, 0.5, 0.6)), (2, 5, 1), n=8, r=64)
    got = embed(table, key, 3)
    with torch.no_grad():
        expect = torch.zeros(table.dim)
        for qc in [key.center, *key.corners]:
            expect += table.table_x[qc.ix] + table.table_y[qc.iy] + table.table_z[qc.iz]
        expect += table.id_table[3]
    assert torch.allclose(got, expect, atol=1e-5)


def test_embed_linear_in_tables():
    t1 = EmbeddingTable(r=32, dim=8, k_max=2)
    t2 = EmbeddingTable(r=32, dim=8, k_max=2)
    with torch.no_grad():
        for p2, p1 in zip(t2.parameters(), t1.parameters()):
            p2.copy_(2.0 * p1)
    key = cell_key(UNIT, (1, 1, 1), n=4, r=32)
    assert torch.allclose(embed(t2, key, 1), 2.0 * embed(t1, key, 1), atol=1e-6)


def test_embed_rejects_out_of_range_id(table):
    key = cell_key(UNIT, (0, 0, 0), n=8, r=64)
    with pytest.raises(ValueError):
        embed(table, key, 5)
