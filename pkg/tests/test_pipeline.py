import numpy as np
import pytest
import torch

from partforge.dit import ModelConfig, PartDiT, sample
from partforge.formats import pvox_bytes
from partforge.geometry import Aabb, Vec3
from partforge.layout import BoxCodec
from partforge.pipeline import (
    COARSE_SEED_TAG,
    EmptyLayoutError,
    InvalidEditError,
    PipelineParams,
    StageBundle,
    condition_vector,
    edit_scene,
    generate_parts,
    load_scene,
    run_from_boxes,
    run_full,
    save_scene,
    sequential_sample,
    validate_edit,
)
from partforge.stages import (
    KIND_FEAT_PATCH,
    KIND_FEAT_VOXEL,
    KIND_OCCUPANCY,
    ColorCodec,
    coarse_slot_template,
    generate_coarse,
)
from partforge.utils import hash_tree, mix_seed


def box(mn, mx) -> Aabb:
    return Aabb(Vec3(*mn), Vec3(*mx))


N, P, DF = 8, 2, 4
K_MAX = 5
COND_DIM = 3 * 32 * 32


def _perturb(model, scale=0.02, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen))
    return model


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(0)
    layout_cfg = ModelConfig(depth=2, width=32, heads=2, tokens_per_part=4, k_max=K_MAX,
                             lattice=128, data_widths={"tok": 32}, cond_tokens=2,
                             cond_width=8, cond_input_dim=COND_DIM, time_features=8)
    coarse_cfg = ModelConfig(depth=2, width=32, heads=2, k_max=K_MAX, lattice=128,
                             data_widths={KIND_OCCUPANCY: P**3}, cond_tokens=2,
                             cond_width=8, cond_input_dim=COND_DIM, time_features=8)
    refine_cfg = ModelConfig(depth=2, width=32, heads=2, k_max=K_MAX, lattice=128,
                             data_widths={KIND_FEAT_VOXEL: DF, KIND_FEAT_PATCH: P**3 * DF},
                             cond_tokens=2, cond_width=8, cond_input_dim=COND_DIM,
                             time_features=8)
    codec = BoxCodec(tokens_per_part=4, width=32)
    params = PipelineParams(grid_n=N, patch=P, feature_width=DF, voxel_budget=32,
                            steps=3, cfg_scale=1.0, k_max=K_MAX)
    return StageBundle(
        layout_model=_perturb(PartDiT(layout_cfg), seed=1),
        codec=codec,
        coarse_model=_perturb(PartDiT(coarse_cfg), seed=2),
        refine_model=_perturb(PartDiT(refine_cfg), seed=3),
        color_codec=ColorCodec(DF),
        params=params,
    )


BOXES = [
    box((-0.8, -0.8, -0.8), (-0.2, -0.2, -0.2)),
    box((0.0, 0.0, 0.0), (0.6, 0.5, 0.4)),
    box((-0.5, 0.2, -0.4), (0.1, 0.8, 0.2)),
]
CONDITION = {"category": "table", "sample_seed": 3}


def test_run_from_boxes_records_everything(bundle):
    state = run_from_boxes(bundle, CONDITION, BOXES, seed=7)
    assert state.from_gt_boxes
    assert len(state.parts) == 3
    assert state.global_grid is not None
    for ps in state.parts:
        assert ps.latents.coarse_x0.shape == ps.latents.coarse_eps.shape
        if not ps.empty:
            assert ps.colors is not None
            assert len(ps.colors.positions) == ps.grid.popcount()


def test_scene_directory_determinism(bundle, tmp_path):
    a = run_from_boxes(bundle, CONDITION, BOXES, seed=7)
    b = run_from_boxes(bundle, CONDITION, BOXES, seed=7)
    save_scene(a, tmp_path / "a")
    save_scene(b, tmp_path / "b")
    ha = hash_tree(tmp_path / "a" / a.scene_id)
    hb = hash_tree(tmp_path / "b" / b.scene_id)
    assert ha == hb

    c = run_from_boxes(bundle, CONDITION, BOXES, seed=8)
    save_scene(c, tmp_path / "c")
    assert hash_tree(tmp_path / "c" / c.scene_id) != ha


def test_scene_save_load_roundtrip(bundle, tmp_path):
    state = run_from_boxes(bundle, CONDITION, BOXES, seed=5)
    path = save_scene(state, tmp_path)
    loaded = load_scene(path)
    assert loaded.scene_id == state.scene_id
    assert loaded.condition == state.condition
    assert len(loaded.parts) == len(state.parts)
    for a, b in zip(loaded.parts, state.parts):
        assert a.uid == b.uid
        assert a.grid == b.grid
        assert torch.equal(a.latents.coarse_x0, b.latents.coarse_x0)
        assert torch.equal(a.latents.coarse_eps, b.latents.coarse_eps)
        if b.latents.feat_x0 is not None:
            assert torch.equal(a.latents.feat_x0, b.latents.feat_x0)
    assert loaded.global_grid == state.global_grid


# ------------------------------------------------------------------- editing

def test_edit_freeze_all_no_ops_reproduces_scene(bundle):
    state = run_from_boxes(bundle, CONDITION, BOXES, seed=7)
    out = edit_scene(bundle, state, ops=[], frozen=[p.uid for p in state.parts], seed=99)
    for a, b in zip(out.parts, state.parts):
        assert a.grid == b.grid
        assert torch.equal(a.latents.coarse_x0, b.latents.coarse_x0)
        if b.colors is not None:
            assert np.array_equal(a.colors.colors, b.colors.colors)
    assert out.global_grid == state.global_grid


def test_edit_frozen_parts_bit_exact_and_edited_changes(bundle, tmp_path):
    state = run_from_boxes(bundle, CONDITION, BOXES, seed=7)
    new_box = {"min": [0.0, 0.0, 0.0], "max": [0.9, 0.6, 0.5]}
    out = edit_scene(
        bundle, state,
        ops=[{"op": "transform", "part_id": 2, "box": new_box}],
        frozen=[1, 3], seed=11,
    )
    before = {p.uid: pvox_bytes(p.grid) for p in state.parts}
    after = {p.uid: pvox_bytes(p.grid) for p in out.parts}
    assert after[1] == before[1]
    assert after[3] == before[3]
    assert after[2] != before[2]
    # frozen parts keep colors bit-exactly as well
    for uid in (1, 3):
        a = next(p for p in out.parts if p.uid == uid)
        b = next(p for p in state.parts if p.uid == uid)
        if b.colors is not None:
            assert np.array_equal(a.colors.colors, b.colors.colors)


def test_edit_freeze_none_equals_fresh_generation(bundle):
    state = run_from_boxes(bundle, CONDITION, BOXES, seed=7)
    new_box = {"min": [-0.9, -0.9, -0.9], "max": [-0.1, -0.3, -0.1]}
    out = edit_scene(
        bundle, state,
        ops=[{"op": "transform", "part_id": 1, "box": new_box}],
        frozen=[], seed=21,
    )
    boxes = [p.box for p in out.parts]
    fresh = run_from_boxes(bundle, CONDITION, boxes, seed=21,
                           part_ids=[p.uid for p in out.parts])
    for a, b in zip(out.parts, fresh.parts):
        assert a.uid == b.uid
        assert a.grid == b.grid
        assert torch.equal(a.latents.coarse_x0, b.latents.coarse_x0)


def test_edit_add_and_delete_parts(bundle):
    state = run_from_boxes(bundle, CONDITION, BOXES, seed=7)
    out = edit_scene(
        bundle, state,
        ops=[
            {"op": "delete", "part_id": 2},
            {"op": "add", "box": {"min": [0.2, 0.2, 0.2], "max": [0.8, 0.8, 0.8]}},
        ],
        frozen=[1], seed=13,
    )
    uids = [p.uid for p in out.parts]
    assert uids == [1, 3, 4]  # part 2 gone; new part got uid 4
    assert pvox_bytes(out.part(1).grid) == pvox_bytes(state.part(1).grid)


def test_edit_validation_errors(bundle):
    state = run_from_boxes(bundle, CONDITION, BOXES, seed=7)
    with pytest.raises(InvalidEditError):
        validate_edit(state, [{"op": "explode"}], [])
    with pytest.raises(InvalidEditError):
        validate_edit(state, [{"op": "delete", "part_id": 99}], [])
    with pytest.raises(InvalidEditError):
        validate_edit(state, [{"op": "transform", "part_id": 1,
                               "box": {"min": [0, 0, 0], "max": [0, 1, 1]}}], [])
    with pytest.raises(InvalidEditError):
        validate_edit(state, [{"op": "transform", "part_id": 1,
                               "box": {"min": [0, 0, 0], "max": [0.5, 0.5, 0.5]}}], [1])
    with pytest.raises(InvalidEditError):
        validate_edit(state, [], [42])
    with pytest.raises(InvalidEditError):
        edit_scene(bundle, state,
                   [{"op": "delete", "part_id": uid} for uid in (1, 2, 3)], [], seed=0)


def test_edit_from_loaded_scene_keeps_exactness(bundle, tmp_path):
    state = run_from_boxes(bundle, CONDITION, BOXES, seed=7)
    path = save_scene(state, tmp_path)
    loaded = load_scene(path)
    out = edit_scene(
        bundle, loaded,
        ops=[{"op": "transform", "part_id": 2,
              "box": {"min": [0.0, 0.0, 0.0], "max": [0.9, 0.6, 0.5]}}],
        frozen=[1, 3], seed=17,
    )
    assert pvox_bytes(out.part(1).grid) == pvox_bytes(state.part(1).grid)
    assert pvox_bytes(out.part(3).grid) == pvox_bytes(state.part(3).grid)


# -------------------------------------------------------------- sequential

def _many_boxes(count):
    out = []
    for i in range(count):
        x = -0.9 + (i % 4) * 0.45
        y = -0.9 + ((i // 4) % 4) * 0.45
        z = -0.9 + (i // 16) * 0.45
        out.append(box((x, y, z), (x + 0.4, y + 0.4, z + 0.4)))
    return out


def test_sequential_sample_preserves_ids(bundle):
    boxes = _many_boxes(7)  # > k_max = 5 -> two rounds
    cond_vec = condition_vector(CONDITION)
    parts = sequential_sample(bundle, boxes, cond_vec, seed=9)
    assert [p.part_id for p in parts] == list(range(1, 8))
    assert len(parts) == 7


def test_sequential_degenerates_to_single_round(bundle):
    boxes = _many_boxes(4)  # <= k_max
    cond_vec = condition_vector(CONDITION)
    parts = sequential_sample(bundle, boxes, cond_vec, seed=9)
    direct = generate_coarse(
        bundle.coarse_model, boxes,
        bundle.coarse_model.encode_condition(cond_vec),
        mix_seed(9, COARSE_SEED_TAG), N, P,
        steps=bundle.params.steps, cfg_scale=bundle.params.cfg_scale,
        noise_keys=[0, 1, 2, 3, 4],
    )
    for seq_part, direct_part in zip(parts, direct.parts):
        assert seq_part.grid == direct_part.grid


def test_sequential_round2_global_matches_recorded_interpolation(bundle):
    boxes = _many_boxes(7)
    cond_vec = condition_vector(CONDITION)
    params = bundle.params
    seed2 = mix_seed(9, COARSE_SEED_TAG)
    cond = bundle.coarse_model.encode_condition(cond_vec)

    round1 = generate_coarse(bundle.coarse_model, boxes[:5], cond, seed2, N, P,
                             steps=params.steps, cfg_scale=params.cfg_scale,
                             noise_keys=[0, 1, 2, 3, 4, 5])
    x0_g, eps_g = round1.x0[0], round1.noise[0]

    template = coarse_slot_template(boxes[5:], N, P, bundle.coarse_model.config.lattice,
                                    noise_keys=[0, 6, 7])
    _, trace = sample(bundle.coarse_model, template, cond, steps=params.steps,
                      cfg_scale=params.cfg_scale, seed=seed2,
                      clamp={0: (x0_g, eps_g)}, trace_keys=[0])
    assert len(trace[0]) == params.steps + 1
    for t, stateval in trace[0]:
        expect = x0_g if t == 0.0 else (1.0 - t) * x0_g + t * eps_g
        assert torch.equal(stateval, expect)


def test_edit_growing_past_kmax_goes_sequential(bundle):
    # k_max is 5 in this fixture; adding 3 boxes to a 3-part scene forces two
    # rounds, and frozen parts must still reproduce exactly across rounds.
    state = run_from_boxes(bundle, CONDITION, BOXES, seed=7)
    adds = [
        {"op": "add", "box": {"min": [0.5, -0.9, -0.9], "max": [0.9, -0.5, -0.5]}},
        {"op": "add", "box": {"min": [0.5, 0.5, -0.9], "max": [0.9, 0.9, -0.5]}},
        {"op": "add", "box": {"min": [-0.9, 0.5, 0.5], "max": [-0.5, 0.9, 0.9]}},
    ]
    out = edit_scene(bundle, state, ops=adds, frozen=[1, 2, 3], seed=31)
    assert [p.uid for p in out.parts] == [1, 2, 3, 4, 5, 6]
    for uid in (1, 2, 3):
        assert out.part(uid).grid == state.part(uid).grid


def test_generate_parts_sequential_matches_part_count(bundle):
    boxes = _many_boxes(7)
    uids = list(range(1, 8))
    parts, global_grid, _ = generate_parts(bundle, boxes, uids,
                                           condition_vector(CONDITION), seed=4)
    assert [p.uid for p in parts] == uids
    assert global_grid is not None


# ------------------------------------------------------------------ layout

def test_run_full_empty_layout_error(bundle):
    # A codec decoding everything to coincident vertices filters every slot out.
    degenerate = BoxCodec(tokens_per_part=4, width=32)
    with torch.no_grad():
        degenerate.decoder.weight.zero_()
        degenerate.decoder.bias.zero_()
    broken = StageBundle(bundle.layout_model, degenerate, bundle.coarse_model,
                         bundle.refine_model, bundle.color_codec, bundle.params)
    with pytest.raises(EmptyLayoutError):
        run_full(broken, CONDITION, seed=3)
