"""End-to-end orchestration: three-stage inference, sequential sampling past
the part-count cap, box-level editing with frozen-part latent injection, and
the on-disk scene store.

Every part records its clean latents and the exact noise used to reach them;
freezing a part clamps its slot to the recorded (x0, eps) interpolation at
every sampler step, which reproduces its occupancy and colors bit-exactly.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .dit import ConditionTokens, PartDiT, SlotTokens, TokenStream, sample
from .formats import write_ply, write_pvox, read_pvox
from .geometry import Aabb, Vec3
from .layout import BoxCodec, LayoutSequence, PartTokenSet, decode_and_filter
from .stages import (
    ColorCodec,
    PartOccupancy,
    SparseVoxelTokens,
    UNIT_BOX,
    features_from_slot,
    feature_slot_for_part,
    generate_coarse,
    grid_to_cubes,
    refine,
)
from .synthdata import condition_input, generate_sample
from .utils import mix_seed
from .voxel import VoxelGrid

LAYOUT_SEED_TAG = 101
COARSE_SEED_TAG = 102
REFINE_SEED_TAG = 103


class EmptyLayoutError(RuntimeError):
    """Stage 1 produced no valid part boxes after filtering."""


class InvalidEditError(ValueError):
    """Edit op list violates the editing contract (maps to HTTP 422)."""


@dataclass
class PipelineParams:
    grid_n: int = 16
    patch: int = 4
    feature_width: int = 8
    voxel_budget: int = 256
    steps: int = 50
    cfg_scale: float = 3.5
    nms_iou: float = 0.7
    validity_iou: float = 0.85
    validity_samples: int = 64
    k_max: int = 30


@dataclass
class StageBundle:
    """Loaded checkpoints for all three stages plus shared knobs."""

    layout_model: PartDiT
    codec: BoxCodec
    coarse_model: PartDiT
    refine_model: PartDiT
    color_codec: ColorCodec
    params: PipelineParams


def load_bundle(checkpoint_dir: str | Path, overrides: Optional[dict] = None) -> StageBundle:
    """Load layout/coarse/refine checkpoints from a directory.

    Stage grid parameters come from the checkpoints themselves; ``overrides``
    may replace sampling knobs (steps, cfg_scale, nms_iou, validity_iou,
    grid_n, k_max, ...).
    """
    from .checkpoint import load_model

    ckpt = Path(checkpoint_dir)
    for name in ("layout.pfck", "coarse.pfck", "refine.pfck"):
        if not (ckpt / name).exists():
            raise FileNotFoundError(f"missing checkpoint: {ckpt / name}")

    layout_model, layout_stage, extra = load_model(ckpt / "layout.pfck")
    codec = BoxCodec(int(layout_stage["codec_m"]), int(layout_stage["codec_d"]))
    codec.load_state_dict({k[len("codec."):]: v for k, v in extra.items()
                           if k.startswith("codec.")})
    codec.eval()

    coarse_model, coarse_stage, _ = load_model(ckpt / "coarse.pfck")
    refine_model, refine_stage, _ = load_model(ckpt / "refine.pfck")

    params = PipelineParams(
        grid_n=int(coarse_stage["grid_n"]),
        patch=int(coarse_stage["patch"]),
        feature_width=int(refine_stage["feature_width"]),
        voxel_budget=int(refine_stage["voxel_budget"]),
        k_max=coarse_model.config.k_max,
    )
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if not hasattr(params, key):
            raise ValueError(f"unknown pipeline override {key!r}")
        setattr(params, key, type(getattr(params, key))(value))
    return StageBundle(layout_model, codec, coarse_model, refine_model,
                       ColorCodec(params.feature_width), params)


@dataclass
class PartLatents:
    coarse_x0: torch.Tensor
    coarse_eps: torch.Tensor
    feat_x0: Optional[torch.Tensor] = None
    feat_eps: Optional[torch.Tensor] = None


@dataclass
class PartState:
    uid: int                      # stable id; also the slot noise key
    box: Aabb
    grid: VoxelGrid
    latents: PartLatents
    colors: Optional[SparseVoxelTokens] = None
    frozen: bool = False

    @property
    def empty(self) -> bool:
        return self.grid.popcount() == 0


@dataclass
class SceneState:
    scene_id: str
    condition: dict               # {"category":…, "sample_seed":…}
    seed: int
    from_gt_boxes: bool
    parts: list = field(default_factory=list)
    global_grid: Optional[VoxelGrid] = None
    global_latents: Optional[PartLatents] = None

    def part(self, uid: int) -> PartState:
        for p in self.parts:
            if p.uid == uid:
                return p
        raise KeyError(f"unknown part id {uid}")

    def boxes(self) -> list[Aabb]:
        return [p.box for p in self.parts]


def condition_vector(condition: dict) -> torch.Tensor:
    sample_obj = generate_sample(int(condition["sample_seed"]), condition["category"])
    return torch.from_numpy(condition_input(sample_obj))


def _encode(model: PartDiT, cond_vec: Optional[torch.Tensor]) -> Optional[ConditionTokens]:
    return model.encode_condition(cond_vec) if cond_vec is not None else None


def sample_layout_boxes(bundle: StageBundle, cond_vec: torch.Tensor, seed: int) -> list[Aabb]:
    """Stage 1: sample the padded layout sequence, decode and filter boxes."""
    model = bundle.layout_model
    cfg = model.config
    m, d = bundle.codec.m, bundle.codec.d
    template = TokenStream(
        [SlotTokens(i, torch.zeros(m, d), kind="tok") for i in range(cfg.k_max + 1)]
    )
    out, _ = sample(model, template, _encode(model, cond_vec),
                    steps=bundle.params.steps, cfg_scale=bundle.params.cfg_scale,
                    seed=mix_seed(seed, LAYOUT_SEED_TAG))
    # undo the latent scaling applied during training before decoding
    scale = float(bundle.codec.token_scale)
    seq = LayoutSequence(
        [PartTokenSet(i, s.data * scale) for i, s in enumerate(out.slots)],
        [True] * (cfg.k_max + 1),
    )
    return decode_and_filter(bundle.codec, seq, bundle.params.validity_iou,
                             bundle.params.nms_iou, bundle.params.validity_samples)


def _chunks(seq: Sequence, size: int) -> list[list]:
    return [list(seq[i : i + size]) for i in range(0, len(seq), size)]


def generate_parts(bundle: StageBundle, boxes: Sequence[Aabb], uids: Sequence[int],
                   cond_vec: Optional[torch.Tensor], seed: int,
                   clamp_coarse: Optional[dict] = None,
                   clamp_feat: Optional[dict] = None,
                   clamp_global: bool = False,
                   recorded_global: Optional[tuple] = None,
                   progress=None):
    """Stages 2+3 over an arbitrary box count.

    Beyond k_max boxes, sampling proceeds in rounds: round 1 also samples the
    global slot and records its (x0, eps); later rounds pin the global slot to
    the recorded interpolation at every step so the overall structure stays
    fixed.  ``clamp_*`` maps part uid -> (x0, eps) for frozen parts.
    """
    params = bundle.params
    clamp_coarse = dict(clamp_coarse or {})
    clamp_feat = dict(clamp_feat or {})
    seed2 = mix_seed(seed, COARSE_SEED_TAG)
    seed3 = mix_seed(seed, REFINE_SEED_TAG)

    box_chunks = _chunks(list(boxes), params.k_max)
    uid_chunks = _chunks(list(uids), params.k_max)

    cond2 = _encode(bundle.coarse_model, cond_vec)
    parts: list[PartState] = []
    global_grid = None
    global_coarse: Optional[tuple] = None
    if clamp_global:
        if recorded_global is None or recorded_global[0] is None:
            raise ValueError("clamp_global requires recorded global latents")
        global_coarse = (recorded_global[0], recorded_global[1])

    for round_idx, (bx, ux) in enumerate(zip(box_chunks, uid_chunks)):
        clamp = {u: clamp_coarse[u] for u in ux if u in clamp_coarse}
        if round_idx > 0 or clamp_global:
            clamp[0] = global_coarse
        result = generate_coarse(
            bundle.coarse_model, bx, cond2, seed2, params.grid_n, params.patch,
            steps=params.steps, cfg_scale=params.cfg_scale,
            noise_keys=[0] + list(ux), clamp=clamp,
        )
        if round_idx == 0:
            global_grid = result.global_grid
            global_coarse = (result.x0[0], result.noise[0])
        for i, (box, uid) in enumerate(zip(bx, ux)):
            parts.append(
                PartState(
                    uid=uid, box=box,
                    grid=result.parts[i].grid,
                    latents=PartLatents(result.x0[i + 1], result.noise[i + 1]),
                )
            )
        if progress is not None:
            progress(0.3 + 0.4 * (round_idx + 1) / len(box_chunks))

    global_latents = PartLatents(global_coarse[0], global_coarse[1])

    # stage 3 over the same rounds
    cond3 = _encode(bundle.refine_model, cond_vec)
    global_part = PartOccupancy(0, UNIT_BOX, global_grid)
    has_global = global_grid.popcount() > 0
    global_feat: Optional[tuple] = None
    if clamp_global and recorded_global is not None and recorded_global[2] is not None:
        global_feat = (recorded_global[2], recorded_global[3])
    part_chunks = _chunks(parts, params.k_max)
    for round_idx, chunk in enumerate(part_chunks):
        occupancies = [
            PartOccupancy(slot_id + 1, ps.box, ps.grid) for slot_id, ps in enumerate(chunk)
        ]
        if all(p.grid.popcount() == 0 for p in occupancies):
            continue
        noise_keys = {occ.part_id: ps.uid for occ, ps in zip(occupancies, chunk)}
        noise_keys[0] = 0
        clamp = {}
        for occ, ps in zip(occupancies, chunk):
            if ps.uid in clamp_feat and clamp_feat[ps.uid][0] is not None:
                clamp[ps.uid] = clamp_feat[ps.uid]
        if has_global and global_feat is not None:
            clamp[0] = global_feat
        result3 = refine(
            bundle.refine_model, occupancies, cond3, seed3, params.grid_n, params.patch,
            params.feature_width, params.voxel_budget, bundle.color_codec,
            steps=params.steps, cfg_scale=params.cfg_scale,
            global_part=global_part if has_global else None,
            noise_keys=noise_keys, clamp=clamp,
        )
        slot_uid = {occ.part_id: ps.uid for occ, ps in zip(occupancies, chunk)}
        by_uid = {ps.uid: ps for ps in chunk}
        offset = 1 if has_global else 0
        if has_global and global_feat is None:
            global_feat = (result3.x0[0], result3.noise[0])
        for j, sv in enumerate(result3.tokens):
            uid = slot_uid[sv.part_id]
            ps = by_uid[uid]
            ps.colors = SparseVoxelTokens(uid, sv.positions, sv.features, sv.colors)
            slot_index = offset + j
            ps.latents.feat_x0 = result3.x0[slot_index]
            ps.latents.feat_eps = result3.noise[slot_index]
        if progress is not None:
            progress(0.7 + 0.25 * (round_idx + 1) / len(part_chunks))

    if has_global and global_feat is not None:
        global_latents.feat_x0 = global_feat[0]
        global_latents.feat_eps = global_feat[1]
    return parts, global_grid, global_latents


def run_full(bundle: StageBundle, condition: dict, seed: int,
             scene_id: Optional[str] = None, progress=None) -> SceneState:
    """Three-stage generation from a condition reference; fully seeded."""
    cond_vec = condition_vector(condition)
    boxes = sample_layout_boxes(bundle, cond_vec, seed)
    if not boxes:
        raise EmptyLayoutError("layout stage produced no valid boxes")
    if progress is not None:
        progress(0.3)
    uids = list(range(1, len(boxes) + 1))
    parts, global_grid, global_latents = generate_parts(
        bundle, boxes, uids, cond_vec, seed, progress=progress
    )
    sid = scene_id or f"{condition['category']}-{condition['sample_seed']}-s{seed}"
    return SceneState(sid, dict(condition), seed, from_gt_boxes=False, parts=parts,
                      global_grid=global_grid, global_latents=global_latents)


def run_from_boxes(bundle: StageBundle, condition: dict, boxes: Sequence[Aabb],
                   seed: int, scene_id: Optional[str] = None,
                   part_ids: Optional[Sequence[int]] = None,
                   progress=None) -> SceneState:
    """Stages 2+3 from externally supplied (e.g. ground-truth) layout boxes."""
    if not boxes:
        raise ValueError("run_from_boxes: no boxes")
    cond_vec = condition_vector(condition)
    uids = list(part_ids) if part_ids is not None else list(range(1, len(boxes) + 1))
    parts, global_grid, global_latents = generate_parts(
        bundle, boxes, uids, cond_vec, seed, progress=progress
    )
    sid = scene_id or f"{condition['category']}-{condition['sample_seed']}-b{seed}"
    return SceneState(sid, dict(condition), seed, from_gt_boxes=True, parts=parts,
                      global_grid=global_grid, global_latents=global_latents)


def sequential_sample(bundle: StageBundle, boxes: Sequence[Aabb],
                      cond_vec: Optional[torch.Tensor], seed: int) -> list[PartOccupancy]:
    """Stage-2 sampling for arbitrarily many boxes (rounds of k_max parts)."""
    uids = list(range(1, len(boxes) + 1))
    params = bundle.params
    seed2 = mix_seed(seed, COARSE_SEED_TAG)
    cond2 = _encode(bundle.coarse_model, cond_vec)
    out: list[PartOccupancy] = []
    global_pair = None
    for round_idx, (bx, ux) in enumerate(
        zip(_chunks(list(boxes), params.k_max), _chunks(uids, params.k_max))
    ):
        clamp = {0: global_pair} if round_idx > 0 else None
        result = generate_coarse(
            bundle.coarse_model, bx, cond2, seed2, params.grid_n, params.patch,
            steps=params.steps, cfg_scale=params.cfg_scale,
            noise_keys=[0] + ux, clamp=clamp,
        )
        if round_idx == 0:
            global_pair = (result.x0[0], result.noise[0])
        for uid, part in zip(ux, result.parts):
            out.append(PartOccupancy(uid, part.box, part.grid))
    return out


VALID_OPS = ("add", "delete", "transform")


def _parse_box(payload: dict) -> Aabb:
    try:
        box = Aabb(Vec3(*payload["min"]), Vec3(*payload["max"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidEditError(f"invalid box payload: {exc}") from exc
    if np.any(box.extent() <= 0):
        raise InvalidEditError(f"edited box must have positive extents: {payload}")
    if np.any(box.min_array() < -1.0) or np.any(box.max_array() > 1.0):
        raise InvalidEditError(f"edited box leaves object space: {payload}")
    return box


def validate_edit(state: SceneState, ops: Sequence[dict], frozen: Sequence[int]):
    """Shared contract checks; raises InvalidEditError with the offending op."""
    known = {p.uid for p in state.parts}
    edited: set[int] = set()
    for op in ops:
        kind = op.get("op")
        if kind not in VALID_OPS:
            raise InvalidEditError(f"unknown op kind: {op}")
        if kind in ("delete", "transform"):
            uid = op.get("part_id")
            if uid not in known:
                raise InvalidEditError(f"op targets unknown part id: {op}")
            edited.add(uid)
        if kind in ("add", "transform"):
            _parse_box(op.get("box") or {})
    frozen_set = set(int(u) for u in frozen)
    unknown_frozen = frozen_set - known
    if unknown_frozen:
        raise InvalidEditError(f"frozen ids not in scene: {sorted(unknown_frozen)}")
    conflict = frozen_set & edited
    if conflict:
        raise InvalidEditError(f"cannot freeze edited parts: {sorted(conflict)}")
    return frozen_set, edited


def edit_scene(bundle: StageBundle, state: SceneState, ops: Sequence[dict],
               frozen: Sequence[int], seed: int, scene_id: Optional[str] = None,
               progress=None) -> SceneState:
    """Re-run stages 2+3 after box edits, pinning frozen parts to their latents.

    Frozen parts (necessarily unedited) reproduce their occupancy and colors
    bit-exactly.  The global branch is resampled whenever the op list is
    non-empty; with no ops it is clamped to its recording as well.
    """
    frozen_set, _ = validate_edit(state, ops, frozen)

    new_parts: list[tuple[int, Aabb]] = [(p.uid, p.box) for p in state.parts]
    next_uid = max((p.uid for p in state.parts), default=0) + 1
    for op in ops:
        if op["op"] == "delete":
            new_parts = [(u, b) for u, b in new_parts if u != op["part_id"]]
        elif op["op"] == "transform":
            box = _parse_box(op["box"])
            new_parts = [(u, box if u == op["part_id"] else b) for u, b in new_parts]
        elif op["op"] == "add":
            new_parts.append((next_uid, _parse_box(op["box"])))
            next_uid += 1
    if not new_parts:
        raise InvalidEditError("edit removes every part")

    clamp_coarse = {}
    clamp_feat = {}
    for uid in frozen_set:
        ps = state.part(uid)
        clamp_coarse[uid] = (ps.latents.coarse_x0, ps.latents.coarse_eps)
        if ps.latents.feat_x0 is not None:
            clamp_feat[uid] = (ps.latents.feat_x0, ps.latents.feat_eps)

    clamp_global = len(ops) == 0
    recorded_global = None
    if clamp_global and state.global_latents is not None:
        gl = state.global_latents
        recorded_global = (gl.coarse_x0, gl.coarse_eps, gl.feat_x0, gl.feat_eps)

    cond_vec = condition_vector(state.condition)
    uids = [u for u, _ in new_parts]
    boxes = [b for _, b in new_parts]
    parts, global_grid, global_latents = generate_parts(
        bundle, boxes, uids, cond_vec, seed,
        clamp_coarse=clamp_coarse, clamp_feat=clamp_feat,
        clamp_global=clamp_global, recorded_global=recorded_global,
        progress=progress,
    )
    for ps in parts:
        ps.frozen = ps.uid in frozen_set
    sid = scene_id or state.scene_id
    return SceneState(sid, dict(state.condition), seed, state.from_gt_boxes,
                      parts=parts, global_grid=global_grid, global_latents=global_latents)


# ------------------------------------------------------------- scene storage

def save_scene(state: SceneState, store_dir: str | Path) -> Path:
    """Write the scene directory atomically (build in temp, then swap)."""
    from .checkpoint import save_tensors

    store = Path(store_dir)
    store.mkdir(parents=True, exist_ok=True)
    final = store / state.scene_id
    tmp = store / f".{state.scene_id}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "parts").mkdir(parents=True)

    parts_json = []
    tensors = {}
    kinds = {}
    for ps in state.parts:
        stem = f"part_{ps.uid:03d}"
        write_pvox(tmp / "parts" / f"{stem}.pvox", ps.grid)
        entry = {
            "part_id": ps.uid,
            "min": [float(v) for v in ps.box.min_array()],
            "max": [float(v) for v in ps.box.max_array()],
            "pvox": f"parts/{stem}.pvox",
            "mesh": None,
            "frozen": bool(ps.frozen),
            "empty": bool(ps.empty),
        }
        if not ps.empty:
            field = None
            if ps.colors is not None:
                field = np.zeros((ps.grid.n,) * 3 + (3,))
                pos = ps.colors.positions
                field[pos[:, 0], pos[:, 1], pos[:, 2]] = ps.colors.colors
            mesh = grid_to_cubes(ps.grid, ps.box, voxel_colors=field)
            write_ply(tmp / "parts" / f"{stem}.ply", mesh)
            entry["mesh"] = f"parts/{stem}.ply"
        parts_json.append(entry)
        tensors[f"part{ps.uid:03d}.coarse.x0"] = ps.latents.coarse_x0
        tensors[f"part{ps.uid:03d}.coarse.eps"] = ps.latents.coarse_eps
        if ps.latents.feat_x0 is not None:
            tensors[f"part{ps.uid:03d}.feat.x0"] = ps.latents.feat_x0
            tensors[f"part{ps.uid:03d}.feat.eps"] = ps.latents.feat_eps
        if ps.colors is not None:
            tensors[f"part{ps.uid:03d}.colors"] = torch.from_numpy(
                np.asarray(ps.colors.colors, dtype=np.float32)
            )
            tensors[f"part{ps.uid:03d}.features"] = ps.colors.features
            kinds[str(ps.uid)] = list(ps.colors.features.shape)

    if state.global_grid is not None:
        write_pvox(tmp / "global.pvox", state.global_grid)
    if state.global_latents is not None:
        tensors["global.coarse.x0"] = state.global_latents.coarse_x0
        tensors["global.coarse.eps"] = state.global_latents.coarse_eps
        if state.global_latents.feat_x0 is not None:
            tensors["global.feat.x0"] = state.global_latents.feat_x0
            tensors["global.feat.eps"] = state.global_latents.feat_eps

    save_tensors(tmp / "latents.bin", {"feature_shapes": kinds}, tensors)

    scene_json = {
        "version": 1,
        "scene_id": state.scene_id,
        "seed": state.seed,
        "condition": state.condition,
        "from_gt_boxes": state.from_gt_boxes,
        "parts": parts_json,
        "global": {"pvox": "global.pvox" if state.global_grid is not None else None},
        "latents": "latents.bin",
    }
    (tmp / "scene.json").write_text(json.dumps(scene_json, sort_keys=True, indent=1))

    if final.exists():
        old = store / f".{state.scene_id}.old"
        if old.exists():
            shutil.rmtree(old)
        os.replace(final, old)
        os.replace(tmp, final)
        shutil.rmtree(old)
    else:
        os.replace(tmp, final)
    return final


def load_scene(scene_dir: str | Path) -> SceneState:
    from .checkpoint import load_tensors

    scene_dir = Path(scene_dir)
    meta = json.loads((scene_dir / "scene.json").read_text())
    _, tensors = load_tensors(scene_dir / meta["latents"])

    parts = []
    for entry in meta["parts"]:
        uid = entry["part_id"]
        grid = read_pvox(scene_dir / entry["pvox"])
        latents = PartLatents(
            coarse_x0=tensors[f"part{uid:03d}.coarse.x0"],
            coarse_eps=tensors[f"part{uid:03d}.coarse.eps"],
            feat_x0=tensors.get(f"part{uid:03d}.feat.x0"),
            feat_eps=tensors.get(f"part{uid:03d}.feat.eps"),
        )
        colors = None
        color_key = f"part{uid:03d}.colors"
        if color_key in tensors:
            colors = SparseVoxelTokens(
                uid, grid.occupied_cells(),
                tensors[f"part{uid:03d}.features"],
                tensors[color_key].numpy().astype(np.float64),
            )
        box = Aabb(Vec3(*entry["min"]), Vec3(*entry["max"]))
        parts.append(PartState(uid, box, grid, latents, colors, entry.get("frozen", False)))

    global_grid = None
    if meta["global"]["pvox"]:
        global_grid = read_pvox(scene_dir / meta["global"]["pvox"])
    global_latents = None
    if "global.coarse.x0" in tensors:
        global_latents = PartLatents(
            tensors["global.coarse.x0"], tensors["global.coarse.eps"],
            tensors.get("global.feat.x0"), tensors.get("global.feat.eps"),
        )
    return SceneState(meta["scene_id"], meta["condition"], meta["seed"],
                      meta["from_gt_boxes"], parts, global_grid, global_latents)
