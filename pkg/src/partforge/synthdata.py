"""Procedural multi-part objects with exact analytic ground truth.

Five small parametric grammars (table, chair, robot, lamp, barbell) produce
assemblies of primitives inside [-1, 1]^3.  Because every part is an analytic
solid, boxes, occupancy grids, per-voxel colors, and silhouettes all have
exact oracles.  Conditioning is three orthographic binary silhouettes
(32 x 32, along +X/+Y/+Z) in place of rendered images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import write_pvox
from .geometry import Aabb, Vec3
from .solids import (
    BoxSolid,
    CylinderSolid,
    Solid,
    SphereSolid,
    UnionSolid,
    projected_contains,
    solid_aabb,
    solid_from_dict,
    solid_to_dict,
)
from .voxel import VoxelGrid, voxelize

CATEGORIES = ("table", "chair", "robot", "lamp", "barbell")

SILHOUETTE_RES = 32
SILHOUETTE_VIEWS = ("x", "y", "z")
CONDITION_DIM = len(SILHOUETTE_VIEWS) * SILHOUETTE_RES * SILHOUETTE_RES

# Fixed part palette; grammars index into it deterministically.
PALETTE = np.array(
    [
        (0.85, 0.25, 0.20), (0.20, 0.55, 0.85), (0.25, 0.75, 0.35),
        (0.95, 0.75, 0.10), (0.60, 0.35, 0.80), (0.90, 0.50, 0.15),
        (0.15, 0.70, 0.70), (0.80, 0.30, 0.55), (0.55, 0.55, 0.55),
        (0.35, 0.45, 0.20),
    ]
)


@dataclass(frozen=True)
class PartSpec:
    part_id: int        # 1-based; 0 is reserved for the global branch
    box: Aabb
    solid: Solid
    color: tuple       # RGB in [0, 1]


@dataclass
class ObjectSample:
    sample_id: str
    category: str
    seed: int
    parts: list

    def __post_init__(self):
        if not 2 <= len(self.parts) <= 40:
            raise ValueError(f"part count {len(self.parts)} outside [2, 40]")
        for p in self.parts:
            mn, mx = p.box.min_array(), p.box.max_array()
            if np.any(mn < -1.0 - 1e-9) or np.any(mx > 1.0 + 1e-9):
                raise ValueError(f"part {p.part_id} box leaves object space: {p.box}")
            sb = solid_aabb(p.solid)
            if np.any(sb.min_array() < mn - 1e-9) or np.any(sb.max_array() > mx + 1e-9):
                raise ValueError(f"part {p.part_id} solid does not fit its box")

    def union_solid(self) -> UnionSolid:
        return UnionSolid(tuple(p.solid for p in self.parts))

    def boxes(self) -> list[Aabb]:
        return [p.box for p in self.parts]

    def object_aabb(self) -> Aabb:
        return solid_aabb(self.union_solid())

    def part_grid(self, part: PartSpec, n: int) -> VoxelGrid:
        """Full-resolution occupancy of one part in its own canonical frame."""
        return voxelize(part.solid, part.box, n)

    def global_grid(self, n: int, frame: Aabb | None = None) -> VoxelGrid:
        frame = frame if frame is not None else Aabb(Vec3(-1, -1, -1), Vec3(1, 1, 1))
        return voxelize(self.union_solid(), frame, n)


def _box_part(mn, mx) -> BoxSolid:
    return BoxSolid(Aabb(Vec3(*mn), Vec3(*mx)))


def _table(rng) -> list[Solid]:
    w = rng.uniform(0.5, 0.8)
    top_h = rng.uniform(0.2, 0.6)
    th = rng.uniform(0.08, 0.16)
    leg = rng.uniform(0.06, 0.11)
    z0 = -0.85
    top = _box_part((-w, -w, top_h - th), (w, w, top_h))
    legs = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            cx = sx * (w - leg)
            cy = sy * (w - leg)
            legs.append(_box_part((cx - leg, cy - leg, z0), (cx + leg, cy + leg, top_h - th)))
    return [top, *legs]


def _chair(rng) -> list[Solid]:
    w = rng.uniform(0.4, 0.6)
    seat_h = rng.uniform(-0.2, 0.1)
    th = rng.uniform(0.08, 0.14)
    leg = rng.uniform(0.06, 0.1)
    back_h = rng.uniform(0.5, 0.8)
    z0 = -0.85
    seat = _box_part((-w, -w, seat_h - th), (w, w, seat_h))
    back = _box_part((-w, w - 2 * leg, seat_h), (w, w, seat_h + back_h))
    legs = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            cx = sx * (w - leg)
            cy = sy * (w - leg)
            legs.append(_box_part((cx - leg, cy - leg, z0), (cx + leg, cy + leg, seat_h - th)))
    return [seat, back, *legs]


def _robot(rng) -> list[Solid]:
    tw = rng.uniform(0.25, 0.4)     # torso half-width
    td = rng.uniform(0.15, 0.25)
    torso_top = rng.uniform(0.25, 0.45)
    torso_bot = rng.uniform(-0.35, -0.15)
    head = rng.uniform(0.12, 0.2)
    arm = rng.uniform(0.07, 0.11)
    leg = rng.uniform(0.08, 0.12)
    z0 = -0.85
    parts = [
        _box_part((-tw, -td, torso_bot), (tw, td, torso_top)),
        _box_part((-head, -head, torso_top), (head, head, min(torso_top + 2 * head, 0.95))),
    ]
    arm_top = torso_top - 0.05
    arm_bot = max(torso_bot + 0.05, arm_top - rng.uniform(0.3, 0.5))
    for s in (-1, 1):
        parts.append(
            _box_part((s * tw - arm + s * arm, -arm, arm_bot), (s * tw + arm + s * arm, arm, arm_top))
        )
    for s in (-1, 1):
        cx = s * (tw - leg)
        parts.append(_box_part((cx - leg, -leg, z0), (cx + leg, leg, torso_bot)))
    if rng.random() < 0.5:
        head_top = min(torso_top + 2 * head, 0.95)
        for s in (-1, 1):
            r = 0.035
            parts.append(
                CylinderSolid(
                    "z",
                    Vec3(s * head * 0.5, 0.0, head_top + 0.05),
                    r,
                    0.055,
                )
            )
    return parts


def _lamp(rng) -> list[Solid]:
    base_r = rng.uniform(0.3, 0.5)
    base_h = rng.uniform(0.05, 0.09)
    pole_r = rng.uniform(0.04, 0.07)
    pole_top = rng.uniform(0.3, 0.6)
    # shade must overlap the pole top yet stay inside z <= 0.95
    shade_r = rng.uniform(0.18, min(0.3, (0.95 - pole_top) / 1.5))
    z0 = -0.85
    base = CylinderSolid("z", Vec3(0, 0, z0 + base_h), base_r, base_h)
    pole = CylinderSolid("z", Vec3(0, 0, (z0 + 2 * base_h + pole_top) / 2), pole_r,
                         (pole_top - z0 - 2 * base_h) / 2 + 0.01)
    shade = SphereSolid(Vec3(0, 0, pole_top + shade_r * 0.5), shade_r)
    return [base, pole, shade]


def _barbell(rng) -> list[Solid]:
    bar_r = rng.uniform(0.04, 0.07)
    bar_half = rng.uniform(0.5, 0.75)
    plate_r = rng.uniform(0.25, 0.45)
    plate_half = rng.uniform(0.05, 0.1)
    bar = CylinderSolid("x", Vec3(0, 0, 0), bar_r, bar_half)
    left = CylinderSolid("x", Vec3(-bar_half - plate_half + 0.02, 0, 0), plate_r, plate_half)
    right = CylinderSolid("x", Vec3(bar_half + plate_half - 0.02, 0, 0), plate_r, plate_half)
    return [bar, left, right]


_GRAMMARS = {
    "table": _table,
    "chair": _chair,
    "robot": _robot,
    "lamp": _lamp,
    "barbell": _barbell,
}


def generate_sample(seed: int, category: str) -> ObjectSample:
    """Deterministic sample from the category grammar."""
    if category not in _GRAMMARS:
        raise ValueError(f"unknown category {category!r}; choose from {CATEGORIES}")
    rng = np.random.default_rng(seed)
    solids = _GRAMMARS[category](rng)
    color_offset = int(rng.integers(0, len(PALETTE)))
    parts = []
    for i, solid in enumerate(solids):
        color = tuple(float(c) for c in PALETTE[(color_offset + i) % len(PALETTE)])
        parts.append(PartSpec(part_id=i + 1, box=solid_aabb(solid), solid=solid, color=color))
    return ObjectSample(sample_id=f"{category}-{seed}", category=category, seed=seed, parts=parts)


def rasterize_silhouettes(sample: ObjectSample, res: int = SILHOUETTE_RES) -> np.ndarray:
    """Three orthographic binary silhouettes of the union solid, (3, res, res).

    View k projects along axis SILHOUETTE_VIEWS[k]; pixel (i, j) covers the
    (u, v) cell centered at (-1 + (i+.5) * 2/res, -1 + (j+.5) * 2/res).
    """
    union = sample.union_solid()
    coords = -1.0 + (np.arange(res) + 0.5) * 2.0 / res
    uu, vv = np.meshgrid(coords, coords, indexing="ij")
    uv = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    out = np.zeros((len(SILHOUETTE_VIEWS), res, res), dtype=bool)
    for k, axis in enumerate(SILHOUETTE_VIEWS):
        out[k] = projected_contains(union, axis, uv).reshape(res, res)
    return out


def condition_input(sample: ObjectSample) -> np.ndarray:
    """Flattened silhouette bits as the model's condition input vector."""
    return rasterize_silhouettes(sample).astype(np.float32).reshape(-1)


def part_voxel_colors(sample: ObjectSample, part: PartSpec, n: int) -> np.ndarray:
    """(n, n, n, 3) color field for one part's canonical grid (its flat color)."""
    colors = np.zeros((n, n, n, 3))
    grid = sample.part_grid(part, n)
    colors[grid.occ] = part.color
    return colors


def global_voxel_colors(sample: ObjectSample, n: int, frame: Aabb | None = None) -> np.ndarray:
    """Color field of the union grid; overlaps resolved to the lowest part id."""
    frame = frame if frame is not None else Aabb(Vec3(-1, -1, -1), Vec3(1, 1, 1))
    colors = np.zeros((n, n, n, 3))
    owned = np.zeros((n, n, n), dtype=bool)
    for part in sample.parts:
        occ = voxelize(part.solid, frame, n).occ
        claim = occ & ~owned
        colors[claim] = part.color
        owned |= claim
    return colors


def build_dataset(seeds, categories, n: int, out_dir, grid_n: int = 16) -> dict:
    """Write ``n`` samples (cycling categories, seeds[i]) plus a manifest.

    The manifest records every seed so the corpus can be regenerated
    hash-identically.  Returns the manifest dict.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds)
    categories = list(categories)
    if n > 0 and (not seeds or not categories):
        raise ValueError("need at least one seed and one category")
    samples = []
    for i in range(n):
        seed = seeds[i % len(seeds)] + (i // len(seeds)) * 10_007
        category = categories[i % len(categories)]
        sample = generate_sample(seed, category)
        sdir = out / sample.sample_id
        sdir.mkdir(parents=True, exist_ok=True)
        files = {"sample": f"{sample.sample_id}/sample.json"}
        record = {
            "id": sample.sample_id,
            "seed": seed,
            "category": category,
            "parts": [
                {
                    "part_id": p.part_id,
                    "min": [float(v) for v in p.box.min_array()],
                    "max": [float(v) for v in p.box.max_array()],
                    "color": list(p.color),
                    "solid": solid_to_dict(p.solid),
                }
                for p in sample.parts
            ],
        }
        (sdir / "sample.json").write_text(json.dumps(record, sort_keys=True, indent=1))
        for p in sample.parts:
            name = f"part_{p.part_id:02d}.pvox"
            write_pvox(sdir / name, sample.part_grid(p, grid_n))
            files[f"part_{p.part_id}"] = f"{sample.sample_id}/{name}"
        samples.append({"id": sample.sample_id, "seed": seed, "category": category, "files": files})
    manifest = {"version": 1, "grid_n": grid_n, "samples": samples}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_sample_record(path) -> ObjectSample:
    """Rebuild an ObjectSample from a written sample.json."""
    record = json.loads(Path(path).read_text())
    parts = [
        PartSpec(
            part_id=p["part_id"],
            box=Aabb(Vec3(*p["min"]), Vec3(*p["max"])),
            solid=solid_from_dict(p["solid"]),
            color=tuple(p["color"]),
        )
        for p in record["parts"]
    ]
    return ObjectSample(record["id"], record["category"], record["seed"], parts)
