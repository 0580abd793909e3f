"""Stage 2 (coarse per-part occupancy) and stage 3 (sparse feature refinement).

Stage 2 diffuses patchified occupancy: each part's full-resolution binary grid
in its own canonical space becomes (N/p)^3 tokens whose payload is the p^3
cell values at +/-1, and every token carries the center-corner key of its
patch cell so attention across parts stays scale-aware.  Stage 3 diffuses a
feature field over the occupied voxels (or occupied patches, when a part
exceeds the voxel budget) and decodes per-voxel colors with a fixed toy
decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .dit import ConditionTokens, PartDiT, SlotTokens, TokenStream, sample, slot_noise
from .encoding import DEFAULT_LATTICE, cell_keys_array
from .geometry import Aabb, TriMesh, Vec3
from .voxel import VoxelGrid, grid_to_cubes

UNIT_BOX = Aabb(Vec3(-1, -1, -1), Vec3(1, 1, 1))

KIND_OCCUPANCY = "occ"
KIND_FEAT_VOXEL = "feat_voxel"
KIND_FEAT_PATCH = "feat_patch"


@dataclass
class PartOccupancy:
    part_id: int
    box: Aabb
    grid: VoxelGrid


@dataclass
class OccupancyPatchTokens:
    """(N/p)^3 tokens; each token's payload is its patch's p^3 cells at +/-1.

    Token order is the linear index over patch coordinates (x fastest), the
    payload order the linear index over in-patch offsets (x fastest).
    """

    n: int
    p: int
    data: torch.Tensor  # (m^3, p^3) float32 in {-1, +1}


@dataclass
class SparseVoxelTokens:
    """Occupied-voxel features of one part: positions sorted by linear index."""

    part_id: int
    positions: np.ndarray    # (L, 3) int64
    features: torch.Tensor   # (L, d_f)
    colors: np.ndarray       # (L, 3) in [0, 1]


def occupancy_to_tokens(grid: VoxelGrid, p: int) -> OccupancyPatchTokens:
    """Patchify a binary grid into +/-1 payload tokens (exact bijection)."""
    n = grid.n
    if p <= 0 or n % p != 0:
        raise ValueError(f"patch size {p} must divide grid resolution {n}")
    m = n // p
    blocks = grid.occ.reshape(m, p, m, p, m, p).transpose(4, 2, 0, 5, 3, 1)
    payload = blocks.reshape(m**3, p**3)
    data = torch.from_numpy(np.where(payload, 1.0, -1.0).astype(np.float32))
    return OccupancyPatchTokens(n=n, p=p, data=data)


def tokens_to_occupancy(tokens: OccupancyPatchTokens) -> VoxelGrid:
    """Inverse of occupancy_to_tokens: sign threshold at 0 (payload > 0)."""
    n, p = tokens.n, tokens.p
    m = n // p
    payload = (tokens.data.detach().cpu().numpy() > 0.0).reshape(m, m, m, p, p, p)
    occ = payload.transpose(2, 5, 1, 4, 0, 3).reshape(n, n, n)
    return VoxelGrid(n, occ)


def _patch_cells(m: int) -> np.ndarray:
    idx = np.arange(m**3)
    return np.stack([idx % m, (idx // m) % m, idx // (m * m)], axis=1).astype(np.int64)


def patch_keys(box: Aabb, n: int, p: int, r: int = DEFAULT_LATTICE) -> torch.Tensor:
    """Center-corner keys of every patch cell, (m^3, 9, 3) int64 tensor."""
    if p <= 0 or n % p != 0:
        raise ValueError(f"patch size {p} must divide grid resolution {n}")
    m = n // p
    keys = cell_keys_array(box, _patch_cells(m), n=m, r=r)
    return torch.from_numpy(keys)


def voxel_keys(box: Aabb, cells: np.ndarray, n: int, r: int = DEFAULT_LATTICE) -> torch.Tensor:
    """Center-corner keys for explicit voxel cells, (L, 9, 3) int64 tensor."""
    return torch.from_numpy(cell_keys_array(box, cells, n=n, r=r))


def augment_box(box: Aabb, rng) -> Aabb:
    """Training-time box jitter: per-axis scale in [0.9, 1.1] about the center
    plus a shift of up to 5% of the extent, clamped to object space."""
    center = 0.5 * (box.min_array() + box.max_array())
    half = 0.5 * box.extent()
    scale = rng.uniform(0.9, 1.1, 3)
    jitter = rng.uniform(-0.05, 0.05, 3) * box.extent()
    c = center + jitter
    mn = np.clip(c - half * scale, -1.0, 1.0)
    mx = np.clip(c + half * scale, -1.0, 1.0)
    # clamping can collapse an axis hugging the boundary; keep extents positive
    for a in range(3):
        if mx[a] - mn[a] < 1e-4:
            mx[a] = min(1.0, mn[a] + 1e-4)
            mn[a] = mx[a] - 1e-4
    return Aabb.from_arrays(mn, mx)


class ColorCodec:
    """Fixed toy feature <-> RGB pair: decode(f) = sigmoid(f @ Q).

    Q has orthonormal columns, so encode(c) = logit(c) @ Q^T roundtrips
    exactly, and the zero feature decodes to mid-gray by construction.
    """

    def __init__(self, d_f: int = 8, seed: int = 97):
        if d_f < 3:
            raise ValueError("feature width must be at least 3")
        self.d_f = d_f
        gen = torch.Generator().manual_seed(seed)
        raw = torch.randn(d_f, 3, generator=gen, dtype=torch.float64)
        q, _ = torch.linalg.qr(raw)
        self.q = q.to(torch.float32)  # (d_f, 3), orthonormal columns

    def decode(self, features: torch.Tensor) -> np.ndarray:
        rgb = torch.sigmoid(features.to(torch.float32) @ self.q)
        return rgb.detach().cpu().numpy()

    def encode(self, colors: np.ndarray) -> torch.Tensor:
        c = np.clip(np.asarray(colors, dtype=np.float64), 1e-4, 1.0 - 1e-4)
        logits = torch.from_numpy(np.log(c / (1.0 - c))).to(torch.float32)
        return logits @ self.q.T


def coarse_slot_template(boxes: Sequence[Aabb], n: int, p: int,
                         lattice: int = DEFAULT_LATTICE,
                         noise_keys: Optional[Sequence[int]] = None,
                         include_global: bool = True) -> TokenStream:
    """Stream template for stage 2: global slot 0 plus one slot per part box."""
    if not boxes:
        raise ValueError("coarse_slot_template: need at least one box")
    m = n // p
    n_tokens = m**3
    width = p**3
    slots = []
    if include_global:
        slots.append(
            SlotTokens(0, torch.zeros(n_tokens, width), kind=KIND_OCCUPANCY,
                       keys=patch_keys(UNIT_BOX, n, p, lattice),
                       noise_key=noise_keys[0] if noise_keys else 0)
        )
    for i, box in enumerate(boxes):
        slots.append(
            SlotTokens(i + 1, torch.zeros(n_tokens, width), kind=KIND_OCCUPANCY,
                       keys=patch_keys(box, n, p, lattice),
                       noise_key=noise_keys[i + 1] if noise_keys else i + 1)
        )
    return TokenStream(slots)


@dataclass
class CoarseResult:
    parts: list                     # list[PartOccupancy]
    global_grid: VoxelGrid
    x0: list                        # per-slot clean latents (incl. global slot 0)
    noise: list                     # per-slot initial noise used
    empty_part_ids: list            # parts whose sampled grid came out empty


def generate_coarse(model: PartDiT, boxes: Sequence[Aabb], cond: Optional[ConditionTokens],
                    seed: int, n: int, p: int, steps: int = 50, cfg_scale: float = 3.5,
                    noise_keys: Optional[Sequence[int]] = None,
                    clamp: Optional[dict] = None) -> CoarseResult:
    """Sample per-part full-resolution occupancy grids (plus the global grid)."""
    if not boxes:
        raise ValueError("generate_coarse: no boxes")
    if len(boxes) > model.config.k_max:
        raise ValueError(f"part count {len(boxes)} exceeds k_max {model.config.k_max}")
    template = coarse_slot_template(boxes, n, p, model.config.lattice, noise_keys)
    out, _ = sample(model, template, cond, steps=steps, cfg_scale=cfg_scale,
                    seed=seed, clamp=clamp)
    noises = []
    for slot in template.slots:
        key = slot.noise_id()
        if clamp and key in clamp:
            noises.append(clamp[key][1].clone())
        else:
            noises.append(slot_noise(slot, seed))

    global_grid = tokens_to_occupancy(OccupancyPatchTokens(n, p, out.slots[0].data))
    parts = []
    empty = []
    for i, box in enumerate(boxes):
        grid = tokens_to_occupancy(OccupancyPatchTokens(n, p, out.slots[i + 1].data))
        parts.append(PartOccupancy(part_id=i + 1, box=box, grid=grid))
        if grid.popcount() == 0:
            empty.append(i + 1)
    return CoarseResult(parts, global_grid, [s.data for s in out.slots], noises, empty)


def _occupied_patches(grid: VoxelGrid, p: int) -> np.ndarray:
    """Patch coords containing at least one occupied voxel, patch-linear order."""
    n = grid.n
    m = n // p
    blocks = grid.occ.reshape(m, p, m, p, m, p).any(axis=(1, 3, 5))  # (mx, my, mz)
    xs, ys, zs = np.nonzero(blocks)
    order = np.argsort(xs + m * ys + m * m * zs, kind="stable")
    return np.stack([xs, ys, zs], axis=1)[order].astype(np.int64)


def feature_slot_for_part(part: PartOccupancy, n: int, p: int, d_f: int,
                          voxel_budget: int, lattice: int = DEFAULT_LATTICE,
                          target_features: Optional[torch.Tensor] = None,
                          noise_key: Optional[int] = None) -> Optional[SlotTokens]:
    """Build the stage-3 slot for one part (or the global pseudo-part).

    Per-voxel granularity while the occupied count stays within the budget,
    per-occupied-patch otherwise.  ``target_features`` (L, d_f) per occupied
    voxel fills in training targets; zeros are used for sampling templates.
    Returns None for an empty part.
    """
    cells = part.grid.occupied_cells()
    if len(cells) == 0:
        return None
    if len(cells) <= voxel_budget:
        keys = voxel_keys(part.box, cells, n, lattice)
        data = torch.zeros(len(cells), d_f) if target_features is None else target_features
        return SlotTokens(part.part_id, data, kind=KIND_FEAT_VOXEL, keys=keys,
                          noise_key=noise_key)
    patches = _occupied_patches(part.grid, p)
    m = n // p
    payload = torch.zeros(len(patches), p**3 * d_f)
    if target_features is not None:
        index_of_patch = {tuple(pc): i for i, pc in enumerate(patches)}
        for row, cell in enumerate(cells):
            pc = (cell[0] // p, cell[1] // p, cell[2] // p)
            off = (cell[0] % p) + p * (cell[1] % p) + p * p * (cell[2] % p)
            payload[index_of_patch[pc], off * d_f : (off + 1) * d_f] = target_features[row]
    keys = torch.from_numpy(cell_keys_array(part.box, patches, n=m, r=lattice))
    return SlotTokens(part.part_id, payload, kind=KIND_FEAT_PATCH, keys=keys,
                      noise_key=noise_key)


def features_from_slot(slot: SlotTokens, part: PartOccupancy, p: int, d_f: int) -> torch.Tensor:
    """Per occupied voxel (L, d_f) features out of a sampled stage-3 slot."""
    cells = part.grid.occupied_cells()
    if slot.kind == KIND_FEAT_VOXEL:
        return slot.data
    patches = _occupied_patches(part.grid, p)
    index_of_patch = {tuple(pc): i for i, pc in enumerate(patches)}
    out = torch.zeros(len(cells), d_f)
    for row, cell in enumerate(cells):
        pc = (cell[0] // p, cell[1] // p, cell[2] // p)
        off = (cell[0] % p) + p * (cell[1] % p) + p * p * (cell[2] % p)
        out[row] = slot.data[index_of_patch[pc], off * d_f : (off + 1) * d_f]
    return out


@dataclass
class RefineResult:
    tokens: list                    # list[SparseVoxelTokens] per non-empty part
    x0: list                        # per-slot clean latents (incl. global slot)
    noise: list
    slot_part_ids: list             # part id per sampled slot (global first)


def refine(model: PartDiT, parts: Sequence[PartOccupancy], cond: Optional[ConditionTokens],
           seed: int, n: int, p: int, d_f: int, voxel_budget: int,
           color_codec: ColorCodec, steps: int = 50, cfg_scale: float = 3.5,
           global_part: Optional[PartOccupancy] = None,
           noise_keys: Optional[dict] = None,
           clamp: Optional[dict] = None) -> RefineResult:
    """Sample per-voxel features over occupied voxels and decode RGB colors."""
    noise_keys = noise_keys or {}
    slots = []
    slot_parts = []
    if global_part is not None and global_part.grid.popcount() > 0:
        slot = feature_slot_for_part(global_part, n, p, d_f, voxel_budget,
                                     model.config.lattice,
                                     noise_key=noise_keys.get(0, 0))
        slots.append(slot)
        slot_parts.append(global_part)
    real_parts = [pt for pt in parts if pt.grid.popcount() > 0]
    if not real_parts:
        raise ValueError("refine: all parts are empty")
    for pt in real_parts:
        slot = feature_slot_for_part(pt, n, p, d_f, voxel_budget, model.config.lattice,
                                     noise_key=noise_keys.get(pt.part_id, pt.part_id))
        slots.append(slot)
        slot_parts.append(pt)
    template = TokenStream(slots)
    out, _ = sample(model, template, cond, steps=steps, cfg_scale=cfg_scale,
                    seed=seed, clamp=clamp)
    noises = []
    for slot in template.slots:
        key = slot.noise_id()
        if clamp and key in clamp:
            noises.append(clamp[key][1].clone())
        else:
            noises.append(slot_noise(slot, seed))

    tokens = []
    for slot, pt in zip(out.slots, slot_parts):
        if global_part is not None and pt is global_part:
            continue
        feats = features_from_slot(slot, pt, p, d_f)
        colors = color_codec.decode(feats)
        tokens.append(
            SparseVoxelTokens(pt.part_id, pt.grid.occupied_cells(), feats, colors)
        )
    return RefineResult(tokens, [s.data for s in out.slots], noises,
                        [pt.part_id for pt in slot_parts])


def assemble(parts: Sequence[PartOccupancy],
             colors: Optional[dict] = None) -> list[tuple[int, TriMesh]]:
    """Per-part surface meshes placed in global space (no boolean merge).

    ``colors`` maps part_id -> SparseVoxelTokens (or None for uncolored).
    Empty parts are skipped; all-empty input is an error.
    """
    out = []
    for part in parts:
        if part.grid.popcount() == 0:
            continue
        field = None
        if colors is not None and part.part_id in colors:
            sv = colors[part.part_id]
            field = np.zeros((part.grid.n,) * 3 + (3,))
            pos = sv.positions
            field[pos[:, 0], pos[:, 1], pos[:, 2]] = sv.colors
        out.append((part.part_id, grid_to_cubes(part.grid, part.box, voxel_colors=field)))
    if not out:
        raise ValueError("assemble: all parts empty")
    return out
