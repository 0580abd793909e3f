"""Stage 1: part bounding boxes as latent token sets.

Boxes enter the diffusion model as small token blocks produced by a trainable
box codec (sinusoidal featurization of the six box parameters followed by one
affine map; the decoder pools tokens back to eight vertex coordinates).  The
codec is also trained to decode all-zero token blocks to a degenerate vertex
set, so empty layout slots sampled at inference die in the validity filter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .geometry import Aabb, DegenerateBoxError, Vec3, aabb_of_mesh, nms, points_in_hexahedron
from .voxel import cell_centers

N_FEAT_FREQS = 4


@dataclass
class PartTokenSet:
    part_id: int                 # 0 is the global branch
    tokens: torch.Tensor         # (M, D)


@dataclass
class LayoutSequence:
    """Slots [T_0, T_1, ..., T_K'] plus the real-slot mask (slot 0 included)."""

    slots: list                  # (K'+1) PartTokenSet
    mask: list                   # (K'+1) bool; False = zero padding

    def __post_init__(self):
        if len(self.slots) != len(self.mask):
            raise ValueError("mask length must match slot count")

    @property
    def capacity(self) -> int:
        return len(self.slots) - 1


def _box_features(boxes: torch.Tensor) -> torch.Tensor:
    """(B, 6) min/max params -> (B, F) raw + sinusoidal features."""
    feats = [boxes]
    for j in range(N_FEAT_FREQS):
        w = (2.0**j) * math.pi
        feats.append(torch.sin(w * boxes))
        feats.append(torch.cos(w * boxes))
    return torch.cat(feats, dim=-1)


FEAT_DIM = 6 * (1 + 2 * N_FEAT_FREQS)


class BoxCodec(nn.Module):
    """Encoder box -> (M, D) tokens; decoder tokens -> 8 vertices.

    Stands in for a shape VAE: boxes live as token sets in the diffusion latent
    space and decoding may deform, which is why the pipeline recomputes AABBs
    and filters by volumetric validity afterwards.
    """

    def __init__(self, tokens_per_part: int = 8, width: int = 128):
        super().__init__()
        self.m = tokens_per_part
        self.d = width
        self.encoder = nn.Linear(FEAT_DIM, self.m * self.d)
        self.decoder = nn.Linear(self.d, 24)
        # per-element std of encoded tokens over random boxes; the diffusion
        # stage trains on tokens divided by this so the data has unit scale
        self.register_buffer("token_scale", torch.ones(()))

    def encode_params(self, params: torch.Tensor) -> torch.Tensor:
        """(B, 6) -> (B, M, D)."""
        return self.encoder(_box_features(params)).view(-1, self.m, self.d)

    def decode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, M, D) or (M, D) -> (B, 8, 3) or (8, 3) vertices in binary order."""
        single = tokens.dim() == 2
        if single:
            tokens = tokens.unsqueeze(0)
        verts = self.decoder(tokens.mean(dim=1)).view(-1, 8, 3)
        return verts[0] if single else verts


def encode_box(codec: BoxCodec, box: Aabb) -> PartTokenSet:
    """Token block for one box (no ID term); deterministic given the codec."""
    box.require_positive_extent("encode_box")
    params = torch.tensor(
        np.concatenate([box.min_array(), box.max_array()]), dtype=torch.float32
    ).unsqueeze(0)
    with torch.no_grad():
        tokens = codec.encode_params(params)[0]
    return PartTokenSet(part_id=0, tokens=tokens)


def add_box_id(token_set: PartTokenSet, id_table: torch.Tensor) -> PartTokenSet:
    """Every row incremented by the ID embedding of the set's part id."""
    if not 0 <= token_set.part_id < id_table.shape[0]:
        raise ValueError(f"part id {token_set.part_id} out of range for ID table")
    return PartTokenSet(token_set.part_id, token_set.tokens + id_table[token_set.part_id])


def add_box_ids(seq: LayoutSequence, id_table: torch.Tensor) -> LayoutSequence:
    """Apply add_box_id to real slots only; padded slots must stay exactly zero."""
    slots = []
    for slot, real in zip(seq.slots, seq.mask):
        slots.append(add_box_id(slot, id_table) if real else slot)
    return LayoutSequence(slots, list(seq.mask))


def top_k_by_volume(boxes: Sequence[Aabb], k: int) -> list[int]:
    """Indices of the k largest boxes, ties by original index, in input order."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].volume(), i))[:k]
    return sorted(order)


def assemble_layout(codec: BoxCodec, boxes: Sequence[Aabb], capacity: int = 30,
                    global_box: Optional[Aabb] = None) -> LayoutSequence:
    """Padded layout sequence: slot 0 = global branch, then up to ``capacity`` parts.

    Overflow keeps the largest boxes; remaining slots are all-zero token blocks.
    """
    if not boxes:
        raise ValueError("assemble_layout: need at least one box")
    keep = top_k_by_volume(boxes, capacity) if len(boxes) > capacity else list(range(len(boxes)))
    if global_box is None:
        mn = np.min([boxes[i].min_array() for i in keep], axis=0)
        mx = np.max([boxes[i].max_array() for i in keep], axis=0)
        global_box = Aabb.from_arrays(mn, mx)

    slots = [PartTokenSet(0, encode_box(codec, global_box).tokens)]
    mask = [True]
    for slot_id, box_idx in enumerate(keep, start=1):
        slots.append(PartTokenSet(slot_id, encode_box(codec, boxes[box_idx]).tokens))
        mask.append(True)
    for slot_id in range(len(keep) + 1, capacity + 1):
        slots.append(PartTokenSet(slot_id, torch.zeros(codec.m, codec.d)))
        mask.append(False)
    return LayoutSequence(slots, mask)


def hexahedron_validity_iou(vertices: np.ndarray, samples_per_axis: int = 64) -> tuple[float, Aabb | None]:
    """Volumetric IoU between a decoded hexahedron and its own AABB.

    Sampled on the AABB's cell-center lattice.  Returns (iou, aabb); a
    degenerate vertex set yields (0, None).
    """
    verts = np.asarray(vertices, dtype=np.float64)
    try:
        aabb = aabb_of_mesh(verts).require_positive_extent()
    except (DegenerateBoxError, ValueError):
        return 0.0, None
    if aabb.volume() < 1e-9:
        return 0.0, None
    centers = cell_centers(aabb, samples_per_axis).reshape(-1, 3)
    frac = float(points_in_hexahedron(verts, centers).mean())
    return frac, aabb


def decode_and_filter(codec: BoxCodec, seq: LayoutSequence,
                      validity_iou: float = 0.85, nms_iou: float = 0.7,
                      samples_per_axis: int = 64) -> list[Aabb]:
    """Decode part slots to hexahedra, keep the volumetrically box-like ones.

    Per real part slot: decode 8 vertices, recompute the AABB, estimate the
    hexahedron/AABB volume ratio on a cell-center lattice, discard slots below
    ``validity_iou`` or with near-zero volume, then apply NMS.  Slot 0 (the
    global branch) never yields a part box.
    """
    candidates = []
    with torch.no_grad():
        for slot, real in zip(seq.slots[1:], seq.mask[1:]):
            if not real:
                continue
            verts = codec.decode_tokens(slot.tokens).numpy()
            frac, aabb = hexahedron_validity_iou(verts, samples_per_axis)
            if aabb is None or frac < validity_iou:
                continue
            candidates.append(aabb)
    return nms(candidates, nms_iou)


def boxes_to_layout_json(boxes: Sequence[Aabb]) -> str:
    """Layout exchange format: JSON array of {part_id, min, max}."""
    return json.dumps(
        [
            {
                "part_id": i + 1,
                "min": [float(v) for v in b.min_array()],
                "max": [float(v) for v in b.max_array()],
            }
            for i, b in enumerate(boxes)
        ],
        sort_keys=True,
    )


def layout_json_to_boxes(payload: str) -> list[Aabb]:
    return [Aabb(Vec3(*e["min"]), Vec3(*e["max"])) for e in json.loads(payload)]


def train_box_codec(codec: BoxCodec, steps: int = 3000, batch: int = 256,
                    lr: float = 3e-3, seed: int = 0, zero_anchor_weight: float = 0.05):
    """Corner-reconstruction training on random boxes.

    Also anchors all-zero token blocks to all-zero (coincident) vertices so
    sampled padding decodes to a degenerate hexahedron.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=lr * 0.03)
    zero_tokens = torch.zeros(1, codec.m, codec.d)
    losses = []
    for _ in range(steps):
        lo = torch.rand(batch, 3, generator=gen) * 1.8 - 1.0
        ext = torch.rand(batch, 3, generator=gen) * (1.0 - lo - 0.05) + 0.05
        hi = lo + ext
        params = torch.cat([lo, hi], dim=1)
        corners = _corners_from_params(params)
        decoded = codec.decode_tokens(codec.encode_params(params))
        loss = ((decoded - corners) ** 2).mean()
        loss = loss + zero_anchor_weight * (codec.decode_tokens(zero_tokens) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(float(loss.detach()))

    with torch.no_grad():
        lo = torch.rand(512, 3, generator=gen) * 1.8 - 1.0
        ext = torch.rand(512, 3, generator=gen) * (1.0 - lo - 0.05) + 0.05
        tokens = codec.encode_params(torch.cat([lo, lo + ext], dim=1))
        codec.token_scale.fill_(float(tokens.std()))
    return losses


def _corners_from_params(params: torch.Tensor) -> torch.Tensor:
    """(B, 6) min/max -> (B, 8, 3) corners in binary order."""
    lo, hi = params[:, :3], params[:, 3:]
    corners = torch.empty(params.shape[0], 8, 3, dtype=params.dtype)
    for i in range(8):
        corners[:, i, 0] = hi[:, 0] if i & 1 else lo[:, 0]
        corners[:, i, 1] = hi[:, 1] if i & 2 else lo[:, 1]
        corners[:, i, 2] = hi[:, 2] if i & 4 else lo[:, 2]
    return corners


def codec_roundtrip_error(codec: BoxCodec, n_boxes: int = 512, seed: int = 1) -> float:
    """Max corner abs error of decode(encode(box)) over random boxes."""
    gen = torch.Generator().manual_seed(seed)
    lo = torch.rand(n_boxes, 3, generator=gen) * 1.8 - 1.0
    ext = torch.rand(n_boxes, 3, generator=gen) * (1.0 - lo - 0.05) + 0.05
    params = torch.cat([lo, lo + ext], dim=1)
    with torch.no_grad():
        decoded = codec.decode_tokens(codec.encode_params(params))
    return float((decoded - _corners_from_params(params)).abs().max())
