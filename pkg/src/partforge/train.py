"""Trainers for the three stages over the synthetic corpus.

All three stages share the flow-matching objective and differ only in how the
clean token streams are built:

  stage 1  padded box-token sequences (zero slots included in the loss so the
           model learns that empty slots decode to nothing),
  stage 2  patchified per-part occupancy with center-corner keys; boxes are
           jittered each step so generation tolerates imperfect layouts,
  stage 3  per-voxel (or per-patch) color-feature fields over occupied voxels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .dit import ModelConfig, PartDiT, SlotTokens, TokenStream, train_step
from .layout import BoxCodec, assemble_layout
from .stages import (
    KIND_FEAT_PATCH,
    KIND_FEAT_VOXEL,
    KIND_OCCUPANCY,
    ColorCodec,
    PartOccupancy,
    UNIT_BOX,
    augment_box,
    feature_slot_for_part,
    occupancy_to_tokens,
    patch_keys,
)
from .synthdata import ObjectSample, condition_input, global_voxel_colors
from .utils import mix_seed


@dataclass
class TrainSettings:
    steps: int = 1000
    lr: float = 1e-3
    batch_size: int = 4
    drop_prob: float = 0.1
    seed: int = 0
    lr_min_factor: float = 0.05
    log_every: int = 200


def _cond_tensor(sample: ObjectSample) -> torch.Tensor:
    return torch.from_numpy(condition_input(sample))


def _run_training(model: PartDiT, build_batch, settings: TrainSettings,
                  progress=None) -> list[float]:
    opt = torch.optim.AdamW(model.parameters(), lr=settings.lr, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=settings.steps, eta_min=settings.lr * settings.lr_min_factor
    )
    gen = torch.Generator().manual_seed(mix_seed(settings.seed, 7))
    pick = np.random.default_rng(mix_seed(settings.seed, 11))
    losses = []
    for step in range(settings.steps):
        batch = build_batch(pick)
        loss = train_step(model, opt, batch, drop_prob=settings.drop_prob, gen=gen)
        sched.step()
        losses.append(loss)
        if progress is not None and (step + 1) % settings.log_every == 0:
            progress(step + 1, settings.steps, float(np.mean(losses[-settings.log_every:])))
    return losses


# ------------------------------------------------------------------- stage 1

def layout_stream(codec: BoxCodec, sample: ObjectSample, capacity: int) -> TokenStream:
    """Clean stage-1 stream: global AABB slot, part slots, zero-padded slots.

    Padded slots are marked real so their zero blocks are regression targets;
    at inference empty slots then denoise toward zero tokens, which the codec
    decodes to a degenerate hexahedron that the validity filter drops.  Tokens
    are divided by the codec's latent scale so the diffusion state has unit
    variance.
    """
    seq = assemble_layout(codec, sample.boxes(), capacity,
                          global_box=sample.object_aabb())
    scale = float(codec.token_scale)
    slots = [SlotTokens(ts.part_id, ts.tokens / scale, kind="tok", real=True)
             for ts in seq.slots]
    return TokenStream(slots)


def train_layout_model(model: PartDiT, codec: BoxCodec, samples: Sequence[ObjectSample],
                       settings: TrainSettings, progress=None) -> list[float]:
    capacity = model.config.k_max
    streams = [layout_stream(codec, s, capacity) for s in samples]
    conds = [_cond_tensor(s) for s in samples]

    def build_batch(pick):
        idx = pick.integers(0, len(samples), size=min(settings.batch_size, len(samples)))
        return [(streams[i], conds[i]) for i in idx]

    return _run_training(model, build_batch, settings, progress)


# ------------------------------------------------------------------- stage 2

@dataclass
class CoarseExample:
    boxes: list                 # per-part Aabb (training layout)
    payloads: list              # per-slot (m^3, p^3) clean tokens, global first
    cond: torch.Tensor


def coarse_example(sample: ObjectSample, n: int, p: int) -> CoarseExample:
    payloads = [occupancy_to_tokens(sample.global_grid(n), p).data]
    boxes = []
    for part in sample.parts:
        payloads.append(occupancy_to_tokens(sample.part_grid(part, n), p).data)
        boxes.append(part.box)
    return CoarseExample(boxes, payloads, _cond_tensor(sample))


def coarse_stream(example: CoarseExample, n: int, p: int, lattice: int,
                  augment_rng=None) -> TokenStream:
    """Stream with fresh keys; boxes jittered when an augmentation rng is given."""
    slots = [SlotTokens(0, example.payloads[0], kind=KIND_OCCUPANCY,
                        keys=patch_keys(UNIT_BOX, n, p, lattice))]
    for i, box in enumerate(example.boxes):
        key_box = augment_box(box, augment_rng) if augment_rng is not None else box
        slots.append(SlotTokens(i + 1, example.payloads[i + 1], kind=KIND_OCCUPANCY,
                                keys=patch_keys(key_box, n, p, lattice)))
    return TokenStream(slots)


def _structure_groups(signatures: Sequence[tuple]) -> list[list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i, sig in enumerate(signatures):
        groups.setdefault(sig, []).append(i)
    return list(groups.values())


def train_coarse_model(model: PartDiT, samples: Sequence[ObjectSample],
                       settings: TrainSettings, n: int, p: int,
                       augment: bool = True, progress=None) -> list[float]:
    from .dit import stream_signature

    examples = [coarse_example(s, n, p) for s in samples]
    lattice = model.config.lattice
    aug_rng = np.random.default_rng(mix_seed(settings.seed, 13)) if augment else None
    # batches draw from one structure group so the whole step fuses
    groups = _structure_groups(
        [stream_signature(coarse_stream(e, n, p, lattice)) for e in examples]
    )

    def build_batch(pick):
        group = groups[pick.integers(0, len(groups))]
        idx = [group[j] for j in pick.integers(0, len(group), size=settings.batch_size)]
        return [(coarse_stream(examples[i], n, p, lattice, aug_rng), examples[i].cond)
                for i in idx]

    return _run_training(model, build_batch, settings, progress)


# ------------------------------------------------------------------- stage 3

def refine_stream(sample: ObjectSample, n: int, p: int, d_f: int, voxel_budget: int,
                  lattice: int, color_codec: ColorCodec) -> TokenStream:
    """Clean stage-3 stream: per-voxel color features for every non-empty part."""
    slots = []
    gglobal = sample.global_grid(n)
    if gglobal.popcount() > 0:
        colors = global_voxel_colors(sample, n)
        cells = gglobal.occupied_cells()
        feats = color_codec.encode(colors[cells[:, 0], cells[:, 1], cells[:, 2]])
        part = PartOccupancy(0, UNIT_BOX, gglobal)
        slots.append(feature_slot_for_part(part, n, p, d_f, voxel_budget, lattice,
                                           target_features=feats))
    for i, spec in enumerate(sample.parts):
        grid = sample.part_grid(spec, n)
        if grid.popcount() == 0:
            continue
        feats = color_codec.encode(np.tile(np.asarray(spec.color), (grid.popcount(), 1)))
        part = PartOccupancy(i + 1, spec.box, grid)
        slots.append(feature_slot_for_part(part, n, p, d_f, voxel_budget, lattice,
                                           target_features=feats))
    return TokenStream(slots)


def train_refine_model(model: PartDiT, samples: Sequence[ObjectSample],
                       settings: TrainSettings, n: int, p: int, d_f: int,
                       voxel_budget: int, color_codec: Optional[ColorCodec] = None,
                       progress=None) -> list[float]:
    from .dit import stream_signature

    color_codec = color_codec or ColorCodec(d_f)
    lattice = model.config.lattice
    streams = [refine_stream(s, n, p, d_f, voxel_budget, lattice, color_codec)
               for s in samples]
    conds = [_cond_tensor(s) for s in samples]
    groups = _structure_groups([stream_signature(s) for s in streams])

    def build_batch(pick):
        group = groups[pick.integers(0, len(groups))]
        idx = [group[j] for j in pick.integers(0, len(group), size=settings.batch_size)]
        return [(streams[i], conds[i]) for i in idx]

    return _run_training(model, build_batch, settings, progress)


# ------------------------------------------------------------ model builders

def layout_model_config(depth=8, width=128, heads=4, tokens_per_part=8, k_max=30,
                        lattice=2048, cond_tokens=8, cond_width=64) -> ModelConfig:
    return ModelConfig(depth=depth, width=width, heads=heads,
                       tokens_per_part=tokens_per_part, k_max=k_max, lattice=lattice,
                       data_widths={"tok": width}, cond_tokens=cond_tokens,
                       cond_width=cond_width)


def coarse_model_config(depth=8, width=128, heads=4, k_max=30, lattice=2048,
                        p=4, cond_tokens=8, cond_width=64) -> ModelConfig:
    return ModelConfig(depth=depth, width=width, heads=heads, tokens_per_part=0,
                       k_max=k_max, lattice=lattice,
                       data_widths={KIND_OCCUPANCY: p**3},
                       cond_tokens=cond_tokens, cond_width=cond_width)


def refine_model_config(depth=8, width=128, heads=4, k_max=30, lattice=2048,
                        p=4, d_f=8, cond_tokens=8, cond_width=64) -> ModelConfig:
    return ModelConfig(depth=depth, width=width, heads=heads, tokens_per_part=0,
                       k_max=k_max, lattice=lattice,
                       data_widths={KIND_FEAT_VOXEL: d_f, KIND_FEAT_PATCH: p**3 * d_f},
                       cond_tokens=cond_tokens, cond_width=cond_width)


def new_model(config: ModelConfig, seed: int = 0) -> PartDiT:
    """Deterministic construction: parameter init depends only on the seed."""
    torch.manual_seed(seed)
    return PartDiT(config)
