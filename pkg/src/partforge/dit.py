"""Shared diffusion-transformer core for all three stages.

A token stream is a sequence of per-slot token blocks (slot 0 is the global
branch).  Blocks alternate intra-part attention (within one slot) and
inter-part attention (across all slots); every block cross-attends to the
condition tokens.  Training uses the conditional flow-matching objective on
the linear noise path; sampling integrates the learned velocity with a
fixed-step Euler scheme under classifier-free guidance, with optional per-slot
clamping to recorded clean latents (the editing / sequential-sampling hook).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .encoding import DEFAULT_LATTICE, EmbeddingTable
from .utils import mix_seed


@dataclass
class ModelConfig:
    depth: int = 8                    # total blocks; exactly depth/2 are inter-part
    width: int = 128                  # token width D inside the blocks
    heads: int = 4
    tokens_per_part: int = 8          # M for fixed-length stages
    k_max: int = 30
    lattice: int = DEFAULT_LATTICE
    data_widths: dict = field(default_factory=lambda: {"tok": 128})
    cond_tokens: int = 8
    cond_width: int = 64
    cond_input_dim: int = 3 * 32 * 32
    time_features: int = 64
    ffn_mult: int = 4
    block_pattern: Optional[tuple] = None  # derived when None: intra first

    def __post_init__(self):
        if self.depth % 2 != 0:
            raise ValueError("depth must be even (half the blocks are inter-part)")
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        if self.block_pattern is None:
            self.block_pattern = tuple(
                "intra" if i % 2 == 0 else "inter" for i in range(self.depth)
            )
        else:
            self.block_pattern = tuple(self.block_pattern)
        if len(self.block_pattern) != self.depth:
            raise ValueError("block_pattern length must equal depth")
        n_inter = sum(1 for b in self.block_pattern if b == "inter")
        if n_inter != self.depth // 2:
            raise ValueError(
                f"exactly depth/2 blocks must be inter-part, got {n_inter} of {self.depth}"
            )

    def to_json(self) -> str:
        d = asdict(self)
        d["block_pattern"] = list(self.block_pattern)
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(s: str) -> "ModelConfig":
        d = json.loads(s)
        d["block_pattern"] = tuple(d["block_pattern"])
        return ModelConfig(**d)


@dataclass
class SlotTokens:
    """One slot of a token stream: a token block plus its identity/keys."""

    part_id: int
    data: torch.Tensor                      # (L, W_kind)
    kind: str = "tok"
    real: bool = True
    keys: Optional[torch.Tensor] = None     # (L, 9, 3) int64 center-corner keys
    noise_key: Optional[int] = None         # defaults to part_id

    def noise_id(self) -> int:
        return self.part_id if self.noise_key is None else self.noise_key


class TokenStream:
    """Ordered slots plus the derived concatenated view and row ranges."""

    def __init__(self, slots: Sequence[SlotTokens]):
        self.slots = list(slots)
        if not self.slots:
            raise ValueError("TokenStream needs at least one slot")

    def ranges(self) -> list[tuple[int, int]]:
        out = []
        start = 0
        for s in self.slots:
            end = start + s.data.shape[0]
            out.append((start, end))
            start = end
        return out

    def concat(self) -> torch.Tensor:
        return torch.cat([s.data for s in self.slots], dim=0)

    def with_data(self, datas: Sequence[torch.Tensor]) -> "TokenStream":
        return TokenStream(
            [
                SlotTokens(s.part_id, d, s.kind, s.real, s.keys, s.noise_key)
                for s, d in zip(self.slots, datas)
            ]
        )

    def datas(self) -> list[torch.Tensor]:
        return [s.data for s in self.slots]


@dataclass
class ConditionTokens:
    """Encoded condition rows all part tokens may attend to."""

    tokens: torch.Tensor  # (n_cond, cond_width)


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """Multi-head softmax attention over (L, D) or batched (B, L, D) projections."""
    batched = q.dim() == 3
    if not batched:
        q, k, v = q.unsqueeze(0), k.unsqueeze(0), v.unsqueeze(0)
    b, lq, d = q.shape
    lk = k.shape[1]
    dh = d // heads
    qh = q.view(b, lq, heads, dh).transpose(1, 2)
    kh = k.view(b, lk, heads, dh).transpose(1, 2)
    vh = v.view(b, lk, heads, dh).transpose(1, 2)
    out = torch.nn.functional.scaled_dot_product_attention(qh, kh, vh)
    out = out.transpose(1, 2).reshape(b, lq, d)
    return out if batched else out.squeeze(0)


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, ranges: Optional[list] = None) -> torch.Tensor:
        """x is (R, D) or batched (B, R, D); ranges restricts attention per slot."""
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        if ranges is None:
            out = _attention(q, k, v, self.heads)
        else:
            lengths = {b - a for a, b in ranges}
            if len(lengths) == 1:
                # uniform slots: one batched attention instead of a slot loop
                m = lengths.pop()
                n_slots = len(ranges)
                d = q.shape[-1]
                shape = q.shape[:-2] + (n_slots, m, d)
                out = _attention(
                    q.view(shape).reshape(-1, m, d),
                    k.view(shape).reshape(-1, m, d),
                    v.view(shape).reshape(-1, m, d),
                    self.heads,
                ).view(q.shape)
            else:
                out = torch.empty_like(q)
                for a, b in ranges:
                    out[..., a:b, :] = _attention(
                        q[..., a:b, :], k[..., a:b, :], v[..., a:b, :], self.heads
                    )
        return self.proj(out)


class CrossAttention(nn.Module):
    def __init__(self, width: int, cond_width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.kv = nn.Linear(cond_width, 2 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        q = self.q(x)
        k, v = self.kv(cond).chunk(2, dim=-1)
        return self.proj(_attention(q, k, v, self.heads))


def intra_attention(attn: SelfAttention, x: torch.Tensor, ranges: list) -> torch.Tensor:
    """Self-attention restricted to each slot's row range."""
    return attn(x, ranges)


def inter_attention(attn: SelfAttention, x: torch.Tensor) -> torch.Tensor:
    """One self-attention over all rows of the stream."""
    return attn(x, None)


def cross_attention(cattn: CrossAttention, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Every stream row attends to every condition row."""
    return cattn(x, cond)


class Block(nn.Module):
    """Pre-LN transformer block with LayerScale-gated residual branches.

    The small gate init keeps the residual stream near the input scale, which
    preserves the model's sensitivity to the noisy tokens; without it the
    stream magnitude can inflate until the final norm drowns the data signal.
    """

    LAYERSCALE_INIT = 0.1

    def __init__(self, config: ModelConfig, mode: str):
        super().__init__()
        if mode not in ("intra", "inter"):
            raise ValueError(f"unknown block mode {mode!r}")
        self.mode = mode
        d = config.width
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, config.heads)
        self.norm2 = nn.LayerNorm(d)
        self.cross = CrossAttention(d, config.cond_width, config.heads)
        self.norm3 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, config.ffn_mult * d),
            nn.GELU(),
            nn.Linear(config.ffn_mult * d, d),
        )
        self.gamma1 = nn.Parameter(torch.full((d,), self.LAYERSCALE_INIT))
        self.gamma2 = nn.Parameter(torch.full((d,), self.LAYERSCALE_INIT))
        self.gamma3 = nn.Parameter(torch.full((d,), self.LAYERSCALE_INIT))

    def forward(self, x: torch.Tensor, ranges: list, cond: torch.Tensor) -> torch.Tensor:
        r = ranges if self.mode == "intra" else None
        x = x + self.gamma1 * self.attn(self.norm1(x), r)
        x = x + self.gamma2 * self.cross(self.norm2(x), cond)
        x = x + self.gamma3 * self.ffn(self.norm3(x))
        return x


def _time_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """(B,) or scalar timesteps -> (B, dim) or (dim,) sinusoidal features."""
    half = dim // 2
    freqs = torch.exp(
        math.log(1000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / max(half - 1, 1)
    )
    ang = t.reshape(-1, 1) * freqs
    feats = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return feats.squeeze(0) if t.dim() == 0 else feats


class PartDiT(nn.Module):
    """Velocity model v(x, t, condition) over part token streams."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.width
        self.in_proj = nn.ModuleDict(
            {kind: nn.Linear(w, d) for kind, w in config.data_widths.items()}
        )
        self.out_proj = nn.ModuleDict(
            {kind: nn.Linear(d, w) for kind, w in config.data_widths.items()}
        )
        for proj in self.out_proj.values():
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
        self.embeddings = EmbeddingTable(r=config.lattice, dim=d, k_max=config.k_max)
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_features, d), nn.SiLU(), nn.Linear(d, d)
        )
        self.cond_proj = nn.Linear(config.cond_input_dim, config.cond_tokens * config.cond_width)
        self.null_cond = nn.Parameter(0.02 * torch.randn(config.cond_tokens, config.cond_width,
                                                         generator=torch.Generator().manual_seed(23)))
        self.blocks = nn.ModuleList(Block(config, mode) for mode in config.block_pattern)
        self.final_norm = nn.LayerNorm(d)

    @property
    def dtype(self) -> torch.dtype:
        return self.null_cond.dtype

    def encode_condition(self, flat_input: torch.Tensor) -> ConditionTokens:
        """Linear embedding of the flattened condition (e.g. silhouette bits)."""
        c = self.config
        tokens = self.cond_proj(flat_input.to(self.dtype)).view(c.cond_tokens, c.cond_width)
        return ConditionTokens(tokens)

    def null_condition(self) -> ConditionTokens:
        return ConditionTokens(self.null_cond)

    def forward(self, stream: TokenStream, t: float | torch.Tensor,
                cond: Optional[ConditionTokens]) -> TokenStream:
        cfg = self.config
        ranges = stream.ranges()
        hs = []
        for slot in stream.slots:
            if slot.kind not in self.in_proj:
                raise ValueError(f"stream kind {slot.kind!r} not in model data_widths")
            h = self.in_proj[slot.kind](slot.data.to(self.dtype))
            if slot.keys is not None:
                h = h + self.embeddings.embed_keys(slot.keys, slot.part_id)
            else:
                h = h + self.embeddings.part_id(slot.part_id)
            hs.append(h)
        x = torch.cat(hs, dim=0)

        t_tensor = torch.as_tensor(t, dtype=self.dtype)
        x = x + self.time_mlp(_time_features(t_tensor, cfg.time_features))

        cond_rows = (cond.tokens if cond is not None else self.null_cond).to(self.dtype)
        for block in self.blocks:
            x = block(x, ranges, cond_rows)
        x = self.final_norm(x)

        outs = []
        for slot, (a, b) in zip(stream.slots, ranges):
            outs.append(self.out_proj[slot.kind](x[a:b]))
        return stream.with_data(outs)

    def forward_batched(self, streams: Sequence[TokenStream], ts: Sequence[float],
                        conds: Sequence[Optional[ConditionTokens]]) -> list[list[torch.Tensor]]:
        """Batched forward over streams with identical slot structure.

        Returns, per stream, the per-slot velocity tensors.  Equivalent to
        calling forward per stream, batched into single kernels for speed.
        """
        base = streams[0]
        ranges = base.ranges()
        hs = []
        for i, slot in enumerate(base.slots):
            x = torch.stack([st.slots[i].data for st in streams]).to(self.dtype)
            h = self.in_proj[slot.kind](x)
            if slot.keys is not None:
                keys = torch.stack([st.slots[i].keys for st in streams])
                h = h + self.embeddings.embed_keys(keys, slot.part_id)
            else:
                h = h + self.embeddings.part_id(slot.part_id)
            hs.append(h)
        x = torch.cat(hs, dim=1)  # (B, R, D)

        t_tensor = torch.as_tensor(list(ts), dtype=self.dtype)
        x = x + self.time_mlp(_time_features(t_tensor, self.config.time_features)).unsqueeze(1)

        cond_rows = torch.stack(
            [(c.tokens if c is not None else self.null_cond).to(self.dtype) for c in conds]
        )
        for block in self.blocks:
            x = block(x, ranges, cond_rows)
        x = self.final_norm(x)

        out: list[list[torch.Tensor]] = [[] for _ in streams]
        for slot, (a, b) in zip(base.slots, ranges):
            v = self.out_proj[slot.kind](x[:, a:b])
            for bi in range(len(streams)):
                out[bi].append(v[bi])
        return out


def cfm_loss(model: PartDiT, x0: TokenStream, eps: Sequence[torch.Tensor],
             t: float, cond: Optional[ConditionTokens]) -> torch.Tensor:
    """Flow-matching loss on the linear path x_t = (1-t) x0 + t eps.

    The regression target is the path's constant velocity (eps - x0); rows of
    padded slots are excluded from the mean via the slot mask.
    """
    xt = []
    for slot, e in zip(x0.slots, eps):
        xt.append((1.0 - t) * slot.data + t * e)
    v = model(x0.with_data(xt), t, cond)

    num = torch.zeros((), dtype=v.slots[0].data.dtype)
    count = 0
    for slot, vslot, e in zip(x0.slots, v.slots, eps):
        if not slot.real:
            continue
        target = e - slot.data
        num = num + ((vslot.data - target) ** 2).sum()
        count += target.numel()
    if count == 0:
        raise ValueError("cfm_loss: no real slots in stream")
    return num / count


def slot_noise(spec: SlotTokens, seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Per-slot unit Gaussian, derived from an independent sub-seed per slot."""
    gen = torch.Generator().manual_seed(mix_seed(seed, spec.noise_id()))
    return torch.randn(spec.data.shape, generator=gen, dtype=dtype)


def sample(model: PartDiT, template: TokenStream, cond: Optional[ConditionTokens],
           steps: int = 50, cfg_scale: float = 3.5, seed: int = 0,
           clamp: Optional[dict] = None,
           trace_keys: Optional[Sequence[int]] = None):
    """Euler integration of the learned velocity from t=1 (noise) to t=0.

    Classifier-free guidance mixes conditional and null-condition predictions:
    v = v_uncond + scale * (v_cond - v_uncond).  ``clamp`` maps a slot's noise
    key to its recorded (x0, eps); a clamped slot is pinned to
    (1-t) x0 + t eps at every step, so its final state is exactly x0.

    Returns (stream, trace) where trace[key] is [(t, state), ...] for each
    requested key, including the terminal t=0 state.
    """
    if steps <= 0:
        raise ValueError("sample: steps must be positive")
    clamp = clamp or {}
    trace: dict[int, list] = {k: [] for k in (trace_keys or [])}

    datas = []
    for slot in template.slots:
        key = slot.noise_id()
        if key in clamp:
            datas.append(clamp[key][1].clone())
        else:
            datas.append(slot_noise(slot, seed, dtype=model.dtype))
    state = template.with_data(datas)

    def apply_clamp(stream: TokenStream, t: float) -> TokenStream:
        if not clamp:
            return stream
        datas = []
        for slot in stream.slots:
            key = slot.noise_id()
            if key in clamp:
                x0c, epsc = clamp[key]
                # t=0 assigns x0 verbatim so frozen slots are reproduced bit-exactly
                datas.append(x0c.clone() if t == 0.0 else (1.0 - t) * x0c + t * epsc)
            else:
                datas.append(slot.data)
        return stream.with_data(datas)

    null = model.null_condition()
    dt = 1.0 / steps
    with torch.no_grad():
        for i in range(steps):
            t = 1.0 - i / steps
            state = apply_clamp(state, t)
            for slot in state.slots:
                if slot.noise_id() in trace:
                    trace[slot.noise_id()].append((t, slot.data.clone()))
            if cond is None:
                v = model(state, t, null)
            elif cfg_scale == 1.0:
                v = model(state, t, cond)
            elif cfg_scale == 0.0:
                v = model(state, t, null)
            elif hasattr(model, "forward_batched"):
                v_c, v_u = model.forward_batched([state, state], [t, t], [cond, null])
                v = state.with_data(
                    [u + cfg_scale * (c - u) for c, u in zip(v_c, v_u)]
                )
            else:
                v_c = model(state, t, cond)
                v_u = model(state, t, null)
                v = v_u.with_data(
                    [u.data + cfg_scale * (c.data - u.data) for c, u in zip(v_c.slots, v_u.slots)]
                )
            state = state.with_data(
                [s.data - dt * vs.data for s, vs in zip(state.slots, v.slots)]
            )
        state = apply_clamp(state, 0.0)
        for slot in state.slots:
            if slot.noise_id() in trace:
                trace[slot.noise_id()].append((0.0, slot.data.clone()))
    return state, trace


def cfm_loss_batched(model: PartDiT, items: Sequence[tuple]) -> torch.Tensor:
    """Mean cfm loss over same-structure (x0, eps_list, t, cond) items."""
    streams = []
    for x0, eps, t, _ in items:
        xt = [(1.0 - t) * slot.data + t * e for slot, e in zip(x0.slots, eps)]
        streams.append(x0.with_data(xt))
    vs = model.forward_batched(streams, [t for _, _, t, _ in items],
                               [c for _, _, _, c in items])
    total = torch.zeros((), dtype=model.dtype)
    for (x0, eps, _, _), v_slots in zip(items, vs):
        num = torch.zeros((), dtype=model.dtype)
        count = 0
        for slot, v, e in zip(x0.slots, v_slots, eps):
            if not slot.real:
                continue
            target = e - slot.data
            num = num + ((v - target) ** 2).sum()
            count += target.numel()
        if count == 0:
            raise ValueError("cfm_loss: no real slots in stream")
        total = total + num / count
    return total / len(items)


def stream_signature(stream: TokenStream) -> tuple:
    """Structure key: streams with equal signatures can be batched together."""
    return tuple(
        (s.part_id, s.kind, tuple(s.data.shape), s.keys is not None, s.real)
        for s in stream.slots
    )


def should_drop_condition(drop_prob: float, gen: torch.Generator) -> bool:
    """Bernoulli gate for classifier-free-guidance training dropout."""
    if drop_prob <= 0.0:
        return False
    if drop_prob >= 1.0:
        return True
    return bool(torch.rand((), generator=gen).item() < drop_prob)


def train_step(model: PartDiT, optimizer: torch.optim.Optimizer,
               batch: Sequence[tuple], drop_prob: float = 0.1,
               gen: Optional[torch.Generator] = None) -> float:
    """One optimizer step of conditional flow matching over a batch.

    Each batch item is (x0_stream, raw_cond_or_None) with raw_cond the flat
    condition input; it is encoded here so the condition encoder trains too.
    Per sample: the condition is replaced by the learned null rows with
    probability ``drop_prob``, the timestep is uniform in (0, 1), and the
    noise is fresh.
    """
    if not batch:
        raise ValueError("train_step: empty batch")
    gen = gen if gen is not None else torch.Generator().manual_seed(0)
    optimizer.zero_grad()
    items = []
    for x0, raw_cond in batch:
        if raw_cond is not None and should_drop_condition(drop_prob, gen):
            raw_cond = None
        cond_tokens = (
            model.encode_condition(raw_cond) if raw_cond is not None else model.null_condition()
        )
        t = float(torch.rand((), generator=gen).item()) * (1.0 - 2e-3) + 1e-3
        eps = [torch.randn(s.data.shape, generator=gen, dtype=model.dtype) for s in x0.slots]
        items.append((x0, eps, t, cond_tokens))

    # batch same-structure streams into single fused forwards
    groups: dict[tuple, list] = {}
    for item in items:
        groups.setdefault(stream_signature(item[0]), []).append(item)
    total = torch.zeros((), dtype=model.dtype)
    for group in groups.values():
        total = total + cfm_loss_batched(model, group) * len(group)
    loss = total / len(items)
    loss.backward()
    optimizer.step()
    return float(loss.detach())
