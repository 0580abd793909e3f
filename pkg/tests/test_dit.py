import math

import pytest
import torch

from partforge.dit import (
    Block,
    ConditionTokens,
    CrossAttention,
    ModelConfig,
    PartDiT,
    SelfAttention,
    SlotTokens,
    TokenStream,
    _attention,
    cfm_loss,
    cross_attention,
    inter_attention,
    intra_attention,
    sample,
    should_drop_condition,
    train_step,
)


def small_config(**kw) -> ModelConfig:
    defaults = dict(
        depth=2, width=16, heads=2, tokens_per_part=4, k_max=4, lattice=64,
        data_widths={"tok": 6}, cond_tokens=2, cond_width=8, cond_input_dim=12,
        time_features=8,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


def make_stream(k: int, m: int, w: int, gen: torch.Generator, real=None) -> TokenStream:
    slots = []
    for i in range(k + 1):
        data = torch.randn(m, w, generator=gen)
        is_real = True if real is None else real[i]
        slots.append(SlotTokens(part_id=i, data=data, real=is_real))
    return TokenStream(slots)


# -------------------------------------------------------------------- config

def test_config_rejects_odd_depth():
    with pytest.raises(ValueError):
        small_config(depth=3)


def test_config_rejects_wrong_inter_count():
    with pytest.raises(ValueError):
        small_config(depth=4, block_pattern=("intra", "intra", "intra", "inter"))


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        small_config(width=18, heads=4)


def test_config_pattern_has_half_inter_blocks():
    cfg = small_config(depth=8)
    assert sum(1 for b in cfg.block_pattern if b == "inter") == 4
    assert cfg.block_pattern[0] == "intra"


def test_config_json_roundtrip():
    cfg = small_config(depth=4)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


# ------------------------------------------------------------- attention ops

def masked_attention_oracle(attn: SelfAttention, x: torch.Tensor, ranges):
    """Full attention with an additive block-diagonal mask (-inf off-block)."""
    w = attn.qkv.weight
    b = attn.qkv.bias
    d = x.shape[1]
    q = x @ w[:d].T + b[:d]
    k = x @ w[d : 2 * d].T + b[d : 2 * d]
    v = x @ w[2 * d :].T + b[2 * d :]
    heads = attn.heads
    dh = d // heads
    n = x.shape[0]
    mask = torch.full((n, n), float("-inf"))
    if ranges is None:
        mask.zero_()
    else:
        for a, e in ranges:
            mask[a:e, a:e] = 0.0
    out = torch.empty(n, d)
    for h in range(heads):
        qh = q[:, h * dh : (h + 1) * dh]
        kh = k[:, h * dh : (h + 1) * dh]
        vh = v[:, h * dh : (h + 1) * dh]
        scores = qh @ kh.T / math.sqrt(dh) + mask
        out[:, h * dh : (h + 1) * dh] = torch.softmax(scores, dim=-1) @ vh
    return out @ attn.proj.weight.T + attn.proj.bias


@torch.no_grad()
def test_intra_attention_matches_masked_oracle():
    gen = torch.Generator().manual_seed(0)
    for trial in range(10):
        k = int(torch.randint(1, 4, (1,), generator=gen))
        m = int(torch.randint(1, 8, (1,), generator=gen))
        d = 16
        attn = SelfAttention(d, heads=2)
        stream = make_stream(k, m, d, gen)
        x = stream.concat()
        got = intra_attention(attn, x, stream.ranges())
        want = masked_attention_oracle(attn, x, stream.ranges())
        assert (got - want).abs().max() <= 1e-5


@torch.no_grad()
def test_inter_attention_matches_unmasked_oracle():
    gen = torch.Generator().manual_seed(1)
    attn = SelfAttention(16, heads=4)
    stream = make_stream(3, 4, 16, gen)
    x = stream.concat()
    got = inter_attention(attn, x)
    want = masked_attention_oracle(attn, x, None)
    assert (got - want).abs().max() <= 1e-5


@torch.no_grad()
def test_single_slot_intra_equals_inter():
    gen = torch.Generator().manual_seed(2)
    attn = SelfAttention(16, heads=2)
    stream = make_stream(0, 6, 16, gen)
    x = stream.concat()
    assert torch.allclose(intra_attention(attn, x, stream.ranges()), inter_attention(attn, x))


@torch.no_grad()
def test_attention_identical_values_pass_through():
    # Softmax convexity: if every value row is v, every output row is v.
    gen = torch.Generator().manual_seed(3)
    q = torch.randn(5, 8, generator=gen)
    k = torch.randn(5, 8, generator=gen)
    v = torch.randn(1, 8, generator=gen).repeat(5, 1)
    out = _attention(q, k, v, heads=2)
    assert torch.allclose(out, v, atol=1e-6)


@torch.no_grad()
def test_attention_zero_values_give_zero_output():
    gen = torch.Generator().manual_seed(4)
    q = torch.randn(4, 8, generator=gen)
    k = torch.randn(3, 8, generator=gen)
    v = torch.zeros(3, 8)
    assert torch.equal(_attention(q, k, v, heads=2), torch.zeros(4, 8))


@torch.no_grad()
def test_inter_attention_slot_permutation_equivariance():
    gen = torch.Generator().manual_seed(5)
    attn = SelfAttention(16, heads=2)
    m = 3
    stream = make_stream(2, m, 16, gen)
    x = stream.concat()
    perm_slots = [2, 0, 1]
    row_perm = torch.cat([torch.arange(p * m, (p + 1) * m) for p in perm_slots])
    out = inter_attention(attn, x)
    out_perm = inter_attention(attn, x[row_perm])
    assert torch.allclose(out[row_perm], out_perm, atol=1e-5)


@torch.no_grad()
def test_cross_attention_single_row_is_its_value():
    gen = torch.Generator().manual_seed(6)
    cattn = CrossAttention(16, cond_width=8, heads=2)
    x = torch.randn(5, 16, generator=gen)
    cond = torch.randn(1, 8, generator=gen)
    got = cross_attention(cattn, x, cond)
    kv = cond @ cattn.kv.weight.T + cattn.kv.bias
    v = kv[:, 16:]
    want = v.repeat(5, 1) @ cattn.proj.weight.T + cattn.proj.bias
    assert torch.allclose(got, want, atol=1e-6)


@torch.no_grad()
def test_cross_attention_duplicate_rows_no_change():
    gen = torch.Generator().manual_seed(7)
    cattn = CrossAttention(16, cond_width=8, heads=2)
    x = torch.randn(5, 16, generator=gen)
    cond = torch.randn(3, 8, generator=gen)
    a = cross_attention(cattn, x, cond)
    b = cross_attention(cattn, x, torch.cat([cond, cond], dim=0))
    assert torch.allclose(a, b, atol=1e-5)


# ------------------------------------------------------------------- forward

def test_forward_preserves_shapes():
    torch.manual_seed(0)
    cfg = small_config(depth=4)
    model = PartDiT(cfg)
    gen = torch.Generator().manual_seed(8)
    stream = make_stream(3, cfg.tokens_per_part, 6, gen)
    out = model(stream, 0.5, None)
    for s_in, s_out in zip(stream.slots, out.slots):
        assert s_out.data.shape == s_in.data.shape


def test_forward_zero_at_initialization():
    torch.manual_seed(0)
    model = PartDiT(small_config())
    gen = torch.Generator().manual_seed(9)
    stream = make_stream(2, 4, 6, gen)
    out = model(stream, 0.3, None)
    for s in out.slots:
        assert torch.equal(s.data, torch.zeros_like(s.data))


def test_forward_bitwise_deterministic():
    torch.manual_seed(1)
    model = PartDiT(small_config(depth=4))
    for p in model.parameters():
        p.data.add_(0.01)  # break the zero init so the output is nontrivial
    gen = torch.Generator().manual_seed(10)
    stream = make_stream(2, 4, 6, gen)
    cond = model.encode_condition(torch.randn(12, generator=gen))
    a = model(stream, 0.7, cond)
    b = model(stream, 0.7, cond)
    for sa, sb in zip(a.slots, b.slots):
        assert torch.equal(sa.data, sb.data)


def test_forward_rejects_unknown_kind():
    torch.manual_seed(2)
    model = PartDiT(small_config())
    stream = TokenStream([SlotTokens(0, torch.zeros(4, 6), kind="mystery")])
    with pytest.raises(ValueError):
        model(stream, 0.5, None)


# ------------------------------------------------------------------ cfm loss

class _TargetModel:
    """Stub velocity model returning exactly (eps - x0)."""

    def __init__(self, x0, eps):
        self.x0, self.eps = x0, eps
        self.dtype = torch.float32

    def __call__(self, stream, t, cond):
        return stream.with_data([e - s.data for s, e in zip(self.x0.slots, self.eps)])


def test_cfm_loss_zero_for_exact_model():
    gen = torch.Generator().manual_seed(11)
    x0 = make_stream(2, 4, 6, gen)
    eps = [torch.randn_like(s.data) for s in x0.slots]
    loss = cfm_loss(_TargetModel(x0, eps), x0, eps, 0.4, None)
    assert float(loss) == 0.0


def test_cfm_loss_matches_plugin_for_zero_model():
    # At init the model output is identically zero, so the loss must equal
    # mean((eps - x0)^2) over real slots.
    torch.manual_seed(3)
    model = PartDiT(small_config())
    gen = torch.Generator().manual_seed(12)
    x0 = make_stream(2, 4, 6, gen, real=[True, True, False])
    eps = [torch.randn(s.data.shape, generator=gen) for s in x0.slots]
    loss = cfm_loss(model, x0, eps, 0.5, None)
    want = torch.cat(
        [(e - s.data).reshape(-1) for s, e in zip(x0.slots, eps) if s.real]
    ).pow(2).mean()
    assert torch.allclose(loss, want, atol=1e-7)


def test_cfm_loss_requires_real_slot():
    gen = torch.Generator().manual_seed(13)
    x0 = make_stream(1, 2, 6, gen, real=[False, False])
    eps = [torch.zeros_like(s.data) for s in x0.slots]
    torch.manual_seed(4)
    model = PartDiT(small_config())
    with pytest.raises(ValueError):
        cfm_loss(model, x0, eps, 0.5, None)


def test_cfm_gradient_matches_finite_differences():
    torch.manual_seed(5)
    cfg = small_config(depth=2, width=8, heads=2, data_widths={"tok": 4}, time_features=4)
    model = PartDiT(cfg).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    gen = torch.Generator().manual_seed(14)
    x0 = TokenStream(
        [SlotTokens(i, torch.randn(3, 4, generator=gen, dtype=torch.float64)) for i in range(2)]
    )
    eps = [torch.randn(s.data.shape, generator=gen, dtype=torch.float64) for s in x0.slots]
    cond_input = torch.randn(12, generator=gen, dtype=torch.float64)
    t = 0.37

    def loss_fn():
        # re-encode the condition so finite differences see cond_proj too
        return cfm_loss(model, x0, eps, t, model.encode_condition(cond_input))

    loss = loss_fn()
    loss.backward()

    rng = torch.Generator().manual_seed(15)
    checked = 0
    for name, p in model.named_parameters():
        if p.grad is None or p.numel() == 0:
            continue
        flat = p.data.view(-1)
        idx = int(torch.randint(0, flat.numel(), (1,), generator=rng))
        h = 1e-5
        orig = float(flat[idx])
        flat[idx] = orig + h
        with torch.no_grad():
            up = float(loss_fn())
        flat[idx] = orig - h
        with torch.no_grad():
            down = float(loss_fn())
        flat[idx] = orig
        fd = (up - down) / (2 * h)
        an = float(p.grad.view(-1)[idx])
        scale = max(abs(fd), abs(an), 1e-8)
        assert abs(fd - an) / scale <= 1e-3, f"{name}[{idx}]: fd={fd} analytic={an}"
        checked += 1
    assert checked > 10


def test_padded_slot_inputs_get_zero_gradient_when_intra_only():
    # With intra-only attention and the padded slot masked out of the loss,
    # nothing the padded rows carry can reach the loss.
    torch.manual_seed(6)
    cfg = small_config(depth=2)
    blocks = [Block(cfg, "intra"), Block(cfg, "intra")]
    gen = torch.Generator().manual_seed(16)
    real = torch.randn(4, cfg.width, generator=gen, requires_grad=True)
    padded = torch.randn(4, cfg.width, generator=gen, requires_grad=True)
    x = torch.cat([real, padded])
    ranges = [(0, 4), (4, 8)]
    cond = torch.randn(2, cfg.cond_width, generator=gen)
    for b in blocks:
        x = b(x, ranges, cond)
    loss = x[:4].pow(2).mean()  # only the real slot contributes
    loss.backward()
    assert padded.grad is not None and torch.equal(padded.grad, torch.zeros_like(padded.grad))
    assert real.grad is not None and real.grad.abs().max() > 0


# ------------------------------------------------------------------ sampling

class _LinearToyModel:
    """v(x, t) = eps_hat - x: closed-form linear ODE for the Euler oracle."""

    def __init__(self, eps_hat):
        self.eps_hat = eps_hat
        self.dtype = torch.float32

    def null_condition(self):
        return None

    def __call__(self, stream, t, cond):
        return stream.with_data([self.eps_hat[i] - s.data for i, s in enumerate(stream.slots)])


def test_sample_euler_matches_linear_recurrence_oracle():
    gen = torch.Generator().manual_seed(17)
    template = TokenStream([SlotTokens(i, torch.zeros(3, 4)) for i in range(2)])
    eps_hat = [torch.randn(3, 4, generator=gen) for _ in range(2)]
    model = _LinearToyModel(eps_hat)
    steps = 8
    out, _ = sample(model, template, cond=None, steps=steps, cfg_scale=1.0, seed=5)

    # independent recurrence: x <- x - (1/S) (eps_hat - x)
    from partforge.dit import slot_noise

    for i, slot in enumerate(template.slots):
        x = slot_noise(slot, 5)
        for _ in range(steps):
            x = x - (1.0 / steps) * (eps_hat[i] - x)
        assert torch.equal(out.slots[i].data, x)


def test_sample_rejects_zero_steps():
    template = TokenStream([SlotTokens(0, torch.zeros(2, 4))])
    model = _LinearToyModel([torch.zeros(2, 4)])
    with pytest.raises(ValueError):
        sample(model, template, None, steps=0)


def test_sample_deterministic_given_seed():
    torch.manual_seed(7)
    cfg = small_config(depth=2)
    model = PartDiT(cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.02 * torch.randn_like(p))
    template = TokenStream([SlotTokens(i, torch.zeros(4, 6)) for i in range(3)])
    cond = model.encode_condition(torch.ones(12))
    a, _ = sample(model, template, cond, steps=4, cfg_scale=3.5, seed=11)
    b, _ = sample(model, template, cond, steps=4, cfg_scale=3.5, seed=11)
    c, _ = sample(model, template, cond, steps=4, cfg_scale=3.5, seed=12)
    for sa, sb in zip(a.slots, b.slots):
        assert torch.equal(sa.data, sb.data)
    assert any(not torch.equal(sa.data, sc.data) for sa, sc in zip(a.slots, c.slots))


def test_sample_cfg_scale_one_equals_conditional_only():
    torch.manual_seed(8)
    model = PartDiT(small_config(depth=2))
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.02 * torch.randn_like(p))

    calls = []
    orig_forward = model.forward

    def spy(stream, t, cond):
        calls.append(cond)
        return orig_forward(stream, t, cond)

    model.forward = spy
    template = TokenStream([SlotTokens(0, torch.zeros(2, 6))])
    cond = model.encode_condition(torch.ones(12))
    sample(model, template, cond, steps=3, cfg_scale=1.0, seed=0)
    assert all(c is cond for c in calls)  # null condition never evaluated


def test_sample_cfg_scale_zero_is_unconditional():
    torch.manual_seed(9)
    model = PartDiT(small_config(depth=2))
    template = TokenStream([SlotTokens(0, torch.zeros(2, 6))])
    cond = model.encode_condition(torch.ones(12))
    a, _ = sample(model, template, cond, steps=3, cfg_scale=0.0, seed=1)
    b, _ = sample(model, template, None, steps=3, cfg_scale=3.5, seed=1)
    for sa, sb in zip(a.slots, b.slots):
        assert torch.equal(sa.data, sb.data)


def test_sample_clamped_slot_reproduces_x0_exactly():
    torch.manual_seed(10)
    model = PartDiT(small_config(depth=2))
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.02 * torch.randn_like(p))
    template = TokenStream([SlotTokens(i, torch.zeros(3, 6)) for i in range(2)])
    gen = torch.Generator().manual_seed(18)
    x0 = torch.randn(3, 6, generator=gen)
    eps = torch.randn(3, 6, generator=gen)
    out, trace = sample(
        model, template, None, steps=5, seed=2,
        clamp={1: (x0, eps)}, trace_keys=[1],
    )
    assert torch.equal(out.slots[1].data, x0)
    for t, state in trace[1]:
        if t > 0.0:
            assert torch.equal(state, (1.0 - t) * x0 + t * eps)
    assert torch.equal(trace[1][-1][1], x0)


# ------------------------------------------------------------------ training

def test_drop_gate_monte_carlo_frequency():
    gen = torch.Generator().manual_seed(19)
    n = 10_000
    hits = sum(should_drop_condition(0.1, gen) for _ in range(n))
    assert abs(hits / n - 0.1) <= 0.01


def test_drop_gate_extremes():
    gen = torch.Generator().manual_seed(20)
    assert not any(should_drop_condition(0.0, gen) for _ in range(100))
    assert all(should_drop_condition(1.0, gen) for _ in range(100))


def test_train_step_rejects_empty_batch():
    torch.manual_seed(11)
    model = PartDiT(small_config())
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    with pytest.raises(ValueError):
        train_step(model, opt, [])


def test_train_step_overfits_single_stream():
    torch.manual_seed(12)
    cfg = small_config(depth=2)
    model = PartDiT(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=2e-3)
    gen = torch.Generator().manual_seed(21)
    x0 = make_stream(1, 4, 6, gen)
    raw_cond = torch.ones(12)
    tgen = torch.Generator().manual_seed(22)
    losses = [train_step(model, opt, [(x0, raw_cond)], drop_prob=0.0, gen=tgen) for _ in range(60)]
    assert losses[-1] < losses[0]
