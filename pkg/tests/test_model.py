import math

import numpy as np
import pytest

from oracles import full_model_fd, silu, tiny_config
from unipool_lab import tensor as T
from unipool_lab.config import ModelConfig, vanilla_config
from unipool_lab.experts import expert_param_count
from unipool_lab.model import build_model, count_params, total_loss


# ------------------------------------------------------------------ oracle
def _rms(x, w, eps):
    return x / np.sqrt((x * x).mean(-1, keepdims=True) + eps) * w


def _rope(x, pos, base):
    d = x.shape[-1]
    inv = 1.0 / base ** (np.arange(0, d, 2) / d)
    ang = pos * np.concatenate([inv, inv])
    h = d // 2
    rot = np.concatenate([-x[h:], x[:h]])
    return x * np.cos(ang) + rot * np.sin(ang)


def _scores(z, kind, sigma, c, eps):
    if kind == "softmax":
        e = np.exp(z - z.max())
        return e / e.sum()
    if kind == "sigmoid":
        return 1 / (1 + np.exp(-z))
    return sigma * c * np.maximum(z / (np.linalg.norm(z) + eps), 0)


def reference_logits(model, tokens):
    """Token-by-token, head-by-head forward written without the autodiff engine."""
    cfg = model.config
    B, S = tokens.shape
    nh, nkv, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    out = np.zeros((B, S, cfg.vocab_size))
    for b in range(B):
        x = model.embed.data[tokens[b]].copy()
        for l, blk in enumerate(model.blocks):
            h = _rms(x, blk.attn_norm.data, cfg.norm_eps)
            q = h @ blk.attn.wq.data
            k = h @ blk.attn.wk.data
            v = h @ blk.attn.wv.data
            att_out = np.zeros((S, nh * hd))
            for head in range(nh):
                kv = head // (nh // nkv)
                for i in range(S):
                    qi = _rope(q[i, head * hd:(head + 1) * hd], i, cfg.rope_base)
                    logits = np.array([
                        _rope(k[j, kv * hd:(kv + 1) * hd], j, cfg.rope_base) @ qi / math.sqrt(hd)
                        for j in range(i + 1)
                    ])
                    p = np.exp(logits - logits.max())
                    p /= p.sum()
                    att_out[i, head * hd:(head + 1) * hd] = p @ v[:i + 1, kv * hd:(kv + 1) * hd]
            x = x + att_out @ blk.attn.wo.data
            h = _rms(x, blk.ffn_norm.data, cfg.norm_eps)
            y = np.zeros_like(x)
            for i in range(S):
                if blk.ffn is not None:
                    e = blk.ffn
                    y[i] = (silu(h[i] @ e.w_gate.data) * (h[i] @ e.w_up.data)) @ e.w_down.data
                    continue
                rp = blk.router
                s = _scores(rp.weight.data @ h[i], rp.kind, None if rp.sigma is None else float(rp.sigma.data),
                            rp.c, rp.eps)
                order = sorted(range(len(s)), key=lambda j: (-s[j], j))[:cfg.top_k]
                g = s[order]
                if cfg.top_k > 1 and rp.kind != "norm_router":
                    g = g / g.sum()
                for gate, j in zip(g, order):
                    e = model.bank.experts[blk.offset + j]
                    y[i] += gate * (silu(h[i] @ e.w_gate.data) * (h[i] @ e.w_up.data)) @ e.w_down.data
            x = x + y
        x = _rms(x, model.final_norm.data, cfg.norm_eps)
        out[b] = x @ model.lm_head.data
    return out


CONFIGS = {
    "unipool_norm_router": tiny_config(init_std=0.3),
    "vanilla_softmax": tiny_config(n_groups=2, router="softmax", aux_alpha=1e-2, pool_alpha=0.0, init_std=0.3),
    "grouped_sigmoid_top2": tiny_config(n_layers=4, n_groups=2, router="sigmoid", top_k=2, init_std=0.3),
    "dense": tiny_config(mode="dense", init_std=0.3),
    "norm_router_top2": tiny_config(top_k=2, init_std=0.3),
}


@pytest.mark.parametrize("name", sorted(CONFIGS))
def test_forward_matches_reference_loop(name):
    model = build_model(CONFIGS[name], seed=3)
    tokens = np.random.default_rng(0).integers(0, 259, (2, 7))
    logits = model.forward(tokens).logits.data
    assert logits.shape == (2, 7, 259)
    assert np.allclose(logits, reference_logits(model, tokens), rtol=0, atol=1e-10)


def test_causality():
    model = build_model(tiny_config(init_std=0.3), seed=1)
    t = np.random.default_rng(1).integers(0, 256, (1, 10))
    a = model.forward(t).logits.data
    t2 = t.copy()
    t2[0, 6] = (t2[0, 6] + 1) % 256
    b = model.forward(t2).logits.data
    assert np.array_equal(a[0, :6], b[0, :6])
    assert not np.allclose(a[0, 6:], b[0, 6:])


def test_token_validation():
    model = build_model(tiny_config(), seed=0)
    with pytest.raises(ValueError):
        model.forward(np.array([[0, 259]]))
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 17), dtype=np.int64))
    with pytest.raises(TypeError):
        model.forward(np.zeros((1, 3)))


# ------------------------------------------------- full-model gradient check
FD_CONFIGS = {
    "unipool_pool_aux": tiny_config(experts_per_layer=4, init_std=0.3),
    "vanilla_per_layer_aux": tiny_config(n_groups=2, router="softmax", aux_alpha=1e-1, pool_alpha=0.0, init_std=0.3),
    "shared_sigmoid_top2_pool_aux": tiny_config(router="sigmoid", top_k=2, pool_alpha=1e-1, init_std=0.3),
    "dense": tiny_config(mode="dense", init_std=0.3),
}


@pytest.mark.parametrize("name", sorted(FD_CONFIGS))
def test_total_loss_gradient_matches_finite_differences(name):
    assert full_model_fd(FD_CONFIGS[name]) < 1e-4


# ------------------------------------------------------ gradient isolation
def _pool_only(cfg, seed, detach):
    model = build_model(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, 259, (2, 9))
    arts = model.forward(tokens[:, :-1], detach_router_inputs=detach)
    f_bar = rng.dirichlet(np.ones(cfg.num_experts))
    loss = total_loss(arts, tokens[:, 1:], cfg, f_bar).pool
    params = model.params()
    grads = T.backward(loss, params=list(params.values()))
    return {n: grads[p] for n, p in params.items()}


def test_pool_loss_direct_path_leaves_experts_untouched():
    g = _pool_only(tiny_config(init_std=0.3), 5, detach=True)
    for n, v in g.items():
        if n.startswith("experts."):
            assert np.all(v == 0.0), n
    assert max(np.abs(v).max() for n, v in g.items() if ".router." in n) > 0


def test_pool_loss_reaches_lower_experts_through_the_residual_stream():
    # without detaching, layer 1's router reads a residual stream that layer 0's experts wrote
    g = _pool_only(tiny_config(init_std=0.3), 5, detach=False)
    assert any(np.abs(v).max() > 0 for n, v in g.items() if n.startswith("experts."))


# --------------------------------------------------------- loss plumbing
def test_uniform_routing_stats_give_ce_plus_alpha():
    cfg = vanilla_config(2, 4, hidden=16, n_heads=2, n_kv_heads=1, seq_len=8)
    model = build_model(cfg, seed=0)
    for r in model.routers():
        r.weight.data[...] = 0.0  # softmax scores uniform
    tokens = np.random.default_rng(0).integers(0, 256, (1, 9))

    def round_robin(l, dec):
        n = dec.num_tokens
        ids = model.bank.layer_slice(l).start + (np.arange(n) % 4)
        return ids[:, None], np.ones((n, 1))

    arts = model.forward(tokens[:, :-1], routing_override={0: round_robin, 1: round_robin})
    lb = total_loss(arts, tokens[:, 1:], cfg)
    assert abs(lb.aux.item() - 1e-2) <= 1e-12
    assert abs(lb.total.item() - (lb.ce.item() + 1e-2)) <= 1e-12


def test_pool_loss_at_uniform_statistics_equals_alpha():
    cfg = tiny_config(router="softmax")
    model = build_model(cfg, seed=0)
    for r in model.routers():
        r.weight.data[...] = 0.0
    tokens = np.random.default_rng(0).integers(0, 256, (1, 9))
    lb = total_loss(model.forward(tokens[:, :-1]), tokens[:, 1:], cfg)
    assert abs(lb.pool.item() - 1e-2) <= 1e-12


def test_registry_and_parameter_counts():
    uni = build_model(tiny_config(experts_per_layer=4), seed=0)
    van = build_model(tiny_config(n_groups=2, router="softmax", aux_alpha=1e-2, pool_alpha=0.0), seed=0)
    cu, cv = count_params(uni), count_params(van)
    assert cu["expert"] == cv["expert"] == expert_param_count(uni.bank)
    # shared-pool routers score all 8 experts; vanilla routers score their own 4
    assert cu["router"] == 2 * 8 * 16 + 2 and cv["router"] == 2 * 4 * 16
    names = list(uni.params())
    assert len(names) == len(set(names))
    assert sum(n.startswith("experts.") for n in names) == 3 * 8
    assert cu["total"] == sum(p.size for p in uni.params().values())


def test_restricted_router_selects_inside_range_and_pads_stats():
    cfg = tiny_config(experts_per_layer=4)
    model = build_model(cfg, seed=2)
    tokens = np.random.default_rng(2).integers(0, 256, (2, 8))
    arts = model.forward(tokens, restrict={1: range(2, 5)})
    idx = arts.decisions[1].topk_indices
    assert idx.min() >= 2 and idx.max() < 5
    P = arts.stats[1].P.data
    assert P.shape == (8,) and np.all(P[:2] == 0) and np.all(P[5:] == 0)


def test_routing_override_replaces_selection():
    cfg = tiny_config()
    model = build_model(cfg, seed=2)
    tokens = np.random.default_rng(2).integers(0, 256, (1, 8))
    arts = model.forward(tokens, routing_override={0: lambda l, d: (np.full((d.num_tokens, 1), 7), np.ones((d.num_tokens, 1)))})
    assert np.all(arts.decisions[0].topk_indices == 7)
    assert np.array_equal(arts.stats[0].f, np.eye(8)[7])


def test_config_with_both_aux_losses_is_rejected():
    with pytest.raises(Exception) as ei:
        ModelConfig(aux_alpha=0.01, pool_alpha=0.01)
    assert "pool_alpha" in str(ei.value)
