"""Miniature LLaMA-style decoder with dense, layer-private, grouped or shared-pool FFNs."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .balancing import LayerRoutingStats, layer_stats, per_layer_aux, pool_aux
from .config import ModelConfig
from .experts import ExpertBank, SwiGLUExpert, build_bank, dispatch_combine
from .routing import RouterDecision, RouterParams, monte_carlo_c, route
from .tensor import Tensor

_MASK_VALUE = -1e30

# (layer, decision) -> (pool expert ids (N, k), gates (N, k))
RoutingOverride = Callable[[int, RouterDecision], tuple[np.ndarray, np.ndarray]]


@functools.lru_cache(maxsize=None)
def calibrated_c(E: int, k: int, samples: int) -> float:
    return monte_carlo_c(E, k, N=samples, seed=0)


@dataclass
class ForwardArtifacts:
    logits: Tensor
    decisions: list[RouterDecision] = field(default_factory=list)
    stats: list[LayerRoutingStats] = field(default_factory=list)
    router_inputs: list[np.ndarray] | None = None


@dataclass
class LossBreakdown:
    total: Tensor
    ce: Tensor
    aux: Tensor | None = None
    pool: Tensor | None = None

    def floats(self) -> dict[str, float]:
        return {
            "ce": self.ce.item(),
            "aux": self.aux.item() if self.aux is not None else 0.0,
            "pool": self.pool.item() if self.pool is not None else 0.0,
            "total": self.total.item(),
        }


class Attention:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        H, hd = cfg.hidden, cfg.head_dim
        std = cfg.init_std
        self.n_heads, self.n_kv, self.hd = cfg.n_heads, cfg.n_kv_heads, hd
        self.wq = Tensor(rng.normal(0, std, (H, cfg.n_heads * hd)), requires_grad=True)
        self.wk = Tensor(rng.normal(0, std, (H, cfg.n_kv_heads * hd)), requires_grad=True)
        self.wv = Tensor(rng.normal(0, std, (H, cfg.n_kv_heads * hd)), requires_grad=True)
        self.wo = Tensor(rng.normal(0, std, (cfg.n_heads * hd, H)), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}

    def __call__(self, h: Tensor, B: int, S: int, cos, sin, mask) -> Tensor:
        nh, nkv, hd = self.n_heads, self.n_kv, self.hd
        grp = nh // nkv
        q = (h @ self.wq).reshape(B, S, nh, hd).transpose(0, 2, 1, 3)
        k = (h @ self.wk).reshape(B, S, nkv, hd).transpose(0, 2, 1, 3)
        v = (h @ self.wv).reshape(B, S, nkv, hd).transpose(0, 2, 1, 3)
        q = T.apply_rope(q, cos, sin).reshape(B, nkv, grp, S, hd)
        k = T.apply_rope(k, cos, sin).reshape(B, nkv, 1, S, hd)
        v = v.reshape(B, nkv, 1, S, hd)
        att = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd)) + mask[:S, :S]
        o = T.softmax(att, axis=-1) @ v
        o = o.reshape(B, nh, S, hd).transpose(0, 2, 1, 3).reshape(B * S, nh * hd)
        return o @ self.wo


class Block:
    def __init__(self, cfg: ModelConfig, layer: int, rng: np.random.Generator, bank: ExpertBank | None):
        self.layer = layer
        self.attn_norm = Tensor(np.ones(cfg.hidden), requires_grad=True)
        self.attn = Attention(cfg, rng)
        self.ffn_norm = Tensor(np.ones(cfg.hidden), requires_grad=True)
        self.router: RouterParams | None = None
        self.ffn: SwiGLUExpert | None = None
        if cfg.mode == "dense":
            self.ffn = SwiGLUExpert(cfg.hidden, cfg.ffn_dim, rng, cfg.init_std)
        else:
            r = bank.layer_slice(layer)
            self.offset = r.start
            c = cfg.router_c
            if cfg.router == "norm_router" and c is None:
                c = calibrated_c(len(r), cfg.top_k, cfg.router_c_samples)
            w = Tensor(rng.normal(0, cfg.init_std, (len(r), cfg.hidden)), requires_grad=True)
            self.router = RouterParams(weight=w, kind=cfg.router, c=c if c is not None else 1.0, eps=cfg.router_eps)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.attn_norm": self.attn_norm}
        out.update({f"{prefix}.attn.{k}": v for k, v in self.attn.params().items()})
        out[f"{prefix}.ffn_norm"] = self.ffn_norm
        if self.ffn is not None:
            out.update({f"{prefix}.ffn.{k}": v for k, v in self.ffn.params().items()})
        if self.router is not None:
            out.update({f"{prefix}.router.{k}": v for k, v in self.router.trainable().items()})
        return out


class Model:
    """Decoder stack; in MoE modes every block routes into ``self.bank``.

    A single bank object is shared by all blocks, so a pool expert is one set of
    parameter tensors whatever layer invokes it.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg
        rng = np.random.default_rng(seed)
        std = cfg.init_std
        self.embed = Tensor(rng.normal(0, std, (cfg.vocab_size, cfg.hidden)), requires_grad=True)
        self.bank = build_bank(cfg, rng) if cfg.mode == "moe" else None
        self.blocks = [Block(cfg, l, rng, self.bank) for l in range(cfg.n_layers)]
        self.final_norm = Tensor(np.ones(cfg.hidden), requires_grad=True)
        self.lm_head = None if cfg.tied_embeddings else Tensor(rng.normal(0, std, (cfg.hidden, cfg.vocab_size)), requires_grad=True)
        self.cos, self.sin = T.rope_tables(cfg.seq_len, cfg.head_dim, cfg.rope_base)
        self.mask = np.triu(np.full((cfg.seq_len, cfg.seq_len), _MASK_VALUE), k=1)

    # ------------------------------------------------------------- registry
    def params(self) -> dict[str, Tensor]:
        """Trainable-parameter registry; shared experts appear exactly once."""
        out = {"embed.weight": self.embed}
        for l, b in enumerate(self.blocks):
            out.update(b.params(f"layers.{l}"))
        if self.bank is not None:
            out.update(self.bank.params())
        out["final_norm"] = self.final_norm
        if self.lm_head is not None:
            out["lm_head.weight"] = self.lm_head
        return out

    def routers(self) -> list[RouterParams]:
        return [b.router for b in self.blocks if b.router is not None]

    # -------------------------------------------------------------- forward
    def forward(
        self,
        tokens,
        routing_override: dict[int, RoutingOverride] | None = None,
        restrict: dict[int, range] | None = None,
        detach_router_inputs: bool = False,
        capture_router_inputs: bool = False,
    ) -> ForwardArtifacts:
        """Causal forward over integer ``tokens`` (B, S).

        ``restrict`` limits a layer's router to a sub-range of its experts;
        ``routing_override`` replaces a layer's selected experts and gates after
        scoring; ``detach_router_inputs`` cuts the residual stream out of the
        router's input gradient.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if not np.issubdtype(tokens.dtype, np.integer):
            raise TypeError("token ids must be integers")
        B, S = tokens.shape
        if S > cfg.seq_len:
            raise ValueError(f"sequence length {S} exceeds seq_len={cfg.seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
        x = T.embedding(self.embed, tokens.reshape(-1))
        arts = ForwardArtifacts(logits=None, router_inputs=[] if capture_router_inputs else None)
        for l, blk in enumerate(self.blocks):
            h = T.rms_norm(x, blk.attn_norm, cfg.norm_eps)
            x = x + blk.attn(h, B, S, self.cos, self.sin, self.mask)
            h = T.rms_norm(x, blk.ffn_norm, cfg.norm_eps)
            if blk.ffn is not None:
                x = x + blk.ffn(h)
                continue
            if capture_router_inputs:
                arts.router_inputs.append(h.numpy())
            dec = self._route(l, h.detach() if detach_router_inputs else h, restrict)
            if routing_override and l in routing_override:
                idx, gates = routing_override[l](l, dec)
                dec = RouterDecision(logits=dec.logits, scores=dec.scores, topk_indices=np.asarray(idx, dtype=np.int64),
                                     gates=T.as_tensor(gates), offset=dec.offset, extra={"overridden": True})
            x = x + dispatch_combine(h, dec, self.bank, l)
            arts.decisions.append(dec)
            arts.stats.append(self._stats(l, dec))
        x = T.rms_norm(x, self.final_norm, cfg.norm_eps)
        head = self.lm_head if self.lm_head is not None else T.transpose(self.embed)
        arts.logits = (x @ head).reshape(B, S, cfg.vocab_size)
        return arts

    __call__ = forward

    def _route(self, l: int, h: Tensor, restrict) -> RouterDecision:
        blk = self.blocks[l]
        rp = blk.router
        if restrict and l in restrict:
            r = restrict[l]
            lo, hi = r.start - blk.offset, r.stop - blk.offset
            if lo < 0 or hi > rp.num_choices or hi <= lo:
                raise ValueError(f"restriction {r} outside layer {l}'s expert range")
            sub = RouterParams(weight=rp.weight[lo:hi], kind=rp.kind, sigma=rp.sigma, c=rp.c, eps=rp.eps)
            return route(h, sub, self.config.top_k, offset=r.start)
        return route(h, rp, self.config.top_k, offset=blk.offset)

    def _stats(self, l: int, dec: RouterDecision) -> LayerRoutingStats:
        # stats always cover the layer's full candidate range
        blk = self.blocks[l]
        n_cand = blk.router.num_choices
        if dec.offset == blk.offset and dec.scores.shape[1] == n_cand:
            return layer_stats(dec, n_cand)
        f = np.bincount((dec.topk_indices - blk.offset).reshape(-1), minlength=n_cand) / dec.topk_indices.size
        pad_lo = dec.offset - blk.offset
        P = T.mean(dec.scores, axis=0)
        parts = []
        if pad_lo:
            parts.append(np.zeros(pad_lo))
        parts.append(P)
        tail = n_cand - pad_lo - dec.scores.shape[1]
        if tail:
            parts.append(np.zeros(tail))
        return LayerRoutingStats(f=f.astype(np.float64), P=T.concat(parts, axis=0), offset=blk.offset)

    # ----------------------------------------------------------------- misc
    def layer_groups(self) -> tuple[list[int], list[range]]:
        return list(self.bank.layer_to_group), list(self.bank.group_slices)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


def total_loss(arts: ForwardArtifacts, targets, cfg: ModelConfig, f_bar: np.ndarray | None = None,
               bank: ExpertBank | None = None) -> LossBreakdown:
    """Mean token cross-entropy plus whichever balancing loss the config enables.

    The per-layer loss is averaged over layers. The pool loss is averaged over
    sharing groups, each group using its slice of ``f_bar`` (uniform if omitted).
    """
    ce = T.cross_entropy(arts.logits, targets)
    total, aux, pool = ce, None, None
    if cfg.mode == "moe" and cfg.aux_alpha > 0:
        terms = [per_layer_aux(s.f, s.P, cfg.aux_alpha, cfg.group_size) for s in arts.stats]
        aux = terms[0]
        for t in terms[1:]:
            aux = aux + t
        aux = aux * (1.0 / len(terms))
        total = total + aux
    if cfg.mode == "moe" and cfg.pool_alpha > 0:
        G, Mg = cfg.n_groups, cfg.group_size
        if f_bar is None:
            f_bar = np.full(cfg.num_experts, 1.0 / Mg)
        span = cfg.n_layers // G
        parts = []
        for g in range(G):
            Ps = [arts.stats[l].P for l in range(g * span, (g + 1) * span)]
            parts.append(pool_aux(Ps, f_bar[g * Mg:(g + 1) * Mg], cfg.pool_alpha, Mg))
        pool = parts[0]
        for p in parts[1:]:
            pool = pool + p
        pool = pool * (1.0 / G)
        total = total + pool
    return LossBreakdown(total=total, ce=ce, aux=aux, pool=pool)


def count_params(model: Model) -> dict[str, int]:
    counts = {"embedding": 0, "attention": 0, "expert": 0, "dense_ffn": 0, "router": 0, "norms": 0}
    for name, p in model.params().items():
        if name.startswith(("embed", "lm_head")):
            key = "embedding"
        elif ".attn." in name:
            key = "attention"
        elif name.startswith("experts."):
            key = "expert"
        elif ".ffn." in name:
            key = "dense_ffn"
        elif ".router." in name:
            key = "router"
        else:
            key = "norms"
        counts[key] += p.size
    counts["total"] = sum(counts.values())
    return counts
