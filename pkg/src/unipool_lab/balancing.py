"""Load-balancing losses and the one-step-behind pool statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .routing import RouterDecision
from .tensor import Tensor


@dataclass
class LayerRoutingStats:
    """Dispatch fraction ``f`` (gradient-free) and mean score ``P`` over one layer's candidates."""

    f: np.ndarray
    P: Tensor
    offset: int = 0


def layer_stats(decision: RouterDecision, pool_size: int) -> LayerRoutingStats:
    idx = decision.topk_indices - decision.offset
    n, k = idx.shape
    if idx.size and (idx.min() < 0 or idx.max() >= pool_size):
        raise ValueError(f"decision indices outside [0, {pool_size})")
    f = np.bincount(idx.reshape(-1), minlength=pool_size).astype(np.float64) / (n * k)
    return LayerRoutingStats(f=f, P=T.mean(decision.scores, axis=0), offset=decision.offset)


def per_layer_aux(f, P, alpha: float, E: int) -> Tensor:
    """alpha * E * sum_i f_i P_i; ``f`` never carries gradient."""
    f = np.asarray(f, dtype=np.float64)
    P = T.as_tensor(P)
    if f.shape != (E,) or P.shape != (E,):
        raise T.ShapeError("per_layer_aux", f.shape, P.shape, detail=f"E={E}")
    return T.tsum(P * f) * (alpha * E)


def pool_aux(per_layer_P: Sequence, f_bar, alpha_pool: float, M: int, n_layers: int | None = None) -> Tensor:
    """Pool loss as the mean of per-layer contributions alpha_pool * M * sum_i fbar_i P_i^(l)."""
    f_bar = np.asarray(f_bar, dtype=np.float64)
    if n_layers is not None and len(per_layer_P) != n_layers:
        raise ValueError(f"expected {n_layers} layers of statistics, got {len(per_layer_P)}")
    if not per_layer_P:
        raise ValueError("pool_aux needs at least one layer")
    terms = []
    for P in per_layer_P:
        P = T.as_tensor(P)
        if P.shape != (M,) or f_bar.shape != (M,):
            raise T.ShapeError("pool_aux", P.shape, f_bar.shape, detail=f"M={M}")
        terms.append(T.tsum(P * f_bar) * (alpha_pool * M))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def pool_aux_direct(per_layer_P: Sequence, f_bar, alpha_pool: float, M: int) -> Tensor:
    """Same loss written through the layer-averaged score alpha_pool * M * sum_i fbar_i Pbar_i."""
    f_bar = np.asarray(f_bar, dtype=np.float64)
    Ps = [T.as_tensor(P) for P in per_layer_P]
    P_bar = T.mean(T.concat([P.reshape(1, M) for P in Ps], axis=0), axis=0)
    return T.tsum(P_bar * f_bar) * (alpha_pool * M)


def usage_cv(v) -> float:
    """Coefficient of variation (population std / mean)."""
    v = np.asarray(v, dtype=np.float64)
    m = v.mean()
    return float(v.std() / m) if m > 0 else float("nan")


@dataclass
class PoolStatsAccumulator:
    """Holds the previous micro-batch's cross-layer dispatch fraction.

    With several groups each group's slice of ``f_bar`` averages only that
    group's layers. Before the first update every slice is uniform.
    """

    num_experts: int
    n_layers: int
    layer_to_group: list[int] | None = None
    group_slices: list[range] | None = None
    record: bool = False
    f_bar: np.ndarray = field(init=False)
    initialized: bool = field(init=False, default=False)
    updates: int = field(init=False, default=0)
    events: list = field(init=False, default_factory=list)

    def __post_init__(self):
        if self.layer_to_group is None:
            self.layer_to_group = [0] * self.n_layers
            self.group_slices = [range(self.num_experts)]
        self.f_bar = np.empty(self.num_experts)
        for r in self.group_slices:
            self.f_bar[r.start:r.stop] = 1.0 / len(r)

    def read(self) -> np.ndarray:
        if self.record:
            self.events.append(("read", self.updates))
        return self.f_bar.copy()

    def step(self, per_layer_f: Sequence[np.ndarray]) -> None:
        if len(per_layer_f) != self.n_layers:
            raise ValueError(f"accumulator expects {self.n_layers} layers, got {len(per_layer_f)}")
        new = np.zeros(self.num_experts)
        counts = np.zeros(len(self.group_slices))
        for l, f in enumerate(per_layer_f):
            g = self.layer_to_group[l]
            r = self.group_slices[g]
            f = np.asarray(f, dtype=np.float64)
            if f.shape != (len(r),):
                raise T.ShapeError("accumulator_step", f.shape, (len(r),), detail=f"layer {l}")
            new[r.start:r.stop] += f
            counts[g] += 1
        for g, r in enumerate(self.group_slices):
            new[r.start:r.stop] /= counts[g]
        self.f_bar = new
        self.initialized = True
        self.updates += 1
        if self.record:
            self.events.append(("write", self.updates))

    def diagnostics(self) -> dict[str, float]:
        return {
            "f_bar_min": float(self.f_bar.min()),
            "f_bar_max": float(self.f_bar.max()),
            "f_bar_cv": usage_cv(self.f_bar),
        }

    def state(self) -> dict:
        return {"initialized": self.initialized, "updates": self.updates}

    def load(self, f_bar: np.ndarray, state: dict) -> None:
        f_bar = np.asarray(f_bar, dtype=np.float64)
        if f_bar.shape != (self.num_experts,):
            raise ValueError("f_bar shape does not match the pool")
        self.f_bar = f_bar.copy()
        self.initialized = bool(state.get("initialized", True))
        self.updates = int(state.get("updates", 0))
