"""Expert FFN banks under private, grouped and globally shared ownership."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .routing import RouterDecision
from .tensor import Tensor


class PoolConfigError(ValueError):
    pass


class SwiGLUExpert:
    """y = W_down(SiLU(W_gate x) * W_up x), weights stored input-major."""

    def __init__(self, hidden: int, ffn_dim: int, rng: np.random.Generator | None = None, init_std: float = 0.01):
        def w(shape):
            if rng is None:
                return np.zeros(shape)
            return rng.normal(0.0, init_std, size=shape)

        self.w_gate = Tensor(w((hidden, ffn_dim)), requires_grad=True)
        self.w_up = Tensor(w((hidden, ffn_dim)), requires_grad=True)
        self.w_down = Tensor(w((ffn_dim, hidden)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return (T.silu(x @ self.w_gate) * (x @ self.w_up)) @ self.w_down

    def params(self) -> dict[str, Tensor]:
        return {"w_gate": self.w_gate, "w_up": self.w_up, "w_down": self.w_down}

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params().values())


def matched_pool_size(experts_per_layer: int, n_layers: int) -> int:
    """Pool size carrying the same expert budget as ``experts_per_layer`` private experts per layer."""
    return experts_per_layer * n_layers


def reduced_pool_size(matched: int, fraction: float, k: int = 1) -> int:
    if not 0 < fraction <= 1:
        raise PoolConfigError(f"pool fraction must lie in (0, 1], got {fraction}")
    return max(int(np.floor(matched * fraction + 0.5)), k)


class ExpertBank:
    """M experts split into G equal contiguous groups; layers map to groups in contiguous blocks.

    G == L gives layer-private experts, G == 1 one pool shared by every layer.
    """

    def __init__(self, num_experts: int, hidden: int, ffn_dim: int, n_layers: int, n_groups: int = 1,
                 top_k: int = 1, rng: np.random.Generator | None = None, init_std: float = 0.01):
        if n_groups < 1 or n_layers % n_groups:
            raise PoolConfigError(f"n_groups={n_groups} must divide n_layers={n_layers}")
        if num_experts % n_groups:
            raise PoolConfigError(f"n_groups={n_groups} must divide the pool size {num_experts}")
        per_group = num_experts // n_groups
        if per_group < top_k:
            raise PoolConfigError(f"group pool size {per_group} is smaller than top_k={top_k}")
        self.num_experts = num_experts
        self.hidden = hidden
        self.ffn_dim = ffn_dim
        self.n_layers = n_layers
        self.n_groups = n_groups
        self.experts = [SwiGLUExpert(hidden, ffn_dim, rng, init_std) for _ in range(num_experts)]
        span = n_layers // n_groups
        self.layer_to_group = [l // span for l in range(n_layers)]
        self.group_slices = [range(g * per_group, (g + 1) * per_group) for g in range(n_groups)]
        self.eval_count = np.zeros(num_experts, dtype=np.int64)

    @property
    def ownership(self) -> str:
        if self.n_groups == self.n_layers:
            return "private"
        return "global" if self.n_groups == 1 else "grouped"

    @property
    def group_size(self) -> int:
        return self.num_experts // self.n_groups

    def layer_slice(self, layer: int) -> range:
        return self.group_slices[self.layer_to_group[layer]]

    def params(self) -> dict[str, Tensor]:
        return {f"experts.{i}.{k}": p for i, e in enumerate(self.experts) for k, p in e.params().items()}

    def reset_counter(self) -> None:
        self.eval_count[:] = 0


def build_bank(config, rng: np.random.Generator | None = None) -> ExpertBank:
    return ExpertBank(config.num_experts, config.hidden, config.ffn_dim, config.n_layers, config.n_groups,
                      config.top_k, rng, config.init_std)


def expert_forward(bank: ExpertBank, expert_id: int, x: Tensor) -> Tensor:
    if not 0 <= expert_id < bank.num_experts:
        raise IndexError(f"expert id {expert_id} outside pool of {bank.num_experts}")
    return bank.experts[expert_id](x)


def expert_param_count(bank: ExpertBank) -> int:
    return 3 * bank.hidden * bank.ffn_dim * bank.num_experts


@dataclass
class DispatchPlan:
    """(token, slot) pairs grouped by expert.

    ``order`` sorts flattened slots by expert ID; ``token_of`` gives each sorted
    slot's token row; ``inverse`` undoes ``order``.
    """

    order: np.ndarray
    token_of: np.ndarray
    experts: np.ndarray
    bounds: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_indices(cls, idx: np.ndarray) -> "DispatchPlan":
        n, k = idx.shape
        flat = idx.reshape(-1)
        order = np.argsort(flat, kind="stable")
        sorted_ids = flat[order]
        experts, starts = np.unique(sorted_ids, return_index=True)
        bounds = np.append(starts, flat.size)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)
        return cls(order=order, token_of=order // k, experts=experts, bounds=bounds, inverse=inverse)

    def token_lists(self) -> dict[int, np.ndarray]:
        return {int(e): self.token_of[self.bounds[j]:self.bounds[j + 1]] for j, e in enumerate(self.experts)}


def dispatch_combine(h: Tensor, decision: RouterDecision, bank: ExpertBank, layer: int) -> Tensor:
    """Gate-weighted sum of the selected experts' outputs for each row of ``h``."""
    idx = decision.topk_indices
    allowed = bank.layer_slice(layer)
    if idx.size and (idx.min() < allowed.start or idx.max() >= allowed.stop):
        raise PoolConfigError(f"layer {layer} routed outside its expert range [{allowed.start}, {allowed.stop})")
    n = h.shape[0]
    plan = DispatchPlan.from_indices(idx)
    x_sorted = T.gather_rows(h, plan.token_of)
    experts = [bank.experts[int(e)] for e in plan.experts]
    bounds = plan.bounds
    gate = T.grouped_matmul(x_sorted, [e.w_gate for e in experts], bounds)
    up = T.grouped_matmul(x_sorted, [e.w_up for e in experts], bounds)
    y = T.grouped_matmul(T.silu(gate) * up, [e.w_down for e in experts], bounds)
    np.add.at(bank.eval_count, plan.experts, np.diff(bounds))
    g = T.gather_rows(decision.gates.reshape(-1, 1), plan.order)
    return T.scatter_add(n, plan.token_of, y * g)
