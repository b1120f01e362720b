"""AdamW, global-norm gradient clipping and the warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LRSchedule:
    total_steps: int
    peak_lr: float = 5e-4
    min_lr: float = 5e-5
    warmup_fraction: float = 0.01

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))


def lr_at(step: int, schedule: LRSchedule) -> float:
    """Linear warmup to the peak, then cosine decay to the floor.

    Steps past ``total_steps`` are clamped to ``min_lr``.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    w, total = schedule.warmup_steps, schedule.total_steps
    if step >= total:
        return schedule.min_lr
    if step < w:
        return schedule.peak_lr * step / w
    progress = (step - w) / max(total - w, 1)
    return schedule.min_lr + 0.5 * (schedule.peak_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def default_decay_filter(name: str, p: Tensor) -> bool:
    # matrices only: norms, biases and router scales are not decayed
    return p.ndim >= 2


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter registry."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 5e-4,
        beta1: float = 0.9,
        beta2: float = 0.95,
        eps: float = 1e-8,
        weight_decay: float = 0.1,
        decay_filter: Callable[[str, Tensor], bool] = default_decay_filter,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = {k: bool(decay_filter(k, p)) for k, p in self.params.items()}
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for k in grads:
            if k not in self.params:
                raise KeyError(f"gradient for unknown parameter {k!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.shape:
                raise ShapeError("adamw_step", p.shape, g.shape, detail=k)
            m = b1 * self.m[k] + (1.0 - b1) * g
            v = b2 * self.v[k] + (1.0 - b2) * (g * g)
            self.m[k], self.v[k] = m, v
            w = p.data
            if self.decay[k] and self.weight_decay:
                w = w * (1.0 - lr * self.weight_decay)
            p.data = w - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: a.copy() for k, a in self.m.items()}, "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        if set(state["m"]) != set(self.params) or set(state["v"]) != set(self.params):
            raise KeyError("optimizer state does not cover the same parameters")
        self.t = int(state["t"])
        self.m = {k: np.array(a, dtype=self.params[k].data.dtype) for k, a in state["m"].items()}
        self.v = {k: np.array(a, dtype=self.params[k].data.dtype) for k, a in state["v"].items()}
