"""Training loop, evaluation and metrics logging."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .balancing import PoolStatsAccumulator
from .config import ModelConfig, TrainConfig
from .data import CorpusStream, pack_windows
from .model import Model, build_model, total_loss
from .optim import AdamW, LRSchedule, clip_grad_norm, lr_at


class NumericalAbort(RuntimeError):
    """Non-finite loss; ``diagnostics`` holds the step's routing statistics."""

    def __init__(self, step: int, diagnostics: dict):
        self.step = step
        self.diagnostics = diagnostics
        super().__init__(f"non-finite loss at step {step}")


def perplexity(loss: float) -> float:
    return math.exp(loss)


def evaluate(model: Model, windows: np.ndarray, batch_size: int = 16) -> dict[str, float]:
    """Mean next-token cross-entropy (no balancing terms) and its exponential."""
    windows = np.asarray(windows)
    if windows.ndim != 2 or len(windows) == 0:
        raise ValueError("evaluation split is empty")
    total = 0.0
    with T.no_grad():
        for i in range(0, len(windows), batch_size):
            w = windows[i:i + batch_size]
            arts = model.forward(w[:, :-1])
            total += T.cross_entropy(arts.logits, w[:, 1:]).item() * len(w)
    loss = total / len(windows)
    return {"loss": loss, "perplexity": perplexity(loss)}


@dataclass
class TrainState:
    model_config: ModelConfig
    train_config: TrainConfig
    seed: int
    model: Model
    optimizer: AdamW
    accumulator: PoolStatsAccumulator | None
    rng: np.random.Generator
    step: int = 0
    metrics: list = field(default_factory=list)


def init_state(model_config: ModelConfig, train_config: TrainConfig, seed: int) -> TrainState:
    model = build_model(model_config, seed)
    tc = train_config
    opt = AdamW(model.params(), lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.adam_eps,
                weight_decay=tc.weight_decay)
    acc = None
    if model.bank is not None:
        ltg, slices = model.layer_groups()
        acc = PoolStatsAccumulator(model.bank.num_experts, model_config.n_layers, ltg, slices)
    # batch order stream kept apart from weight init
    rng = np.random.default_rng([seed, 1])
    return TrainState(model_config, train_config, seed, model, opt, acc, rng)


def _diagnostics(arts) -> dict:
    return {
        f"layer{l}": {"f": s.f.tolist(), "P": s.P.data.tolist()}
        for l, s in enumerate(arts.stats)
    }


class Trainer:
    """Steps a :class:`TrainState` over a corpus and writes JSONL metrics."""

    def __init__(self, state: TrainState, corpus: CorpusStream, metrics_path=None,
                 on_step: Callable[[dict], None] | None = None):
        self.state = state
        self.corpus = corpus
        seq = state.model_config.seq_len
        self.train_windows = pack_windows(corpus.train, seq)
        self.val_windows = pack_windows(corpus.val, seq)
        if len(self.train_windows) == 0:
            raise ValueError("corpus too small for one training window")
        self.metrics_path = metrics_path
        self.on_step = on_step
        tc = state.train_config
        self.schedule = LRSchedule(total_steps=tc.steps, peak_lr=tc.lr, min_lr=tc.min_lr,
                                   warmup_fraction=tc.warmup_fraction)

    def _log(self, row: dict) -> None:
        self.state.metrics.append(row)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")
        if self.on_step is not None:
            self.on_step(row)

    def validate(self) -> float:
        n = self.state.train_config.eval_windows
        return evaluate(self.state.model, self.val_windows[:n], self.state.train_config.batch_size)["loss"]

    def step(self) -> dict:
        st, tc, cfg = self.state, self.state.train_config, self.state.model_config
        model = st.model
        params = model.params()
        step = st.step + 1
        lr = lr_at(step, self.schedule)
        idx = st.rng.integers(0, len(self.train_windows), size=tc.batch_size)
        batch = self.train_windows[idx]
        for p in params.values():
            p.grad = None
        sums = {"ce": 0.0, "aux": 0.0, "pool": 0.0}
        n_micro = tc.micro_batches
        for chunk in np.split(batch, n_micro):
            f_bar = st.accumulator.read() if st.accumulator is not None else None
            arts = model.forward(chunk[:, :-1])
            losses = total_loss(arts, chunk[:, 1:], cfg, f_bar)
            vals = losses.floats()
            if not all(math.isfinite(v) for v in vals.values()):
                raise NumericalAbort(step, {"losses": vals, "routing": _diagnostics(arts)})
            T.backward(losses.total * (1.0 / n_micro))
            if st.accumulator is not None:
                st.accumulator.step([s.f for s in arts.stats])
            for k in sums:
                sums[k] += vals[k] / n_micro
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        gnorm = clip_grad_norm(grads, tc.grad_clip)
        if not math.isfinite(gnorm):
            raise NumericalAbort(step, {"grad_norm": gnorm})
        st.optimizer.step(grads, lr)
        st.step = step
        row = {"step": step, "lr": lr, "ce": sums["ce"], "aux": sums["aux"], "pool": sums["pool"],
               "grad_norm": gnorm}
        if st.accumulator is not None:
            row.update(st.accumulator.diagnostics())
        else:
            row["f_bar_cv"] = 0.0
        if tc.eval_every and (step % tc.eval_every == 0 or step == tc.steps) and len(self.val_windows):
            row["val_ce"] = self.validate()
        self._log(row)
        return row

    def run(self, n_steps: int | None = None, checkpoint_dir=None) -> TrainState:
        tc = self.state.train_config
        if checkpoint_dir and tc.checkpoint_every:
            os.makedirs(checkpoint_dir, exist_ok=True)
        target = tc.steps if n_steps is None else min(tc.steps, self.state.step + n_steps)
        while self.state.step < target:
            self.step()
            if checkpoint_dir and tc.checkpoint_every and self.state.step % tc.checkpoint_every == 0:
                from .checkpoint import checkpoint_save

                checkpoint_save(self.state, os.path.join(checkpoint_dir, f"step{self.state.step:06d}.upl"))
        return self.state


def train(model_config: ModelConfig, train_config: TrainConfig, corpus: CorpusStream, seed: int,
          metrics_path=None) -> TrainState:
    """Build, train for ``train_config.steps`` steps and return the final state."""
    state = init_state(model_config, train_config, seed)
    if metrics_path is not None:
        open(metrics_path, "w").close()
    return Trainer(state, corpus, metrics_path).run()
