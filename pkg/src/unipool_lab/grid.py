"""Ablation grid over router kind x balancing loss x pool grouping.

Run as ``python3 -m unipool_lab.grid --config base.json --out grid.jsonl``; one
JSON summary row per cell is appended to ``--out``.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys

from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import collect_trace
from .cli import UsageError, thread_count
from .config import ConfigError, ExperimentConfig, config_hash
from .data import CorpusError, load_corpus
from .train import NumericalAbort, Trainer, evaluate, init_state

AUX_MODES = {"pool": (0.0, 1e-2), "per_layer": (1e-2, 0.0), "none": (0.0, 0.0)}


def grid_cells(routers, aux_modes, groups):
    return list(itertools.product(routers, aux_modes, groups))


def run_cell(exp: ExperimentConfig, router: str, aux: str, n_groups: int, corpus) -> dict:
    aux_alpha, pool_alpha = AUX_MODES[aux]
    mc = exp.model.replace(router=router, aux_alpha=aux_alpha, pool_alpha=pool_alpha, n_groups=n_groups)
    row = {"router": router, "aux": aux, "n_groups": n_groups, "config_hash": config_hash(mc),
           "seed": exp.seed, "tool_version": __version__}
    state = init_state(mc, exp.train, exp.seed)
    trainer = Trainer(state, corpus)
    try:
        trainer.run()
    except NumericalAbort as exc:
        row.update(status="numerical_abort", step=exc.step)
        return row
    row.update(status="ok", steps=state.step, initial_ce=state.metrics[0]["ce"], final_ce=state.metrics[-1]["ce"])
    val = trainer.val_windows[:exp.train.eval_windows]
    if len(val):
        row["val_loss"] = evaluate(state.model, val, exp.train.batch_size)["loss"]
        _, util = collect_trace(state.model, val, exp.train.batch_size)
        row.update(usage_cv=util.cv, experts_below_threshold=util.n_below)
    return row


def run_grid(exp: ExperimentConfig, routers, aux_modes, groups, out_path=None) -> list[dict]:
    corpus = load_corpus(exp.data, exp.train.val_fraction)
    rows = []
    if out_path:
        open(out_path, "w").close()
    for router, aux, g in grid_cells(routers, aux_modes, groups):
        row = run_cell(exp, router, aux, g, corpus)
        rows.append(row)
        if out_path:
            with open(out_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python3 -m unipool_lab.grid", allow_abbrev=False,
                                description="Train one model per (router, aux loss, groups) cell.")
    p.add_argument("--config", required=True, help="base experiment config")
    p.add_argument("--out", required=True, help="JSONL file receiving one row per cell")
    p.add_argument("--routers", nargs="+", default=["softmax", "sigmoid", "norm_router"])
    p.add_argument("--aux", nargs="+", default=["per_layer", "pool"], choices=sorted(AUX_MODES))
    p.add_argument("--groups", nargs="+", type=int, default=[1])
    p.add_argument("--steps", type=int, help="override optimizer steps per cell")
    args = p.parse_args(argv)
    try:
        exp = ExperimentConfig.load(args.config)
        if args.steps is not None:
            raw = exp.to_dict()
            raw["train"]["steps"] = args.steps
            exp = ExperimentConfig.from_dict(raw)
        # reject invalid cells before spending time on the valid ones
        for r, a, g in grid_cells(args.routers, args.aux, args.groups):
            aa, pa = AUX_MODES[a]
            exp.model.replace(router=r, aux_alpha=aa, pool_alpha=pa, n_groups=g)
        with threadpool_limits(limits=thread_count()):
            run_grid(exp, args.routers, args.aux, args.groups, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CorpusError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
