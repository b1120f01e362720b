"""Command-line entry point: ``unipool-lab <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort,
4 I/O error. ``UNIPOOL_LAB_THREADS`` caps BLAS threads (default 1, which keeps
runs bit-reproducible).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from threadpoolctl import threadpool_limits

from . import __version__
from . import analysis as A
from .checkpoint import CheckpointError, ConfigMismatchError, checkpoint_load, checkpoint_save
from .config import AnalysisConfig, ConfigError, ExperimentConfig, config_hash
from .data import CorpusError, load_corpus, pack_windows
from .routing import monte_carlo_c
from .train import NumericalAbort, Trainer, evaluate, init_state

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _write_json(path: str, payload) -> None:
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    A.emit_report(payload, path, "json")


def _load_experiment(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    raw = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "data", None):
        raw["data"] = args.data
    if getattr(args, "output_dir", None):
        raw["output_dir"] = args.output_dir
    if getattr(args, "steps", None) is not None:
        raw["train"]["steps"] = args.steps
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------- commands
def cmd_calibrate(args) -> int:
    if args.experts < 1 or args.topk < 1 or args.samples < 1:
        raise UsageError("--experts, --topk and --samples must be positive")
    try:
        c = monte_carlo_c(args.experts, args.topk, args.samples, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(json.dumps({"E": args.experts, "k": args.topk, "N": args.samples, "seed": args.seed, "c": c}))
    return EXIT_OK


def cmd_train(args) -> int:
    exp = _load_experiment(args)
    if not exp.data:
        raise ConfigError("data", "no corpus path given")
    corpus = load_corpus(exp.data, exp.train.val_fraction)
    out = exp.output_dir
    os.makedirs(out, exist_ok=True)
    metrics = os.path.join(out, "metrics.jsonl")
    open(metrics, "w").close()
    state = init_state(exp.model, exp.train, exp.seed)
    trainer = Trainer(state, corpus, metrics)
    h = config_hash(exp.model)
    try:
        trainer.run(checkpoint_dir=os.path.join(out, "checkpoints") if exp.train.checkpoint_every else None)
    except NumericalAbort as exc:
        _write_json(os.path.join(out, "abort.json"), A.make_report(
            "train", [{"status": "numerical_abort", "step": exc.step, "diagnostics": exc.diagnostics}],
            h, exp.seed))
        print(f"error: {exc}; diagnostics in {os.path.join(out, 'abort.json')}", file=sys.stderr)
        return EXIT_NUMERIC
    checkpoint_save(state, os.path.join(out, "final.upl"))
    row = {"status": "ok", "steps": state.step,
           "initial_ce": state.metrics[0]["ce"] if state.metrics else None,
           "final_ce": state.metrics[-1]["ce"] if state.metrics else None}
    if len(trainer.val_windows):
        row["val"] = evaluate(state.model, trainer.val_windows[:exp.train.eval_windows], exp.train.batch_size)
    if state.model.bank is not None and len(trainer.val_windows):
        _, util = A.collect_trace(state.model, trainer.val_windows[:exp.train.eval_windows], exp.train.batch_size)
        row["utilization"] = util.summary()
    _write_json(os.path.join(out, "summary.json"), A.make_report("train", [row], h, exp.seed))
    return EXIT_OK


def _analysis_inputs(args):
    """Load checkpoint and corpus; split validation windows into (probe, heldout)."""
    state = checkpoint_load(args.checkpoint)
    acfg = AnalysisConfig()
    data = args.data
    if args.config:
        exp = ExperimentConfig.load(args.config)
        acfg = exp.analysis
        data = data or exp.data
    if not data:
        raise ConfigError("data", "no corpus path given")
    n_probe = args.windows if args.windows is not None else acfg.probe_windows
    n_held = args.heldout_windows if args.heldout_windows is not None else acfg.heldout_windows
    corpus = load_corpus(data, state.train_config.val_fraction)
    val = pack_windows(corpus.val, state.model_config.seq_len)
    if len(val) == 0:
        raise CorpusError(f"validation split of {data!r} holds no complete window")
    probe = val[:n_probe]
    heldout = val[n_probe:n_probe + n_held]
    return state, acfg, probe, heldout


def _out(args, default: str) -> str:
    return args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), default)


def cmd_eval(args) -> int:
    state, _, windows, _ = _analysis_inputs(args)
    res = evaluate(state.model, windows, state.train_config.batch_size)
    _write_json(_out(args, "eval.json"), A.make_report("eval", [res], config_hash(state.model_config), state.seed))
    return EXIT_OK


def cmd_probe(args) -> int:
    state, acfg, windows, heldout = _analysis_inputs(args)
    try:
        res = A.randomization_probe(state.model, windows, args.protocol, seed=args.seed, heldout=heldout,
                                    top_n=args.top_n or acfg.top_n, batch_size=state.train_config.batch_size)
    except A.ProbeError as exc:
        raise UsageError(str(exc)) from None
    rep = A.make_report("probe", [res.to_dict()], config_hash(state.model_config), state.seed, args.protocol,
                        extra={"trained_steps": state.step})
    _write_json(_out(args, f"probe_{args.protocol}.json"), rep)
    return EXIT_OK


def cmd_reuse(args) -> int:
    state, _, windows, _ = _analysis_inputs(args)
    try:
        trace, _ = A.collect_trace(state.model, windows, state.train_config.batch_size)
        res = A.unique_experts(trace)
    except A.ProbeError as exc:
        raise UsageError(str(exc)) from None
    res["uniform_expectation"] = A.expected_unique_uniform(state.model.bank.group_size, trace.n_layers)
    _write_json(_out(args, "reuse.json"), A.make_report("reuse", [res], config_hash(state.model_config), state.seed))
    return EXIT_OK


def cmd_util(args) -> int:
    state, _, windows, _ = _analysis_inputs(args)
    try:
        _, util = A.collect_trace(state.model, windows, state.train_config.batch_size)
    except A.ProbeError as exc:
        raise UsageError(str(exc)) from None
    out = _out(args, "util.json")
    _write_json(out, A.make_report("util", [util.summary()], config_hash(state.model_config), state.seed))
    A.emit_report(util.matrix, args.csv or os.path.splitext(out)[0] + ".csv", "csv")
    return EXIT_OK


def cmd_report_merge(args) -> int:
    rows, hashes, seeds = [], set(), set()
    for path in args.inputs:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                rep = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{path}: not a JSON report ({exc})") from None
        if not isinstance(rep, dict) or rep.get("schema_version") != A.SCHEMA_VERSION:
            raise UsageError(f"{path}: not a schema_version {A.SCHEMA_VERSION} report")
        hashes.add(rep.get("config_hash"))
        seeds.add(rep.get("seed"))
        for r in rep.get("results", []):
            rows.append({"source": os.path.basename(path), "kind": rep.get("kind"),
                         "protocol": rep.get("protocol"), "config_hash": rep.get("config_hash"),
                         "seed": rep.get("seed"), **r})
    h = hashes.pop() if len(hashes) == 1 else None
    s = seeds.pop() if len(seeds) == 1 else None
    _write_json(args.out, A.make_report("merge", rows, h, s))
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unipool-lab", description="Shared expert pool MoE lab.",
                                allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="Monte Carlo estimate of the NormRouter scale constant c.",
                       allow_abbrev=False)
    c.add_argument("--experts", type=int, required=True, help="number of candidate experts E")
    c.add_argument("--topk", type=int, required=True, help="experts selected per token k")
    c.add_argument("--samples", type=int, default=100_000, help="Monte Carlo draws N (default 1e5)")
    c.add_argument("--seed", type=int, default=0, help="sampler seed (default 0)")
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("train", help="Train a model from an experiment config.", allow_abbrev=False)
    t.add_argument("--config", help="experiment config JSON (source of truth)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--data", help="override the corpus path")
    t.add_argument("--output-dir", dest="output_dir", help="override the output directory")
    t.add_argument("--steps", type=int, help="override the number of optimizer steps")
    t.set_defaults(func=cmd_train)

    def analysis_parser(name, helptext, func):
        a = sub.add_parser(name, help=helptext, allow_abbrev=False)
        a.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
        a.add_argument("--data", help="corpus path (validation split is used)")
        a.add_argument("--config", help="experiment config supplying data path and analysis settings")
        a.add_argument("--windows", type=int, help="validation windows to evaluate")
        a.add_argument("--heldout-windows", dest="heldout_windows", type=int,
                       help="windows after the evaluation slice used to rank experts")
        a.add_argument("--out", help="report path (default: next to the checkpoint)")
        a.set_defaults(func=func)
        return a

    analysis_parser("eval", "Validation loss and perplexity.", cmd_eval)
    pr = analysis_parser("probe", "Single-layer routing randomization over the deep half.", cmd_probe)
    pr.add_argument("--protocol", required=True, choices=A.PROTOCOLS)
    pr.add_argument("--seed", type=int, default=0, help="randomization seed")
    pr.add_argument("--top-n", dest="top_n", type=int, help="candidates for pool_top8_matched (default 8)")
    analysis_parser("reuse", "Distinct experts touched per token across depth (top-1).", cmd_reuse)
    u = analysis_parser("util", "Per-layer expert utilization matrix and imbalance metrics.", cmd_util)
    u.add_argument("--csv", help="CSV path for the utilization matrix")

    m = sub.add_parser("report-merge", help="Concatenate JSON reports into one.", allow_abbrev=False)
    m.add_argument("--inputs", nargs="+", required=True, help="report files to merge")
    m.add_argument("--out", required=True, help="merged report path")
    m.set_defaults(func=cmd_report_merge)
    return p


def thread_count() -> int:
    """BLAS thread cap from ``UNIPOOL_LAB_THREADS`` (default 1)."""
    raw = os.environ.get("UNIPOOL_LAB_THREADS", "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        raise UsageError(f"UNIPOOL_LAB_THREADS must be an integer, got {raw!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = thread_count()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CorpusError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
