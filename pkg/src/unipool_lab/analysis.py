"""Routing probes: traces, utilization, expert reuse and single-layer randomization."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from . import __version__
from . import tensor as T
from .model import Model, RoutingOverride

SCHEMA_VERSION = "1"
PROTOCOLS = ("self", "vanilla_uniform", "pool_top8_matched", "pool_full_random")
# average downstream-accuracy drops reported for single deep-half layer randomization at scale
REFERENCE_DROPS = {
    "production_models": [-1.6, -1.2, -1.0],
    "vanilla_moe_own": [-1.3, -1.5],
    "unipool_top8_matched": [-4.1, -4.1],
}


class ProbeError(ValueError):
    pass


@dataclass
class RoutingTrace:
    """Selected pool expert IDs, shape (tokens, layers, k)."""

    ids: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def n_tokens(self) -> int:
        return self.ids.shape[0]

    @property
    def n_layers(self) -> int:
        return self.ids.shape[1]

    @property
    def k(self) -> int:
        return self.ids.shape[2]


@dataclass
class Utilization:
    matrix: np.ndarray
    aggregate: np.ndarray
    cv: float
    max_mean: float
    n_below: int
    threshold: float

    def summary(self) -> dict:
        return {
            "cv": self.cv,
            "max_over_mean": self.max_mean,
            "experts_below_threshold": self.n_below,
            "threshold_share": self.threshold,
            "aggregate": self.aggregate.tolist(),
        }


def deep_half_layers(n_layers: int) -> list[int]:
    """The last ceil(L/2) layers."""
    return list(range(n_layers - math.ceil(n_layers / 2), n_layers))


def utilization_metrics(aggregate, below: float = 0.1) -> tuple[float, float, int, float]:
    a = np.asarray(aggregate, dtype=np.float64)
    m = a.mean()
    cv = float(a.std() / m) if m > 0 else float("nan")
    thr = below / a.size
    return cv, float(a.max() / m) if m > 0 else float("nan"), int((a < thr).sum()), thr


def utilization_from_trace(trace: RoutingTrace, num_experts: int) -> Utilization:
    L = trace.n_layers
    mat = np.zeros((L, num_experts))
    for l in range(L):
        c = np.bincount(trace.ids[:, l, :].reshape(-1), minlength=num_experts).astype(np.float64)
        mat[l] = c / c.sum() if c.sum() else c
    agg = mat.mean(axis=0)
    cv, mm, nb, thr = utilization_metrics(agg)
    return Utilization(mat, agg, cv, mm, nb, thr)


def collect_trace(model: Model, windows: np.ndarray, batch_size: int = 16, overrides=None,
                  provenance: dict | None = None) -> tuple[RoutingTrace, Utilization]:
    if model.bank is None:
        raise ProbeError("dense models have no routing to trace")
    windows = np.asarray(windows)
    if len(windows) == 0:
        raise ProbeError("no data to trace")
    chunks = []
    with T.no_grad():
        for i in range(0, len(windows), batch_size):
            w = windows[i:i + batch_size]
            arts = model.forward(w[:, :-1], routing_override=overrides)
            chunks.append(np.stack([d.topk_indices for d in arts.decisions], axis=1))
    trace = RoutingTrace(np.concatenate(chunks, axis=0), dict(provenance or {}))
    return trace, utilization_from_trace(trace, model.bank.num_experts)


def unique_experts(trace: RoutingTrace) -> dict:
    """Distinct expert IDs each token touches across depth (top-1 traces only)."""
    if trace.k != 1:
        raise ProbeError("unique-expert accounting is defined for top-1 routing only")
    ids = trace.ids[:, :, 0]
    s = np.sort(ids, axis=1)
    U = 1 + (np.diff(s, axis=1) != 0).sum(axis=1)
    L = trace.n_layers
    hist = np.bincount(U, minlength=L + 1)[1:]
    mean_u = float(U.mean())
    return {"mean_U": mean_u, "mean_U_over_L": mean_u / L, "n_layers": L,
            "histogram": {str(u): int(c) for u, c in enumerate(hist, start=1)}}


def expected_unique_uniform(M: int, L: int) -> float:
    """E[U] when every layer picks uniformly from M experts: M(1 - (1 - 1/M)^L)."""
    return M * (1.0 - (1.0 - 1.0 / M) ** L)


def top_used_from_trace(trace: RoutingTrace, layer_ranges: list[range], n: int = 8) -> list[list[int]]:
    out = []
    for l, r in enumerate(layer_ranges):
        if n > len(r):
            raise ProbeError(f"n={n} exceeds layer {l}'s pool of {len(r)} experts")
        ids = trace.ids[:, l, :].reshape(-1) - r.start
        counts = np.bincount(ids, minlength=len(r))
        order = np.lexsort((np.arange(len(r)), -counts))
        out.append([int(r.start + i) for i in order[:n]])
    return out


def top_used_experts(model: Model, heldout: np.ndarray, n: int = 8, batch_size: int = 16) -> list[list[int]]:
    """Per layer, the ``n`` most selected expert IDs on ``heldout`` (ties to the lower ID)."""
    trace, _ = collect_trace(model, heldout, batch_size)
    return top_used_from_trace(trace, [model.bank.layer_slice(l) for l in range(model.config.n_layers)], n)


def uniform_override(candidates, k: int, rng: np.random.Generator) -> RoutingOverride:
    """Replace the routing with k distinct experts drawn uniformly from ``candidates``; gates 1/k."""
    cand = np.asarray(list(candidates), dtype=np.int64)
    if k > cand.size:
        raise ProbeError(f"cannot draw {k} distinct experts from {cand.size} candidates")

    def override(layer, dec):
        n = dec.num_tokens
        if cand.size == 1:
            pick = np.zeros((n, 1), dtype=np.int64)
        else:
            pick = np.argsort(rng.random((n, cand.size)), axis=1)[:, :k]
        return cand[pick], np.full((n, k), 1.0 / k)

    return override


def self_override(layer, dec):
    return dec.topk_indices.copy(), dec.gates.data.copy()


@dataclass
class ProbeResult:
    protocol: str
    layers: list
    baseline_ppl: float
    intervened_ppl: list
    deltas: list
    mean_delta: float
    seed: int
    gate_rule: str = "1/k"
    metric: str = "validation perplexity delta (stands in for downstream accuracy delta)"
    candidates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reference_accuracy_drops"] = REFERENCE_DROPS
        return d


def _ppl(model: Model, windows: np.ndarray, overrides, batch_size: int) -> float:
    total = 0.0
    with T.no_grad():
        for i in range(0, len(windows), batch_size):
            w = windows[i:i + batch_size]
            arts = model.forward(w[:, :-1], routing_override=overrides)
            total += T.cross_entropy(arts.logits, w[:, 1:]).item() * len(w)
    return math.exp(total / len(windows))


def randomization_probe(model: Model, windows: np.ndarray, protocol: str, seed: int = 0,
                        heldout: np.ndarray | None = None, top_n: int = 8, batch_size: int = 16,
                        base_overrides: dict | None = None, layers: list[int] | None = None) -> ProbeResult:
    """Randomize one deep-half layer's routing at a time and measure the perplexity change.

    ``base_overrides`` are active in the baseline and in every intervened run
    (except on the layer being intervened).
    """
    if protocol not in PROTOCOLS:
        raise ProbeError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if model.bank is None:
        raise ProbeError("dense models have no routing to randomize")
    ownership = model.bank.ownership
    if protocol == "vanilla_uniform" and ownership != "private":
        raise ProbeError(f"protocol vanilla_uniform needs layer-private experts, model is {ownership}")
    if protocol.startswith("pool_") and ownership == "private":
        raise ProbeError(f"protocol {protocol} needs a shared pool, model has layer-private experts")
    windows = np.asarray(windows)
    if len(windows) == 0:
        raise ProbeError("no evaluation data")
    k = model.config.top_k
    L = model.config.n_layers
    layers = deep_half_layers(L) if layers is None else list(layers)
    base = dict(base_overrides or {})
    cands: dict[int, list[int]] = {}
    if protocol == "pool_top8_matched":
        if heldout is None or len(heldout) == 0:
            raise ProbeError("pool_top8_matched needs a held-out split to rank experts")
        n = min(top_n, model.bank.group_size)
        ranked = top_used_experts(model, heldout, n, batch_size)
        cands = {l: ranked[l] for l in layers}
    elif protocol in ("vanilla_uniform", "pool_full_random"):
        cands = {l: list(model.bank.layer_slice(l)) for l in layers}
    baseline = _ppl(model, windows, base or None, batch_size)
    ppls, deltas = [], []
    for l in layers:
        ov = dict(base)
        if protocol == "self":
            ov[l] = self_override
        else:
            ov[l] = uniform_override(cands[l], k, np.random.default_rng([seed, l]))
        p = _ppl(model, windows, ov, batch_size)
        ppls.append(p)
        deltas.append(p - baseline)
    return ProbeResult(protocol=protocol, layers=layers, baseline_ppl=baseline, intervened_ppl=ppls,
                       deltas=deltas, mean_delta=float(np.mean(deltas)) if deltas else 0.0, seed=seed,
                       candidates={str(l): c for l, c in cands.items()})


# ------------------------------------------------------------------- reports
def report_schema() -> dict:
    with resources.files("unipool_lab").joinpath("schemas/report.schema.json").open("r", encoding="utf-8") as fh:
        return json.load(fh)


def make_report(kind: str, results: list, config_hash: str | None = None, seed: int | None = None,
                protocol: str | None = None, extra: dict | None = None) -> dict:
    rep = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "tool_version": __version__,
        "config_hash": config_hash,
        "seed": seed,
        "protocol": protocol,
        "results": list(results),
    }
    if extra:
        rep.update(extra)
    return rep


def emit_report(results, path, fmt: str = "json") -> str:
    """Write a utilization matrix as CSV (``layer,expert_0,...``) or a report dict as JSON."""
    path = os.fspath(path)
    try:
        if fmt == "csv":
            mat = np.asarray(results, dtype=np.float64)
            if mat.size == 0:
                mat = mat.reshape(0, 0)
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\r\n")
                w.writerow(["layer"] + [f"expert_{i}" for i in range(mat.shape[1])])
                for l, row in enumerate(mat):
                    w.writerow([l] + [repr(float(v)) for v in row])
        elif fmt == "json":
            payload = results if isinstance(results, dict) else make_report("generic", results)
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, indent=2, sort_keys=True)
                fh.write("\n")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report {path!r}: {exc}") from exc
    return path


def read_utilization_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "layer":
        raise ValueError(f"{path!r} is not a utilization CSV")
    return np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
