import csv
import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_unique, count_matrix, tiny_config, top_by_count
from unipool_lab.analysis import (
    ProbeError,
    RoutingTrace,
    collect_trace,
    deep_half_layers,
    emit_report,
    expected_unique_uniform,
    make_report,
    randomization_probe,
    read_utilization_csv,
    report_schema,
    top_used_from_trace,
    uniform_override,
    unique_experts,
    utilization_from_trace,
    utilization_metrics,
)
from unipool_lab.model import build_model


def _windows(n=6, seq=16, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, seq + 1))


# ------------------------------------------------------------- utilization
def test_one_hot_and_uniform_utilization():
    M = 9
    onehot = np.eye(M)[3]
    cv, mm, nb, thr = utilization_metrics(onehot)
    assert cv == pytest.approx(math.sqrt(M - 1), rel=1e-12)
    assert mm == pytest.approx(M) and nb == M - 1 and thr == pytest.approx(0.1 / M)
    cv, mm, nb, _ = utilization_metrics(np.full(M, 1 / M))
    assert cv == pytest.approx(0.0, abs=1e-15) and mm == pytest.approx(1.0, rel=1e-15) and nb == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 5), st.integers(1, 3), st.integers(0, 2**31))
def test_utilization_matrix_matches_counting(n, L, k, seed):
    M = 6
    rng = np.random.default_rng(seed)
    ids = np.stack([[rng.choice(M, size=k, replace=False) for _ in range(L)] for _ in range(n)])
    u = utilization_from_trace(RoutingTrace(ids), M)
    ref = count_matrix(ids, M)
    assert np.allclose(u.matrix, ref, rtol=0, atol=1e-12)
    assert np.allclose(u.matrix.sum(1), 1.0, rtol=0, atol=1e-12)
    assert np.allclose(u.aggregate, ref.mean(0), rtol=0, atol=1e-12)


# ------------------------------------------------------------------- reuse
def test_unique_experts_worked_example():
    ids = np.array([[3, 3, 3, 3], [0, 1, 2, 3], [5, 1, 5, 1]])[:, :, None]
    out = unique_experts(RoutingTrace(ids))
    assert out["mean_U"] == pytest.approx(7 / 3)
    assert out["mean_U_over_L"] == pytest.approx(7 / 12)
    assert out["histogram"] == {"1": 1, "2": 1, "3": 0, "4": 1}


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 8), st.integers(1, 12), st.integers(0, 2**31))
def test_unique_experts_matches_brute_force(n, L, M, seed):
    ids = np.random.default_rng(seed).integers(0, M, (n, L, 1))
    out = unique_experts(RoutingTrace(ids))
    U = [brute_unique(r) for r in ids[:, :, 0]]
    assert out["mean_U"] == pytest.approx(np.mean(U), rel=1e-12)
    assert 1 <= min(U) and max(U) <= L
    assert sum(out["histogram"].values()) == n


def test_uniform_routing_unique_count_matches_closed_form():
    M, L = 32, 4
    ids = np.random.default_rng(0).integers(0, M, (200_000, L, 1))
    mean_u = unique_experts(RoutingTrace(ids))["mean_U"]
    assert abs(mean_u - expected_unique_uniform(M, L)) < 0.01
    assert expected_unique_uniform(M, L) == pytest.approx(3.816375732421875, rel=1e-15)


def test_unique_experts_rejects_top2():
    with pytest.raises(ProbeError):
        unique_experts(RoutingTrace(np.zeros((2, 3, 2), dtype=np.int64)))


# ---------------------------------------------------------------- top-used
def test_top_used_ties_go_to_lower_id():
    ids = np.array([5, 9, 5, 9, 2, 7])[:, None, None]
    assert top_used_from_trace(RoutingTrace(ids), [range(0, 12)], 2) == [[5, 9]]
    assert top_used_from_trace(RoutingTrace(ids), [range(0, 12)], 4) == [[5, 9, 2, 7]]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 6), st.integers(0, 2**31))
def test_top_used_matches_counting_oracle(n_tok, n, seed):
    rng = np.random.default_rng(seed)
    ranges = [range(0, 6), range(6, 12)]
    ids = np.stack([rng.integers(r.start, r.stop, n_tok) for r in ranges], axis=1)[:, :, None]
    got = top_used_from_trace(RoutingTrace(ids), ranges, n)
    for l, r in enumerate(ranges):
        assert got[l] == top_by_count(ids[:, l, 0], r.start, r.stop, n)


def test_top_used_rejects_n_beyond_group():
    with pytest.raises(ProbeError):
        top_used_from_trace(RoutingTrace(np.zeros((3, 1, 1), dtype=np.int64)), [range(0, 4)], 8)


# ------------------------------------------------------------------ probes
@pytest.mark.parametrize("L,expected", [(1, [0]), (4, [2, 3]), (5, [2, 3, 4]), (12, list(range(6, 12)))])
def test_deep_half(L, expected):
    assert deep_half_layers(L) == expected


@pytest.mark.parametrize("cfg", [
    tiny_config(init_std=0.3),
    tiny_config(n_layers=4, n_groups=4, router="softmax", aux_alpha=1e-2, pool_alpha=0.0, top_k=2),
], ids=["pool", "vanilla_top2"])
def test_self_protocol_gives_exactly_zero(cfg):
    model = build_model(cfg, seed=0)
    res = randomization_probe(model, _windows(), "self", batch_size=4)
    assert res.deltas == [0.0] * len(res.layers)
    assert res.layers == deep_half_layers(cfg.n_layers)


def test_single_expert_pool_has_nothing_to_randomize():
    # softmax over one expert gives gate 1 = 1/k, so the override reproduces routing exactly
    cfg = tiny_config(pool_size=1, router="softmax", pool_alpha=1e-2, init_std=0.3)
    model = build_model(cfg, seed=0)
    for proto in ("pool_full_random", "pool_top8_matched"):
        res = randomization_probe(model, _windows(), proto, heldout=_windows(seed=1), batch_size=4)
        assert res.deltas == [0.0]


def test_single_expert_norm_router_pool_still_moves_through_the_gate():
    # the learned NormRouter gate is not 1, so the 1/k gate rule changes the output
    model = build_model(tiny_config(pool_size=1, init_std=0.3), seed=0)
    res = randomization_probe(model, _windows(), "pool_full_random", batch_size=4)
    assert res.deltas[0] != 0.0


def test_intervention_touches_only_the_chosen_layer():
    cfg = tiny_config(n_layers=4, experts_per_layer=4, init_std=0.3)
    model = build_model(cfg, seed=1)
    w = _windows()
    base, _ = collect_trace(model, w, 4)
    ov = {2: uniform_override(range(16), 1, np.random.default_rng(0))}
    new, _ = collect_trace(model, w, 4, overrides=ov)
    assert np.array_equal(base.ids[:, :2], new.ids[:, :2])
    assert not np.array_equal(base.ids[:, 2], new.ids[:, 2])


def test_uniform_override_draws_distinct_candidates_with_equal_gates():
    ov = uniform_override([3, 7, 11, 12], 3, np.random.default_rng(0))

    class D:
        num_tokens = 500

    ids, gates = ov(0, D())
    assert set(np.unique(ids)) == {3, 7, 11, 12}
    assert all(len(set(r)) == 3 for r in ids.tolist())
    assert np.all(gates == 1 / 3)
    with pytest.raises(ProbeError):
        uniform_override([1, 2], 3, np.random.default_rng(0))


def test_probe_is_seeded():
    model = build_model(tiny_config(n_layers=4, init_std=0.3), seed=0)
    a = randomization_probe(model, _windows(), "pool_full_random", seed=3, batch_size=4)
    b = randomization_probe(model, _windows(), "pool_full_random", seed=3, batch_size=4)
    c = randomization_probe(model, _windows(), "pool_full_random", seed=4, batch_size=4)
    assert a.deltas == b.deltas and a.deltas != c.deltas


def test_probe_ownership_and_input_checks():
    pool = build_model(tiny_config(), seed=0)
    van = build_model(tiny_config(n_groups=2, router="softmax", aux_alpha=1e-2, pool_alpha=0.0), seed=0)
    dense = build_model(tiny_config(mode="dense"), seed=0)
    with pytest.raises(ProbeError):
        randomization_probe(pool, _windows(), "vanilla_uniform")
    with pytest.raises(ProbeError):
        randomization_probe(van, _windows(), "pool_full_random")
    with pytest.raises(ProbeError):
        randomization_probe(pool, _windows(), "pool_top8_matched")
    with pytest.raises(ProbeError):
        randomization_probe(dense, _windows(), "self")
    with pytest.raises(ProbeError):
        randomization_probe(pool, _windows(), "hash")
    res = randomization_probe(van, _windows(), "vanilla_uniform", batch_size=4)
    assert res.candidates == {"1": [4, 5, 6, 7]}


def test_top8_candidates_come_from_heldout_ranking():
    model = build_model(tiny_config(n_layers=4, experts_per_layer=4, init_std=0.3), seed=0)
    held = _windows(seed=5)
    res = randomization_probe(model, _windows(), "pool_top8_matched", heldout=held, batch_size=4)
    trace, _ = collect_trace(model, held, 4)
    for l in res.layers:
        assert res.candidates[str(l)] == top_by_count(trace.ids[:, l, 0], 0, 16, 8)


# ----------------------------------------------------------------- reports
def test_csv_round_trip_and_empty_matrix(tmp_path):
    mat = np.random.default_rng(0).dirichlet(np.ones(5), size=3)
    p = emit_report(mat, tmp_path / "u.csv", "csv")
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["layer", "expert_0", "expert_1", "expert_2", "expert_3", "expert_4"]
    assert np.array_equal(read_utilization_csv(p), mat)
    p = emit_report(np.zeros((0, 0)), tmp_path / "e.csv", "csv")
    assert open(p, newline="").read() == "layer\r\n"
    assert read_utilization_csv(p).shape == (0, 0)


def test_reports_validate_against_schema(tmp_path):
    model = build_model(tiny_config(n_layers=4, init_std=0.3), seed=0)
    res = randomization_probe(model, _windows(), "pool_full_random", batch_size=4)
    trace, util = collect_trace(model, _windows(), 4)
    reports = [
        make_report("probe", [res.to_dict()], "abc", 0, "pool_full_random"),
        make_report("reuse", [unique_experts(trace)]),
        make_report("util", [util.summary()]),
    ]
    schema = report_schema()
    for rep in reports:
        p = emit_report(rep, tmp_path / f"{rep['kind']}.json")
        loaded = json.loads(open(p).read())
        jsonschema.validate(loaded, schema)
        assert loaded["schema_version"] == "1"
    bad = make_report("probe", [{"protocol": "self"}])
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, schema)


def test_emit_report_errors(tmp_path):
    with pytest.raises(OSError):
        emit_report(np.ones((1, 2)), tmp_path / "missing" / "u.csv", "csv")
    with pytest.raises(ValueError):
        emit_report([], tmp_path / "x.txt", "xml")
