import csv
import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compface.attacker import (
    AttackAborted,
    StopParams,
    enumerate_scores,
    estimate_m,
    hit_probability_bound,
    local_random_search,
    optimal_region,
    random_search,
    stopping_bound,
    trace_summary,
    write_trace_csv,
    write_trace_summary,
)
from compface.oracle import DefenseConfig, QueryLedger, defended_query
from compface.parts import CompositeGenome, FacePart, PartCategory, PartLibrary, compose, iter_genomes


def _bound_oracle(beta, m):
    mpmath.mp.dps = 50
    return int(mpmath.ceil(mpmath.log(mpmath.mpf(beta)) / mpmath.log(1 - mpmath.mpf(m))))


def _table_score(genome: CompositeGenome) -> float:
    """Synthetic objective on the 27-state space; unique optimum at eyes=lips=nose=2."""
    e, n, l = genome[PartCategory.EYES], genome[PartCategory.NOSE], genome[PartCategory.LIPS]
    return float(e + n + l) / 6.0


def _singleton_library():
    parts = {cat: [FacePart(cat, 0, np.zeros((2, 2)), np.zeros((2, 2)), (0, 0))] for cat in PartCategory}
    parts[PartCategory.BASE_HEAD] = [FacePart(PartCategory.BASE_HEAD, 0, np.zeros((4, 4)), np.ones((4, 4)), (0, 0))]
    return PartLibrary(parts)


# -- stopping bound ---------------------------------------------------------------


@pytest.mark.parametrize("beta,m,expected", [(0.5, 0.5, 1), (0.01, 0.1, 44), (0.05, 0.001, 2995)])
def test_stopping_bound_examples(beta, m, expected):
    assert _bound_oracle(beta, m) == expected
    assert stopping_bound(beta, m) == expected


@settings(max_examples=300)
@given(st.floats(1e-9, 0.999), st.floats(1e-6, 0.999))
def test_stopping_bound_is_smallest_sufficient_integer(beta, m):
    n = stopping_bound(beta, m)
    mpmath.mp.dps = 50
    miss = 1 - mpmath.mpf(m)
    assert n >= 1
    assert miss**n <= mpmath.mpf(beta) * (1 + mpmath.mpf(10) ** -12)
    if n > 1:
        assert miss ** (n - 1) > mpmath.mpf(beta) * (1 - mpmath.mpf(10) ** -12)


@pytest.mark.parametrize("beta,m", [(0, 0.5), (1, 0.5), (0.5, 0), (0.5, 1), (-0.1, 0.2), (0.1, 1.5)])
def test_stopping_bound_rejects_out_of_range(beta, m):
    with pytest.raises(ValueError):
        stopping_bound(beta, m)


def test_stop_params():
    stop = StopParams(0.1, 1 / 27)
    assert stop.n_beta == 62 and stop.query_cap == 63
    assert StopParams(0.1, 1 / 27, max_queries=10).query_cap == 10
    assert StopParams.from_iterations(17).n_beta == 17
    with pytest.raises(ValueError):
        StopParams(0.1, 1 / 27, max_queries=0)
    with pytest.raises(ValueError):
        StopParams(1.5, 0.1)


# -- estimate_m -------------------------------------------------------------------


def test_estimate_m_unique_optimum(tiny_library):
    assert estimate_m(tiny_library, _table_score, epsilon=0.1) == pytest.approx(1 / 27)


def test_estimate_m_whole_space(tiny_library):
    assert estimate_m(tiny_library, _table_score, epsilon=1.0) == 1.0


def test_estimate_m_two_tied_optima(tiny_library):
    def score(g):
        return 1.0 if g[PartCategory.EYES] == 2 and g[PartCategory.NOSE] == 2 and g[PartCategory.LIPS] != 1 else 0.0

    assert estimate_m(tiny_library, score, epsilon=0.0) == pytest.approx(2 / 27)


def test_estimate_m_cap(toy_library):
    with pytest.raises(ValueError):
        estimate_m(toy_library, _table_score, 0.0, cap=100)


def test_enumeration_is_exhaustive(tiny_library):
    scores = enumerate_scores(tiny_library, _table_score)
    assert len(scores) == 27
    assert optimal_region(scores, 0.0) == {CompositeGenome((0, 0, 0, 2, 2, 2, 0, 0))}


# -- random search ----------------------------------------------------------------


def test_singleton_space_one_query():
    lib = _singleton_library()
    calls = []
    trace = random_search(lib, lambda g: calls.append(g) or 0.3, StopParams(0.1, 0.5), seed=0)
    assert len(calls) == 1 and trace.total_queries == 1
    assert trace.best_genome == CompositeGenome((0,) * 8)
    trace = local_random_search(lib, lambda g: 0.3, StopParams(0.1, 0.5), seed=0)
    assert trace.total_queries == 1 and trace.best_genome == CompositeGenome((0,) * 8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["random", "local"]))
def test_best_score_monotone(tiny_library, seed, strategy):
    noise = np.random.default_rng(seed).random(27)
    table = {g: float(noise[i]) for i, g in enumerate(iter_genomes(tiny_library))}
    search = random_search if strategy == "random" else local_random_search
    trace = search(tiny_library, table.__getitem__, StopParams(0.1, 1 / 27), seed)
    assert trace.is_monotone()
    accepted = [r for r in trace.records if r.accepted]
    assert all(b.score > a.score for a, b in zip(accepted, accepted[1:]))  # strict improvement
    assert trace.best_score == table[trace.best_genome]


def test_deterministic_per_seed(tiny_library):
    a = random_search(tiny_library, _table_score, StopParams(0.1, 1 / 27), 11)
    b = random_search(tiny_library, _table_score, StopParams(0.1, 1 / 27), 11)
    assert a.records == b.records
    c = random_search(tiny_library, _table_score, StopParams(0.1, 1 / 27), 12)
    assert a.records != c.records


def test_terminates_at_n_beta_or_query_cap(toy_library):
    stop = StopParams.from_iterations(40)
    trace = random_search(toy_library, _table_score, stop, 0)
    assert trace.records[-1].iteration == 40
    capped = random_search(toy_library, _table_score, StopParams.from_iterations(40, max_queries=7), 0)
    assert capped.total_queries == 7


def test_memoized_queries(tiny_library):
    calls = []

    def oracle(g):
        calls.append(g)
        return _table_score(g)

    trace = random_search(tiny_library, oracle, StopParams.from_iterations(200), 3)
    assert len(calls) == len(set(calls)) == trace.total_queries <= 27
    assert sum(r.queried for r in trace.records) == trace.total_queries


def test_query_accounting_matches_ledger(toy_gallery, toy_library):
    ledger = QueryLedger()
    defense = DefenseConfig(rounding_digits=2)

    def oracle(g):
        return defended_query(toy_gallery, compose(g, toy_library), "id05", defense, ledger)

    trace = random_search(toy_library, oracle, StopParams.from_iterations(60), 4)
    assert ledger.count == trace.total_queries
    assert [r.score for r in trace.records if r.queried] == [r.returned_score for r in ledger.records]


def test_oracle_failure_keeps_partial_trace(tiny_library):
    count = {"n": 0}

    def flaky(g):
        count["n"] += 1
        if count["n"] == 4:
            raise RuntimeError("service down")
        return _table_score(g)

    with pytest.raises(AttackAborted) as info:
        random_search(tiny_library, flaky, StopParams.from_iterations(50), 0)
    partial = info.value.trace
    assert partial.total_queries == 3
    assert partial.records and partial.is_monotone()


def test_local_search_changes_one_category(toy_library):
    trace = local_random_search(toy_library, _table_score, StopParams.from_iterations(80), 2)
    incumbent = trace.records[0].genome
    for r in trace.records[1:]:
        changed = sum(a != b for a, b in zip(incumbent.indices, r.genome.indices))
        assert changed == 1
        if r.accepted:
            incumbent = r.genome


def test_local_search_multi_category_step(toy_library):
    trace = local_random_search(toy_library, _table_score, StopParams.from_iterations(30), 2, categories_per_step=3)
    incumbent = trace.records[0].genome
    for r in trace.records[1:]:
        assert sum(a != b for a, b in zip(incumbent.indices, r.genome.indices)) == 3
        if r.accepted:
            incumbent = r.genome
    with pytest.raises(ValueError):
        local_random_search(toy_library, _table_score, StopParams.from_iterations(3), 0, categories_per_step=0)


def test_pointwise_convergence_bound(tiny_library):
    """Empirical hit rate at N/4, N/2 and N against 1 - (1 - m)^k, 400 trials."""
    region = optimal_region(enumerate_scores(tiny_library, _table_score), 0.0)
    m = len(region) / 27
    stop = StopParams(0.1, m)
    hits = []
    for seed in range(400):
        trace = random_search(tiny_library, _table_score, stop, seed)
        hits.append(trace.first_hit(region))
    for k in (stop.n_beta // 4, stop.n_beta // 2, stop.n_beta):
        rate = np.mean([h is not None and h <= k for h in hits])
        assert rate >= hit_probability_bound(m, k) - 0.05, k


def test_local_vs_random_queries_to_optimum(tiny_library):
    """Paired comparison over 400 seeds; the outcome is reported, not assumed."""
    region = optimal_region(enumerate_scores(tiny_library, _table_score), 0.0)
    stop = StopParams.from_iterations(400)
    out = {}
    for name, search in (("random", random_search), ("local", local_random_search)):
        firsts = [search(tiny_library, _table_score, stop, s).first_hit(region) for s in range(400)]
        assert all(f is not None for f in firsts)
        out[name] = float(np.mean(firsts))
    print(f"mean iterations to optimum: random {out['random']:.2f}, local {out['local']:.2f}")
    assert out["local"] <= out["random"]


# -- export -----------------------------------------------------------------------


def test_trace_export(tmp_path, tiny_library):
    trace = random_search(tiny_library, _table_score, StopParams(0.1, 1 / 27), 5)
    write_trace_csv(trace, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["iteration", "genome", "returned_score", "best_score"]
    assert len(rows) == len(trace.records) + 1
    assert CompositeGenome.parse(rows[1][1]) == trace.records[0].genome
    write_trace_summary(trace, tmp_path / "t.json")
    summary = json.loads((tmp_path / "t.json").read_text())
    assert summary == json.loads(json.dumps(trace_summary(trace)))
    assert summary["total_queries"] == trace.total_queries
    assert summary["best_genome"] == str(trace.best_genome)
