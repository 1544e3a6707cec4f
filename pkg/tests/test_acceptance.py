"""Acceptance suite: the eight end-to-end criteria, each printing one PASS/FAIL line."""

import time
from pathlib import Path

import mpmath
import numpy as np
import pytest
from scipy.stats import binomtest

from compface.attacker import StopParams, enumerate_scores, estimate_m, optimal_region, random_search, stopping_bound
from compface.cli import main
from compface.config import config_from_dict
from compface.eigenspace import fds, project, similarity_st
from compface.experiment import fds_ranking_study, run_experiment
from compface.image import FaceImage
from compface.oracle import DefenseConfig, QueryLedger, defended_query, raw_confidence
from compface.parts import compose, iter_genomes

from conftest import record_criterion

REPO = Path(__file__).resolve().parents[1]
SWEEP_SEEDS = list(range(60))


@pytest.fixture(scope="module")
def convergence_runs(toy_gallery, tiny_library):
    """400 seeded random searches on the 27-state space against the undefended oracle."""
    cache = {g: compose(g, tiny_library) for g in iter_genomes(tiny_library)}
    target = "id03"
    scores = enumerate_scores(tiny_library, lambda g: raw_confidence(toy_gallery, cache[g], target))
    region = optimal_region(scores, 0.0)
    m = estimate_m(tiny_library, scores.__getitem__, 0.0)
    stop = StopParams(0.1, m)
    defense = DefenseConfig()
    start = time.perf_counter()
    traces = []
    for seed in range(400):
        ledger = QueryLedger()
        traces.append(
            random_search(
                tiny_library, lambda g: defended_query(toy_gallery, cache[g], target, defense, ledger), stop, seed
            )
        )
    return dict(traces=traces, region=region, m=m, stop=stop, elapsed=time.perf_counter() - start)


@pytest.fixture(scope="module")
def sweep(toy_dir, tmp_path_factory):
    """All ten targets x 60 seeds x {none, round2, fdsf} on the bundled assets."""
    raw = {
        "gallery": str(toy_dir / "gallery"),
        "parts": str(toy_dir / "parts" / "manifest.json"),
        "attack": {"strategy": "random", "seeds": SWEEP_SEEDS, "beta": 0.1, "epsilon": 0.05},
        "defenses": [
            {"name": "none"},
            {"name": "round2", "rounding_digits": 2},
            {"name": "fdsf", "fdsf_enabled": True},
        ],
        "out": str(tmp_path_factory.mktemp("sweep")),
    }
    start = time.perf_counter()
    report = run_experiment(config_from_dict(raw))
    return report, time.perf_counter() - start


def test_criterion_1_convergence(convergence_runs):
    r = convergence_runs
    n_beta = stopping_bound(0.1, 1 / 27)
    hits = [t.first_hit(r["region"]) for t in r["traces"]]
    rate = float(np.mean([h is not None and h <= n_beta for h in hits]))
    ok = (
        r["m"] == pytest.approx(1 / 27)
        and r["stop"].n_beta == n_beta == 62
        and rate >= 1 - 0.1 - 0.05
        and r["elapsed"] < 60
    )
    detail = f"m={r['m']:.5f}, N_beta={n_beta}, hit rate {rate:.3f} over 400 trials (>= 0.85), {r['elapsed']:.1f}s"
    assert record_criterion(1, ok, detail)


def test_criterion_2_stopping_bound():
    mpmath.mp.dps = 60
    cases = [(0.5, 0.5, 1), (0.01, 0.1, 44), (0.05, 0.001, 2995)]
    got = []
    ok = True
    for beta, m, expected in cases:
        exact = int(mpmath.ceil(mpmath.log(mpmath.mpf(beta)) / mpmath.log(1 - mpmath.mpf(m))))
        value = stopping_bound(beta, m)
        got.append(value)
        ok &= value == expected == exact
    assert record_criterion(2, ok, f"stopping_bound -> {got}, expected [1, 44, 2995]")


def test_criterion_3_rounding_ineffective(sweep):
    report, elapsed = sweep
    rounded = report.cells_for("round2")
    improved = float(np.mean([c.improved for c in rounded]))
    mean_r = report.aggregate_for("round2").mean_similarity
    mean_n = report.aggregate_for("none").mean_similarity
    rel = abs(mean_r - mean_n) / abs(mean_n)
    paired = report.paired("round2", "none")
    ok = len(rounded) >= 100 and len(paired) == len(rounded) and improved >= 0.9 and rel <= 0.10 and elapsed < 300
    detail = (
        f"{len(rounded)} runs, improved {improved:.3f} (>= 0.90), mean S_T rounded {mean_r:.2f} vs none "
        f"{mean_n:.2f}, rel diff {rel:.4f} (<= 0.10), sweep {elapsed:.1f}s"
    )
    assert record_criterion(3, ok, detail)


def test_criterion_4_fdsf_effective(sweep):
    report, elapsed = sweep
    pairs = report.paired("fdsf", "none")
    wins = sum(none.final_similarity > fd.final_similarity for fd, none in pairs)
    losses = sum(none.final_similarity < fd.final_similarity for fd, none in pairs)
    p = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    seeds = {c.seed for c, _ in pairs}
    mean_f = report.aggregate_for("fdsf").mean_similarity
    mean_n = report.aggregate_for("none").mean_similarity
    ok = len(seeds) >= 50 and mean_f < mean_n and p < 0.01 and elapsed < 300
    detail = (
        f"{len(pairs)} pairs over {len(seeds)} seeds, none>fdsf {wins}, fdsf>none {losses}, "
        f"sign test p={p:.3g} (< 0.01), mean S_T fdsf {mean_f:.2f} < none {mean_n:.2f}"
    )
    assert record_criterion(4, ok, detail)


def test_criterion_5_rank_separation(toy_gallery, toy_library, toy_split):
    _, held = toy_split
    table = fds_ranking_study(toy_gallery, toy_library, 100, 6, 0, mu=5, real_probes=held)
    comp = table.flagged_fraction("composite")
    real = table.flagged_fraction("real")
    ok = len(table.of_kind("composite")) == 100 and comp >= 0.70 and real <= 0.20
    detail = (
        f"composites flagged {comp:.2f} (>= 0.70), held-out real flagged {real:.2f} (<= 0.20) "
        f"of {len(table.of_kind('real'))}; composite rank histogram {table.histogram('composite')}"
    )
    assert record_criterion(5, ok, detail)


def test_criterion_6_eigen_numerics(toy_gallery, toy_images, toy_library):
    rng = np.random.default_rng(6)
    models = (toy_gallery.fds_model, toy_gallery.dual.intra, toy_gallery.dual.extra)
    ortho = max(float(np.max(np.abs(m.basis.T @ m.basis - np.eye(m.n_components)))) for m in models)

    pyth = 0.0
    for _ in range(100):
        x = rng.integers(0, 256, size=toy_gallery.dims).astype(np.float64)
        p = project(toy_gallery.fds_model, x)
        full = float(np.sum((x.ravel() - toy_gallery.fds_model.mean) ** 2))
        pyth = max(pyth, abs(p.residual**2 + float(np.sum(p.coeffs**2)) - full) / full)

    faces = [img for name in sorted(toy_images) for img in toy_images[name]]
    noise = [FaceImage(rng.integers(0, 256, toy_gallery.dims, dtype=np.uint8)) for _ in range(100)]
    face_min = min(fds(toy_gallery.fds_model, f) for f in faces)
    noise_max = max(fds(toy_gallery.fds_model, n) for n in noise)

    probes = faces + [compose(g, toy_library) for g in list(iter_genomes(toy_library))[::97]] + noise[:10]
    self_zero = all(similarity_st(toy_gallery.dual, a, a) == 0.0 for a in probes)

    ok = ortho <= 1e-8 and pyth <= 1e-6 and face_min > noise_max and self_zero
    detail = (
        f"orthonormality {ortho:.2e} (<= 1e-8), Pythagoras rel {pyth:.2e} (<= 1e-6), "
        f"min face fds {face_min:.1f} > max noise fds {noise_max:.1f}, S_T(a,a)=0 on {len(probes)} images: {self_zero}"
    )
    assert record_criterion(6, ok, detail)


def test_criterion_7_monotone_traces(convergence_runs, sweep):
    report, _ = sweep
    traces = list(convergence_runs["traces"]) + [c.trace for c in report.cells]
    bad = [t for t in traces if not t.is_monotone()]
    ok = not bad and len(traces) == 400 + 3 * 10 * len(SWEEP_SEEDS)
    assert record_criterion(7, ok, f"{len(traces)} traces checked, {len(bad)} with a decreasing best score")


def test_criterion_8_determinism(tmp_path):
    config = REPO / "configs" / "toy.json"
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["report", "--config", str(config), "--out", str(out)]) == 0
        outputs.append(out)
    names = ["report.csv", "cells.csv", "ranks.csv", "curves.svg", "summary.json"]
    traces = sorted(p.name for p in (outputs[0] / "traces").iterdir())
    same = all((outputs[0] / n).read_bytes() == (outputs[1] / n).read_bytes() for n in names)
    same &= all(
        (outputs[0] / "traces" / n).read_bytes() == (outputs[1] / "traces" / n).read_bytes() for n in traces
    )
    ok = same and len(traces) > 0
    assert record_criterion(8, ok, f"two runs of configs/toy.json: {len(names)} reports + {len(traces)} trace files byte-identical: {same}")
