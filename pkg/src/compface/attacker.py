"""Black-box random search over composite genomes.

The attacker only sees the number the service returns for a probe.  Each
iteration samples a candidate genome, queries it (once per distinct genome
per run) and keeps it only if it strictly beats the incumbent, so the
incumbent's score never decreases.  For a per-step hit probability ``m`` of
the optimal region, after ``k`` uniform draws the miss probability is at most
``(1 - m)**k``; :func:`stopping_bound` turns a miss budget ``beta`` into an
iteration count.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .parts import CompositeGenome, PartCategory, PartLibrary, iter_genomes, random_genome, state_space_size

OracleQuery = Callable[[CompositeGenome], float]

ENUMERATION_CAP = 10**6


def stopping_bound(beta: float, m: float) -> int:
    """Smallest integer N with (1 - m)**N <= beta, i.e. ceil(ln beta / ln(1 - m))."""
    if not (0.0 < beta < 1.0) or not (0.0 < m < 1.0):
        raise ValueError(f"beta and m must lie in (0, 1), got beta={beta}, m={m}")
    log_miss = math.log1p(-m)
    log_beta = math.log(beta)
    n = max(1, math.ceil(log_beta / log_miss))
    # guard against the quotient landing a hair above an exact integer
    while n > 1 and (n - 1) * log_miss <= log_beta:
        n -= 1
    return n


def hit_probability_bound(m: float, k: int) -> float:
    """Lower bound on P[x_k in the optimal region] after k uniform draws."""
    return 1.0 - (1.0 - m) ** k


@dataclass(frozen=True)
class StopParams:
    beta: float
    m: float
    max_queries: Optional[int] = None
    epsilon: float = 0.0
    n_beta: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "n_beta", stopping_bound(self.beta, self.m))
        if self.max_queries is not None and self.max_queries < 1:
            raise ValueError("max_queries must be at least 1")

    @classmethod
    def from_iterations(cls, n_beta: int, max_queries: Optional[int] = None, epsilon: float = 0.0) -> "StopParams":
        """Stop parameters for a fixed iteration budget (beta/m back-solved with m = 1/2)."""
        if n_beta < 1:
            raise ValueError("n_beta must be at least 1")
        stop = cls(beta=0.5**n_beta, m=0.5, max_queries=max_queries, epsilon=epsilon)
        return stop

    @property
    def query_cap(self) -> int:
        return self.max_queries if self.max_queries is not None else self.n_beta + 1


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    genome: CompositeGenome
    score: float
    accepted: bool
    best_score: float
    queried: bool  # False when the genome's score came from the run's memo


@dataclass
class AttackTrace:
    strategy: str
    seed: int
    records: list[TraceRecord] = field(default_factory=list)
    best_genome: Optional[CompositeGenome] = None
    total_queries: int = 0

    @property
    def best_score(self) -> float:
        return self.records[-1].best_score if self.records else float("nan")

    @property
    def initial_genome(self) -> Optional[CompositeGenome]:
        return self.records[0].genome if self.records else None

    def best_scores(self) -> list[float]:
        return [r.best_score for r in self.records]

    def is_monotone(self) -> bool:
        b = self.best_scores()
        return all(b1 >= b0 for b0, b1 in zip(b, b[1:]))

    def first_hit(self, region) -> Optional[int]:
        """Iteration at which the incumbent first lies in ``region`` (a set of genomes)."""
        incumbent = None
        for r in self.records:
            if r.accepted:
                incumbent = r.genome
            if incumbent in region:
                return r.iteration
        return None

    def incumbent_at(self, iteration: int) -> Optional[CompositeGenome]:
        incumbent = None
        for r in self.records:
            if r.iteration > iteration:
                break
            if r.accepted:
                incumbent = r.genome
        return incumbent


class AttackAborted(RuntimeError):
    """The oracle failed mid-run; ``trace`` holds everything recorded so far."""

    def __init__(self, message: str, trace: AttackTrace):
        super().__init__(message)
        self.trace = trace


def _run(library: PartLibrary, oracle_query: OracleQuery, stop: StopParams, seed: int, strategy: str, propose):
    rng = np.random.default_rng(seed)
    trace = AttackTrace(strategy=strategy, seed=seed)
    memo: dict[CompositeGenome, float] = {}

    def score(genome):
        if genome in memo:
            return memo[genome], False
        try:
            value = float(oracle_query(genome))
        except Exception as exc:
            raise AttackAborted(f"oracle failed on genome {genome}: {exc}", trace) from exc
        memo[genome] = value
        trace.total_queries += 1
        return value, True

    x = random_genome(library, rng)
    fx, queried = score(x)
    trace.best_genome = x
    trace.records.append(TraceRecord(0, x, fx, True, fx, queried))

    for k in range(1, stop.n_beta + 1):
        if trace.total_queries >= stop.query_cap:
            break
        xi = propose(x, rng)
        fxi, queried = score(xi)
        accepted = fxi > fx
        if accepted:
            x, fx = xi, fxi
            trace.best_genome = x
        trace.records.append(TraceRecord(k, xi, fxi, accepted, fx, queried))
    return trace


def random_search(library: PartLibrary, oracle_query: OracleQuery, stop: StopParams, seed: int) -> AttackTrace:
    """Pure random search: every candidate is an independent uniform genome."""
    return _run(library, oracle_query, stop, seed, "random", lambda x, rng: random_genome(library, rng))


def local_random_search(
    library: PartLibrary,
    oracle_query: OracleQuery,
    stop: StopParams,
    seed: int,
    categories_per_step: int = 1,
) -> AttackTrace:
    """Neighbourhood variant: each candidate re-draws a few categories of the incumbent."""
    mutable = [cat for cat in PartCategory if len(library.options(cat)) > 1]
    if categories_per_step < 1:
        raise ValueError("categories_per_step must be at least 1")

    def propose(x: CompositeGenome, rng):
        if not mutable:
            return x
        n = min(categories_per_step, len(mutable))
        for j in rng.choice(len(mutable), size=n, replace=False):
            cat = mutable[int(j)]
            others = [i for i in library.options(cat) if i != x[cat]]
            x = x.replace(cat, others[int(rng.integers(len(others)))])
        return x

    return _run(library, oracle_query, stop, seed, "local", propose)


STRATEGIES = {"random": random_search, "local": local_random_search}


# -- exhaustive oracle ---------------------------------------------------------


def enumerate_scores(
    library: PartLibrary, oracle_query: OracleQuery, cap: int = ENUMERATION_CAP
) -> dict[CompositeGenome, float]:
    size = state_space_size(library)
    if size > cap:
        raise ValueError(f"state space of {size} genomes exceeds the enumeration cap {cap}")
    return {g: float(oracle_query(g)) for g in iter_genomes(library)}


def optimal_region(scores: dict[CompositeGenome, float], epsilon: float) -> set[CompositeGenome]:
    best = max(scores.values())
    return {g for g, s in scores.items() if s >= best - epsilon}


def estimate_m(
    library: PartLibrary, oracle_query: OracleQuery, epsilon: float, cap: int = ENUMERATION_CAP
) -> float:
    """Exact share of genomes whose undefended score is within ``epsilon`` of the best."""
    scores = enumerate_scores(library, oracle_query, cap)
    return len(optimal_region(scores, epsilon)) / len(scores)


# -- export ------------------------------------------------------------------

TRACE_COLUMNS = ("iteration", "genome", "returned_score", "best_score")


def write_trace_csv(trace: AttackTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in trace.records:
            writer.writerow([r.iteration, str(r.genome), repr(r.score), repr(r.best_score)])


def trace_summary(trace: AttackTrace) -> dict:
    return {
        "strategy": trace.strategy,
        "seed": trace.seed,
        "iterations": trace.records[-1].iteration if trace.records else 0,
        "total_queries": trace.total_queries,
        "initial_genome": str(trace.initial_genome),
        "best_genome": str(trace.best_genome),
        "best_score": trace.best_score,
        "accepted_moves": sum(r.accepted for r in trace.records) - 1,
    }


def write_trace_summary(trace: AttackTrace, path) -> None:
    Path(path).write_text(json.dumps(trace_summary(trace), indent=2, sort_keys=True) + "\n")
