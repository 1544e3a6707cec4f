"""Experiment orchestration: attack sweeps over a defense matrix and the FDS ranking study.

Every (target, defense, seed) cell runs an independent attack against its own
query ledger.  The attacker sees only what :func:`defended_query` returns; the
evaluation afterwards scores the final reconstruction with the undefended
similarity, which the attacker never observes.  Cells with the same seed
start from the same genome, so comparisons across defenses are paired.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .attacker import AttackAborted, AttackTrace, StopParams, enumerate_scores, optimal_region, local_random_search, random_search
from .config import ExperimentConfig, ProceduralGallery, ProceduralParts
from .image import FaceImage
from .oracle import (
    DefenseConfig,
    Gallery,
    QueryLedger,
    Verdict,
    defended_query,
    enroll,
    identification_rank,
    load_gallery_dir,
    raw_confidence,
    raw_similarity,
    rank_from_scores,
    select_panel,
    split_gallery,
)
from .parts import CompositeGenome, PartLibrary, compose, load_library, random_genome
from .procedural import gen_gallery, gen_procedural_parts


class ExperimentError(RuntimeError):
    def __init__(self, message: str, cell: Optional[tuple] = None):
        super().__init__(message if cell is None else f"cell {cell}: {message}")
        self.cell = cell


class Composer:
    """Memoized ``compose`` for one library; safe to share between threads."""

    def __init__(self, library: PartLibrary):
        self.library = library
        self._cache: dict[CompositeGenome, FaceImage] = {}
        self._lock = threading.Lock()

    def __call__(self, genome: CompositeGenome) -> FaceImage:
        img = self._cache.get(genome)
        if img is None:
            img = compose(genome, self.library)
            with self._lock:
                self._cache.setdefault(genome, img)
        return img


@dataclass
class Assets:
    library: PartLibrary
    gallery: Gallery
    held_out: dict
    manifest_path: Path
    gallery_dir: Path
    composer: Composer = field(init=False)

    def __post_init__(self):
        self.composer = Composer(self.library)


def materialize(config: ExperimentConfig) -> tuple[Path, Path]:
    """Resolve (gallery dir, manifest path), generating procedural sources under ``out/assets``."""
    assets = config.out / "assets"
    gallery = config.gallery
    if isinstance(gallery, ProceduralGallery):
        gallery = gen_gallery(assets / "gallery", gallery.n_identities, gallery.n_images, gallery.seed)
    parts = config.parts
    if isinstance(parts, ProceduralParts):
        parts = gen_procedural_parts(parts.counts, parts.seed, assets / "parts", optional_absent=parts.optional_absent)
    return Path(gallery), Path(parts)


def prepare_assets(config: ExperimentConfig) -> Assets:
    gallery_dir, manifest = materialize(config)
    library = load_library(manifest)
    enrolled, held = split_gallery(load_gallery_dir(gallery_dir), config.n_enroll)
    mp = config.model
    gallery = enroll(enrolled, mp.m_intra, mp.m_extra, mp.m_fds, seed=mp.seed, literal_epsilon=mp.literal_epsilon)
    if gallery.dims != library.shape:
        raise ExperimentError(f"gallery images are {gallery.dims} but parts compose to {library.shape}")
    return Assets(library, gallery, held, manifest, gallery_dir)


def targets_for(config: ExperimentConfig, gallery: Gallery) -> tuple[str, ...]:
    if config.targets is None:
        return tuple(gallery.identities)
    for name in config.targets:
        gallery.enrolled(name)
    return tuple(config.targets)


# -- one cell -------------------------------------------------------------------


@dataclass(frozen=True)
class TargetStop:
    identity: str
    m: float
    stop: StopParams
    optimum: float  # best undefended confidence (nan when m was given)


def stop_for_target(config: ExperimentConfig, assets: Assets, identity: str) -> TargetStop:
    ap = config.attack
    optimum = math.nan
    m = ap.m
    if m is None:
        scores = enumerate_scores(
            assets.library, lambda g: raw_confidence(assets.gallery, assets.composer(g), identity)
        )
        m = len(optimal_region(scores, ap.epsilon)) / len(scores)
        optimum = max(scores.values())
    if m >= 1.0:
        stop = StopParams.from_iterations(1, ap.max_queries, ap.epsilon)
    else:
        stop = StopParams(ap.beta, m, ap.max_queries, ap.epsilon)
    return TargetStop(identity, m, stop, optimum)


@dataclass(frozen=True)
class CellResult:
    identity: str
    defense: str
    seed: int
    m: float
    n_beta: int
    trace: AttackTrace
    initial_genome: CompositeGenome
    final_genome: CompositeGenome
    initial_similarity: float
    final_similarity: float
    final_confidence: float
    identification_rank: int
    fdsf_flag_rate: Optional[float]
    queries: int

    @property
    def improved(self) -> bool:
        return self.final_similarity > self.initial_similarity

    @property
    def key(self) -> tuple:
        return (self.identity, self.defense, self.seed)


def run_cell(
    assets: Assets,
    identity: str,
    defense: DefenseConfig,
    seed: int,
    target: TargetStop,
    strategy: str = "random",
    categories_per_step: int = 1,
) -> CellResult:
    gallery, composer = assets.gallery, assets.composer
    ledger = QueryLedger()

    def oracle_query(genome):
        return defended_query(gallery, composer(genome), identity, defense, ledger)

    cell = (identity, defense.label, seed)
    try:
        if strategy == "local":
            trace = local_random_search(assets.library, oracle_query, target.stop, seed, categories_per_step)
        else:
            trace = random_search(assets.library, oracle_query, target.stop, seed)
    except AttackAborted as exc:
        raise ExperimentError(str(exc), cell) from exc

    # the attacker-visible numbers must be exactly what the ledger handed out
    returned = [r.score for r in trace.records if r.queried]
    if ledger.count != trace.total_queries or returned != [r.returned_score for r in ledger.records]:
        raise ExperimentError("trace and query ledger disagree", cell)

    final_img = composer(trace.best_genome)
    flags = None
    if defense.fdsf_enabled:
        flags = sum(r.fdsf_verdict == Verdict.COMPOSITE for r in ledger.records) / max(ledger.count, 1)
    return CellResult(
        identity=identity,
        defense=defense.label,
        seed=seed,
        m=target.m,
        n_beta=target.stop.n_beta,
        trace=trace,
        initial_genome=trace.initial_genome,
        final_genome=trace.best_genome,
        initial_similarity=raw_similarity(gallery, composer(trace.initial_genome), identity),
        final_similarity=raw_similarity(gallery, final_img, identity),
        final_confidence=raw_confidence(gallery, final_img, identity),
        identification_rank=identification_rank(gallery, final_img, identity),
        fdsf_flag_rate=flags,
        queries=trace.total_queries,
    )


# -- the sweep -------------------------------------------------------------------


@dataclass(frozen=True)
class DefenseAggregate:
    defense: str
    n: int
    mean_similarity: float
    std_similarity: float
    mean_initial_similarity: float
    improved_rate: float
    mean_confidence: float
    top1_rate: float
    mean_queries: float
    mean_flag_rate: Optional[float]


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate(cells: Sequence[CellResult], defense: str) -> DefenseAggregate:
    rows = [c for c in cells if c.defense == defense]
    if not rows:
        raise ExperimentError(f"no cells for defense {defense!r}")
    mean_s, std_s = _mean_std([c.final_similarity for c in rows])
    flags = [c.fdsf_flag_rate for c in rows if c.fdsf_flag_rate is not None]
    return DefenseAggregate(
        defense=defense,
        n=len(rows),
        mean_similarity=mean_s,
        std_similarity=std_s,
        mean_initial_similarity=float(np.mean([c.initial_similarity for c in rows])),
        improved_rate=float(np.mean([c.improved for c in rows])),
        mean_confidence=float(np.mean([c.final_confidence for c in rows])),
        top1_rate=float(np.mean([c.identification_rank == 1 for c in rows])),
        mean_queries=float(np.mean([c.queries for c in rows])),
        mean_flag_rate=float(np.mean(flags)) if flags else None,
    )


@dataclass(frozen=True)
class RunReport:
    cells: tuple  # CellResult, ordered by (identity, defense order, seed)
    aggregates: tuple  # DefenseAggregate, in defense-matrix order
    targets: tuple  # TargetStop per identity

    def cells_for(self, defense: str) -> list[CellResult]:
        return [c for c in self.cells if c.defense == defense]

    def aggregate_for(self, defense: str) -> DefenseAggregate:
        for a in self.aggregates:
            if a.defense == defense:
                return a
        raise KeyError(defense)

    def paired(self, defense_a: str, defense_b: str) -> list[tuple[CellResult, CellResult]]:
        b = {(c.identity, c.seed): c for c in self.cells_for(defense_b)}
        return [(c, b[(c.identity, c.seed)]) for c in self.cells_for(defense_a) if (c.identity, c.seed) in b]


def run_experiment(config: ExperimentConfig, assets: Optional[Assets] = None, workers: int = 1) -> RunReport:
    """Run every (target, defense, seed) cell; the result does not depend on ``workers``."""
    if assets is None:
        assets = prepare_assets(config)
    targets = [stop_for_target(config, assets, name) for name in targets_for(config, assets.gallery)]
    jobs = [(t, d, s) for t in targets for d in config.defenses for s in config.attack.seeds]
    ap = config.attack

    def work(job):
        target, defense, seed = job
        return run_cell(assets, target.identity, defense, seed, target, ap.strategy, ap.categories_per_step)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(work, jobs))  # map keeps submission order
    else:
        cells = [work(job) for job in jobs]
    aggs = tuple(aggregate(cells, d.label) for d in config.defenses)
    return RunReport(tuple(cells), aggs, tuple(targets))


# -- FDS ranking study ----------------------------------------------------------


@dataclass(frozen=True)
class RankRow:
    kind: str  # "composite" or "real"
    label: str  # genome string or identity/image index
    fds: float
    rank: int
    flagged: bool


@dataclass(frozen=True)
class RankingTable:
    rows: tuple
    panel_size: int
    mu: int

    def of_kind(self, kind: str) -> list[RankRow]:
        return [r for r in self.rows if r.kind == kind]

    def histogram(self, kind: str) -> list[int]:
        """Counts for ranks 1..panel_size + 1."""
        counts = [0] * (self.panel_size + 1)
        for r in self.of_kind(kind):
            counts[r.rank - 1] += 1
        return counts

    def flagged_fraction(self, kind: str) -> float:
        rows = self.of_kind(kind)
        return sum(r.flagged for r in rows) / len(rows) if rows else math.nan


def fds_ranking_study(
    gallery: Gallery,
    library: PartLibrary,
    n_composites: int,
    panel_size: int,
    seed: int,
    mu: int = 5,
    real_probes: Optional[Mapping[str, Sequence[FaceImage]]] = None,
) -> RankingTable:
    """Rank random composites (and optional real probes) against seeded real-face panels."""
    if n_composites < 0:
        raise ValueError("n_composites must be non-negative")
    rng = np.random.default_rng(seed)
    probes = []
    for _ in range(n_composites):
        g = random_genome(library, rng)
        probes.append(("composite", str(g), compose(g, library)))
    for name, imgs in sorted((real_probes or {}).items()):
        for i, img in enumerate(imgs):
            probes.append(("real", f"{name}/{i}", img))
    rows = []
    for i, (kind, label, img) in enumerate(probes):
        panel = select_panel(gallery, panel_size, np.random.SeedSequence([seed, i]))
        score = gallery.probe_fds(img)
        rank = rank_from_scores(score, gallery.real_fds[panel])
        rows.append(RankRow(kind, label, score, rank, rank < mu))
    return RankingTable(tuple(rows), panel_size, mu)
