"""The target face-recognition service and its defense stack.

The service is verification style: a caller submits a probe together with an
enrolled identity name and receives a confidence in [0, 1].  Two defenses sit
between the raw score and the caller: decimal rounding, and FDS filtering,
which ranks the probe's face-likelihood against a panel of real faces and
answers probes that look synthetic with a decoy score.
"""

from __future__ import annotations

import csv
import enum
import itertools
import threading
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from .eigenspace import (
    DualSpaceModel,
    EigenError,
    EigenModel,
    RankError,
    _as_vector,
    fds,
    similarity_st,
    train_dual,
    train_pca,
)
from .image import FaceImage, load_image


# logistic input that lands the calibration medians near 0.9 / 0.1
_LOGIT_90 = 2.2


class OracleError(ValueError):
    pass


class UnknownIdentity(OracleError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown identity"


class Verdict(str, enum.Enum):
    COMPOSITE = "composite"
    GENUINE = "genuine"


@dataclass(frozen=True, eq=False)
class Gallery:
    """Enrolled identities plus the trained models and score calibration.

    ``real_fds`` holds one FDS per enrolled face, used when that face sits on
    an FDSF panel.  :func:`enroll` fills it with cross-fitted scores (each face
    scored by a face space trained without its identity); a gallery built by
    hand falls back to in-sample scores from ``fds_model``.
    """

    identities: Mapping[str, tuple[FaceImage, ...]]
    dual: DualSpaceModel
    fds_model: EigenModel
    s0: float
    tau: float
    literal_epsilon: bool = False
    real_fds: Optional[np.ndarray] = None
    real_faces: tuple = field(init=False, repr=False)
    _memo: dict = field(init=False, repr=False)

    def __post_init__(self):
        idents = {name: tuple(imgs) for name, imgs in sorted(self.identities.items())}
        if not idents or any(len(v) == 0 for v in idents.values()):
            raise OracleError("every identity needs at least one enrolled image")
        dims = self.dual.dims
        for name, imgs in idents.items():
            for img in imgs:
                if img.shape != dims or img.shape != self.fds_model.dims:
                    raise OracleError(f"image of {name!r} does not match model dims {dims}")
        if not self.tau > 0:
            raise OracleError("calibration temperature must be positive")
        object.__setattr__(self, "identities", idents)
        faces = tuple((name, img) for name, imgs in idents.items() for img in imgs)
        object.__setattr__(self, "real_faces", faces)
        if self.real_fds is None:
            scores = np.array([fds(self.fds_model, img, self.literal_epsilon) for _, img in faces])
        else:
            scores = np.array(self.real_fds, dtype=np.float64)
            if scores.shape != (len(faces),):
                raise OracleError(f"real_fds needs {len(faces)} entries, got {scores.shape}")
        scores.setflags(write=False)
        object.__setattr__(self, "real_fds", scores)
        # pure-function memo: (kind, probe digest, identity) -> score
        object.__setattr__(self, "_memo", {})

    @property
    def dims(self) -> tuple[int, int]:
        return self.dual.dims

    def enrolled(self, identity: str) -> tuple[FaceImage, ...]:
        try:
            return self.identities[identity]
        except KeyError:
            raise UnknownIdentity(f"identity {identity!r} is not enrolled") from None

    def probe_fds(self, probe: FaceImage) -> float:
        key = ("fds", probe.sha256(), None)
        if key not in self._memo:
            self._memo[key] = fds(self.fds_model, probe, self.literal_epsilon)
        return self._memo[key]

    def face_fds(self, face: FaceImage) -> float:
        """Panel score of a real face: cross-fitted if enrolled, else the model's FDS."""
        for (_, img), score in zip(self.real_faces, self.real_fds):
            if img == face:
                return float(score)
        return self.probe_fds(face)


def cross_fitted_fds(
    images: Mapping[str, Sequence[FaceImage]], m_fds: int, literal_epsilon: bool = False
) -> np.ndarray:
    """FDS of every face under a face space trained on the other identities only.

    Scoring a face with a model fit to it inflates its likelihood, which
    would let every panel face out-rank a fresh genuine photograph.
    """
    names = sorted(images)
    out = []
    for name in names:
        rest = [img for other in names if other != name for img in images[other]]
        if len(rest) < 2:
            raise OracleError("cross-fitted FDS needs at least two images outside each identity")
        try:
            model = train_pca(rest, m_fds)
        except RankError as exc:
            # small galleries: fall back to the largest available subspace
            model = train_pca(rest, exc.rank)
        out.extend(fds(model, img, literal_epsilon) for img in images[name])
    return np.array(out)


def _pair_scores(dual: DualSpaceModel, identities: Mapping[str, Sequence[FaceImage]]):
    flat = [(name, img) for name in sorted(identities) for img in identities[name]]
    genuine, impostor = [], []
    for (na, a), (nb, b) in itertools.combinations(flat, 2):
        (genuine if na == nb else impostor).append(similarity_st(dual, a, b))
    return np.array(genuine), np.array(impostor)


def enroll(
    images: Mapping[str, Sequence[FaceImage]],
    m_intra: int,
    m_extra: int,
    m_fds: int,
    seed: int = 0,
    literal_epsilon: bool = False,
) -> Gallery:
    """Train the recognizer on a labeled image set and calibrate its score map.

    The logistic offset sits midway between the median genuine-pair and
    median impostor-pair similarities; the temperature puts those medians at
    roughly 0.9 and 0.1.  The temperature is tightened when needed so that an
    exact enrolled image (similarity 0) also maps to at least 0.9.
    """
    if len(images) < 2:
        raise OracleError("enrollment needs at least two identities")
    try:
        dual = train_dual(images, m_intra, m_extra, seed=seed)
        fds_model = train_pca([img for name in sorted(images) for img in images[name]], m_fds)
    except EigenError as exc:
        raise OracleError(f"cannot train recognizer: {exc}") from exc
    genuine, impostor = _pair_scores(dual, images)
    if genuine.size == 0 or impostor.size == 0:
        raise OracleError("calibration needs both genuine and impostor pairs")
    g_med, i_med = float(np.median(genuine)), float(np.median(impostor))
    if not g_med > i_med:
        raise OracleError(f"genuine median {g_med:.4g} does not exceed impostor median {i_med:.4g}")
    s0 = (g_med + i_med) / 2.0
    tau = (g_med - i_med) / (2 * _LOGIT_90)
    if s0 < 0:
        tau = min(tau, -s0 / _LOGIT_90)
    return Gallery(
        images,
        dual,
        fds_model,
        s0=s0,
        tau=tau,
        literal_epsilon=literal_epsilon,
        real_fds=cross_fitted_fds(images, m_fds, literal_epsilon),
    )


def raw_similarity(gallery: Gallery, probe: FaceImage, identity: str) -> float:
    """Best similarity between ``probe`` and the identity's enrolled images."""
    enrolled = gallery.enrolled(identity)
    key = ("sim", probe.sha256(), identity)
    memo = gallery._memo
    if key not in memo:
        x = _as_vector(probe, gallery.dims)
        memo[key] = max(similarity_st(gallery.dual, x, img.vector()) for img in enrolled)
    return memo[key]


def confidence_from_similarity(gallery: Gallery, similarity: float) -> float:
    return float(expit((similarity - gallery.s0) / gallery.tau))


def raw_confidence(gallery: Gallery, probe: FaceImage, identity: str) -> float:
    return confidence_from_similarity(gallery, raw_similarity(gallery, probe, identity))


def identification_rank(gallery: Gallery, probe: FaceImage, identity: str) -> int:
    """1-based rank of ``identity`` when all enrolled identities are scored."""
    target = raw_similarity(gallery, probe, identity)
    others = [raw_similarity(gallery, probe, name) for name in gallery.identities if name != identity]
    return 1 + sum(s > target for s in others)


def round_confidence(score: float, digits: Optional[int]) -> float:
    if digits is None:
        return score
    q = Decimal(repr(float(score))).quantize(Decimal(1).scaleb(-digits), rounding=ROUND_HALF_UP)
    return float(q)


# -- FDS filtering ------------------------------------------------------------


def rank_from_scores(probe_score: float, panel_scores: Sequence[float]) -> int:
    """1 + number of panel scores below the probe.

    A panel face with exactly the probe's score counts as below it, so a probe
    identical to a real face is never out-ranked by that face.
    """
    panel = np.asarray(panel_scores, dtype=np.float64)
    if panel.size == 0:
        raise OracleError("FDS panel is empty")
    return 1 + int(np.sum(panel <= probe_score))


def fds_rank(gallery: Gallery, probe: FaceImage, panel: Sequence[FaceImage]) -> int:
    if len(panel) == 0:
        raise OracleError("FDS panel is empty")
    return rank_from_scores(gallery.probe_fds(probe), [gallery.face_fds(img) for img in panel])


def fdsf_decision(rank: int, mu: int) -> Verdict:
    return Verdict.COMPOSITE if rank < mu else Verdict.GENUINE


@dataclass(frozen=True)
class DefenseConfig:
    rounding_digits: Optional[int] = None
    fdsf_enabled: bool = False
    panel_size: int = 6
    mu: int = 5
    panel_seed: int = 0
    panel_resample: bool = False  # draw a fresh panel for every query
    decoy: str = "exact"  # or "random_high"
    name: str = ""

    def __post_init__(self):
        d = self.rounding_digits
        if d is not None and not (isinstance(d, int) and 0 <= d <= 6):
            raise ValueError(f"rounding_digits must be None or 0..6, got {d!r}")
        if self.panel_size < 1:
            raise ValueError("panel_size must be at least 1")
        if self.fdsf_enabled and not 1 <= self.mu <= self.panel_size + 1:
            raise ValueError(f"mu must lie in [1, {self.panel_size + 1}], got {self.mu}")
        if self.decoy not in ("exact", "random_high"):
            raise ValueError(f"unknown decoy mode {self.decoy!r}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        parts = []
        if self.rounding_digits is not None:
            parts.append(f"round{self.rounding_digits}")
        if self.fdsf_enabled:
            parts.append("fdsf")
        return "+".join(parts) or "none"


def select_panel(gallery: Gallery, size: int, seed: int) -> np.ndarray:
    """Indices into ``gallery.real_faces`` for a seeded panel of real faces."""
    n = len(gallery.real_faces)
    if size > n:
        raise OracleError(f"panel of {size} requested but only {n} real faces are enrolled")
    return np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))


@dataclass(frozen=True)
class QueryRecord:
    query_index: int
    identity: str
    probe_sha256: str
    raw_score: Optional[float]
    returned_score: float
    fdsf_verdict: Optional[Verdict]
    rank: Optional[int]


LEDGER_COLUMNS = ("query_index", "identity", "probe_sha256", "raw_score", "returned_score", "fdsf_verdict", "rank")


class QueryLedger:
    """Append-only log of oracle queries; appends are serialized by a lock."""

    def __init__(self):
        self._records: list[QueryRecord] = []
        self._lock = threading.Lock()

    def append(self, **fields) -> QueryRecord:
        with self._lock:
            record = QueryRecord(query_index=len(self._records), **fields)
            self._records.append(record)
            return record

    @property
    def count(self) -> int:
        return len(self._records)

    def __len__(self):
        return len(self._records)

    @property
    def records(self) -> tuple[QueryRecord, ...]:
        return tuple(self._records)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LEDGER_COLUMNS)
            for r in self._records:
                writer.writerow(
                    [
                        r.query_index,
                        r.identity,
                        r.probe_sha256,
                        "" if r.raw_score is None else repr(r.raw_score),
                        repr(r.returned_score),
                        "" if r.fdsf_verdict is None else r.fdsf_verdict.value,
                        "" if r.rank is None else r.rank,
                    ]
                )


def _decoy_score(defense: DefenseConfig, digest: str) -> float:
    if defense.decoy == "exact":
        return 1.0
    u = int(digest[:12], 16) / float(16**12)
    return round_confidence(0.9 + 0.1 * u, defense.rounding_digits)


def _panel_for_query(gallery: Gallery, defense: DefenseConfig, query_index: int) -> np.ndarray:
    if defense.panel_resample:
        seed = np.random.SeedSequence([defense.panel_seed, query_index])
        return select_panel(gallery, defense.panel_size, seed)
    return select_panel(gallery, defense.panel_size, defense.panel_seed)


def defended_query(
    gallery: Gallery,
    probe: FaceImage,
    identity: str,
    defense: DefenseConfig,
    ledger: QueryLedger,
) -> float:
    gallery.enrolled(identity)
    digest = probe.sha256()
    verdict = rank = raw = None
    if defense.fdsf_enabled:
        panel = _panel_for_query(gallery, defense, ledger.count)
        rank = rank_from_scores(gallery.probe_fds(probe), gallery.real_fds[panel])
        verdict = fdsf_decision(rank, defense.mu)
    if verdict == Verdict.COMPOSITE:
        returned = _decoy_score(defense, digest)
    else:
        raw = raw_confidence(gallery, probe, identity)
        returned = round_confidence(raw, defense.rounding_digits)
    ledger.append(
        identity=identity,
        probe_sha256=digest,
        raw_score=raw,
        returned_score=returned,
        fdsf_verdict=verdict,
        rank=rank,
    )
    return returned


# -- gallery directories ------------------------------------------------------


def load_gallery_dir(root) -> dict[str, list[FaceImage]]:
    """Read ``<root>/<identity>/<n>.pgm``; images sorted by numeric name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"gallery directory not found: {root}")
    out = {}
    for ident_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(ident_dir.glob("*.pgm"), key=lambda p: (len(p.stem), p.stem))
        if files:
            out[ident_dir.name] = [load_image(p) for p in files]
    if not out:
        raise OracleError(f"no identities found under {root}")
    return out


def split_gallery(images: Mapping[str, Sequence[FaceImage]], n_enroll: int):
    """(enrolled, held_out): the first ``n_enroll`` images of each identity are enrolled."""
    enrolled = {k: list(v[:n_enroll]) for k, v in images.items()}
    held = {k: list(v[n_enroll:]) for k, v in images.items() if len(v) > n_enroll}
    return enrolled, held
