"""Experiment configuration (a single JSON document).

Schema, with paths resolved relative to the config file::

    {
      "gallery": "gallery/"                      # directory of <identity>/<n>.pgm
                 | {"procedural": {"n_identities": 10, "n_images": 4, "seed": 3}},
      "parts": "parts/manifest.json"
               | {"procedural": {"counts": [1,4,4,4,3,3,2,2], "seed": 7, "optional_absent": false}},
      "n_enroll": 3,                             # images per identity enrolled; the rest are held out
      "model": {"m_intra": 10, "m_extra": 10, "m_fds": 10, "seed": 0, "literal_epsilon": false},
      "targets": ["id00", "id01"],               # optional, default: every identity
      "attack": {"strategy": "random", "seeds": [0, 1, 2], "beta": 0.1,
                 "epsilon": 0.05, "m": null, "max_queries": null, "categories_per_step": 1},
      "defenses": [{"name": "none"}, {"rounding_digits": 2}, {"fdsf_enabled": true}],
      "rank_study": {"n_composites": 100, "panel_size": 6, "mu": 5, "seed": 0},
      "out": "out/"
    }

Counts are listed as (head, eyes, lips, noses, brows, hairs, glasses,
mustaches).  When ``attack.m`` is null it is computed per target by
exhaustive enumeration of the undefended oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .oracle import DefenseConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProceduralGallery:
    n_identities: int = 10
    n_images: int = 4
    seed: int = 0


@dataclass(frozen=True)
class ProceduralParts:
    counts: tuple = (1, 4, 4, 4, 3, 3, 2, 2)
    seed: int = 0
    optional_absent: bool = False


@dataclass(frozen=True)
class ModelParams:
    m_intra: int = 10
    m_extra: int = 10
    m_fds: int = 10
    seed: int = 0
    literal_epsilon: bool = False


@dataclass(frozen=True)
class AttackParams:
    seeds: tuple
    strategy: str = "random"
    beta: float = 0.1
    epsilon: float = 0.05
    m: Optional[float] = None
    max_queries: Optional[int] = None
    categories_per_step: int = 1


@dataclass(frozen=True)
class RankStudyParams:
    n_composites: int = 100
    panel_size: int = 6
    mu: int = 5
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    gallery: object  # Path or ProceduralGallery
    parts: object  # Path or ProceduralParts
    attack: AttackParams
    defenses: tuple
    out: Path
    n_enroll: int = 3
    model: ModelParams = field(default_factory=ModelParams)
    targets: Optional[tuple] = None
    rank_study: RankStudyParams = field(default_factory=RankStudyParams)

    def __post_init__(self):
        if not self.attack.seeds:
            raise ConfigError("attack.seeds must be a non-empty list")
        if not self.defenses:
            raise ConfigError("defenses must be a non-empty list")
        labels = [d.label for d in self.defenses]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"defense labels must be unique, got {labels}")
        if self.attack.strategy not in ("random", "local"):
            raise ConfigError(f"unknown strategy {self.attack.strategy!r}")
        if not 0 < self.attack.beta < 1:
            raise ConfigError("attack.beta must lie in (0, 1)")
        if self.attack.m is not None and not 0 < self.attack.m <= 1:
            raise ConfigError("attack.m must lie in (0, 1]")
        if self.n_enroll < 2:
            raise ConfigError("n_enroll must be at least 2")
        if isinstance(self.gallery, Path) and not self.gallery.is_dir():
            raise ConfigError(f"gallery directory does not exist: {self.gallery}")
        if isinstance(self.parts, Path) and not self.parts.is_file():
            raise ConfigError(f"part manifest does not exist: {self.parts}")

    def with_seeds(self, seeds) -> "ExperimentConfig":
        attack = AttackParams(**{**self.attack.__dict__, "seeds": tuple(seeds)})
        return ExperimentConfig(**{**self.__dict__, "attack": attack})

    def with_out(self, out) -> "ExperimentConfig":
        return ExperimentConfig(**{**self.__dict__, "out": Path(out)})


def _build(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = set(cls.__dataclass_fields__)
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _source(raw, base: Path, where: str, procedural_cls):
    if isinstance(raw, str):
        return (base / raw).resolve()
    if isinstance(raw, dict) and set(raw) == {"procedural"}:
        spec = _build(procedural_cls, raw["procedural"], f"{where}.procedural")
        if procedural_cls is ProceduralParts:
            spec = ProceduralParts(tuple(spec.counts), spec.seed, spec.optional_absent)
        return spec
    raise ConfigError(f"{where} must be a path or {{'procedural': {{...}}}}")


def _defense(raw, i: int) -> DefenseConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"defenses[{i}] must be an object")
    try:
        return DefenseConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"defenses[{i}]: {exc}") from None


def config_from_dict(raw: dict, base_dir=".") -> ExperimentConfig:
    base = Path(base_dir)
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"gallery", "parts", "n_enroll", "model", "targets", "attack", "defenses", "rank_study", "out"}
    extra = set(raw) - allowed
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    for key in ("gallery", "parts", "attack", "defenses"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")

    attack_raw = dict(raw["attack"])
    attack_raw["seeds"] = tuple(int(s) for s in attack_raw.get("seeds", ()))
    targets = raw.get("targets")
    return ExperimentConfig(
        gallery=_source(raw["gallery"], base, "gallery", ProceduralGallery),
        parts=_source(raw["parts"], base, "parts", ProceduralParts),
        attack=_build(AttackParams, attack_raw, "attack"),
        defenses=tuple(_defense(d, i) for i, d in enumerate(raw["defenses"])),
        out=(base / raw.get("out", "out")).resolve(),
        n_enroll=int(raw.get("n_enroll", 3)),
        model=_build(ModelParams, raw.get("model"), "model"),
        targets=None if targets is None else tuple(targets),
        rank_study=_build(RankStudyParams, raw.get("rank_study"), "rank_study"),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw, path.parent)
