"""Part library, composite genomes and alpha-over face synthesis.

A composite face is a base head with one patch per feature category painted
on top of it in a fixed order.  The search space seen by the attacker is the
set of :class:`CompositeGenome` tuples over a :class:`PartLibrary`.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .image import FaceImage, PgmError, decode_pgm, decode_pgm_raw

MANIFEST_FORMAT = "compface-parts/1"
ABSENT = -1


class PartCategory(enum.IntEnum):
    # IntEnum order is the painting order: base head first, glasses last.
    BASE_HEAD = 0
    HAIR = 1
    BROWS = 2
    EYES = 3
    NOSE = 4
    LIPS = 5
    MUSTACHE = 6
    GLASSES = 7

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "PartCategory":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown part category {name!r}") from None


OPTIONAL_CATEGORIES = frozenset({PartCategory.MUSTACHE, PartCategory.GLASSES})

# Count tuples like (1, 100, 73, 34, 50, 25, 10, 10) list categories in this
# order: head, eyes, lips, noses, brows, hairs, glasses, mustaches.
COUNT_ORDER = (
    PartCategory.BASE_HEAD,
    PartCategory.EYES,
    PartCategory.LIPS,
    PartCategory.NOSE,
    PartCategory.BROWS,
    PartCategory.HAIR,
    PartCategory.GLASSES,
    PartCategory.MUSTACHE,
)


def counts_from_tuple(counts: Sequence[int]) -> dict[PartCategory, int]:
    if len(counts) != len(COUNT_ORDER):
        raise ValueError(f"expected {len(COUNT_ORDER)} counts, got {len(counts)}")
    return {cat: int(n) for cat, n in zip(COUNT_ORDER, counts)}


def counts_to_tuple(counts: Mapping[PartCategory, int]) -> tuple[int, ...]:
    return tuple(int(counts[cat]) for cat in COUNT_ORDER)


class LibraryError(ValueError):
    """Base class for part-library failures."""


class ManifestError(LibraryError):
    pass


class PartFileMissing(LibraryError, FileNotFoundError):
    pass


class PartBoundsError(LibraryError):
    pass


class AlphaRangeError(LibraryError):
    pass


class GenomeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FacePart:
    category: PartCategory
    id: int
    patch: np.ndarray  # (h, w) uint8 luminance
    alpha: np.ndarray  # (h, w) float64 in [0, 1]
    anchor: tuple[int, int]  # (x, y) of the patch's top-left corner

    def __post_init__(self):
        patch = np.array(self.patch, dtype=np.uint8, copy=True)
        alpha = np.array(self.alpha, dtype=np.float64, copy=True)
        if patch.ndim != 2 or patch.size == 0:
            raise ValueError(f"{self.category.label} #{self.id}: patch must be a non-empty 2-D array")
        if alpha.shape != patch.shape:
            raise ValueError(
                f"{self.category.label} #{self.id}: alpha shape {alpha.shape} != patch shape {patch.shape}"
            )
        if not np.all(np.isfinite(alpha)) or alpha.min() < 0.0 or alpha.max() > 1.0:
            raise AlphaRangeError(f"{self.category.label} #{self.id}: alpha values outside [0, 1]")
        if self.id < 0:
            raise ValueError(f"{self.category.label}: part id must be non-negative, got {self.id}")
        patch.setflags(write=False)
        alpha.setflags(write=False)
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "category", PartCategory(self.category))
        object.__setattr__(self, "anchor", (int(self.anchor[0]), int(self.anchor[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.patch.shape


@dataclass(frozen=True, eq=False)
class PartLibrary:
    """Per-category part lists.

    ``allow_absent`` adds an :data:`ABSENT` option to the optional categories
    (glasses, mustache) so the search space also contains faces without them.
    The base head is not searched; ``base_index`` picks which head is used.
    """

    parts: Mapping[PartCategory, tuple[FacePart, ...]]
    allow_absent: bool = False
    base_index: int = 0
    _options: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        normalized = {}
        for cat in PartCategory:
            items = tuple(sorted(self.parts.get(cat, ()), key=lambda p: p.id))
            if not items:
                raise LibraryError(f"category {cat.label} has no parts")
            ids = [p.id for p in items]
            if len(set(ids)) != len(ids):
                raise LibraryError(f"duplicate part ids in category {cat.label}")
            if any(p.category != cat for p in items):
                raise LibraryError(f"part filed under {cat.label} has a different category")
            normalized[cat] = items
        object.__setattr__(self, "parts", normalized)
        if not 0 <= self.base_index < len(normalized[PartCategory.BASE_HEAD]):
            raise LibraryError(f"base_index {self.base_index} out of range")

        base = self.base_head
        if base.anchor != (0, 0):
            raise PartBoundsError("base head must be anchored at (0, 0)")
        height, width = base.shape
        for cat in PartCategory:
            for part in normalized[cat]:
                x, y = part.anchor
                h, w = part.shape
                if cat == PartCategory.BASE_HEAD:
                    if part.shape != base.shape or part.anchor != (0, 0):
                        raise PartBoundsError(f"base head #{part.id} differs in size from the active head")
                    continue
                if x < 0 or y < 0 or x + w > width or y + h > height:
                    raise PartBoundsError(
                        f"{cat.label} #{part.id}: patch {w}x{h} at ({x}, {y}) exceeds base head {width}x{height}"
                    )

        options = {}
        for cat in PartCategory:
            if cat == PartCategory.BASE_HEAD:
                options[cat] = (self.base_index,)
            else:
                idx = tuple(range(len(normalized[cat])))
                if self.allow_absent and cat in OPTIONAL_CATEGORIES:
                    idx = idx + (ABSENT,)
                options[cat] = idx
        object.__setattr__(self, "_options", options)

    @property
    def base_head(self) -> FacePart:
        return self.parts[PartCategory.BASE_HEAD][self.base_index]

    @property
    def shape(self) -> tuple[int, int]:
        return self.base_head.shape

    @property
    def counts(self) -> dict[PartCategory, int]:
        return {cat: len(items) for cat, items in self.parts.items()}

    def options(self, category: PartCategory) -> tuple[int, ...]:
        """Valid genome indices for ``category`` (may include ABSENT)."""
        return self._options[PartCategory(category)]

    def part(self, category: PartCategory, index: int) -> FacePart:
        return self.parts[PartCategory(category)][index]


@dataclass(frozen=True, order=True)
class CompositeGenome:
    """One part index per category, in painting order."""

    indices: tuple[int, ...]

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        if len(indices) != len(PartCategory):
            raise GenomeError(f"genome needs {len(PartCategory)} indices, got {len(indices)}")
        object.__setattr__(self, "indices", indices)

    def __getitem__(self, category: PartCategory) -> int:
        return self.indices[int(category)]

    def __str__(self) -> str:
        return ",".join(str(i) for i in self.indices)

    @classmethod
    def parse(cls, text: str) -> "CompositeGenome":
        return cls(tuple(int(t) for t in text.split(",")))

    def replace(self, category: PartCategory, index: int) -> "CompositeGenome":
        indices = list(self.indices)
        indices[int(category)] = index
        return CompositeGenome(tuple(indices))


def validate_genome(genome: CompositeGenome, library: PartLibrary) -> None:
    for cat in PartCategory:
        if genome[cat] not in library.options(cat):
            raise GenomeError(f"index {genome[cat]} is not valid for category {cat.label}")


def state_space_size(library: PartLibrary) -> int:
    return math.prod(len(library.options(cat)) for cat in PartCategory)


def iter_genomes(library: PartLibrary):
    """All genomes in lexicographic painting order."""
    for combo in itertools.product(*(library.options(cat) for cat in PartCategory)):
        yield CompositeGenome(combo)


def random_genome(library: PartLibrary, rng: np.random.Generator) -> CompositeGenome:
    indices = []
    for cat in PartCategory:
        opts = library.options(cat)
        indices.append(opts[int(rng.integers(len(opts)))] if len(opts) > 1 else opts[0])
    return CompositeGenome(tuple(indices))


def compose(genome: CompositeGenome, library: PartLibrary) -> FaceImage:
    """Paint the genome's parts over the base head with straight alpha-over."""
    validate_genome(genome, library)
    canvas = library.base_head.patch.astype(np.float64)
    for cat in PartCategory:
        if cat == PartCategory.BASE_HEAD:
            continue
        index = genome[cat]
        if index == ABSENT:
            continue
        part = library.part(cat, index)
        x, y = part.anchor
        h, w = part.shape
        region = canvas[y : y + h, x : x + w]
        a = part.alpha
        region[...] = a * part.patch + (1.0 - a) * region
    return FaceImage.from_float(canvas)


# -- manifest I/O -----------------------------------------------------------


def alpha_path_for(image_path: Path) -> Path:
    stem = image_path.name[:-4] if image_path.name.endswith(".pgm") else image_path.name
    return image_path.with_name(stem + ".alpha.pgm")


def _read_part_file(path: Path, what: str) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise PartFileMissing(f"{what}: file not found: {path}") from None
    except OSError as exc:
        raise LibraryError(f"{what}: cannot read {path}: {exc}") from exc


def load_library(manifest_path) -> PartLibrary:
    manifest_path = Path(manifest_path)
    try:
        text = manifest_path.read_text()
    except FileNotFoundError:
        raise PartFileMissing(f"manifest not found: {manifest_path}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("parts"), list):
        raise ManifestError(f"{manifest_path}: manifest must be an object with a 'parts' list")

    root = manifest_path.parent
    by_cat: dict[PartCategory, list[FacePart]] = {cat: [] for cat in PartCategory}
    for n, entry in enumerate(doc["parts"]):
        what = f"{manifest_path.name} entry {n}"
        if not isinstance(entry, dict):
            raise ManifestError(f"{what}: expected an object")
        missing = {"category", "id", "file", "anchor_x", "anchor_y"} - entry.keys()
        if missing:
            raise ManifestError(f"{what}: missing keys {sorted(missing)}")
        try:
            cat = PartCategory.parse(str(entry["category"]))
        except ValueError as exc:
            raise ManifestError(f"{what}: {exc}") from None
        for key in ("id", "anchor_x", "anchor_y"):
            if not isinstance(entry[key], int) or isinstance(entry[key], bool):
                raise ManifestError(f"{what}: {key} must be an integer")
        if entry["id"] < 0:
            raise ManifestError(f"{what}: negative part id")

        image_path = root / str(entry["file"])
        a_path = alpha_path_for(image_path)
        try:
            patch = decode_pgm(_read_part_file(image_path, what))
            alpha_raw, alpha_max = decode_pgm_raw(_read_part_file(a_path, what))
        except PgmError as exc:
            raise ManifestError(f"{what}: {exc}") from None
        if alpha_raw.shape != patch.shape:
            raise ManifestError(f"{what}: alpha mask {a_path.name} does not match patch size")
        if alpha_raw.max() > alpha_max:
            raise AlphaRangeError(f"{what}: alpha mask has values above its maxval {alpha_max}")
        by_cat[cat].append(
            FacePart(cat, entry["id"], patch, alpha_raw / float(alpha_max), (entry["anchor_x"], entry["anchor_y"]))
        )

    return PartLibrary(
        by_cat,
        allow_absent=bool(doc.get("optional_absent", False)),
        base_index=int(doc.get("base_index", 0)),
    )
