"""Procedural face parts and a synthetic identity gallery.

Both are drawn from one parametric face family: each feature category has a
small parameter vector (size, position, darkness, ...).  Parts are rendered
flat with a one-pixel anti-aliased edge and cropped to a patch; gallery
photographs render an identity's full parameter set on the shaded head, then
pass it through a capture model (blur, lighting, sub-pixel shift, sensor
noise).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from .image import FaceImage, encode_pgm
from .parts import (
    COUNT_ORDER,
    MANIFEST_FORMAT,
    OPTIONAL_CATEGORIES,
    PartCategory,
    counts_from_tuple,
)

CANVAS = 64
FACE_CENTER = (32.0, 34.0)
FACE_RADII = (20.0, 25.0)

# (low, high) per parameter, in 64-pixel canvas units.  The first entry of
# each category is its primary parameter, stratified across part variants.
PARAM_RANGES: dict[PartCategory, dict[str, tuple[float, float]]] = {
    PartCategory.HAIR: {
        "hairline": (8.0, 16.0),
        "curve": (0.0, 6.0),
        "side": (22.0, 38.0),
        "lum": (25.0, 90.0),
    },
    PartCategory.BROWS: {
        "y": (19.0, 23.0),
        "half_len": (4.0, 6.5),
        "thick": (1.0, 2.6),
        "tilt": (-1.5, 1.5),
        "lum": (30.0, 100.0),
    },
    PartCategory.EYES: {
        "rx": (3.0, 5.0),
        "ry": (1.4, 2.6),
        "spread": (8.0, 10.5),
        "iris": (25.0, 80.0),
    },
    PartCategory.NOSE: {
        "length": (8.0, 13.0),
        "width": (3.0, 6.0),
        "lum": (70.0, 120.0),
    },
    PartCategory.LIPS: {
        "half_width": (5.5, 9.5),
        "y": (45.0, 49.0),
        "thick": (1.2, 3.0),
        "lum": (90.0, 140.0),
    },
    PartCategory.MUSTACHE: {
        "half_width": (5.0, 9.0),
        "y": (41.5, 43.5),
        "thick": (1.2, 2.4),
        "lum": (25.0, 70.0),
    },
    PartCategory.GLASSES: {
        "radius": (4.8, 6.5),
        "thick": (0.8, 1.6),
        "lum": (15.0, 60.0),
    },
}


@dataclass(frozen=True)
class CaptureModel:
    """Photographic degradations applied to every gallery image."""

    blur: float = 0.8
    lighting: float = 0.08  # max relative left-right gain
    brightness: float = 6.0
    shift: float = 0.6  # max sub-pixel offset
    noise: float = 3.0
    expression: float = 1.0  # scale of per-image feature jitter


class _Grid:
    def __init__(self, size: int):
        self.size = size
        self.scale = size / CANVAS
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
        # pixel centres in canvas units
        self.u = (xs + 0.5) / self.scale
        self.v = (ys + 0.5) / self.scale

    def edge(self, signed_dist: np.ndarray) -> np.ndarray:
        """Coverage from a signed distance (canvas units, negative inside)."""
        return np.clip(0.5 - signed_dist * self.scale, 0.0, 1.0)

    def ellipse(self, cx, cy, rx, ry) -> np.ndarray:
        r = np.sqrt(((self.u - cx) / rx) ** 2 + ((self.v - cy) / ry) ** 2)
        return self.edge((r - 1.0) * min(rx, ry))

    def ring(self, cx, cy, radius, thick) -> np.ndarray:
        d = np.hypot(self.u - cx, self.v - cy)
        return self.edge(np.abs(d - radius) - thick / 2.0)

    def band(self, cx, cy, half_len, thick, tilt=0.0, bend=0.0) -> np.ndarray:
        t = (self.u - cx) / half_len
        centre = cy - tilt * t + bend * t**2
        inside = self.edge(np.abs(self.v - centre) - thick / 2.0)
        return inside * self.edge((np.abs(t) - 1.0) * half_len)


def _base_head(g: _Grid) -> np.ndarray:
    cx, cy = FACE_CENTER
    rx, ry = FACE_RADII
    lum = np.full((g.size, g.size), 50.0) + 10.0 * (g.v / CANVAS)
    neck = g.edge(np.maximum(np.abs(g.u - cx) - 7.5, 50.0 - g.v))
    lum = neck * 140.0 + (1 - neck) * lum
    for side in (-1, 1):
        ear = g.ellipse(cx + side * (rx + 0.5), cy, 2.5, 5.0)
        lum = ear * 150.0 + (1 - ear) * lum
    r2 = ((g.u - cx) / rx) ** 2 + ((g.v - cy) / ry) ** 2
    shade = 0.78 + 0.22 * np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    face = g.ellipse(cx, cy, rx, ry)
    return face * (175.0 * shade) + (1 - face) * lum


def _feature_layer(g: _Grid, cat: PartCategory, p: Mapping[str, float]) -> tuple[np.ndarray, np.ndarray]:
    """Full-canvas (luminance, alpha) for one feature."""
    cx = FACE_CENTER[0]
    shape = (g.size, g.size)
    if cat == PartCategory.HAIR:
        head = g.ellipse(cx, 32.0, 22.5, 28.0)
        line = p["hairline"] + p["curve"] * ((g.u - cx) / 18.0) ** 2
        top = g.edge(g.v - line)
        sides = g.edge(17.0 - np.abs(g.u - cx)) * g.edge(g.v - p["side"])
        alpha = head * np.maximum(top, sides)
        return np.full(shape, p["lum"]), alpha
    if cat == PartCategory.BROWS:
        alpha = np.zeros(shape)
        for side in (-1, 1):
            brow = g.band(cx + side * 9.5, p["y"], p["half_len"], p["thick"], side * p["tilt"])
            alpha = np.maximum(alpha, brow)
        return np.full(shape, p["lum"]), alpha
    if cat == PartCategory.EYES:
        lum = np.full(shape, 215.0)
        alpha = np.zeros(shape)
        r_iris = min(p["ry"] * 0.95, p["rx"] * 0.55)
        for side in (-1, 1):
            ex = cx + side * p["spread"]
            sclera = g.ellipse(ex, 27.5, p["rx"], p["ry"])
            iris = g.ellipse(ex, 27.5, r_iris, r_iris) * sclera
            lid = g.band(ex, 27.5 - p["ry"] * 0.9, p["rx"] * 1.05, 0.8, 0.0, p["ry"] * 0.6)
            lum = iris * p["iris"] + (1 - iris) * lum
            lum = lid * 60.0 + (1 - lid) * lum
            alpha = np.maximum(alpha, np.maximum(sclera, lid))
        return lum, alpha
    if cat == PartCategory.NOSE:
        base_y = 28.0 + p["length"]
        lum = np.full(shape, 140.0)
        alpha = np.zeros(shape)
        for side in (-1, 1):
            ridge_x = cx + side * p["width"] * 0.45
            ridge = g.edge(np.abs(g.u - ridge_x) - 0.5) * g.edge(np.abs(g.v - (28.0 + p["length"] / 2)) - p["length"] / 2)
            nostril = g.ellipse(cx + side * p["width"] * 0.6, base_y, 1.3, 0.9)
            lum = nostril * p["lum"] + (1 - nostril) * lum
            alpha = np.maximum(alpha, np.maximum(0.6 * ridge, nostril))
        tip = g.band(cx, base_y + 0.8, p["width"] * 0.55, 0.9, 0.0, -0.8)
        lum = tip * 130.0 + (1 - tip) * lum
        alpha = np.maximum(alpha, tip * 0.8)
        return lum, alpha
    if cat == PartCategory.LIPS:
        y, hw, t = p["y"], p["half_width"], p["thick"]
        upper = g.ellipse(cx, y - t * 0.5, hw, t * 0.9)
        lower = g.ellipse(cx, y + t * 0.6, hw * 0.9, t * 1.1)
        seam = g.band(cx, y, hw * 0.95, 0.7, 0.0, -0.6)
        lum = np.full(shape, p["lum"])
        lum = seam * 55.0 + (1 - seam) * lum
        return lum, np.maximum(np.maximum(upper, lower), seam)
    if cat == PartCategory.MUSTACHE:
        alpha = g.band(cx, p["y"], p["half_width"], p["thick"], 0.0, p["thick"] * 0.8)
        return np.full(shape, p["lum"]), alpha
    if cat == PartCategory.GLASSES:
        alpha = np.zeros(shape)
        for side in (-1, 1):
            alpha = np.maximum(alpha, g.ring(cx + side * 9.5, 27.5, p["radius"], p["thick"]))
        bridge = g.edge(np.abs(g.v - 27.0) - p["thick"] / 2) * g.edge(np.abs(g.u - cx) - (9.5 - p["radius"]))
        alpha = np.maximum(alpha, bridge)
        return np.full(shape, p["lum"]), alpha
    raise ValueError(f"no renderer for {cat}")


def _paint(canvas: np.ndarray, lum: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    return alpha * lum + (1.0 - alpha) * canvas


def variant_params(cat: PartCategory, count: int, rng: np.random.Generator) -> list[dict[str, float]]:
    """``count`` parameter sets; the primary parameter is stratified."""
    ranges = PARAM_RANGES[cat]
    names = list(ranges)
    slots = rng.permutation(count)
    out = []
    for i in range(count):
        p = {}
        for k, name in enumerate(names):
            lo, hi = ranges[name]
            if k == 0:
                frac = (slots[i] + rng.uniform(0.2, 0.8)) / count
            else:
                frac = rng.uniform()
            p[name] = float(lo + frac * (hi - lo))
        out.append(p)
    return out


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def render_part(cat: PartCategory, params: Mapping[str, float], size: int = CANVAS):
    """Crop a feature layer to its support; returns (patch, alpha8, anchor)."""
    g = _Grid(size)
    lum, alpha = _feature_layer(g, cat, params)
    alpha8 = _quantize(alpha * 255.0)
    rows = np.flatnonzero(alpha8.any(axis=1))
    cols = np.flatnonzero(alpha8.any(axis=0))
    if rows.size == 0:
        raise ValueError(f"{cat.label} parameters produced an empty part")
    y0, y1 = rows[0], rows[-1] + 1
    x0, x1 = cols[0], cols[-1] + 1
    return _quantize(lum[y0:y1, x0:x1]), alpha8[y0:y1, x0:x1], (int(x0), int(y0))


def gen_procedural_parts(
    counts, seed: int, out_dir, size: int = CANVAS, optional_absent: bool = False
) -> Path:
    """Write part PGMs, alpha masks and ``manifest.json`` into ``out_dir``.

    ``counts`` is a mapping by category or a tuple in ``COUNT_ORDER``.
    """
    if not isinstance(counts, Mapping):
        counts = counts_from_tuple(counts)
    counts = {PartCategory(k): int(v) for k, v in counts.items()}
    for cat in PartCategory:
        if counts.get(cat, 0) < 1:
            raise ValueError(f"part count for {cat.label} must be positive")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []

    def emit(cat, idx, patch, alpha8, anchor):
        name = f"{cat.label}_{idx:03d}.pgm"
        (out_dir / name).write_bytes(encode_pgm(patch))
        (out_dir / f"{cat.label}_{idx:03d}.alpha.pgm").write_bytes(encode_pgm(alpha8))
        entries.append({"category": cat.label, "id": idx, "file": name, "anchor_x": anchor[0], "anchor_y": anchor[1]})

    g = _Grid(size)
    base = _base_head(g)
    for idx in range(counts[PartCategory.BASE_HEAD]):
        # additional heads only differ by a global brightness offset
        head = _quantize(base + 6.0 * idx * (1 if idx % 2 else -1))
        emit(PartCategory.BASE_HEAD, idx, head, np.full(head.shape, 255, np.uint8), (0, 0))
    for cat in COUNT_ORDER[1:]:
        for idx, params in enumerate(variant_params(cat, counts[cat], rng)):
            emit(cat, idx, *render_part(cat, params, size))

    entries.sort(key=lambda e: (PartCategory.parse(e["category"]), e["id"]))
    manifest = {
        "format": MANIFEST_FORMAT,
        "width": size,
        "height": size,
        "seed": int(seed),
        "optional_absent": bool(optional_absent),
        "parts": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- synthetic gallery ------------------------------------------------------


@dataclass(frozen=True)
class Identity:
    name: str
    features: dict  # PartCategory -> params, optional categories may be missing


def sample_identity(name: str, rng: np.random.Generator, p_optional: float = 0.2) -> Identity:
    features = {}
    for cat in COUNT_ORDER[1:]:
        params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in PARAM_RANGES[cat].items()}
        if cat in OPTIONAL_CATEGORIES and rng.uniform() >= p_optional:
            continue
        features[cat] = params
    return Identity(name, features)


_JITTER = {
    (PartCategory.BROWS, "y"): 0.4,
    (PartCategory.EYES, "ry"): 0.15,
    (PartCategory.LIPS, "thick"): 0.2,
    (PartCategory.LIPS, "half_width"): 0.3,
}


def render_identity(
    identity: Identity,
    rng: np.random.Generator,
    capture: CaptureModel = CaptureModel(),
    size: int = CANVAS,
) -> FaceImage:
    """One photograph of ``identity`` under a random capture condition."""
    g = _Grid(size)
    canvas = _base_head(g)
    for cat in PartCategory:
        params = identity.features.get(cat)
        if params is None:
            continue
        params = dict(params)
        for (jcat, key), amp in _JITTER.items():
            if jcat == cat:
                params[key] += capture.expression * rng.uniform(-amp, amp)
        canvas = _paint(canvas, *_feature_layer(g, cat, params))
    if capture.blur > 0:
        canvas = ndimage.gaussian_filter(canvas, capture.blur * g.scale, mode="nearest")
    gain = rng.uniform(-capture.lighting, capture.lighting)
    canvas = canvas * (1.0 + gain * (g.u - CANVAS / 2) / (CANVAS / 2))
    canvas = canvas + rng.uniform(-capture.brightness, capture.brightness)
    if capture.shift > 0:
        offset = rng.uniform(-capture.shift, capture.shift, size=2) * g.scale
        canvas = ndimage.shift(canvas, offset, order=1, mode="nearest")
    if capture.noise > 0:
        canvas = canvas + rng.normal(0.0, capture.noise, size=canvas.shape)
    return FaceImage(_quantize(canvas))


def gen_gallery(
    out_dir,
    n_identities: int = 10,
    n_images: int = 4,
    seed: int = 0,
    size: int = CANVAS,
    capture: CaptureModel = CaptureModel(),
) -> Path:
    """Write ``<out_dir>/<identity>/<n>.pgm`` for a synthetic population."""
    if n_identities < 1 or n_images < 1:
        raise ValueError("need at least one identity and one image per identity")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    width = max(2, len(str(n_identities - 1)))
    for i in range(n_identities):
        ident = sample_identity(f"id{i:0{width}d}", rng)
        ident_dir = out_dir / ident.name
        ident_dir.mkdir(parents=True, exist_ok=True)
        for n in range(n_images):
            img = render_identity(ident, rng, capture, size)
            (ident_dir / f"{n}.pgm").write_bytes(encode_pgm(img.pixels))
    return out_dir
