"""Eigenface subspaces: PCA training, face-likelihood score and dual-space similarity.

Everything is evaluated in the log domain.  Training uses the snapshot method
(eigendecomposition of the n x n Gram matrix) because the number of images is
far below the number of pixels.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .image import FaceImage

RHO_FLOOR = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


class EigenError(ValueError):
    pass


class DimensionMismatch(EigenError):
    pass


class RankError(EigenError):
    def __init__(self, requested: int, rank: int):
        super().__init__(f"requested {requested} components but the data rank is {rank}")
        self.requested = requested
        self.rank = rank


@dataclass(frozen=True, eq=False)
class EigenModel:
    mean: np.ndarray  # (d,)
    basis: np.ndarray  # (d, M), orthonormal columns
    eigenvalues: np.ndarray  # (M,), non-increasing, > 0
    rho: float  # residual variance scale
    dims: tuple[int, int]  # (height, width) of the source rasters

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).ravel()
        basis = np.array(self.basis, dtype=np.float64)
        lam = np.array(self.eigenvalues, dtype=np.float64).ravel()
        dims = (int(self.dims[0]), int(self.dims[1]))
        d = dims[0] * dims[1]
        if mean.shape != (d,) or basis.ndim != 2 or basis.shape[0] != d or basis.shape[1] != lam.size:
            raise EigenError("inconsistent EigenModel array shapes")
        if lam.size == 0 or np.any(lam <= 0) or np.any(np.diff(lam) > 0):
            raise EigenError("eigenvalues must be positive and non-increasing")
        if not self.rho > 0:
            raise EigenError("rho must be positive")
        for arr in (mean, basis, lam):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "dims", dims)

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size

    @property
    def size(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class Projection:
    coeffs: np.ndarray
    residual: float  # distance from the M-dimensional face space


@dataclass(frozen=True, eq=False)
class DualSpaceModel:
    intra: EigenModel
    extra: EigenModel

    def __post_init__(self):
        if self.intra.dims != self.extra.dims:
            raise DimensionMismatch("intra and extra spaces built over different raster sizes")

    @property
    def dims(self) -> tuple[int, int]:
        return self.intra.dims


def _as_vector(x, dims: tuple[int, int]) -> np.ndarray:
    if isinstance(x, FaceImage):
        if x.shape != dims:
            raise DimensionMismatch(f"image is {x.shape}, model expects {dims}")
        return x.vector()
    v = np.asarray(x, dtype=np.float64)
    if v.shape == dims:
        return v.ravel()
    if v.ndim == 1 and v.size == dims[0] * dims[1]:
        return v
    raise DimensionMismatch(f"input of shape {v.shape} does not match model dims {dims}")


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its first non-negligible entry is positive."""
    out = vectors.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        tol = 1e-12 * np.max(np.abs(col))
        nz = np.flatnonzero(np.abs(col) > tol)
        if nz.size and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def train_vectors(data: np.ndarray, n_components: int, dims: tuple[int, int], center: bool = True) -> EigenModel:
    """PCA on the rows of ``data`` (n x d).

    With ``center=False`` the mean is pinned at zero and the second-moment
    matrix is decomposed instead of the covariance (used for difference spaces).
    """
    X = np.asarray(data, dtype=np.float64)
    min_rows = 2 if center else 1
    if X.ndim != 2 or X.shape[0] < min_rows:
        raise EigenError(f"need at least {min_rows} training vector(s)")
    n, d = X.shape
    if d != dims[0] * dims[1]:
        raise DimensionMismatch(f"vectors have {d} entries, dims {dims} imply {dims[0] * dims[1]}")
    mean = X.mean(axis=0) if center else np.zeros(d)
    A = X - mean
    gram = A @ A.T
    w, V = np.linalg.eigh(gram)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]

    top = max(w[0], 0.0)
    rank = int(np.sum(w > top * 1e-10)) if top > 0 else 0
    if rank == 0:
        raise EigenError("training data has zero variance (degenerate covariance)")
    if not 1 <= n_components <= rank:
        raise RankError(n_components, rank)

    U = A.T @ V[:, :rank] / np.sqrt(w[:rank])
    # one re-orthonormalisation pass keeps small-eigenvalue directions at 1e-8 accuracy
    U, R = np.linalg.qr(U)
    U = U * np.sign(np.diag(R))
    U = _fix_signs(U)

    scale = (n - 1) if center else n
    lam = w[:rank] / scale
    discarded = lam[n_components:]
    rho = max(float(discarded.mean()) if discarded.size else 0.0, RHO_FLOOR)
    return EigenModel(mean, U[:, :n_components], lam[:n_components], rho, dims)


def train_pca(images: Sequence[FaceImage], n_components: int) -> EigenModel:
    if len(images) < 2:
        raise EigenError("train_pca needs at least two images")
    dims = images[0].shape
    for img in images:
        if img.shape != dims:
            raise DimensionMismatch(f"training image is {img.shape}, expected {dims}")
    X = np.stack([img.vector() for img in images])
    return train_vectors(X, n_components, dims, center=True)


def project(model: EigenModel, image) -> Projection:
    x = _as_vector(image, model.dims) - model.mean
    coeffs = model.basis.T @ x
    residual = x - model.basis @ coeffs
    return Projection(coeffs, float(np.sqrt(residual @ residual)))


def reconstruct(model: EigenModel, coeffs: np.ndarray) -> np.ndarray:
    return model.mean + model.basis @ np.asarray(coeffs, dtype=np.float64)


def fds_from_projection(model: EigenModel, proj: Projection, literal_epsilon: bool = False) -> float:
    lam = model.eigenvalues
    m = lam.size
    gauss = -0.5 * float(np.sum(proj.coeffs**2 / lam)) - 0.5 * m * _LOG_2PI - 0.5 * float(np.sum(np.log(lam)))
    if literal_epsilon:
        # density multiplied by the raw distance; zero distance is floored to stay finite
        return gauss + math.log(max(proj.residual, 1e-300))
    return gauss - proj.residual**2 / (2.0 * model.rho)


def fds(model: EigenModel, image, literal_epsilon: bool = False) -> float:
    """Face detection score: log-likelihood of ``image`` under the face space."""
    return fds_from_projection(model, project(model, image), literal_epsilon)


def sign_normalize(delta: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(delta)
    if nz.size and delta[nz[0]] < 0:
        return -delta
    return delta


def _difference_pairs(gallery: Mapping[str, Sequence[FaceImage]], rng: np.random.Generator):
    names = sorted(gallery)
    intra, cross_index = [], []
    flat = []
    for name in names:
        vecs = [img.vector() for img in gallery[name]]
        for a, b in itertools.combinations(range(len(vecs)), 2):
            intra.append(vecs[a] - vecs[b])
        flat.extend((name, v) for v in vecs)
    for i, j in itertools.combinations(range(len(flat)), 2):
        if flat[i][0] != flat[j][0]:
            cross_index.append((i, j))
    take = min(len(intra), len(cross_index))
    chosen = rng.choice(len(cross_index), size=take, replace=False) if take else []
    extra = [flat[cross_index[k][0]][1] - flat[cross_index[k][1]][1] for k in sorted(chosen)]
    return intra, extra


def train_dual(
    gallery: Mapping[str, Sequence[FaceImage]], m_intra: int, m_extra: int, seed: int = 0
) -> DualSpaceModel:
    """Intrapersonal / extrapersonal difference spaces.

    The intra space sees every same-identity pair; the extra space sees an
    equally large seeded sample of cross-identity pairs.  Zero differences
    (duplicate images) are dropped.
    """
    usable = {k: list(v) for k, v in gallery.items() if len(v) >= 2}
    if len(usable) < 2:
        raise EigenError("train_dual needs at least two identities with two or more images each")
    dims = next(iter(usable.values()))[0].shape
    for name, imgs in gallery.items():
        for img in imgs:
            if img.shape != dims:
                raise DimensionMismatch(f"image of {name!r} is {img.shape}, expected {dims}")

    intra, extra = _difference_pairs(gallery, np.random.default_rng(seed))
    intra = [sign_normalize(d) for d in intra if np.any(d)]
    extra = [sign_normalize(d) for d in extra if np.any(d)]
    if len(intra) < m_intra or len(extra) < m_extra:
        raise EigenError(
            f"insufficient difference pairs: {len(intra)} intra / {len(extra)} extra "
            f"for M_I={m_intra}, M_E={m_extra}"
        )
    return DualSpaceModel(
        train_vectors(np.stack(intra), m_intra, dims, center=False),
        train_vectors(np.stack(extra), m_extra, dims, center=False),
    )


def _space_cost(model: EigenModel, delta: np.ndarray) -> float:
    proj = project(model, delta)
    return float(np.sum(proj.coeffs**2 / model.eigenvalues)) + proj.residual**2 / (2.0 * model.rho)


def similarity_st(dual: DualSpaceModel, a, b) -> float:
    """Intra/extra likelihood contrast of the difference ``a - b``; larger = more alike."""
    delta = sign_normalize(_as_vector(a, dual.dims) - _as_vector(b, dual.dims))
    if not np.any(delta):
        return 0.0
    return -_space_cost(dual.intra, delta) + _space_cost(dual.extra, delta)


# -- serialization ----------------------------------------------------------

_MAGIC = b"CFEM"
_VERSION = 1
# magic, version, height, width, M, rho
_HEADER = struct.Struct("<4sIIIId")


def model_to_bytes(model: EigenModel) -> bytes:
    """Little-endian layout: header, then mean (d), eigenvalues (M), basis (M rows of d)."""
    h, w = model.dims
    head = _HEADER.pack(_MAGIC, _VERSION, h, w, model.n_components, model.rho)
    body = (
        model.mean.astype("<f8").tobytes()
        + model.eigenvalues.astype("<f8").tobytes()
        + np.ascontiguousarray(model.basis.T).astype("<f8").tobytes()
    )
    return head + body


def model_from_bytes(data: bytes) -> EigenModel:
    if len(data) < _HEADER.size:
        raise EigenError("model file truncated")
    magic, version, h, w, m, rho = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != _VERSION:
        raise EigenError("not an eigenmodel file")
    d = h * w
    need = _HEADER.size + 8 * (d + m + m * d)
    if len(data) != need:
        raise EigenError(f"model file has {len(data)} bytes, expected {need}")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    mean, lam, basis = flat[:d], flat[d : d + m], flat[d + m :].reshape(m, d).T
    return EigenModel(mean, basis, lam, rho, (h, w))


def save_model(path, model: EigenModel) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> EigenModel:
    return model_from_bytes(Path(path).read_bytes())
