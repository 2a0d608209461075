"""PCA shape space over registered eye shapes: build, encode, decode, store."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .registration.pipeline import ShapeVector, shape_to_mesh
from .registration.rigid import LateralityError

# Eigenvalues below this fraction of the leading one are stored as exact
# zeros: they are rounding noise, not shape variance.
_ZERO_EIGENVALUE_RATIO = 1e-12

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class MorphableModel:
    """Linear shape space: mean shape plus orthonormal principal directions.

    ``components[i]`` is the i-th unit eigen-shape and ``eigenvalues[i]`` its
    shape variance. The dimension is always one less than the exemplar count;
    directions appended only to complete the space carry eigenvalue exactly
    zero.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    laterality: Optional[str]
    n_exemplars: int

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=float).ravel()
        comp = np.ascontiguousarray(self.components, dtype=float)
        eig = np.ascontiguousarray(self.eigenvalues, dtype=float).ravel()
        if comp.ndim != 2 or comp.shape[1] != mean.size:
            raise ValueError("components must be (d, len(mean))")
        if eig.size != comp.shape[0]:
            raise ValueError("one eigenvalue per component required")
        if eig.size != self.n_exemplars - 1:
            raise ValueError(
                f"dimension {eig.size} != exemplar count {self.n_exemplars} - 1"
            )
        if np.any(eig < 0) or np.any(np.diff(eig) > 0):
            raise ValueError("eigenvalues must be non-negative and descending")
        for a in (mean, comp, eig):
            if not np.all(np.isfinite(a)):
                raise ValueError("model contains non-finite values")
        gram = comp @ comp.T
        if np.max(np.abs(gram - np.eye(len(gram)))) > _ORTHO_TOL:
            raise ValueError("components are not orthonormal")
        for a in (mean, comp, eig):
            a.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comp)
        object.__setattr__(self, "eigenvalues", eig)

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def n_vertices(self) -> int:
        return self.mean.size // 3

    def mean_mesh(self, ref=None):
        return shape_to_mesh(self.mean, ref=ref, laterality=self.laterality)


@dataclass(frozen=True)
class OcularLatent:
    """PCA coefficients of one shape, in mm-scale model coordinates.

    ``residual`` is the norm of the part of the encoded shape outside the
    model span (zero for exemplars and anything decoded from the model).
    """

    alpha: np.ndarray
    laterality: Optional[str] = None
    residual: float = 0.0

    def __post_init__(self):
        a = np.ascontiguousarray(self.alpha, dtype=float).ravel()
        if not np.all(np.isfinite(a)):
            raise ValueError("latent contains non-finite values")
        a.flags.writeable = False
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "residual", float(self.residual))

    @property
    def dim(self) -> int:
        return int(self.alpha.size)


def _check_laterality(got: Optional[str], expected: Optional[str]):
    if got is not None and expected is not None and got != expected:
        raise LateralityError(f"laterality {got!r} does not match model {expected!r}")


def _shape_coords(shape) -> tuple[np.ndarray, Optional[str]]:
    if isinstance(shape, ShapeVector):
        return shape.coords, shape.laterality
    return np.ascontiguousarray(shape, dtype=float).ravel(), None


def _complete_basis(components: list, size: int, want: int) -> list:
    # Deterministic zero-variance completion: orthogonalize canonical unit
    # vectors against what we have and keep the ones that survive.
    for j in range(size):
        if len(components) == want:
            break
        v = np.zeros(size)
        v[j] = 1.0
        for u in components:
            v -= (u @ v) * u
        n = np.linalg.norm(v)
        if n > 1e-6:
            components.append(v / n)
    if len(components) != want:
        raise ValueError("could not complete an orthonormal basis")
    return components


def build_3dmm(shapes: Sequence, laterality: Optional[str] = None) -> MorphableModel:
    """Fit the PCA shape space to registered exemplars.

    Eigen-decomposes the m x m Gram matrix of centered exemplars (the vertex
    dimension is far larger than m, so the covariance itself is never
    formed) and keeps exactly m - 1 components, padding rank deficiencies
    with zero-variance directions.
    """
    if len(shapes) < 2:
        raise ValueError("need at least two exemplar shapes")
    coords, lats = zip(*(_shape_coords(s) for s in shapes))
    for lat in lats:
        _check_laterality(lat, laterality)
        if laterality is None:
            laterality = lat
    tagged = {lat for lat in lats if lat is not None}
    if len(tagged) > 1:
        raise LateralityError(f"mixed lateralities in exemplars: {sorted(tagged)}")
    size = coords[0].size
    if any(c.size != size for c in coords):
        raise ValueError("exemplar shapes differ in length")
    x = np.stack(coords)
    m = len(x)
    mean = x.mean(axis=0)
    centered = x - mean

    gram = centered @ centered.T
    w, v = np.linalg.eigh(gram)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    floor = max(w[0], 0.0) * _ZERO_EIGENVALUE_RATIO
    comps = []
    eigs = []
    for i in range(m - 1):
        if w[i] > floor:
            u = centered.T @ v[:, i]
            u /= np.linalg.norm(u)
            # Sign convention: the largest-magnitude entry points positive.
            u *= np.sign(u[np.argmax(np.abs(u))]) or 1.0
            comps.append(u)
            eigs.append(w[i] / (m - 1))
        else:
            eigs.append(0.0)
    comps = _complete_basis(comps, size, m - 1)
    return MorphableModel(
        mean=mean,
        components=np.stack(comps),
        eigenvalues=np.asarray(eigs),
        laterality=laterality,
        n_exemplars=m,
    )


def encode(shape, model: MorphableModel) -> OcularLatent:
    """Project a shape onto the model: alpha_i = s_i . (S - mean).

    Out-of-span shapes encode to their orthogonal projection; the rejected
    norm is reported on the latent.
    """
    coords, lat = _shape_coords(shape)
    _check_laterality(lat, model.laterality)
    if coords.size != model.mean.size:
        raise ValueError(f"shape length {coords.size} != model {model.mean.size}")
    x = coords - model.mean
    alpha = model.components @ x
    residual = float(np.linalg.norm(x - model.components.T @ alpha))
    return OcularLatent(alpha, laterality=model.laterality, residual=residual)


def decode(latent, model: MorphableModel) -> ShapeVector:
    """Linear reconstruction: mean + sum_i alpha_i s_i."""
    if isinstance(latent, OcularLatent):
        _check_laterality(latent.laterality, model.laterality)
        alpha = latent.alpha
    else:
        alpha = np.ascontiguousarray(latent, dtype=float).ravel()
    if alpha.size != model.dim:
        raise ValueError(f"latent length {alpha.size} != model dimension {model.dim}")
    coords = model.mean + model.components.T @ alpha
    return ShapeVector(coords, laterality=model.laterality)


def decode_mesh(latent, model: MorphableModel, ref=None):
    """Decode straight to a mesh on the reference connectivity."""
    return shape_to_mesh(decode(latent, model), ref=ref)


class ModelRegistry:
    """Laterality-keyed lookup of built models."""

    def __init__(self, models: Sequence[MorphableModel] = ()):
        self._models = {}
        for model in models:
            self.add(model)

    def add(self, model: MorphableModel):
        if model.laterality is None:
            raise LateralityError("registry models need a laterality tag")
        self._models[model.laterality] = model

    def get(self, laterality: str) -> MorphableModel:
        try:
            return self._models[laterality]
        except KeyError:
            raise LateralityError(f"no model registered for {laterality!r}") from None

    def lateralities(self) -> list:
        return sorted(self._models)


_MAGIC = "eyetwin-3dmm"


def save_3dmm(model: MorphableModel, path) -> Path:
    """Write a model as a one-line JSON header plus float64 LE blobs."""
    path = Path(path)
    header = {
        "format": _MAGIC,
        "version": 1,
        "n": model.n_vertices,
        "m": model.n_exemplars,
        "d": model.dim,
        "laterality": model.laterality,
        "eigenvalues": [float(e) for e in model.eigenvalues],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        f.write(model.mean.astype("<f8").tobytes())
        f.write(np.ascontiguousarray(model.components, dtype="<f8").tobytes())
    return path


def load_3dmm(path) -> MorphableModel:
    path = Path(path)
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("format") != _MAGIC:
            raise ValueError(f"{path} is not a shape-model file")
        size = 3 * header["n"]
        d = header["d"]
        blob = f.read()
    want = (size + d * size) * 8
    if len(blob) != want:
        raise ValueError(f"{path} truncated: {len(blob)} payload bytes, expected {want}")
    mean = np.frombuffer(blob[: size * 8], dtype="<f8")
    comps = np.frombuffer(blob[size * 8 :], dtype="<f8").reshape(d, size)
    return MorphableModel(
        mean=mean,
        components=comps,
        eigenvalues=np.asarray(header["eigenvalues"], dtype=float),
        laterality=header["laterality"],
        n_exemplars=header["m"],
    )
