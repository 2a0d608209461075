"""End-to-end registration: pose, scale, deformation, standardization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..base import ParamsMixin
from ..geometry.types import TriangleMesh
from ..metrics import closest_on_surface
from ..validation import check_is_fitted
from .landmarks import sample_corneal_landmarks
from .nonrigid import DEFAULT_STIFFNESS, NicpSystem, nonrigid_icp
from .reference import ReferenceMesh, get_reference
from .rigid import align_orientation, rigid_icp, scale_transverse


class QualityError(RuntimeError):
    """Too many standardized vertices project far from the target surface."""


@dataclass(frozen=True)
class ShapeVector:
    """Standardized eye shape: reference-topology vertices in true mm,
    flattened to a fixed-length vector in canonical pose."""

    coords: np.ndarray
    laterality: Optional[str] = None
    source_id: Optional[str] = None

    def __post_init__(self):
        c = np.ascontiguousarray(self.coords, dtype=float).ravel()
        if c.size % 3 != 0:
            raise ValueError("shape vector length must be a multiple of 3")
        if not np.all(np.isfinite(c)):
            raise ValueError("shape vector contains non-finite values")
        c.flags.writeable = False
        object.__setattr__(self, "coords", c)

    @property
    def n_vertices(self) -> int:
        return self.coords.size // 3

    def as_matrix(self) -> np.ndarray:
        return self.coords.reshape(-1, 3)


def shape_to_mesh(shape, ref: Optional[ReferenceMesh] = None, laterality=None) -> TriangleMesh:
    """Rebuild a mesh from a shape vector using the reference connectivity."""
    if ref is None:
        ref = get_reference()
    if isinstance(shape, ShapeVector):
        coords = shape.as_matrix()
        laterality = laterality or shape.laterality
    else:
        coords = np.asarray(shape, dtype=float).reshape(-1, 3)
    if len(coords) != ref.n_vertices:
        raise ValueError(
            f"shape has {len(coords)} vertices, reference has {ref.n_vertices}"
        )
    return TriangleMesh(coords, ref.mesh.faces, laterality=laterality, frame="canonical")


_SHAPES_MAGIC = "eyetwin-shapes"


def save_shapes(path, shapes: Sequence[ShapeVector]) -> Path:
    """Shape matrix file: one-line JSON header + float64 coordinate rows.

    Written row-major little-endian so reruns are byte-identical (a zip
    container would embed timestamps).
    """
    shapes = list(shapes)
    if not shapes:
        raise ValueError("no shapes to save")
    n = shapes[0].coords.size
    if any(s.coords.size != n for s in shapes):
        raise ValueError("all shape vectors must have the same length")
    header = {
        "format": _SHAPES_MAGIC,
        "version": 1,
        "count": len(shapes),
        "length": n,
        "source_ids": [s.source_id for s in shapes],
        "lateralities": [s.laterality for s in shapes],
    }
    path = Path(path)
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        for s in shapes:
            f.write(np.asarray(s.coords, dtype="<f8").tobytes())
    return path


def load_shapes(path) -> list:
    path = Path(path)
    with open(path, "rb") as f:
        try:
            header = json.loads(f.readline().decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: unreadable header ({exc})") from None
        if header.get("format") != _SHAPES_MAGIC:
            raise ValueError(f"{path} is not a shape matrix file")
        blob = f.read()
    count, n = header["count"], header["length"]
    if len(blob) != count * n * 8:
        raise ValueError(f"{path}: expected {count * n * 8} payload bytes, got {len(blob)}")
    rows = np.frombuffer(blob, dtype="<f8").reshape(count, n)
    return [
        ShapeVector(rows[i], laterality=header["lateralities"][i],
                    source_id=header["source_ids"][i])
        for i in range(count)
    ]


@dataclass(frozen=True)
class RegistrationResult:
    shape: ShapeVector
    report: dict


class EyeRegistration(ParamsMixin):
    """Registers watertight eye meshes onto the reference topology.

    fit() loads the reference template and prefactors the deformation
    solver; transform() maps meshes to rows of a shape matrix. The solver
    factorization is shared across subjects, which keeps cohort-scale
    registration fast.
    """

    def __init__(
        self,
        stiffness_schedule=DEFAULT_STIFFNESS,
        landmark_weight: float = 10.0,
        posterior_weight: float = 4.0,
        inner_iters: int = 10,
        icp_max_iters: int = 8,
        projection_limit_mm: float = 1.0,
        max_bad_fraction: float = 0.05,
    ):
        self.stiffness_schedule = stiffness_schedule
        self.landmark_weight = landmark_weight
        self.posterior_weight = posterior_weight
        self.inner_iters = inner_iters
        self.icp_max_iters = icp_max_iters
        self.projection_limit_mm = projection_limit_mm
        self.max_bad_fraction = max_bad_fraction

    def fit(self, X=None, y=None):
        ref = get_reference()
        self.reference_ = ref
        self.system_ = NicpSystem(
            ref.mesh,
            posterior_idx=ref.posterior,
            landmark_idx=ref.landmarks,
            posterior_weight=self.posterior_weight,
            landmark_weight=self.landmark_weight,
        )
        return self

    def register(self, m: TriangleMesh, source_id: Optional[str] = None) -> RegistrationResult:
        check_is_fitted(self, "reference_")
        ref = self.reference_
        aligned, t1 = align_orientation(m, ref)
        scaled, s = scale_transverse(aligned, ref)
        # Identity start: orientation is already trusted here, and the
        # near-spherical template rewards distant rotations under the bare
        # nearest-neighbor objective, so exploring them would untilt the
        # anatomical frame. This pass just settles translation.
        t2, icp_report = rigid_icp(
            scaled.vertices, ref.mesh.vertices, max_iters=self.icp_max_iters,
            starts="identity",
        )
        posed = scaled.transformed(rotation=t2.rotation, translation=t2.translation)

        lm_idx, lm_pts = sample_corneal_landmarks(ref, posed)
        deformed, nicp_report = nonrigid_icp(
            ref.mesh,
            posed,
            landmarks=(lm_idx, lm_pts),
            stiffness_schedule=self.stiffness_schedule,
            inner_iters=self.inner_iters,
            system=self.system_,
        )

        projected, dists = closest_on_surface(deformed.vertices, posed)
        # thresholds are stated in true mm; the working frame is unit scale
        limit = self.projection_limit_mm * s
        bad = float(np.mean(dists > limit))
        if bad > self.max_bad_fraction:
            raise QualityError(
                f"{bad:.1%} of vertices project farther than "
                f"{self.projection_limit_mm} mm from the target surface"
            )

        f = np.asarray(ref.corneal_center, float)
        coords_mm = f + (projected - f) / s
        shape = ShapeVector(coords_mm.ravel(), laterality=m.laterality, source_id=source_id)
        report = {
            "scale": s,
            "align": t1,
            "settle": t2,
            "icp": icp_report,
            "nicp": nicp_report,
            "projection_rms_mm": float(np.sqrt(np.mean(dists**2))) / s,
            "bad_fraction": bad,
        }
        return RegistrationResult(shape, report)

    def transform(self, meshes) -> np.ndarray:
        if isinstance(meshes, TriangleMesh):
            meshes = [meshes]
        rows = [self.register(m).shape.coords for m in meshes]
        return np.stack(rows)

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit().transform(X)
