"""Frozen reference eye template shared by every registration.

The template is a unit sphere with a corneal bulge at the -z pole, meshed
over a Fibonacci point set plus an exact 50-point corneal boundary ring so
landmark vertices lie on the ring by construction. The build is fully
deterministic; the shipped asset files are the versioned source of truth
and a test pins the generator output to them byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

from ..geometry import euler_characteristic, is_watertight, load_mesh_ply, save_mesh_ply
from ..geometry.types import TriangleMesh

REFERENCE_VERTEX_COUNT = 1448
LANDMARK_COUNT = 50
REFERENCE_VERSION = "v1"

# Template radial profile: unit globe plus Gaussian corneal bulge at -z.
_BULGE_AMP = 2.0 / 15.0
_BULGE_WIDTH_RAD = 0.45
# Corneal boundary ring sits at this polar angle from the anterior pole.
RING_POLAR_RAD = 0.675

_FIB_POOL = 1500
_RING_CLEARANCE_RAD = 0.035


@dataclass(frozen=True)
class ReferenceMesh:
    mesh: TriangleMesh
    landmarks: np.ndarray  # (50,) vertex indices on the corneal boundary ring
    posterior: np.ndarray  # vertex indices of the posterior half (z > 0)
    corneal_center: np.ndarray
    corneal_radius: float
    ring_z: float
    version: str = REFERENCE_VERSION

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    def landmark_azimuths(self) -> np.ndarray:
        p = self.mesh.vertices[self.landmarks]
        return np.arctan2(p[:, 1], p[:, 0])


def _template_radius(polar_from_anterior: np.ndarray) -> np.ndarray:
    return 1.0 + _BULGE_AMP * np.exp(-(polar_from_anterior**2) / (2.0 * _BULGE_WIDTH_RAD**2))


def _fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n, dtype=float)
    z = 1.0 - 2.0 * (i + 0.5) / n
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    phi = 2.0 * np.pi * i / golden**2
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def build_reference() -> ReferenceMesh:
    """Deterministically construct the template mesh and index sets."""
    k = LANDMARK_COUNT
    az = 2.0 * np.pi * np.arange(k) / k
    sp, cp = np.sin(RING_POLAR_RAD), np.cos(RING_POLAR_RAD)
    ring = np.column_stack([sp * np.cos(az), sp * np.sin(az), -cp * np.ones(k)])

    fib = _fibonacci_directions(_FIB_POOL)
    polar = np.arccos(np.clip(-fib[:, 2], -1.0, 1.0))  # angle from -z pole
    keep = np.abs(polar - RING_POLAR_RAD) >= _RING_CLEARANCE_RAD
    pool = fib[keep]
    want = REFERENCE_VERTEX_COUNT - k
    if len(pool) < want:
        raise RuntimeError("fibonacci pool too small after ring clearance")
    sel = np.round(np.linspace(0, len(pool) - 1, want)).astype(int)
    dirs = np.vstack([ring, pool[sel]])
    assert dirs.shape == (REFERENCE_VERTEX_COUNT, 3)

    hull = ConvexHull(dirs)
    faces = hull.simplices.copy()
    # hull simplex winding is not guaranteed consistent; orient outward
    a, b, c = dirs[faces[:, 0]], dirs[faces[:, 1]], dirs[faces[:, 2]]
    outward = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) > 0
    faces[~outward] = faces[~outward][:, ::-1]

    psi = np.arccos(np.clip(-dirs[:, 2], -1.0, 1.0))
    verts = dirs * _template_radius(psi)[:, None]
    mesh = TriangleMesh(verts, faces, frame="canonical")
    if not is_watertight(mesh) or euler_characteristic(mesh) != 2:
        raise RuntimeError("template triangulation is not a closed genus-0 surface")
    if len(np.unique(faces)) != REFERENCE_VERTEX_COUNT:
        raise RuntimeError("template triangulation dropped vertices")

    # The bulge axis is -z by construction, so fit the corneal sphere along
    # it directly instead of going through the anatomy-driven cap search
    # (the template is a ball, not a globe with a shallow anterior chamber).
    from .rigid import _select_cap, fit_sphere  # local import avoids a cycle

    center, radius, _ = fit_sphere(_select_cap(verts, np.zeros(3), np.array([0.0, 0.0, -1.0])))
    return ReferenceMesh(
        mesh=mesh,
        landmarks=np.arange(k),
        posterior=np.flatnonzero(verts[:, 2] > 0.0),
        corneal_center=center,
        corneal_radius=radius,
        ring_z=float(verts[:k, 2].mean()),
    )


def _asset_dir() -> Path:
    return Path(str(resources.files("eyetwin") / "assets"))


def save_reference(ref: ReferenceMesh, directory) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ply = directory / f"reference_{ref.version}.ply"
    sidecar = directory / f"reference_{ref.version}.json"
    save_mesh_ply(ref.mesh, ply)
    meta = {
        "version": ref.version,
        "landmarks": ref.landmarks.tolist(),
        "posterior": ref.posterior.tolist(),
        "corneal_center": ref.corneal_center.tolist(),
        "corneal_radius": ref.corneal_radius,
        "ring_z": ref.ring_z,
    }
    sidecar.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return ply, sidecar


def load_reference(directory, version: str = REFERENCE_VERSION) -> ReferenceMesh:
    directory = Path(directory)
    mesh = load_mesh_ply(directory / f"reference_{version}.ply").tagged(frame="canonical")
    meta = json.loads((directory / f"reference_{version}.json").read_text())
    if meta["version"] != version:
        raise ValueError(f"sidecar version {meta['version']!r} does not match {version!r}")
    return ReferenceMesh(
        mesh=mesh,
        landmarks=np.asarray(meta["landmarks"], dtype=int),
        posterior=np.asarray(meta["posterior"], dtype=int),
        corneal_center=np.asarray(meta["corneal_center"], dtype=float),
        corneal_radius=float(meta["corneal_radius"]),
        ring_z=float(meta["ring_z"]),
        version=version,
    )


@lru_cache(maxsize=1)
def get_reference() -> ReferenceMesh:
    """The shipped template asset (cached)."""
    return load_reference(_asset_dir())
