"""Shared test fixtures: analytic meshes and brute-force distance oracles.

The oracles here deliberately avoid KD-trees and the package's own pruning
logic so they can act as independent references.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from eyetwin.cohort import icosphere
from eyetwin.geometry.types import TriangleMesh


def ellipsoid_mesh(rx: float, ry: float, rz: float, subdivisions: int = 3,
                   frame: str = "canonical", center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Watertight ellipsoid with vertices exactly on the analytic surface."""
    base = icosphere(subdivisions)
    v = base.vertices * np.array([rx, ry, rz]) + np.asarray(center, float)
    return TriangleMesh(v, base.faces, frame=frame)


def sphere_mesh(radius: float = 12.0, subdivisions: int = 3,
                frame: str = "canonical") -> TriangleMesh:
    return ellipsoid_mesh(radius, radius, radius, subdivisions, frame=frame)


def brute_chamfer(p1, p2) -> float:
    d = cdist(np.asarray(p1, float), np.asarray(p2, float))
    return float((d.min(axis=1) ** 2).mean() + (d.min(axis=0) ** 2).mean())


def brute_one_sided(p1, p2) -> float:
    d = cdist(np.asarray(p1, float), np.asarray(p2, float))
    return float(d.min(axis=1).max())


def brute_hausdorff(p1, p2) -> float:
    return max(brute_one_sided(p1, p2), brute_one_sided(p2, p1))


def random_cloud(rng: np.random.Generator, n: int, scale: float = 10.0) -> np.ndarray:
    return rng.normal(0.0, scale, size=(n, 3))
