"""Mesh measurements: volume, centroid, watertightness and Euler number."""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from .types import TriangleMesh

__all__ = [
    "edge_face_incidence",
    "euler_characteristic",
    "is_watertight",
    "mesh_centroid",
    "mesh_volume",
    "mesh_volume_signed",
]


def edge_face_incidence(m: TriangleMesh) -> Dict[Tuple[int, int], int]:
    """Count of incident faces per undirected edge."""
    counts: Dict[Tuple[int, int], int] = {}
    for tri in m.faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(a), int(b)) if a < b else (int(b), int(a))
            counts[key] = counts.get(key, 0) + 1
    return counts


def is_watertight(m: TriangleMesh) -> bool:
    """Every edge shared by exactly two faces."""
    if m.is_empty:
        return False
    return all(c == 2 for c in edge_face_incidence(m).values())


def euler_characteristic(m: TriangleMesh) -> int:
    used = np.unique(m.faces)
    v = len(used)
    e = len(edge_face_incidence(m))
    f = m.n_faces
    return v - e + f


def mesh_volume_signed(m: TriangleMesh) -> float:
    """Signed divergence-theorem volume (positive for outward orientation)."""
    a = m.vertices[m.faces[:, 0]]
    b = m.vertices[m.faces[:, 1]]
    c = m.vertices[m.faces[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def mesh_volume(m: TriangleMesh) -> float:
    """Enclosed volume in mm^3 of a closed oriented mesh."""
    if not is_watertight(m):
        raise ValueError("mesh_volume requires a watertight mesh")
    return abs(mesh_volume_signed(m))


def mesh_centroid(m: TriangleMesh) -> np.ndarray:
    """Centroid of the enclosed volume (not the vertex mean)."""
    if not is_watertight(m):
        raise ValueError("mesh_centroid requires a watertight mesh")
    a = m.vertices[m.faces[:, 0]]
    b = m.vertices[m.faces[:, 1]]
    c = m.vertices[m.faces[:, 2]]
    signed = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
    total = signed.sum()
    if abs(total) < 1e-12:
        raise ValueError("degenerate mesh: zero enclosed volume")
    # tetra (origin, a, b, c) centroid is (a+b+c)/4
    weighted = (signed[:, None] * (a + b + c) / 4.0).sum(axis=0)
    return weighted / total
