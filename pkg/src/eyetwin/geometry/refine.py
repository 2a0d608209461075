"""Mesh refinement: midpoint subdivision and Taubin lambda/mu smoothing."""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np
from scipy import sparse

from .types import TriangleMesh

__all__ = ["midpoint_subdivide", "taubin_smooth"]


def midpoint_subdivide(m: TriangleMesh, iterations: int = 2) -> TriangleMesh:
    """Split each triangle into four via deduplicated edge midpoints.

    Original vertex positions are preserved; new vertices lie on the original
    surface (edge midpoints), so geometry is unchanged.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    verts = np.asarray(m.vertices)
    faces = np.asarray(m.faces)
    for _ in range(iterations):
        midpoint_index: Dict[Tuple[int, int], int] = {}
        new_verts = [verts]
        next_index = len(verts)

        def midpoint(i: int, j: int) -> int:
            nonlocal next_index
            key = (i, j) if i < j else (j, i)
            idx = midpoint_index.get(key)
            if idx is None:
                idx = next_index
                midpoint_index[key] = idx
                new_verts.append(0.5 * (verts[key[0]] + verts[key[1]]).reshape(1, 3))
                next_index += 1
            return idx

        new_faces = np.empty((4 * len(faces), 3), np.int64)
        for fi, (a, b, c) in enumerate(faces):
            ab = midpoint(int(a), int(b))
            bc = midpoint(int(b), int(c))
            ca = midpoint(int(c), int(a))
            new_faces[4 * fi : 4 * fi + 4] = [
                (a, ab, ca),
                (ab, b, bc),
                (ca, bc, c),
                (ab, bc, ca),
            ]
        verts = np.vstack(new_verts)
        faces = new_faces
    return TriangleMesh(verts, faces, laterality=m.laterality, frame=m.frame)


def _uniform_laplacian(m: TriangleMesh) -> sparse.csr_matrix:
    """L such that (L v)_i = mean of neighbours of i minus v_i."""
    n = m.n_vertices
    edges = np.vstack(
        [m.faces[:, [0, 1]], m.faces[:, [1, 2]], m.faces[:, [2, 0]]]
    )
    und = np.unique(np.sort(edges, axis=1), axis=0)
    i = np.concatenate([und[:, 0], und[:, 1]])
    j = np.concatenate([und[:, 1], und[:, 0]])
    adj = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    inv_deg = sparse.diags(1.0 / deg)
    return inv_deg @ adj - sparse.identity(n)


def taubin_smooth(
    m: TriangleMesh,
    iterations: int = 10,
    lam: float = 0.5,
    mu: float = -0.53,
) -> TriangleMesh:
    """Taubin smoothing: alternating positive/negative Laplacian steps.

    Requires ``lam > 0 > mu`` and ``|mu| > lam`` (the classic shrink-free
    configuration). Connectivity is unchanged.
    """
    if not (lam > 0 > mu and abs(mu) > lam):
        raise ValueError("require lam > 0 > mu and |mu| > lam")
    if iterations == 0 or m.is_empty:
        return m
    lap = _uniform_laplacian(m)
    v = np.array(m.vertices)
    for _ in range(iterations):
        v = v + lam * (lap @ v)
        v = v + mu * (lap @ v)
    return m.with_vertices(v)
