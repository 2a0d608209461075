"""Corneal boundary ring extraction and landmark sampling."""

from __future__ import annotations

import numpy as np

from ..geometry.types import TriangleMesh


class RingNotFoundError(ValueError):
    """The cutting plane does not intersect the mesh."""


def cut_ring(m: TriangleMesh, z_plane: float) -> np.ndarray:
    """Intersection polyline of the mesh with the plane z = z_plane.

    Returns the crossing points ordered counter-clockwise by azimuth about
    their xy centroid, which is valid because corneal cross sections are
    star shaped about the optical axis. Each mesh edge crossing the plane
    contributes one point.
    """
    v = m.vertices
    f = m.faces
    edges = np.unique(
        np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1),
        axis=0,
    )
    za = v[edges[:, 0], 2] - z_plane
    zb = v[edges[:, 1], 2] - z_plane
    crossing = (za * zb) < 0.0
    if not crossing.any():
        raise RingNotFoundError(f"plane z={z_plane:g} does not cut the mesh")
    a = v[edges[crossing, 0]]
    b = v[edges[crossing, 1]]
    t = (za[crossing] / (za[crossing] - zb[crossing]))[:, None]
    pts = a + t * (b - a)
    center = pts[:, :2].mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0]))
    return pts[order]


def _resample_by_arc(ring: np.ndarray, start_azimuth: float, k: int) -> np.ndarray:
    """k points uniformly spaced by arc length, the first at start_azimuth."""
    closed = np.vstack([ring, ring[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0:
        raise RingNotFoundError("degenerate ring with zero length")

    az = np.arctan2(ring[:, 1], ring[:, 0])
    # arc position where the ring crosses the requested azimuth
    rel = np.mod(az - start_azimuth, 2.0 * np.pi)
    i0 = int(np.argmin(rel))
    prev = (i0 - 1) % len(ring)
    gap = np.mod(az[i0] - az[prev], 2.0 * np.pi)
    if gap > 1e-12 and rel[i0] > 1e-12:
        frac = 1.0 - rel[i0] / gap
        s0 = s[prev] + frac * seg[prev]
    else:
        s0 = s[i0]

    targets = np.mod(s0 + np.arange(k) * total / k, total)
    out = np.empty((k, 3))
    for d in range(3):
        out[:, d] = np.interp(targets, s, closed[:, d])
    return out


def sample_corneal_landmarks(ref, target: TriangleMesh, k: int | None = None):
    """Pair reference ring landmarks with points on the target's ring.

    The target ring is cut at the reference ring plane, then sampled
    uniformly by arc length starting at the azimuth of reference landmark 0
    so pairs are matched by azimuthal angle. Returns (ref_indices, points).
    """
    if k is None:
        k = len(ref.landmarks)
    ring = cut_ring(target, ref.ring_z)
    if len(ring) < 3:
        raise RingNotFoundError("ring cut produced fewer than 3 points")
    start = float(ref.landmark_azimuths()[0])
    pts = _resample_by_arc(ring, start, k)
    return ref.landmarks[:k].copy(), pts
