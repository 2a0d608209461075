"""Rigid pose canonicalization: sphere fits, axis/roll alignment, scaling, ICP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..geometry.measure import mesh_centroid, mesh_volume_signed
from ..geometry.types import TriangleMesh
from ..validation import check_points

# Fraction of the projected extent kept as the candidate anterior cap.
CAP_FRACTION = 0.10
_MIN_CAP_POINTS = 12
# Cap-finding fixed-point iteration: convergence cone (~0.5 deg) and budget.
_CAP_CONVERGED_DOT = 0.999962
_CAP_MAX_ITERS = 12


class DegenerateGeometryError(ValueError):
    """Geometry too flat, small, or collinear for a stable fit."""


class LateralityError(ValueError):
    """Mesh orientation contradicts its claimed laterality."""


@dataclass(frozen=True)
class RigidTransform:
    """Similarity transform p -> scale * R @ p + t (same order as TriangleMesh.transformed)."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if t.shape != (3,):
            raise ValueError("translation must have shape (3,)")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must be proper (det +1)")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.scale * (p @ self.rotation.T) + self.translation

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``inner`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ inner.rotation,
            self.scale * (inner.translation @ self.rotation.T) + self.translation,
            self.scale * inner.scale,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(self.translation @ self.rotation) / self.scale, 1.0 / self.scale)


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation matrix taking unit vector a onto unit vector b."""
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    c = float(a @ b)
    if c > 1.0 - 1e-12:
        return np.eye(3)
    if c < -1.0 + 1e-9:
        # 180 degrees: rotate about any axis orthogonal to a
        helper = np.array([1.0, 0.0, 0.0])
        if abs(a[0]) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        axis = np.cross(a, helper)
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    v = np.cross(a, b)
    k = np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])
    return np.eye(3) + k + k @ k / (1.0 + c)


def rotation_about_z(angle: float) -> np.ndarray:
    ca, sa = np.cos(angle), np.sin(angle)
    return np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])


def fit_sphere(points: np.ndarray):
    """Algebraic least-squares sphere fit.

    Returns (center, radius, rms) where rms is the RMS of radial residuals.
    Solves |p|^2 = 2 c.p + (r^2 - |c|^2) which is linear in (c, rho) and
    exact for noise-free spherical data.
    """
    p = check_points(points, min_points=4)
    a = np.concatenate([2.0 * p, np.ones((len(p), 1))], axis=1)
    b = np.einsum("ij,ij->i", p, p)
    sol, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < 4:
        raise DegenerateGeometryError("sphere fit is rank deficient (coplanar or degenerate points)")
    center = sol[:3]
    r2 = sol[3] + center @ center
    if r2 <= 0:
        raise DegenerateGeometryError("sphere fit produced a non-positive radius")
    radius = float(np.sqrt(r2))
    rms = float(np.sqrt(np.mean((np.linalg.norm(p - center, axis=1) - radius) ** 2)))
    return center, radius, rms


def _select_cap(verts: np.ndarray, origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
    proj = (verts - origin) @ direction
    cut = proj.max() - CAP_FRACTION * (proj.max() - proj.min())
    cap = verts[proj >= cut]
    if len(cap) < _MIN_CAP_POINTS:
        raise DegenerateGeometryError("anterior cap has too few vertices")
    return cap


def _sphere_probe_directions() -> np.ndarray:
    """Twelve icosahedron vertex directions: a uniform ~63 degree seed grid."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    raw = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            raw.extend([(0.0, a, b), (a, b, 0.0), (b, 0.0, a)])
    dirs = np.asarray(raw)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _short_side_score(verts: np.ndarray, d: np.ndarray) -> float:
    """Positive when the d end of the span is the short side of the max-girth
    plane. The anterior chamber is shallow, so along the optical axis the
    corneal end scores positive, the reversed axis scores the negation, and
    transverse directions sit near zero (their girth peak is mid-span)."""
    t = verts @ d
    hi, lo = float(t.max()), float(t.min())
    span = hi - lo
    if span < 1e-12:
        return 0.0
    q = verts - verts.mean(axis=0)
    radial = np.linalg.norm(q - (q @ d)[:, None] * d[None, :], axis=1)
    girth_band = radial >= 0.97 * radial.max()
    t_star = float(np.median(t[girth_band]))
    return (2.0 * t_star - hi - lo) / span


def _cap_fixed_points(verts: np.ndarray, g: np.ndarray):
    """Fixed points of the cap-fit iteration d -> unit(center(cap(d)) - g).

    Each converged direction marks a curvature basin (cornea, staphyloma,
    or a smooth pole). Starts that oscillate without converging (the flat
    flanks of an elongated globe) are dropped, unless nothing converges at
    all (a partial patch rather than a closed surface), in which case the
    last successful cap fits serve as the candidate pool. Seeds:
    icosahedron grid, principal axes both ways, farthest vertex both ways.
    """
    centered = verts - g
    norms = np.linalg.norm(centered, axis=1)
    scale = float(norms.max())
    if scale <= 0:
        raise DegenerateGeometryError("all points coincide with the centroid")
    _, axes = np.linalg.eigh(centered.T @ centered)
    far = centered[int(np.argmax(norms))] / scale
    seeds = list(_sphere_probe_directions())
    seeds += [s * axes[:, col] for col in range(3) for s in (1.0, -1.0)]
    seeds += [far, -far]
    converged_pool = []
    stalled_pool = []
    for seed in seeds:
        d = np.array(seed, dtype=float)
        d /= np.linalg.norm(d)
        last = None
        converged = False
        for _ in range(_CAP_MAX_ITERS):
            try:
                fit = fit_sphere(_select_cap(verts, g, d))
            except DegenerateGeometryError:
                break
            last = (d, fit)
            axis = fit[0] - g
            n = float(np.linalg.norm(axis))
            if n < 1e-9 * scale:
                converged = True  # center at the centroid: every cap of a ball
                break
            axis = axis / n
            if axis @ d > _CAP_CONVERGED_DOT:
                last = (axis, fit)
                converged = True
                break
            d = axis
        if last is None:
            continue
        (converged_pool if converged else stalled_pool).append(last)
    return converged_pool if converged_pool else stalled_pool


def _cornea_basin(points: np.ndarray):
    """Corneal cap search over a bare point cloud. Returns (center, radius, rms).

    Candidate caps are the curvature basins found by cap-fit fixed-point
    iteration from a seed grid; the cornea is the basin whose axis end is the
    short side of the max-girth plane (the anterior chamber is shallow, and
    outpouchings only ever deepen the posterior side). Sharpness deliberately
    plays no role: a steep staphyloma can out-curve the cornea.
    """
    verts = check_points(points, min_points=_MIN_CAP_POINTS)
    g = verts.mean(axis=0)
    candidates = _cap_fixed_points(verts, g)
    if not candidates:
        raise DegenerateGeometryError("no cap direction converged to a stable sphere fit")
    _, (center, radius, rms) = max(candidates, key=lambda cand: _short_side_score(verts, cand[0]))
    # Polish to the exact fixed point of the basin. The cap selection is
    # piecewise constant in the direction, so this settles in a few steps
    # and makes the result independent of which seed entered the basin.
    for _ in range(50):
        axis = center - g
        n = float(np.linalg.norm(axis))
        if n < 1e-12 * max(radius, 1.0):
            break
        try:
            new_center, radius, rms = fit_sphere(_select_cap(verts, g, axis / n))
        except DegenerateGeometryError:
            break  # partial patch: the winning fit is already the answer
        shift = float(np.linalg.norm(new_center - center))
        center = new_center
        if shift < 1e-12 * max(radius, 1.0):
            break
    return center, radius, rms


def fit_cornea_sphere(m: TriangleMesh):
    """Locate the corneal cap of a globe mesh and fit its sphere.

    Returns (center, radius, rms) from an unconstrained least-squares fit of
    the winning cap, which recovers exact spherical data exactly.
    """
    return _cornea_basin(m.vertices)


def _roll_angle(points: np.ndarray, laterality: str, diameter: float) -> float:
    """Deterministic roll about z from posterior asymmetry.

    Priority: first circular moment of the posterior vertex cloud (points at
    an outpouching, mapped to azimuth 0 for OD and pi for OS so mirrored
    eyes stay mirror images), then the equatorial ellipse major axis
    (mod pi), else no roll.
    """
    z = points[:, 2]
    post = points[(z > 0.5 * (z.min() + z.max()))]
    if len(post) < 8:
        return 0.0
    xy = post[:, :2]
    m1 = xy.mean(axis=0)
    target = 0.0 if laterality != "OS" else np.pi
    if np.linalg.norm(m1) > 1e-3 * diameter:
        return target - float(np.arctan2(m1[1], m1[0]))
    c = xy - m1
    cov = c.T @ c / len(c)
    evals, evecs = np.linalg.eigh(cov)
    lam_minor, lam_major = float(evals[0]), float(evals[1])
    if lam_major - lam_minor > 1e-4 * lam_major and lam_major > 0:
        major = evecs[:, 1]
        theta = float(np.arctan2(major[1], major[0])) % np.pi
        return -theta
    return 0.0


def align_orientation(m: TriangleMesh, ref) -> tuple[TriangleMesh, RigidTransform]:
    """Rotate the eye into canonical pose: cornea toward -z, roll fixed,
    corneal-sphere center translated onto the reference corneal center.

    The mesh must be outward oriented; a mirror flip of the coordinates
    without reordering faces inverts the signed volume and is rejected as a
    laterality mismatch.
    """
    if mesh_volume_signed(m) < 0:
        raise LateralityError(
            "mesh orientation is inverted: mirrored coordinates or wrong laterality tag"
        )
    center, _, _ = fit_cornea_sphere(m)
    g = mesh_centroid(m)
    axis = center - g
    n = np.linalg.norm(axis)
    if n < 1e-9:
        raise DegenerateGeometryError("corneal center coincides with the volume centroid")
    r1 = rotation_between(axis / n, np.array([0.0, 0.0, -1.0]))
    pts1 = (m.vertices - center) @ r1.T
    ext = pts1.max(axis=0) - pts1.min(axis=0)
    roll = _roll_angle(pts1, m.laterality or "OD", float(ext.max()))
    rot = rotation_about_z(roll) @ r1
    trans = np.asarray(ref.corneal_center, float) - rot @ center
    aligned = m.transformed(rotation=rot, translation=trans).tagged(frame="aligned")
    return aligned, RigidTransform(rot, trans)


def scale_transverse(m: TriangleMesh, ref) -> tuple[TriangleMesh, float]:
    """Uniform scale about the reference corneal center so the x-extent
    (transverse diameter) matches the reference. Returns (mesh, scale)."""
    src_ext = float(m.vertices[:, 0].max() - m.vertices[:, 0].min())
    ref_ext = float(ref.mesh.vertices[:, 0].max() - ref.mesh.vertices[:, 0].min())
    if src_ext < 1e-12:
        raise DegenerateGeometryError("source mesh has zero transverse extent")
    s = ref_ext / src_ext
    f = np.asarray(ref.corneal_center, float)
    scaled = m.transformed(scale=s, translation=(1.0 - s) * f)
    return scaled, s


def kabsch(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping paired source points onto target."""
    src = check_points(source, min_points=3)
    tgt = check_points(target, min_points=3)
    if src.shape != tgt.shape:
        raise ValueError("kabsch requires equal-shape paired point sets")
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    h = (src - mu_s).T @ (tgt - mu_t)
    u, sv, vt = np.linalg.svd(h)
    if sv[1] < 1e-12 * max(sv[0], 1e-300):
        raise DegenerateGeometryError("paired points are collinear; rotation is not determined")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, mu_t - r @ mu_s)


def _icp_run(
    src: np.ndarray,
    tree: cKDTree,
    tgt: np.ndarray,
    init: RigidTransform,
    max_iters: int,
    tol: float,
):
    current = init.apply(src)
    transform = init
    prev_obj = np.inf
    # roundoff floor: at exact recovery the objective dithers in the last
    # ulps of the coordinate magnitude, which is not a real increase
    floor = 64.0 * np.finfo(float).eps * float(np.abs(tgt).max())
    history = []
    for it in range(max_iters):
        dists, idx = tree.query(current, workers=-1)
        obj = float(np.sqrt(np.mean(dists**2)))
        history.append(obj)
        assert obj <= prev_obj * (1.0 + 1e-9) + floor, (
            f"ICP objective increased at iteration {it}: {prev_obj:.3e} -> {obj:.3e}"
        )
        if obj <= floor or prev_obj - obj <= tol * max(obj, 1e-30):
            prev_obj = obj
            break
        prev_obj = obj
        step = kabsch(current, tgt[idx])
        current = step.apply(current)
        transform = step.compose(transform)
    return transform, prev_obj, history


def _principal_axis(points: np.ndarray) -> np.ndarray:
    c = points - points.mean(axis=0)
    _, vecs = np.linalg.eigh(c.T @ c)
    return vecs[:, -1]


def _axis_rotation(u: np.ndarray, angle: float) -> np.ndarray:
    ca, sa = np.cos(angle), np.sin(angle)
    kx = np.array([
        [0.0, -u[2], u[1]],
        [u[2], 0.0, -u[0]],
        [-u[1], u[0], 0.0],
    ])
    return np.eye(3) + sa * kx + (1.0 - ca) * (kx @ kx)


def _roll_starts(
    sample: np.ndarray,
    mu_s: np.ndarray,
    mu_t: np.ndarray,
    r_axis: np.ndarray,
    u: np.ndarray,
    tree: cKDTree,
    roll_grid: int,
    top_k: int,
) -> list:
    """Given an axis-aligning rotation, return composed starts for the
    ``top_k`` best-scoring well-separated rolls about u.

    Keeping several rolls matters: a lattice-symmetric cloud (an eye meshed
    over a subdivided icosahedron maps nearly onto itself every 72 degrees)
    has several deep roll minima whose sampled scores can cross; only the
    refined objective separates them reliably, so all of them get refined.
    """
    base = sample @ r_axis.T

    def score(angle: float) -> float:
        probe = base @ _axis_rotation(u, angle).T + mu_t
        d, _ = tree.query(probe, workers=-1)
        return float(np.sqrt(np.mean(d**2)))

    step = 2.0 * np.pi / roll_grid
    scored = sorted((score(k * step), k * step) for k in range(roll_grid))
    min_gap = 3.0 * step
    kept = []
    for _, angle in scored:
        gap = min(
            (abs((angle - a + np.pi) % (2.0 * np.pi) - np.pi) for a in kept),
            default=np.inf,
        )
        if gap > min_gap:
            kept.append(angle)
        if len(kept) == top_k:
            break
    # Center each candidate in its basin before refinement: the coarse grid
    # can sample a basin on its steep flank, and refinement from a flank
    # creeps tangentially instead of descending.
    fine = step / 10.0
    centered = [
        min((score(a + j * fine), a + j * fine) for j in range(-5, 6))[1]
        for a in kept
    ]
    return [
        RigidTransform(r, mu_t - r @ mu_s)
        for angle in centered
        for r in [_axis_rotation(u, angle) @ r_axis]
    ]


def _icp_starts(
    src: np.ndarray, tgt: np.ndarray, tree: cKDTree, roll_grid: int = 180, top_k: int = 5
) -> list:
    """Deterministic warm starts for shell-like clouds.

    Plain ICP stalls on nearly spherical shells because nearest-neighbor
    correspondences are tangential, leaving a narrow basin around the true
    pose. Candidates align the source principal axis to the target's (both
    signs), and, when both clouds expose a corneal basin, align those signed
    axes too; each candidate keeps the best-scoring separated rolls about
    its axis for refinement.
    """
    starts = [RigidTransform.identity()]
    mu_s, mu_t = src.mean(axis=0), tgt.mean(axis=0)
    axis_s = _principal_axis(src)
    axis_t = _principal_axis(tgt)
    sample = src[:: max(1, len(src) // 256)] - mu_s
    for sign in (1.0, -1.0):
        u = sign * axis_t
        starts += _roll_starts(sample, mu_s, mu_t, rotation_between(axis_s, u), u, tree, roll_grid, top_k)
    try:
        ax_s = _cornea_basin(src)[0] - mu_s
        ax_t = _cornea_basin(tgt)[0] - mu_t
        n_s, n_t = np.linalg.norm(ax_s), np.linalg.norm(ax_t)
        if n_s > 1e-12 and n_t > 1e-12:
            u = ax_t / n_t
            starts += _roll_starts(sample, mu_s, mu_t, rotation_between(ax_s / n_s, u), u, tree, roll_grid, top_k)
    except DegenerateGeometryError:
        pass  # featureless clouds: principal-axis starts still stand
    return starts


def rigid_icp(
    source: np.ndarray,
    target: np.ndarray,
    max_iters: int = 150,
    tol: float = 1e-9,
    warm_iters: int = 20,
    starts: str = "multi",
) -> tuple[RigidTransform, dict]:
    """Iterative closest point: rigid transform taking source onto target.

    Correspondences are nearest target points; each step solves the paired
    problem in closed form, so the RMS objective cannot increase within a
    run (asserted every iteration). With starts="multi" a deterministic set
    of warm starts is refined briefly and the best is polished, which
    recovers large unknown rotations. With starts="identity" only the
    as-given pose is refined: the right choice when the pose is already
    trusted and the target is so symmetric that distant rotations can score
    better than the true one. Returns (transform, report).
    """
    src = check_points(source, min_points=3)
    tgt = check_points(target, min_points=3)
    if starts not in ("multi", "identity"):
        raise ValueError("starts must be 'multi' or 'identity'")
    tree = cKDTree(tgt)
    init = RigidTransform.identity()
    if starts == "multi":
        best = None
        for cand in _icp_starts(src, tgt, tree):
            transform, obj, _ = _icp_run(src, tree, tgt, cand, warm_iters, tol)
            if best is None or obj < best[1]:
                best = (transform, obj)
        init = best[0]
    transform, obj, history = _icp_run(src, tree, tgt, init, max_iters, tol)
    return transform, {"iterations": len(history), "rms": obj, "history": history}
