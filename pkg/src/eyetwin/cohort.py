"""Synthetic eye-globe cohort: parametric ground-truth meshes, metadata with
realistic AL/SE/asphericity coupling, voxelizations and slice proposals.

Eyes are star-shaped radial surfaces on an icosphere tessellation: an
ellipsoidal globe (separate anterior and posterior semi-axes), a Gaussian
corneal bulge on the anterior pole and an optional Gaussian staphyloma
outpouching on the posterior wall. Pole contributions of both bumps are
folded back into the semi-axes so the axial extent equals AL exactly and the
measured asphericity tracks Q_target.

Everything here is a pure function of parameters; all randomness lives in
the cohort sampler.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Optional

import numpy as np

from .conditioning import EyeRecord, StubEmbeddingProvider, write_records, read_records
from .geometry.types import MaskProposal, TriangleMesh, VoxelGrid, PLANES
from .geometry.measure import is_watertight, mesh_volume_signed
from .geometry.refine import midpoint_subdivide
from .geometry.io import save_mesh_ply, load_mesh_ply, save_voxel_grid

__all__ = [
    "CohortConfig",
    "EyeParams",
    "icosphere",
    "load_dataset",
    "make_cohort",
    "make_eye",
    "make_proposals",
    "voxelize",
    "write_dataset",
]

# anterior-segment constants shared by every synthetic eye
CORNEAL_AMP_MM = 1.6
CORNEAL_WIDTH_RAD = 0.45
POSTERIOR_FRACTION = 0.52


@dataclass(frozen=True)
class EyeParams:
    """Generator parameters for one synthetic eye."""

    case_id: str
    laterality: str
    al_mm: float
    se_d: float
    va: float
    q_target: float
    stretch: float
    staph_class: int
    staph_amp_mm: float
    staph_width_rad: float
    staph_polar_rad: float
    staph_azimuth_rad: float
    seed: int

    def __post_init__(self):
        if not 22.0 <= self.al_mm <= 34.0:
            raise ValueError(f"AL {self.al_mm} outside [22, 34] mm")
        if self.q_target <= -1.0:
            raise ValueError("q_target must exceed -1")
        if self.staph_class not in (0, 1, 2):
            raise ValueError("staphyloma class must be 0, 1 or 2")
        if self.staph_amp_mm < 0:
            raise ValueError("staphyloma amplitude must be >= 0")
        if self.staph_class == 0 and self.staph_amp_mm != 0.0:
            raise ValueError("class 0 requires zero staphyloma amplitude")
        if self.staph_width_rad <= 0:
            raise ValueError("staphyloma width must be positive")


_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


def _icosahedron() -> TriangleMesh:
    p = _GOLDEN
    verts = np.array(
        [
            (-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0),
            (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
            (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1),
        ],
        np.float64,
    )
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        np.int64,
    )
    verts /= np.linalg.norm(verts[0])
    # rotate vertex 4 onto +z so the tessellation has exact pole vertices
    a = verts[4]
    axis = np.cross(a, [0.0, 0.0, 1.0])
    axis /= np.linalg.norm(axis)
    angle = np.arccos(np.clip(a[2], -1.0, 1.0))
    k = np.array(
        [
            [0, -axis[2], axis[1]],
            [axis[2], 0, -axis[0]],
            [-axis[1], axis[0], 0],
        ]
    )
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    verts = verts @ rot.T
    mesh = TriangleMesh(verts, faces)
    if mesh_volume_signed(mesh) < 0:
        mesh = TriangleMesh(verts, faces[:, ::-1])
    return mesh


def icosphere(subdivisions: int = 4) -> TriangleMesh:
    """Unit sphere tessellation with vertices exactly on both z poles."""
    m = _icosahedron()
    for _ in range(subdivisions):
        m = midpoint_subdivide(m, 1)
        v = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
        m = TriangleMesh(v, m.faces)
    return m


def _radial_profile(dirs: np.ndarray, p: EyeParams) -> np.ndarray:
    """Surface radius along each unit direction (canonical pose, +z posterior)."""
    ux, uy, uz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    polar, width, amp = p.staph_polar_rad, p.staph_width_rad, p.staph_amp_mm
    bump_dir = np.array(
        [
            np.sin(polar) * np.cos(p.staph_azimuth_rad),
            np.sin(polar) * np.sin(p.staph_azimuth_rad),
            np.cos(polar),
        ]
    )
    # fold the corneal bump's pole contributions back into the semi-axes;
    # the staphyloma stays a genuine outpouching (make_eye rescales to AL)
    pole_post = CORNEAL_AMP_MM * np.exp(-(np.pi**2) / (2 * CORNEAL_WIDTH_RAD**2))
    rz_target = POSTERIOR_FRACTION * p.al_mm
    cz_post = rz_target - pole_post
    cz_ant = (1.0 - POSTERIOR_FRACTION) * p.al_mm - CORNEAL_AMP_MM
    if cz_post <= 0 or cz_ant <= 0:
        raise ValueError("bump amplitudes exceed the globe semi-axes")
    rx = rz_target * np.sqrt(1.0 + p.q_target)
    ry = rx * p.stretch

    cz = np.where(uz >= 0, cz_post, cz_ant)
    r_ell = 1.0 / np.sqrt((ux / rx) ** 2 + (uy / ry) ** 2 + (uz / cz) ** 2)
    psi_cornea = np.arccos(np.clip(-uz, -1.0, 1.0))
    r_cornea = CORNEAL_AMP_MM * np.exp(-(psi_cornea**2) / (2 * CORNEAL_WIDTH_RAD**2))
    psi_staph = np.arccos(np.clip(dirs @ bump_dir, -1.0, 1.0))
    r_staph = amp * np.exp(-(psi_staph**2) / (2 * width**2))
    return r_ell + r_cornea + r_staph


def make_eye(p: EyeParams, subdivisions: int = 4) -> TriangleMesh:
    """Watertight canonical-frame eye mesh for the given parameters.

    The whole surface is uniformly rescaled so the z extent equals AL
    exactly (a staphyloma would otherwise lengthen the globe); the rescale
    leaves asphericity untouched. Left eyes are mirror images (x negated)
    of the equivalent right-eye construction.
    """
    sphere = icosphere(subdivisions)
    radius = _radial_profile(sphere.vertices, p)
    verts = sphere.vertices * radius[:, None]
    extent = verts[:, 2].max() - verts[:, 2].min()
    verts = verts * (p.al_mm / extent)
    faces = sphere.faces
    if p.laterality == "OS":
        verts = verts * np.array([-1.0, 1.0, 1.0])
        faces = faces[:, ::-1]
    return TriangleMesh(verts, faces, laterality=p.laterality, frame="canonical")


@dataclass(frozen=True)
class CohortConfig:
    """Sampling targets for the synthetic population.

    Defaults are calibrated to a high-myopia cohort: AL median 27.87 mm with
    quartile spread ~2.2 mm, SE median -10 D coupled negatively to AL, and
    asphericity median -0.19 trending more prolate with longer eyes and with
    staphyloma.
    """

    al_median: float = 27.87
    al_sigma: float = 1.6
    al_range: tuple = (22.0, 34.0)
    se_slope: float = -1.4
    se_anchor_mm: float = 23.5
    se_offset: float = -3.88
    se_sigma: float = 1.0
    se_range: tuple = (-30.0, 5.0)
    q_median: float = -0.19
    q_al_slope: float = -0.055
    q_sigma: float = 0.035
    q_class_shift: tuple = (0.0, -0.08, -0.14)
    q_range: tuple = (-0.75, 0.45)
    staph_probs: tuple = (0.843, 0.117, 0.041)
    staph_al_gain: float = 1.5
    staph_amp_range: tuple = (0.9, 1.6)
    macular_amp_range: tuple = (0.6, 1.1)
    staph_width_range: tuple = (0.26, 0.38)
    macular_polar_max: float = 0.1
    nonmacular_polar_range: tuple = (0.45, 0.7)
    stretch_sigma: float = 0.02
    lateralities: tuple = ("OD", "OS")


def _median_offset(cfg: CohortConfig) -> float:
    """Offset making the sampled q_target mixture median hit cfg.q_median.

    The class shifts skew the mixture, so the raw median sits below the
    configured target; solve the mixture CDF for the exact correction.
    """
    from scipy.optimize import brentq
    from scipy.stats import norm

    s = float(np.hypot(cfg.q_al_slope * cfg.al_sigma, cfg.q_sigma))
    probs = np.asarray(cfg.staph_probs, np.float64)
    probs = probs / probs.sum()
    shifts = np.asarray(cfg.q_class_shift, np.float64)

    def cdf(x):
        return float(np.dot(probs, norm.cdf((x - shifts) / s))) - 0.5

    lo, hi = shifts.min() - 6 * s, shifts.max() + 6 * s
    return -brentq(cdf, lo, hi, xtol=1e-12)


def _sample_params(
    i: int, rng: np.random.Generator, cfg: CohortConfig, q_offset: float
) -> EyeParams:
    al = float(np.clip(rng.normal(cfg.al_median, cfg.al_sigma), *cfg.al_range))
    se = cfg.se_slope * (al - cfg.se_anchor_mm) + cfg.se_offset + rng.normal(0.0, cfg.se_sigma)
    se = float(np.clip(se, *cfg.se_range))

    p1, p2 = cfg.staph_probs[1], cfg.staph_probs[2]
    tilt = 1.0 + cfg.staph_al_gain * (al - cfg.al_median) / 6.0
    p_path = float(np.clip((p1 + p2) * tilt, 0.0, 0.6))
    u = rng.random()
    if u < p_path * p1 / (p1 + p2):
        klass = 1
    elif u < p_path:
        klass = 2
    else:
        klass = 0

    q = (
        cfg.q_median
        + q_offset
        + cfg.q_al_slope * (al - cfg.al_median)
        + cfg.q_class_shift[klass]
        + rng.normal(0.0, cfg.q_sigma)
    )
    q = float(np.clip(q, *cfg.q_range))

    if klass == 0:
        amp, width, polar, azimuth = 0.0, 0.4, 0.0, 0.0
    else:
        amp_range = cfg.macular_amp_range if klass == 2 else cfg.staph_amp_range
        amp = float(rng.uniform(*amp_range))
        width = float(rng.uniform(*cfg.staph_width_range))
        if klass == 2:
            polar = float(rng.uniform(0.0, cfg.macular_polar_max))
        else:
            polar = float(rng.uniform(*cfg.nonmacular_polar_range))
        azimuth = float(rng.uniform(0.0, 2.0 * np.pi))

    return EyeParams(
        case_id=f"case{i:04d}",
        laterality=cfg.lateralities[i % len(cfg.lateralities)],
        al_mm=al,
        se_d=se,
        va=float(np.clip(round(rng.normal(0.9, 0.18), 2), 0.1, 1.2)),
        q_target=q,
        stretch=float(np.clip(rng.normal(1.0, cfg.stretch_sigma), 0.94, 1.06)),
        staph_class=klass,
        staph_amp_mm=amp,
        staph_width_rad=width,
        staph_polar_rad=polar,
        staph_azimuth_rad=azimuth,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def make_cohort(
    n: int,
    seed: int = 0,
    cfg: Optional[CohortConfig] = None,
    subdivisions: int = 4,
) -> list:
    """Sample n cases; returns (EyeParams, EyeRecord, TriangleMesh) triples."""
    if n < 2:
        raise ValueError("cohort needs at least 2 cases")
    cfg = cfg or CohortConfig()
    rng = np.random.default_rng(seed)
    q_offset = _median_offset(cfg)
    out = []
    for i in range(n):
        params = _sample_params(i, rng, cfg, q_offset)
        record = EyeRecord(
            case_id=params.case_id,
            laterality=params.laterality,
            al_mm=params.al_mm,
            se_d=params.se_d,
            staphyloma=params.staph_class,
            va=params.va,
            embedding_id=params.case_id,
        )
        out.append((params, record, make_eye(params, subdivisions)))
    return out


def voxelize(m: TriangleMesh, spacing: float = 1.0, padding: int = 2) -> VoxelGrid:
    """Occupancy grid from a closed mesh by x-ray parity at voxel centers.

    Voxel-center rows get a tiny fixed off-grid offset so rays never hit
    mesh edges or vertices exactly.
    """
    if m.is_empty or not is_watertight(m):
        raise ValueError("voxelize requires a closed, watertight mesh")
    lo, hi = m.bounds()
    origin = lo - padding * spacing
    dims = tuple(int(np.ceil((hi[i] - origin[i]) / spacing)) + 1 + padding for i in range(3))

    eps = spacing * np.array([0.0, 1.073e-7, 0.74e-7])
    ys = origin[1] + np.arange(dims[1]) * spacing + eps[1]
    zs = origin[2] + np.arange(dims[2]) * spacing + eps[2]
    xs = origin[0] + np.arange(dims[0]) * spacing

    tri = m.vertices[m.faces]  # (f, 3, 3)
    occupancy = np.zeros(dims, dtype=bool)
    crossings = [[[] for _ in range(dims[2])] for _ in range(dims[1])]
    for a, b, c in tri:
        det = (b[1] - a[1]) * (c[2] - a[2]) - (b[2] - a[2]) * (c[1] - a[1])
        if abs(det) < 1e-15:
            continue  # projects to zero area; parity covered by its neighbours
        y_lo = max(int(np.ceil((min(a[1], b[1], c[1]) - eps[1] - origin[1]) / spacing)), 0)
        y_hi = min(int(np.floor((max(a[1], b[1], c[1]) - eps[1] - origin[1]) / spacing)), dims[1] - 1)
        z_lo = max(int(np.ceil((min(a[2], b[2], c[2]) - eps[2] - origin[2]) / spacing)), 0)
        z_hi = min(int(np.floor((max(a[2], b[2], c[2]) - eps[2] - origin[2]) / spacing)), dims[2] - 1)
        if y_lo > y_hi or z_lo > z_hi:
            continue
        yy = ys[y_lo : y_hi + 1][:, None]
        zz = zs[z_lo : z_hi + 1][None, :]
        w1 = ((yy - a[1]) * (c[2] - a[2]) - (zz - a[2]) * (c[1] - a[1])) / det
        w2 = ((b[1] - a[1]) * (zz - a[2]) - (b[2] - a[2]) * (yy - a[1])) / det
        inside = (w1 >= 0) & (w2 >= 0) & (w1 + w2 <= 1)
        if not inside.any():
            continue
        x_hit = a[0] + w1 * (b[0] - a[0]) + w2 * (c[0] - a[0])
        for jj, kk in zip(*np.nonzero(inside)):
            crossings[y_lo + jj][z_lo + kk].append(x_hit[jj, kk])
    for j in range(dims[1]):
        for k in range(dims[2]):
            hits = crossings[j][k]
            if not hits:
                continue
            hits = np.sort(np.asarray(hits))
            # inside where the count of crossings beyond the center is odd
            beyond = len(hits) - np.searchsorted(hits, xs)
            occupancy[:, j, k] = (beyond % 2) == 1
    return VoxelGrid(dims=dims, spacing=spacing, origin=tuple(origin), occupancy=occupancy)


def make_proposals(
    g: VoxelGrid,
    seed: int = 0,
    blob_rate: float = 0.7,
    erode_rate: float = 0.3,
) -> list:
    """Mask proposals for every non-empty slice, plus plausible distractors.

    Distractors are small off-target blobs (reflection-like artifacts) and
    eroded near-duplicates of the true mask; none should survive the IoU
    selection against the largest mask of each orientation.
    """
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    proposals = []
    for plane in PLANES:
        for mask in g.slice_stack(plane):
            if mask.area == 0:
                continue
            proposals.append(MaskProposal(mask, score=float(rng.uniform(0.75, 0.99))))
            if rng.random() < erode_rate:
                eroded = ndimage.binary_erosion(mask.pixels)
                if eroded.any():
                    proposals.append(
                        MaskProposal(mask.with_pixels(eroded), score=float(rng.uniform(0.3, 0.7)))
                    )
            if rng.random() < blob_rate:
                h, w = mask.pixels.shape
                cy, cx = rng.uniform(2, h - 2), rng.uniform(2, w - 2)
                ry_, rx_ = rng.uniform(1.5, 4.0, size=2)
                yy, xx = np.mgrid[0:h, 0:w]
                blob = ((yy - cy) / ry_) ** 2 + ((xx - cx) / rx_) ** 2 <= 1.0
                if blob.any() and not (blob & mask.pixels).sum() / blob.sum() > 0.5:
                    proposals.append(
                        MaskProposal(mask.with_pixels(blob), score=float(rng.uniform(0.2, 0.9)))
                    )
    return proposals


def write_dataset(
    cases: list,
    out_dir,
    embeddings: bool = True,
    voxels: bool = False,
    spacing: float = 1.0,
) -> Path:
    """Write manifest, generator parameters, meshes and embeddings.

    Layout: manifest.csv, params.json, meshes/<case>.ply,
    embeddings/<case>.emb and optionally voxels/<case>.vox(.voxhdr.json).
    """
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    write_records(out / "manifest.csv", [rec for _, rec, _ in cases])
    payload = {p.case_id: asdict(p) for p, _, _ in cases}
    (out / "params.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    for params, _, mesh in cases:
        save_mesh_ply(mesh, out / "meshes" / f"{params.case_id}.ply")
    if embeddings:
        from .conditioning import FileEmbeddingProvider, stub_embedding

        provider = FileEmbeddingProvider(out / "embeddings")
        for params, _, _ in cases:
            provider.put(params.case_id, stub_embedding(params))
    if voxels:
        (out / "voxels").mkdir(exist_ok=True)
        for params, _, mesh in cases:
            save_voxel_grid(voxelize(mesh, spacing), out / "voxels" / params.case_id)
    return out


def load_dataset(data_dir) -> list:
    """Read back (EyeParams, EyeRecord, TriangleMesh) triples."""
    data = Path(data_dir)
    records = {r.case_id: r for r in read_records(data / "manifest.csv")}
    raw = json.loads((data / "params.json").read_text())
    out = []
    for case_id in sorted(raw):
        params = EyeParams(**raw[case_id])
        mesh = load_mesh_ply(data / "meshes" / f"{case_id}.ply")
        out.append((params, records[case_id], mesh))
    return out
