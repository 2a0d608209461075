"""What-if generation: AL-SE clustering, SMOTE oversampling, counterfactuals."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .conditioning import AL_CODEC, SE_CODEC, ConditionSources, EyeRecord
from .stack import ModelStack
from .validation import check_finite

_KMEANS_MAX_ITERS = 100


@dataclass(frozen=True)
class MetaPoint:
    """One point in the AL (mm) x SE (diopter) metadata plane."""

    al: float
    se: float

    def __post_init__(self):
        check_finite(self.al, "AL")
        check_finite(self.se, "SE")
        if not AL_CODEC.lo <= self.al <= AL_CODEC.hi:
            raise ValueError(f"AL {self.al} outside [{AL_CODEC.lo}, {AL_CODEC.hi}] mm")
        if not SE_CODEC.lo <= self.se <= SE_CODEC.hi:
            raise ValueError(f"SE {self.se} outside [{SE_CODEC.lo}, {SE_CODEC.hi}] D")

    def as_array(self) -> np.ndarray:
        return np.array([self.al, self.se], dtype=float)


def _as_xy(points: Sequence) -> np.ndarray:
    rows = [p.as_array() if isinstance(p, MetaPoint) else np.asarray(p, float) for p in points]
    xy = np.stack(rows)
    if xy.shape[1] != 2 or not np.all(np.isfinite(xy)):
        raise ValueError("points must be finite (AL, SE) pairs")
    return xy


@dataclass(frozen=True)
class ClusterResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    n_iter: int

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


def cluster_al_se(points: Sequence, k: int = 4, seed: int = 0) -> ClusterResult:
    """Plain k-means on per-axis z-scored coordinates.

    Deterministic under seed; stops when labels are stable or after 100
    iterations. Inertia is asserted non-increasing every iteration, so a
    broken update fails loudly instead of wandering.
    """
    xy = _as_xy(points)
    n = len(xy)
    if k < 1:
        raise ValueError("k must be >= 1")
    distinct = np.unique(xy, axis=0)
    if k > len(distinct):
        raise ValueError(f"k={k} exceeds the {len(distinct)} distinct points")
    mu = xy.mean(axis=0)
    sd = xy.std(axis=0)
    sd[sd < 1e-12] = 1.0
    z = (xy - mu) / sd

    rng = np.random.default_rng(seed)
    z_distinct = (distinct - mu) / sd
    centers = z_distinct[rng.choice(len(z_distinct), size=k, replace=False)]

    labels = np.full(n, -1)
    prev_inertia = np.inf
    for it in range(1, _KMEANS_MAX_ITERS + 1):
        d2 = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), new_labels].sum())
        assert inertia <= prev_inertia + 1e-9, (
            f"k-means inertia increased: {prev_inertia} -> {inertia}"
        )
        prev_inertia = inertia
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            member = z[labels == j]
            if len(member):
                centers[j] = member.mean(axis=0)
            else:
                # Re-seed an emptied cluster on the point farthest from its
                # current center; keeps the run deterministic and monotone.
                far = int(d2[np.arange(n), labels].argmax())
                centers[j] = z[far]
    return ClusterResult(
        labels=labels,
        centers=centers * sd + mu,
        inertia=inertia,
        n_iter=it,
    )


def smote_sample(points: Sequence, n_new: int, k_neighbors: int = 5,
                 seed: int = 0) -> list:
    """Oversample a cluster by convex interpolation toward near neighbors.

    Every output is seed_point + lambda * (neighbor - seed_point) with
    lambda ~ U(0, 1), so it stays inside the cluster's convex hull.
    """
    xy = _as_xy(points)
    n = len(xy)
    if n < 2:
        raise ValueError("need at least two points to interpolate")
    if n_new < 0:
        raise ValueError("n_new must be non-negative")
    k_eff = min(k_neighbors, n - 1)
    rng = np.random.default_rng(seed)
    # Neighbor table once: stable argsort keeps ties deterministic.
    d2 = ((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    neighbor_idx = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]

    out = []
    for _ in range(n_new):
        i = int(rng.integers(n))
        j = int(neighbor_idx[i, rng.integers(k_eff)])
        lam = float(rng.random())
        al, se = xy[i] + lam * (xy[j] - xy[i])
        out.append(MetaPoint(
            al=float(np.clip(al, AL_CODEC.lo, AL_CODEC.hi)),
            se=float(np.clip(se, SE_CODEC.lo, SE_CODEC.hi)),
        ))
    return out


def make_smote_grid(points: Sequence, k: int = 4, per_cluster: int = 12,
                    k_neighbors: int = 5, seed: int = 0) -> list:
    """Cluster the cohort metadata and oversample each cluster."""
    res = cluster_al_se(points, k=k, seed=seed)
    xy = _as_xy(points)
    grid = []
    for j in range(k):
        members = xy[res.labels == j]
        if len(members) < 2:
            continue
        grid.extend(smote_sample(members, per_cluster, k_neighbors, seed=seed + j))
    return grid


@dataclass(frozen=True)
class CounterfactualRow:
    meta: MetaPoint
    is_factual: bool
    mesh: object
    q: object
    latent_digest: str


@dataclass(frozen=True)
class CounterfactualReport:
    rows: tuple
    embedding_digest: str
    seed: int
    checkpoint_hash: str

    def q_values(self) -> np.ndarray:
        return np.array([r.q.q for r in self.rows])


def counterfactual_generate(cfp_id: str, factual: EyeRecord,
                            counterfactuals: Sequence[MetaPoint],
                            stack: ModelStack, seed: int = 0,
                            tta_k: Optional[int] = None) -> CounterfactualReport:
    """Regenerate the eye under altered metadata.

    The image embedding, laterality and seed are identical across all rows;
    only (AL, SE) varies, and the report's digests prove it.
    """
    if stack.provider is None:
        raise ValueError("no embedding provider configured")
    emb = stack.provider.get(cfp_id)
    emb_digest = hashlib.sha256(np.ascontiguousarray(emb, dtype=float).tobytes()).hexdigest()

    metas = [MetaPoint(factual.al_mm, factual.se_d)] + list(counterfactuals)
    rows = []
    for row_i, meta in enumerate(metas):
        sources = ConditionSources(
            cfp=emb, laterality=factual.laterality, al=meta.al, se=meta.se
        )
        gen = stack.generate(sources, seed=seed, tta_k=tta_k)
        rows.append(CounterfactualRow(
            meta=meta, is_factual=row_i == 0, mesh=gen.mesh, q=gen.q,
            latent_digest=gen.latent_digest,
        ))
    return CounterfactualReport(
        rows=tuple(rows),
        embedding_digest=emb_digest,
        seed=seed,
        checkpoint_hash=stack.checkpoint_hash,
    )
