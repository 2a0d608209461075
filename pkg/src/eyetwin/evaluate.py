"""Cohort-scale experiment harness.

Wires the full pipeline end to end on a synthetic population: sample a
cohort, push every eye through voxel reconstruction and registration, build
the shape model, train the conditional generator, then score generated
globes against held-out ground truth. Also hosts the conditioning ablation
(soft-bin encoding vs. cluster codes vs. a fixed random-feature encoder)
and the clinical-trend readouts used to sanity-check the generator.

Everything here is deterministic under ExperimentConfig.seed; reports are
plain JSON-ready dicts so the CLI can dump them verbatim.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import mannwhitneyu, spearmanr

from .cohort import CohortConfig, make_cohort, voxelize
from .conditioning import (
    EMBED_DIM,
    ConditionSources,
    LateralityTable,
    StubEmbeddingProvider,
    build_condition,
    fuse_conditions,
)
from .counterfactual import MetaPoint, cluster_al_se, counterfactual_generate, make_smote_grid
from .diffusion import TrainConfig, architecture_hash, train
from .geometry import TriangleMesh, marching_cubes, taubin_smooth
from .metrics import compare_meshes, q_value, scaled_baseline
from .morphable import ModelRegistry, build_3dmm, encode
from .registration.pipeline import EyeRegistration, shape_to_mesh
from .stack import ModelStack

VARIANTS = ("ldl", "cluster", "mlp")


@dataclass
class ExperimentConfig:
    """Scale and hyperparameters for one harness run.

    Defaults match the headline experiment: 200 eyes split 160/40, soft-bin
    metadata conditioning, averaged sampling at generation time. Smaller
    values of n_cases/train_steps give quick smoke runs.
    """

    n_cases: int = 200
    train_fraction: float = 0.8
    seed: int = 0
    laterality: str = "OD"

    # reconstruction; from_voxels=False registers the synthesis meshes
    # directly, which is faster but skips the imaging stack
    from_voxels: bool = True
    voxel_spacing_mm: float = 1.0
    smooth_iters: int = 10

    # training
    variant: str = "ldl"
    train_steps: int = 600
    batch_size: int = 16
    lambda_cd: float = 1.0
    dropout_p: float = 0.5
    width: int = 256
    blocks: int = 4
    diffusion_steps: int = 1000

    # generation + scoring
    tta_k: int = 4
    sample_steps: int = 10
    baseline_mm: float = 0.8
    eval_samples: int = 10000

    # metadata sweep
    cluster_k: int = 4
    sweep_per_cluster: int = 12

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.n_cases < 10:
            raise ValueError("need at least 10 cases for a split")

    @property
    def n_train(self) -> int:
        return int(round(self.n_cases * self.train_fraction))


@dataclass
class PreparedCohort:
    """Registered cohort plus everything training and scoring consume."""

    config: ExperimentConfig
    params: list
    records: list
    sources: list
    shapes: list
    standardized: list
    q_real: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    model: object
    latents: np.ndarray
    train_vertices: np.ndarray
    baselines: dict
    provider: StubEmbeddingProvider
    table: LateralityTable
    reference: object
    timings: dict = field(default_factory=dict)


def _reconstruct(mesh: TriangleMesh, config: ExperimentConfig) -> TriangleMesh:
    """Mesh -> occupancy -> isosurface -> smoothed mesh, tags preserved."""
    grid = voxelize(mesh, spacing=config.voxel_spacing_mm)
    raw = marching_cubes(grid)
    smooth = taubin_smooth(raw, iterations=config.smooth_iters)
    return TriangleMesh(smooth.vertices, smooth.faces, laterality=mesh.laterality)


def prepare_cohort(config: ExperimentConfig) -> PreparedCohort:
    """Sample, reconstruct and register a cohort; fit the shape model on train."""
    t0 = time.perf_counter()
    cohort = make_cohort(
        config.n_cases, seed=config.seed,
        cfg=CohortConfig(lateralities=(config.laterality,)),
    )
    pipe = EyeRegistration().fit()

    shapes = []
    t_rec = time.perf_counter()
    for params, record, mesh in cohort:
        subject = _reconstruct(mesh, config) if config.from_voxels else mesh
        shapes.append(pipe.register(subject, source_id=params.case_id).shape)
    t_reg = time.perf_counter()

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(config.n_cases)
    train_idx, test_idx = perm[: config.n_train], perm[config.n_train :]

    model = build_3dmm([shapes[i] for i in train_idx], laterality=config.laterality)
    latents = np.stack([encode(shapes[i], model).alpha for i in train_idx])
    train_vertices = np.stack(
        [shapes[i].coords.reshape(-1, 3) for i in train_idx]
    )

    params_by_id = {p.case_id: p for p, _, _ in cohort}
    provider = StubEmbeddingProvider(params_by_id)
    records = [rec for _, rec, _ in cohort]
    sources = [
        ConditionSources(
            cfp=provider.get(rec.case_id), laterality=rec.laterality,
            al=rec.al_mm, se=rec.se_d,
        )
        for rec in records
    ]

    standardized = [shape_to_mesh(s, ref=pipe.reference_) for s in shapes]
    q_real = np.array([q_value(m).q for m in standardized])
    baselines = {
        int(i): scaled_baseline(
            standardized[i], config.baseline_mm,
            n_samples=config.eval_samples, seed=int(i),
        )
        for i in test_idx
    }
    t1 = time.perf_counter()

    return PreparedCohort(
        config=config,
        params=[p for p, _, _ in cohort],
        records=records,
        sources=sources,
        shapes=shapes,
        standardized=standardized,
        q_real=q_real,
        train_idx=train_idx,
        test_idx=test_idx,
        model=model,
        latents=latents,
        train_vertices=train_vertices,
        baselines=baselines,
        provider=provider,
        table=LateralityTable(),
        reference=pipe.reference_,
        timings={
            "synthesis_seconds": t_rec - t0,
            "registration_seconds": t_reg - t_rec,
            "model_seconds": t1 - t_reg,
            "prepare_seconds": t1 - t0,
        },
    )


# ---------------------------------------------------------------------------
# conditioning variants


class _MetaConditioner:
    """Shares fusion logic; subclasses only encode the (AL, SE) pair."""

    def __init__(self, table: LateralityTable):
        self.table = table

    def encode_meta(self, al: float, se: float) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, src: ConditionSources) -> np.ndarray:
        cont = self.encode_meta(src.al, src.se) if src.al is not None else None
        lat = self.table.row(src.laterality) if src.laterality is not None else None
        return fuse_conditions(src.cfp, lat, cont).vector


class ClusterConditioner(_MetaConditioner):
    """Metadata quantized to k-means cells, each cell a fixed random code.

    Deliberately lossy: every eye in a cell shares one code, so the
    generator cannot see within-cell AL/SE variation. Code rows are scaled
    to the same norm as the soft-bin encoding so the comparison is fair.
    """

    def __init__(self, metas: Sequence[MetaPoint], k: int, seed: int,
                 table: LateralityTable):
        super().__init__(table)
        pts = np.array([[m.al, m.se] for m in metas])
        self.mu = pts.mean(axis=0)
        sd = pts.std(axis=0)
        sd[sd < 1e-12] = 1.0
        self.sd = sd
        result = cluster_al_se(list(metas), k=k, seed=seed)
        self.centers_z = (result.centers - self.mu) / self.sd
        rng = np.random.default_rng(seed + 1)
        self.codes = rng.normal(0.0, 0.5 / np.sqrt(EMBED_DIM), size=(k, EMBED_DIM))

    def encode_meta(self, al, se):
        z = (np.array([al, se]) - self.mu) / self.sd
        cell = int(np.argmin(((self.centers_z - z) ** 2).sum(axis=1)))
        return self.codes[cell]


class RandomFeatureConditioner(_MetaConditioner):
    """Metadata through a fixed random tanh layer at embedding width.

    Stands in for a continuous MLP encoder trained jointly: information
    about (AL, SE) is preserved, but spread across dense random features
    instead of localized soft bins. Output norm matches the soft-bin pair.
    """

    def __init__(self, metas: Sequence[MetaPoint], seed: int,
                 table: LateralityTable, hidden: int = 16):
        super().__init__(table)
        pts = np.array([[m.al, m.se] for m in metas])
        self.mu = pts.mean(axis=0)
        sd = pts.std(axis=0)
        sd[sd < 1e-12] = 1.0
        self.sd = sd
        rng = np.random.default_rng(seed + 2)
        self.w1 = rng.normal(0.0, 1.0, size=(hidden, 2))
        self.b1 = rng.normal(0.0, 0.5, size=hidden)
        # tanh features have ~0.4 second moment; this keeps output norm ~0.5
        self.w2 = rng.normal(0.0, 0.5 / np.sqrt(0.4 * hidden * EMBED_DIM),
                             size=(EMBED_DIM, hidden))

    def encode_meta(self, al, se):
        z = (np.array([al, se]) - self.mu) / self.sd
        return self.w2 @ np.tanh(self.w1 @ z + self.b1)


def make_condition_fn(variant: str, prepared: PreparedCohort,
                      seed: int) -> Callable:
    if variant not in VARIANTS:
        raise ValueError(f"unknown conditioning variant {variant!r}")
    if variant == "ldl":
        table = prepared.table
        return lambda src: build_condition(src, table).vector
    metas = [
        MetaPoint(prepared.records[i].al_mm, prepared.records[i].se_d)
        for i in prepared.train_idx
    ]
    if variant == "cluster":
        return ClusterConditioner(metas, prepared.config.cluster_k, seed,
                                  prepared.table)
    return RandomFeatureConditioner(metas, seed, prepared.table)


# ---------------------------------------------------------------------------
# training + scoring


def train_variant(prepared: PreparedCohort, config: ExperimentConfig,
                  variant: Optional[str] = None,
                  seed: Optional[int] = None) -> ModelStack:
    """Train one conditioning variant and wrap it as a generation stack."""
    variant = variant or config.variant
    seed = config.seed if seed is None else seed
    condition_fn = make_condition_fn(variant, prepared, seed)
    train_sources = [prepared.sources[i] for i in prepared.train_idx]
    result = train(
        prepared.latents, prepared.train_vertices, train_sources,
        prepared.model, condition_fn,
        TrainConfig(
            batch_size=config.batch_size, steps=config.train_steps,
            lambda_cd=config.lambda_cd, dropout_p=config.dropout_p,
            seed=seed, width=config.width, blocks=config.blocks,
            T=config.diffusion_steps,
        ),
        table=prepared.table,
    )
    registry = ModelRegistry()
    registry.add(prepared.model)
    if variant != "ldl":
        # generation must see the same trained laterality rows
        condition_fn.table = result.table
    return ModelStack(
        denoiser=result.denoiser,
        schedule=result.schedule,
        whitening=result.whitening,
        models=registry,
        table=result.table,
        provider=prepared.provider,
        reference=prepared.reference,
        checkpoint_hash=architecture_hash(result.denoiser),
        default_laterality=config.laterality,
        tta_k=config.tta_k,
        steps=config.sample_steps,
        # soft-bin is the stack's native conditioning; variants carry theirs
        condition_fn=None if variant == "ldl" else condition_fn,
    )


def _case_seed(seed: int, case_index: int) -> int:
    # distinct, deterministic per (run seed, case); primes avoid collisions
    return 100003 * (seed + 1) + case_index


def evaluate_stack(stack: ModelStack, prepared: PreparedCohort,
                   config: ExperimentConfig, tta_k: Optional[int] = None,
                   gen_seed: Optional[int] = None) -> dict:
    """Generate every held-out eye and score it against its reconstruction."""
    gen_seed = config.seed if gen_seed is None else gen_seed
    rows = []
    for i in prepared.test_idx:
        i = int(i)
        gen = stack.generate(
            prepared.sources[i], seed=_case_seed(gen_seed, i), tta_k=tta_k,
        )
        rep = compare_meshes(
            prepared.standardized[i], gen.mesh,
            n_samples=config.eval_samples, seed=i,
        )
        rows.append({
            "case_id": prepared.records[i].case_id,
            "staph_class": prepared.params[i].staph_class,
            "al": prepared.records[i].al_mm,
            "se": prepared.records[i].se_d,
            "chamfer": rep.chamfer,
            "baseline": prepared.baselines[i],
            "beats_baseline": bool(rep.chamfer < prepared.baselines[i]),
            "hausdorff": rep.hausdorff,
            "hausdorff_real_to_gen": rep.hausdorff_real_to_gen,
            "hausdorff_gen_to_real": rep.hausdorff_gen_to_real,
            "p2s_rmse": rep.p2s_rmse,
            "p2s_mae": rep.p2s_mae,
            "q_real": float(prepared.q_real[i]),
            "q_generated": gen.q.q,
            "seed": gen.seed,
            "latent_digest": gen.latent_digest,
        })
    chamfers = np.array([r["chamfer"] for r in rows])
    return {
        "rows": rows,
        "n_test": len(rows),
        "mean_chamfer": float(chamfers.mean()),
        "mean_baseline": float(np.mean([r["baseline"] for r in rows])),
        "beat_fraction": float(np.mean([r["beats_baseline"] for r in rows])),
    }


# ---------------------------------------------------------------------------
# readouts


def q_separation(rows: Sequence[dict], key: str = "q_generated") -> dict:
    """One-sided rank test: staphylomatous eyes should skew more prolate."""
    path = [r[key] for r in rows if r["staph_class"] >= 1]
    rest = [r[key] for r in rows if r["staph_class"] == 0]
    if len(path) < 3 or len(rest) < 3:
        raise ValueError(
            f"need >=3 eyes per group, got {len(path)} pathological / {len(rest)} typical"
        )
    stat, p = mannwhitneyu(path, rest, alternative="less")
    return {
        "n_pathological": len(path),
        "n_typical": len(rest),
        "u_statistic": float(stat),
        "p_value": float(p),
        "median_pathological": float(np.median(path)),
        "median_typical": float(np.median(rest)),
    }


def metadata_sweep(stack: ModelStack, prepared: PreparedCohort,
                   config: ExperimentConfig) -> dict:
    """Counterfactual grid: rank correlation of generated Q against AL and SE.

    One real eye anchors the image embedding; synthetic (AL, SE) points
    spanning the training metadata vary while everything else is pinned.
    """
    metas = [
        MetaPoint(prepared.records[i].al_mm, prepared.records[i].se_d)
        for i in prepared.train_idx
    ]
    grid = make_smote_grid(
        metas, k=config.cluster_k, per_cluster=config.sweep_per_cluster,
        seed=config.seed,
    )
    anchor = prepared.records[int(prepared.train_idx[0])]
    report = counterfactual_generate(
        anchor.case_id, anchor, grid, stack, seed=config.seed,
    )
    sweep = [r for r in report.rows if not r.is_factual]
    al = [r.meta.al for r in sweep]
    se = [r.meta.se for r in sweep]
    q = [r.q.q for r in sweep]
    rho_al, p_al = spearmanr(al, q)
    rho_se, p_se = spearmanr(se, q)
    return {
        "n_grid": len(sweep),
        "anchor_case": anchor.case_id,
        "rho_al_q": float(rho_al),
        "p_al": float(p_al),
        "rho_se_q": float(rho_se),
        "p_se": float(p_se),
        "embedding_digest": report.embedding_digest,
    }


def run_ablation(prepared: PreparedCohort, config: ExperimentConfig,
                 seeds: Sequence[int] = (0, 1, 2),
                 reuse: Optional[dict] = None) -> dict:
    """Train every conditioning variant per seed; compare mean test chamfer.

    The soft-bin checkpoint is scored twice, with and without averaged
    sampling, so the averaging effect is isolated from the encoding effect.
    ``reuse`` maps a seed to an already-trained soft-bin stack.
    """
    reuse = reuse or {}
    per_seed = {}
    for seed in seeds:
        ldl = reuse.get(seed) or train_variant(prepared, config, "ldl", seed)
        readouts = {
            "ldl_tta": evaluate_stack(prepared=prepared, stack=ldl, config=config,
                                      tta_k=config.tta_k, gen_seed=seed),
            "ldl": evaluate_stack(prepared=prepared, stack=ldl, config=config,
                                  tta_k=1, gen_seed=seed),
        }
        for variant in ("cluster", "mlp"):
            alt = train_variant(prepared, config, variant, seed)
            readouts[variant] = evaluate_stack(
                prepared=prepared, stack=alt, config=config, tta_k=1,
                gen_seed=seed,
            )
        per_seed[seed] = {k: v["mean_chamfer"] for k, v in readouts.items()}
    keys = ("ldl_tta", "ldl", "cluster", "mlp")
    means = {k: float(np.mean([per_seed[s][k] for s in seeds])) for k in keys}
    return {
        "seeds": list(seeds),
        "per_seed": {str(s): per_seed[s] for s in seeds},
        "mean_chamfer": means,
        "ordering": {
            "tta_not_worse": bool(means["ldl_tta"] <= means["ldl"]),
            "ldl_beats_cluster": bool(means["ldl"] <= means["cluster"]),
            "ldl_beats_mlp": bool(means["ldl"] <= means["mlp"]),
        },
    }


def run_evaluation(config: Optional[ExperimentConfig] = None,
                   include_ablation: bool = True,
                   ablation_seeds: Sequence[int] = (0, 1, 2)) -> dict:
    """Full harness: prepare, train, score, trend readouts, optional ablation."""
    config = config or ExperimentConfig()
    t0 = time.perf_counter()
    prepared = prepare_cohort(config)
    t1 = time.perf_counter()
    stack = train_variant(prepared, config, "ldl", config.seed)
    t2 = time.perf_counter()
    headline = evaluate_stack(stack, prepared, config, tta_k=config.tta_k)
    t3 = time.perf_counter()

    report = {
        "config": asdict(config),
        "n_train": len(prepared.train_idx),
        "n_test": len(prepared.test_idx),
        "latent_dim": prepared.model.dim,
        "checkpoint_hash": stack.checkpoint_hash,
        "headline": headline,
        "q_separation_generated": q_separation(headline["rows"]),
        "q_separation_real": q_separation(headline["rows"], key="q_real"),
        "metadata_sweep": metadata_sweep(stack, prepared, config),
        "timings": {
            **prepared.timings,
            "train_seconds": t2 - t1,
            "score_seconds": t3 - t2,
            "end_to_end_seconds": t3 - t0,
        },
    }
    if include_ablation:
        report["ablation"] = run_ablation(
            prepared, config, seeds=ablation_seeds,
            reuse={config.seed: stack},
        )
        report["timings"]["total_seconds"] = time.perf_counter() - t0
    return report
