"""Training loop: dual latent-MSE + mesh-Chamfer objective."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from ..conditioning import (
    AL_CODEC,
    SE_CODEC,
    ConditionSources,
    LateralityTable,
    condition_dropout,
)
from .model import build_denoiser
from .schedule import DiffusionSchedule, forward_diffuse, linear_schedule
from .whitening import LatentWhitening, fit_whitening


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; message carries the diagnostic dump."""


@dataclass
class TrainConfig:
    """Knobs for one training run. Defaults are desk-scale; the full-size
    run (6020 steps, spatial body) is a configuration, not a different code
    path."""

    batch_size: int = 16
    steps: int = 600
    lr: float = 1e-4
    lambda_cd: float = 1.0
    dropout_p: float = 0.5
    # independent dropout per source teaches the solo posteriors, which is
    # what lets metadata steer generation when the image is pinned
    per_source_dropout: bool = True
    # Gaussian jitter on (AL, SE) before label encoding, in mm and diopters.
    # A few bins of spread trains the readout between the exact values seen
    # in the cohort, so unseen metadata doesn't hit raw-init weights.
    jitter_al: float = 0.25
    jitter_se: float = 0.5
    seed: int = 0
    spatial: bool = False
    hw: int = 8
    width: int = 256
    blocks: int = 4
    T: int = 1000
    log_path: Optional[str] = None

    def __post_init__(self):
        for name in ("batch_size", "steps", "lr", "T"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_cd < 0:
            raise ValueError("lambda_cd must be non-negative")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must be in [0, 1]")
        if self.jitter_al < 0 or self.jitter_se < 0:
            raise ValueError("jitter must be non-negative")


class LatentDecoder:
    """Differentiable map: whitened latent -> mm vertex positions."""

    def __init__(self, model3dmm, whitening: LatentWhitening, dtype=torch.float32):
        self.dtype = dtype
        # np.array copies: the model arrays are read-only views and torch
        # refuses non-writable buffers.
        self.mean = torch.as_tensor(np.array(model3dmm.mean), dtype=dtype)
        self.components = torch.as_tensor(np.array(model3dmm.components), dtype=dtype)
        self.w_mean = torch.as_tensor(np.array(whitening.mean), dtype=dtype)
        self.w_scale = torch.as_tensor(np.array(whitening.scale), dtype=dtype)

    def vertices(self, z):
        alpha = z * self.w_scale + self.w_mean
        coords = alpha @ self.components + self.mean
        return coords.view(len(coords), -1, 3)


def frozen_correspondences(pred_verts, gt_verts):
    """Nearest-neighbor index pairs per batch item, detached from the graph."""
    pairs = []
    p = pred_verts.detach().cpu().numpy()
    g = gt_verts.detach().cpu().numpy()
    for pb, gb in zip(p, g):
        _, j12 = cKDTree(gb).query(pb, workers=-1)
        _, j21 = cKDTree(pb).query(gb, workers=-1)
        pairs.append((j12, j21))
    return pairs


def chamfer_loss(pred_verts, gt_verts, pairs):
    """Symmetric mean-squared NN distance with fixed correspondences.

    Matches the evaluation metric's definition; the min is differentiated
    through its argmin, held constant for the step.
    """
    total = 0.0
    for b, (j12, j21) in enumerate(pairs):
        d12 = ((pred_verts[b] - gt_verts[b][j12]) ** 2).sum(dim=1).mean()
        d21 = ((gt_verts[b] - pred_verts[b][j21]) ** 2).sum(dim=1).mean()
        total = total + d12 + d21
    return total / len(pairs)


def dual_loss(denoiser, x0, x_t, t, cond, gt_verts, decoder, lambda_cd,
              pairs=None):
    """loss = MSE(x0_hat, x0) + lambda_cd * chamfer(decode(x0_hat), gt)."""
    pred = denoiser(x_t, t, cond)
    loss_mse = ((pred - x0) ** 2).mean()
    if lambda_cd == 0.0 or gt_verts is None:
        return loss_mse, loss_mse, torch.zeros((), dtype=loss_mse.dtype)
    pred_verts = decoder.vertices(pred)
    if pairs is None:
        pairs = frozen_correspondences(pred_verts, gt_verts)
    loss_cd = chamfer_loss(pred_verts, gt_verts, pairs)
    return loss_mse + lambda_cd * loss_cd, loss_mse, loss_cd


def train_step(batch, denoiser, optimizer, sched: DiffusionSchedule,
               decoder, config: TrainConfig, rng: np.random.Generator):
    """One optimizer update; returns (loss_mse, loss_cd) as floats."""
    x0_np, gt_verts, cond = batch
    dtype = next(denoiser.parameters()).dtype
    n = len(x0_np)
    t_np = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0_np.shape)
    x_t_np = forward_diffuse(x0_np, t_np, eps, sched)

    x0 = torch.as_tensor(x0_np, dtype=dtype)
    x_t = torch.as_tensor(x_t_np, dtype=dtype)
    t = torch.as_tensor(t_np, dtype=torch.long)
    loss, loss_mse, loss_cd = dual_loss(
        denoiser, x0, x_t, t, cond, gt_verts, decoder, config.lambda_cd
    )
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            "non-finite loss: "
            f"mse={float(loss_mse.detach())!r} cd={float(loss_cd.detach())!r} "
            f"t={t_np.tolist()} |x_t|max={float(np.abs(x_t_np).max())!r}"
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss_mse.detach()), float(loss_cd.detach())


def _rng_digest(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha256(state.encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    denoiser: object
    schedule: DiffusionSchedule
    whitening: LatentWhitening
    config: TrainConfig
    log: list = field(default_factory=list)
    table: Optional[LateralityTable] = None


def train(latents, vertices, sources: Optional[Sequence[ConditionSources]],
          model3dmm, condition_fn: Optional[Callable], config: TrainConfig,
          table: Optional[LateralityTable] = None) -> TrainResult:
    """Fit the denoiser on (latent, mesh, condition) triples.

    vertices may be None when lambda_cd is zero (pure latent training, used
    by toy distribution checks). The laterality table is mirrored into a
    torch parameter so its rows receive gradient updates alongside the
    denoiser; the updated table comes back in the result. All randomness
    flows from config.seed, and torch runs single-threaded, so reruns are
    bit-identical.
    """
    latents = np.asarray(latents, dtype=float)
    m, d = latents.shape
    if vertices is None and config.lambda_cd > 0:
        raise ValueError("vertex targets required when lambda_cd > 0")
    if vertices is not None and len(vertices) != m:
        raise ValueError("one vertex array per latent required")
    if sources is not None and len(sources) != m:
        raise ValueError("one condition source set per latent required")

    torch.set_num_threads(1)
    rng = np.random.default_rng(config.seed)
    whitening = fit_whitening(latents)
    sched = linear_schedule(config.T)
    denoiser = build_denoiser(
        d, spatial=config.spatial, hw=config.hw, width=config.width,
        blocks=config.blocks, T=config.T, seed=config.seed,
    )
    table = table or LateralityTable()
    lat_param = None
    trained = list(denoiser.parameters())
    if sources is not None:
        lat_param = torch.nn.Parameter(
            torch.as_tensor(np.array(table.weights), dtype=torch.float32)
        )
        trained.append(lat_param)
    optimizer = torch.optim.Adam(
        trained, lr=config.lr, betas=(0.9, 0.999), eps=1e-8
    )
    decoder = None
    if config.lambda_cd > 0:
        decoder = LatentDecoder(model3dmm, whitening)
        gt_all = torch.as_tensor(np.asarray(vertices), dtype=torch.float32)
    white = whitening.whiten(latents)

    log = []
    log_file = open(config.log_path, "w") if config.log_path else None
    try:
        for step in range(config.steps):
            idx = rng.choice(m, size=min(config.batch_size, m), replace=m < config.batch_size)
            cond_rows = np.zeros((len(idx), denoiser.config["cond_dim"]))
            lat_idx = np.full(len(idx), -1)
            if sources is not None and condition_fn is not None:
                for row, i in enumerate(idx):
                    kept = condition_dropout(
                        sources[i], config.dropout_p, rng,
                        per_source=config.per_source_dropout,
                    )
                    if kept.laterality is not None:
                        # routed through the trainable mirror, not the fn
                        lat_idx[row] = table.row_index(kept.laterality)
                        kept = replace(kept, laterality=None)
                    if kept.al is not None and (config.jitter_al or config.jitter_se):
                        kept = replace(
                            kept,
                            al=float(np.clip(
                                kept.al + config.jitter_al * rng.standard_normal(),
                                AL_CODEC.lo, AL_CODEC.hi,
                            )),
                            se=float(np.clip(
                                kept.se + config.jitter_se * rng.standard_normal(),
                                SE_CODEC.lo, SE_CODEC.hi,
                            )),
                        )
                    cond_rows[row] = condition_fn(kept)
            cond = torch.as_tensor(cond_rows, dtype=torch.float32)
            if lat_param is not None and (lat_idx >= 0).any():
                gate = torch.as_tensor((lat_idx >= 0).astype(np.float32))
                sel = torch.as_tensor(np.maximum(lat_idx, 0))
                cond = cond + lat_param[sel] * gate[:, None]
            batch = (
                white[idx],
                gt_all[idx] if decoder is not None else None,
                cond,
            )
            try:
                loss_mse, loss_cd = train_step(batch, denoiser, optimizer, sched, decoder, config, rng)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"step {step}: {exc}") from None
            entry = {
                "step": step,
                "loss_mse": loss_mse,
                "loss_cd": loss_cd,
                "lr": config.lr,
                "seed_digest": _rng_digest(rng),
            }
            log.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
    finally:
        if log_file:
            log_file.close()
    if lat_param is not None:
        table = LateralityTable(lat_param.detach().numpy().astype(np.float64))
    return TrainResult(denoiser, sched, whitening, config, log, table)
