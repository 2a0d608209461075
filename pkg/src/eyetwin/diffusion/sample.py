"""Accelerated deterministic sampling and test-time averaging."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch

from ..morphable import OcularLatent
from .schedule import DiffusionSchedule
from .whitening import LatentWhitening


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniform descending sub-schedule, always ending at step 1."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in 1..{T}")
    taus = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return taus[::-1]


def _cond_vector(cond, dim: int) -> np.ndarray:
    if cond is None:
        return np.zeros(dim)
    vec = getattr(cond, "vector", cond)
    # copy: condition vectors are frozen and torch rejects read-only buffers
    vec = np.array(vec, dtype=float).ravel()
    if vec.size != dim:
        raise ValueError(f"condition length {vec.size} != expected {dim}")
    return vec


def sample(cond, denoiser, sched: DiffusionSchedule, whitening: LatentWhitening,
           steps: int = 10, rng=None, laterality: Optional[str] = None) -> OcularLatent:
    """Draw one latent: noise in, deterministic x0-prediction updates down
    a 10-step sub-schedule, unwhitened PCA coefficients out."""
    rng = _as_generator(rng)
    dtype = next(denoiser.parameters()).dtype
    d = denoiser.latent_dim
    cvec = _cond_vector(cond, denoiser.config["cond_dim"])
    x = torch.as_tensor(rng.standard_normal(d)[None], dtype=dtype)
    c = torch.as_tensor(cvec[None], dtype=dtype)
    taus = ddim_timesteps(sched.T, steps)
    with torch.no_grad():
        for i, t in enumerate(taus):
            x0_hat = denoiser(x, torch.tensor([int(t)]), c)
            a_t = float(sched.alpha_bar[t])
            if i + 1 == len(taus):
                x = x0_hat
                break
            t_next = int(taus[i + 1])
            a_n = float(sched.alpha_bar[t_next])
            eps_hat = (x - np.sqrt(a_t) * x0_hat) / np.sqrt(1.0 - a_t)
            x = np.sqrt(a_n) * x0_hat + np.sqrt(1.0 - a_n) * eps_hat
    z = x[0].cpu().numpy().astype(float)
    return OcularLatent(whitening.unwhiten(z), laterality=laterality)


def tta_sample(cond, k: int, denoiser, sched: DiffusionSchedule,
               whitening: LatentWhitening, steps: int = 10, rng=None,
               laterality: Optional[str] = None) -> OcularLatent:
    """Average of k independent draws under the same condition.

    Per-draw generators are spawned from the root one, so the result is
    reproducible and the draws are independent.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = _as_generator(rng)
    if k == 1:
        # Single draw is literally sample(): same generator, no spawning.
        return sample(cond, denoiser, sched, whitening, steps=steps, rng=rng,
                      laterality=laterality)
    draws = [
        sample(cond, denoiser, sched, whitening, steps=steps, rng=child,
               laterality=laterality).alpha
        for child in rng.spawn(k)
    ]
    return OcularLatent(np.mean(draws, axis=0), laterality=laterality)
