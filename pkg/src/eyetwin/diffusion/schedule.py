"""Forward noising process over the ocular latent space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule; index t runs 1..T, slot 0 is a placeholder.

    alpha_bar[0] = 1 so the closed form degrades gracefully at t = 0.
    """

    betas: np.ndarray

    def __post_init__(self):
        b = np.ascontiguousarray(self.betas, dtype=float).ravel()
        if b.size < 2:
            raise ValueError("schedule needs at least one step")
        body = b[1:]
        if not (np.all(body > 0) and np.all(body < 1) and np.all(np.diff(body) > 0)):
            raise ValueError("betas must be strictly increasing within (0, 1)")
        b[0] = 0.0
        alphas = 1.0 - b
        alpha_bar = np.cumprod(alphas)
        if alpha_bar[-1] >= 1e-3:
            raise ValueError(
                f"terminal signal level {alpha_bar[-1]:.2e} too high: "
                "the forward process must end near isotropic noise"
            )
        for a in (b, alphas, alpha_bar):
            a.flags.writeable = False
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def T(self) -> int:
        return self.betas.size - 1


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Default linear variance ramp."""
    betas = np.zeros(T + 1)
    betas[1:] = np.linspace(beta_start, beta_end, T)
    return DiffusionSchedule(betas)


def _check_t(t, T: int) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError("timestep must be integral")
    if np.any(t < 1) or np.any(t > T):
        raise ValueError(f"timestep out of range 1..{T}")
    return t


def forward_diffuse(x0, t, eps, sched: DiffusionSchedule):
    """Closed-form jump to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError("noise shape must match the latent shape")
    a = sched.alpha_bar[_check_t(t, sched.T)]
    a = np.asarray(a, dtype=float)
    while a.ndim < x0.ndim:
        a = a[..., None]
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def forward_step(x_prev, t, eps, sched: DiffusionSchedule):
    """Single forward kernel: x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps."""
    x_prev = np.asarray(x_prev, dtype=float)
    eps = np.asarray(eps, dtype=float)
    b = sched.betas[_check_t(t, sched.T)]
    b = np.asarray(b, dtype=float)
    while b.ndim < x_prev.ndim:
        b = b[..., None]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * eps
