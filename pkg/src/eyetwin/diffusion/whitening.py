"""Per-dimension standardization of training latents.

The diffusion process assumes roughly unit-scale data; PCA latents are
mm-scale with wildly different variances per direction, so they are whitened
on the way in and unwhitened on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Dimensions with less spread than this are treated as constant and passed
# through with unit scale (zero-variance PCA directions would otherwise
# divide by zero).
_MIN_SPREAD = 1e-12


@dataclass(frozen=True)
class LatentWhitening:
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        mu = np.ascontiguousarray(self.mean, dtype=float).ravel()
        sd = np.ascontiguousarray(self.scale, dtype=float).ravel()
        if mu.shape != sd.shape:
            raise ValueError("mean and scale must have the same length")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sd))):
            raise ValueError("whitening parameters must be finite")
        if np.any(sd <= 0):
            raise ValueError("whitening scale must be positive")
        mu.flags.writeable = False
        sd.flags.writeable = False
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "scale", sd)

    @property
    def dim(self) -> int:
        return self.mean.size

    def whiten(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def unwhiten(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.mean


def fit_whitening(latents) -> LatentWhitening:
    x = np.asarray(latents, dtype=float)
    if x.ndim != 2 or len(x) < 1:
        raise ValueError("latents must be a non-empty (m, d) array")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < _MIN_SPREAD] = 1.0
    return LatentWhitening(mean, scale)
