"""Bundle of trained artifacts behind one generation call.

Everything downstream of training (service endpoints, counterfactual runs,
evaluation) generates through this object so conditioning, sampling and
decoding stay consistent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .conditioning import ConditionSources, LateralityTable, build_condition
from .diffusion import tta_sample
from .metrics import QDescriptor, q_value
from .morphable import ModelRegistry, decode_mesh
from .registration.reference import ReferenceMesh


@dataclass(frozen=True)
class GenerationResult:
    mesh: object
    q: QDescriptor
    latent: object
    seed: int
    latent_digest: str


@dataclass
class ModelStack:
    denoiser: object
    schedule: object
    whitening: object
    models: ModelRegistry
    table: LateralityTable
    provider: Optional[object] = None
    reference: Optional[ReferenceMesh] = None
    checkpoint_hash: str = ""
    default_laterality: str = "OD"
    tta_k: int = 4
    steps: int = 10
    # Alternate sources -> vector encoder; must match how the denoiser was
    # conditioned during training (ablation variants swap this out).
    condition_fn: Optional[Callable] = None

    def condition(self, sources: ConditionSources):
        if self.condition_fn is not None:
            return self.condition_fn(sources)
        return build_condition(sources, self.table)

    def sources_for(self, al=None, se=None, laterality=None,
                    cfp_id: Optional[str] = None) -> ConditionSources:
        cfp = None
        if cfp_id is not None:
            if self.provider is None:
                raise ValueError("no embedding provider configured")
            cfp = self.provider.get(cfp_id)
        return ConditionSources(cfp=cfp, laterality=laterality, al=al, se=se)

    def generate(self, sources: ConditionSources, seed: int = 0,
                 tta_k: Optional[int] = None, steps: Optional[int] = None) -> GenerationResult:
        """Conditional draw -> mesh + asphericity, reproducible under seed."""
        lat_tag = sources.laterality or self.default_laterality
        model = self.models.get(lat_tag)
        cond = self.condition(sources)
        latent = tta_sample(
            cond, tta_k if tta_k is not None else self.tta_k,
            self.denoiser, self.schedule, self.whitening,
            steps=steps if steps is not None else self.steps,
            rng=seed, laterality=lat_tag,
        )
        mesh = decode_mesh(latent, model, ref=self.reference)
        digest = hashlib.sha256(np.ascontiguousarray(latent.alpha).tobytes()).hexdigest()
        return GenerationResult(mesh, q_value(mesh), latent, seed, digest)
