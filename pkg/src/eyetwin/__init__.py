"""Desk-scale eye-globe digital twin toolkit.

Subpackages cover the full pipeline: voxel-mask post-processing and mesh
reconstruction (:mod:`eyetwin.geometry`), registration to a fixed-topology
reference (:mod:`eyetwin.registration`), the PCA shape space
(:mod:`eyetwin.morphable`), shape metrics (:mod:`eyetwin.metrics`), condition
encoding (:mod:`eyetwin.conditioning`), the conditional latent diffusion model
(:mod:`eyetwin.diffusion`), the synthetic cohort generator
(:mod:`eyetwin.cohort`) and counterfactual sampling
(:mod:`eyetwin.counterfactual`).
"""

__version__ = "0.1.0"
