"""Registration of eye meshes onto a shared reference topology.

The pipeline canonicalizes pose (corneal-axis alignment + roll from posterior
asymmetry), normalizes transverse scale, refines rigidly with ICP, deforms
the reference non-rigidly onto the target, and re-projects to emit a
fixed-length shape vector in true millimetres.
"""

from .rigid import (
    DegenerateGeometryError,
    LateralityError,
    RigidTransform,
    align_orientation,
    fit_cornea_sphere,
    fit_sphere,
    rigid_icp,
    scale_transverse,
)
from .reference import ReferenceMesh, build_reference, get_reference
from .landmarks import RingNotFoundError, cut_ring, sample_corneal_landmarks
from .nonrigid import NonConvergenceError, nonrigid_icp
from .pipeline import (
    EyeRegistration,
    QualityError,
    ShapeVector,
    load_shapes,
    save_shapes,
    shape_to_mesh,
)

__all__ = [
    "DegenerateGeometryError",
    "EyeRegistration",
    "LateralityError",
    "NonConvergenceError",
    "QualityError",
    "ReferenceMesh",
    "RigidTransform",
    "RingNotFoundError",
    "ShapeVector",
    "align_orientation",
    "build_reference",
    "cut_ring",
    "fit_cornea_sphere",
    "fit_sphere",
    "get_reference",
    "load_shapes",
    "nonrigid_icp",
    "save_shapes",
    "rigid_icp",
    "sample_corneal_landmarks",
    "scale_transverse",
    "shape_to_mesh",
]
