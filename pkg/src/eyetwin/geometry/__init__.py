"""Mesh/voxel data types, mask post-processing, isosurface extraction and
mesh refinement."""

from .types import (
    PLANES,
    MaskProposal,
    PointCloud,
    SliceMask,
    TriangleMesh,
    VoxelGrid,
)
from .masks import (
    GapError,
    assemble_voxel_mask,
    fill_slice_gaps,
    iou,
    largest_component,
    select_eye_masks,
    tophat_clean,
)
from .isosurface import marching_cubes
from .refine import midpoint_subdivide, taubin_smooth
from .measure import (
    edge_face_incidence,
    euler_characteristic,
    is_watertight,
    mesh_centroid,
    mesh_volume,
)
from .io import (
    load_mask_stack,
    load_mesh_ply,
    load_voxel_grid,
    mesh_ply_bytes,
    save_mask_stack,
    save_mesh_obj,
    save_mesh_ply,
    save_voxel_grid,
)

__all__ = [
    "PLANES",
    "MaskProposal",
    "PointCloud",
    "SliceMask",
    "TriangleMesh",
    "VoxelGrid",
    "GapError",
    "assemble_voxel_mask",
    "fill_slice_gaps",
    "iou",
    "largest_component",
    "select_eye_masks",
    "tophat_clean",
    "marching_cubes",
    "midpoint_subdivide",
    "taubin_smooth",
    "edge_face_incidence",
    "euler_characteristic",
    "is_watertight",
    "mesh_centroid",
    "mesh_volume",
    "load_mask_stack",
    "load_mesh_ply",
    "load_voxel_grid",
    "mesh_ply_bytes",
    "save_mask_stack",
    "save_mesh_obj",
    "save_mesh_ply",
    "save_voxel_grid",
]
