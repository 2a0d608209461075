"""Core geometry value types.

All coordinates are millimetres. Values are immutable after construction
(arrays are marked read-only) and therefore safe to share across threads.

Slice plane conventions for a grid with axes (x, y, z):

* ``sagittal``  slices fix x; pixels are indexed ``[y, z]``
* ``coronal``   slices fix y; pixels are indexed ``[x, z]``
* ``axial``     slices fix z; pixels are indexed ``[x, y]``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..validation import check_points

PLANES = ("sagittal", "coronal", "axial")

# grid axis sliced by each plane
PLANE_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SliceMask:
    """Binary 2D mask of one grid slice."""

    plane: str
    index: int
    pixels: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        if self.plane not in PLANES:
            raise ValueError(f"unknown plane {self.plane!r}")
        if self.index < 0:
            raise ValueError("slice index must be >= 0")
        if self.spacing <= 0:
            raise ValueError("spacing must be > 0")
        px = np.asarray(self.pixels, dtype=bool)
        if px.ndim != 2:
            raise ValueError("pixels must be 2D")
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def area(self) -> int:
        return int(self.pixels.sum())

    def with_pixels(self, pixels: np.ndarray) -> "SliceMask":
        return SliceMask(self.plane, self.index, pixels, self.spacing)

    def content_key(self) -> bytes:
        """Order-independent identity of the pixel set (for tie-breaks)."""
        return np.packbits(self.pixels).tobytes()


@dataclass(frozen=True)
class MaskProposal:
    """Candidate segmentation mask for one slice, with an optional score."""

    mask: SliceMask
    score: Optional[float] = None

    def __post_init__(self):
        if self.mask.area == 0:
            raise ValueError("proposal mask must have a non-empty pixel set")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError("score must be in [0, 1]")


@dataclass(frozen=True)
class VoxelGrid:
    """Binary occupancy volume at fixed isotropic spacing.

    ``origin`` is the position (mm) of the centre of voxel (0, 0, 0).
    """

    dims: tuple
    spacing: float
    origin: np.ndarray
    occupancy: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be three positive counts, got {self.dims}")
        if self.spacing <= 0:
            raise ValueError("spacing must be > 0")
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.shape != dims:
            raise ValueError(f"occupancy shape {occ.shape} != dims {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", _freeze(origin))
        object.__setattr__(self, "occupancy", _freeze(occ))

    @classmethod
    def empty(cls, dims, spacing: float = 1.0, origin=(0.0, 0.0, 0.0)) -> "VoxelGrid":
        return cls(tuple(dims), spacing, np.asarray(origin, float), np.zeros(tuple(int(d) for d in dims), bool))

    @property
    def n_occupied(self) -> int:
        return int(self.occupancy.sum())

    def voxel_volume(self) -> float:
        return float(self.spacing**3)

    def slice_mask(self, plane: str, index: int) -> SliceMask:
        axis = PLANE_AXIS[plane]
        if not (0 <= index < self.dims[axis]):
            raise IndexError(f"{plane} index {index} out of range {self.dims[axis]}")
        pixels = np.take(self.occupancy, index, axis=axis)
        return SliceMask(plane, index, pixels, self.spacing)

    def slice_stack(self, plane: str) -> list:
        axis = PLANE_AXIS[plane]
        return [self.slice_mask(plane, i) for i in range(self.dims[axis])]


@dataclass(frozen=True)
class TriangleMesh:
    """Triangle surface in mm coordinates.

    ``frame`` tags the pose convention ("canonical" = optical axis +z toward
    the posterior pole); metric code that needs a registered pose checks it.
    """

    vertices: np.ndarray
    faces: np.ndarray
    laterality: Optional[str] = None
    frame: Optional[str] = None

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise ValueError("face indices out of range")
        if self.laterality is not None and self.laterality not in ("OD", "OS"):
            raise ValueError("laterality must be 'OD' or 'OS'")
        object.__setattr__(self, "vertices", _freeze(verts))
        object.__setattr__(self, "faces", _freeze(faces))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return self.n_faces == 0

    def with_vertices(self, vertices: np.ndarray, **tags) -> "TriangleMesh":
        return TriangleMesh(
            vertices,
            self.faces,
            laterality=tags.get("laterality", self.laterality),
            frame=tags.get("frame", self.frame),
        )

    def tagged(self, laterality=None, frame=None) -> "TriangleMesh":
        return TriangleMesh(
            self.vertices,
            self.faces,
            laterality=laterality if laterality is not None else self.laterality,
            frame=frame if frame is not None else self.frame,
        )

    def transformed(self, rotation=None, translation=None, scale: float = 1.0) -> "TriangleMesh":
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation, float).T
        if translation is not None:
            v = v + np.asarray(translation, float)
        return self.with_vertices(v)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def point_cloud(self) -> "PointCloud":
        return PointCloud(self.vertices)

    def bounds(self) -> np.ndarray:
        """(2, 3) array of [min; max] vertex coordinates."""
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])


@dataclass(frozen=True)
class PointCloud:
    """Sampled point set in mm."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _freeze(check_points(self.points, "points")))

    def __len__(self) -> int:
        return len(self.points)
