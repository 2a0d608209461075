"""Slice-mask post-processing: IoU filtering, top-hat cleanup, connectivity
analysis and voxel assembly.

2D connectivity is 4-connected throughout (3D is 6-connected elsewhere).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .types import PLANE_AXIS, MaskProposal, SliceMask, VoxelGrid

__all__ = [
    "GapError",
    "MaskSelection",
    "assemble_voxel_mask",
    "fill_slice_gaps",
    "iou",
    "largest_component",
    "select_eye_masks",
    "tophat_clean",
]

# 4-connectivity for 2D labeling
_STRUCTURE_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool)


class GapError(RuntimeError):
    """Too many consecutive slices without a surviving mask."""


def iou(a: SliceMask, b: SliceMask) -> float:
    """Intersection over union of two same-plane, same-shape masks.

    Empty union returns 0.0 by convention.
    """
    if a.plane != b.plane:
        raise ValueError(f"plane mismatch: {a.plane} vs {b.plane}")
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"shape mismatch: {a.pixels.shape} vs {b.pixels.shape}")
    inter = np.logical_and(a.pixels, b.pixels).sum()
    union = np.logical_or(a.pixels, b.pixels).sum()
    if union == 0:
        return 0.0
    return float(inter) / float(union)


def disc_element(radius: int) -> np.ndarray:
    """Disc structuring element: x^2 + y^2 <= radius^2."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx * xx + yy * yy) <= r * r


def tophat_clean(m: SliceMask, radius: int = 2) -> SliceMask:
    """Morphological opening with a disc: removes components smaller than
    the structuring element."""
    element = disc_element(radius)
    opened = ndimage.binary_opening(m.pixels, structure=element)
    return m.with_pixels(opened)


def largest_component(m: SliceMask) -> SliceMask:
    """Keep only the largest 4-connected component.

    Size ties are broken by the component containing the lowest (row, col)
    pixel in lexicographic order.
    """
    labels, n = ndimage.label(m.pixels, structure=_STRUCTURE_4)
    if n == 0:
        return m.with_pixels(np.zeros_like(m.pixels))
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    best = np.flatnonzero(sizes == sizes.max()) + 1
    if len(best) > 1:
        # labels are assigned in raster order, so the smallest label among the
        # tied components is the one seeded at the lowest (row, col)
        winner = int(best.min())
    else:
        winner = int(best[0])
    return m.with_pixels(labels == winner)


def _mask_mm_bbox(m: SliceMask, origin) -> Tuple[np.ndarray, np.ndarray]:
    """3D mm bounding box of the set pixels of one slice."""
    rows, cols = np.nonzero(m.pixels)
    axis = PLANE_AXIS[m.plane]
    in_plane = [i for i in range(3) if i != axis]
    lo = np.empty(3)
    hi = np.empty(3)
    lo[axis] = hi[axis] = origin[axis] + m.index * m.spacing
    lo[in_plane[0]] = origin[in_plane[0]] + rows.min() * m.spacing
    hi[in_plane[0]] = origin[in_plane[0]] + rows.max() * m.spacing
    lo[in_plane[1]] = origin[in_plane[1]] + cols.min() * m.spacing
    hi[in_plane[1]] = origin[in_plane[1]] + cols.max() * m.spacing
    return lo, hi


def _boxes_intersect(lo_a, hi_a, lo_b, hi_b) -> bool:
    return bool(np.all(lo_a <= hi_b) and np.all(lo_b <= hi_a))


@dataclass
class MaskSelection:
    """Result of :func:`select_eye_masks`: surviving masks plus the slices
    that had bbox-intersecting proposals but no survivor."""

    masks: List[SliceMask] = field(default_factory=list)
    gaps: List[Tuple[str, int]] = field(default_factory=list)


def select_eye_masks(
    proposals: Iterable[MaskProposal],
    eye_bbox,
    origin=(0.0, 0.0, 0.0),
    iou_threshold: float = 0.4,
    tophat_radius: int = 2,
) -> MaskSelection:
    """Select the eye mask per slice from raw proposals.

    Candidates intersecting ``eye_bbox`` (pair of mm corner points) are
    cleaned (top-hat opening + largest component); within each orientation
    the proposal with the highest IoU against the orientation's largest
    retained mask is kept per slice, and dropped if that IoU falls below
    ``iou_threshold``. Output is invariant to proposal ordering.
    """
    bbox_lo = np.minimum(*(np.asarray(c, float) for c in eye_bbox))
    bbox_hi = np.maximum(*(np.asarray(c, float) for c in eye_bbox))
    if np.any(bbox_lo >= bbox_hi):
        raise ValueError("eye_bbox must be non-degenerate")
    origin = np.asarray(origin, float)

    # clean candidates per (plane, index)
    cleaned: Dict[Tuple[str, int], List[SliceMask]] = {}
    touched: set = set()
    for prop in proposals:
        m = prop.mask
        lo, hi = _mask_mm_bbox(m, origin)
        if not _boxes_intersect(lo, hi, bbox_lo, bbox_hi):
            continue
        key = (m.plane, m.index)
        touched.add(key)
        c = largest_component(tophat_clean(m, tophat_radius))
        if c.area > 0:
            cleaned.setdefault(key, []).append(c)

    # per orientation, the largest retained mask is the IoU reference
    reference: Dict[str, SliceMask] = {}
    for key in sorted(cleaned):
        for c in cleaned[key]:
            ref = reference.get(c.plane)
            if (
                ref is None
                or c.area > ref.area
                or (c.area == ref.area and (c.index, c.content_key()) < (ref.index, ref.content_key()))
            ):
                reference[c.plane] = c

    result = MaskSelection()
    for key in sorted(touched):
        candidates = cleaned.get(key, [])
        best = None
        best_score = -1.0
        for c in sorted(candidates, key=lambda m: m.content_key()):
            score = iou(c, reference[c.plane])
            if score > best_score:
                best, best_score = c, score
        if best is None or best_score < iou_threshold:
            result.gaps.append(key)
        else:
            result.masks.append(best)
    return result


def assemble_voxel_mask(
    slices: Sequence[SliceMask],
    dims,
    spacing: float,
    origin=(0.0, 0.0, 0.0),
) -> VoxelGrid:
    """Stack same-plane slice masks into a binary voxel grid.

    Missing slice indices become empty planes.
    """
    dims = tuple(int(d) for d in dims)
    occ = np.zeros(dims, bool)
    if slices:
        plane = slices[0].plane
        axis = PLANE_AXIS[plane]
        seen = set()
        for m in slices:
            if m.plane != plane:
                raise ValueError("slices must all come from one plane")
            if m.index in seen:
                raise ValueError(f"duplicate slice index {m.index}")
            seen.add(m.index)
            if not (0 <= m.index < dims[axis]):
                raise IndexError(f"slice index {m.index} out of range for dims {dims}")
            expected = tuple(d for i, d in enumerate(dims) if i != axis)
            if m.pixels.shape != expected:
                raise ValueError(f"slice shape {m.pixels.shape} != grid plane {expected}")
            idx = [slice(None)] * 3
            idx[axis] = m.index
            occ[tuple(idx)] = m.pixels
    return VoxelGrid(dims, spacing, np.asarray(origin, float), occ)


def fill_slice_gaps(slices: Sequence[SliceMask], max_gap: int = 2) -> List[SliceMask]:
    """Fill missing interior slice indices by nearest-slice copy.

    Runs of more than ``max_gap`` consecutive missing slices raise
    :class:`GapError`.
    """
    if not slices:
        return []
    by_index = {m.index: m for m in slices}
    if len(by_index) != len(slices):
        raise ValueError("duplicate slice indices")
    lo, hi = min(by_index), max(by_index)
    missing = [i for i in range(lo, hi + 1) if i not in by_index]
    run = 0
    for i in range(lo, hi + 1):
        run = run + 1 if i in missing else 0
        if run > max_gap:
            raise GapError(f"gap of more than {max_gap} consecutive slices around index {i}")
    out = []
    present = sorted(by_index)
    for i in range(lo, hi + 1):
        if i in by_index:
            out.append(by_index[i])
        else:
            nearest = min(present, key=lambda j: (abs(j - i), j))
            src = by_index[nearest]
            out.append(SliceMask(src.plane, i, src.pixels, src.spacing))
    return out
