"""Geometry I/O: PLY/OBJ meshes, voxel grids, PNG slice-mask stacks.

PLY meshes are written with float32 vertices (mm) and uint32 face index
triples, in ASCII or binary little-endian form. Voxel grids are a JSON
header / raw u8 payload file pair (``<name>.voxhdr.json`` / ``<name>.vox``)
with x-fastest voxel order and 0/255 values.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import List, Tuple

import numpy as np
from PIL import Image

from .types import PLANES, SliceMask, TriangleMesh, VoxelGrid

__all__ = [
    "load_mask_stack",
    "load_mesh_ply",
    "load_voxel_grid",
    "save_mask_stack",
    "save_mesh_obj",
    "save_mesh_ply",
    "save_voxel_grid",
    "mesh_ply_bytes",
]

_TAG_KEYS = ("laterality", "frame")


def mesh_ply_bytes(m: TriangleMesh, binary: bool = True) -> bytes:
    """Serialize a mesh to PLY bytes."""
    fmt = "binary_little_endian" if binary else "ascii"
    header = [
        "ply",
        f"format {fmt} 1.0",
    ]
    for key in _TAG_KEYS:
        value = getattr(m, key)
        if value is not None:
            header.append(f"comment {key} {value}")
    header += [
        f"element vertex {m.n_vertices}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {m.n_faces}",
        "property list uchar uint vertex_indices",
        "end_header",
    ]
    head = ("\n".join(header) + "\n").encode("ascii")
    verts = m.vertices.astype("<f4")
    faces = m.faces.astype("<u4")
    if binary:
        face_rec = np.empty(m.n_faces, dtype=[("n", "u1"), ("idx", "<u4", (3,))])
        face_rec["n"] = 3
        face_rec["idx"] = faces
        return head + verts.tobytes() + face_rec.tobytes()
    lines = [f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in verts]
    lines += [f"3 {f[0]} {f[1]} {f[2]}" for f in faces]
    return head + ("\n".join(lines) + "\n").encode("ascii") if lines else head


def save_mesh_ply(m: TriangleMesh, path, binary: bool = True) -> Path:
    path = Path(path)
    path.write_bytes(mesh_ply_bytes(m, binary=binary))
    return path


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError("not a PLY file")
    header = data[: end + len(b"end_header\n")].decode("ascii")
    body = data[end + len(b"end_header\n") :]
    fmt = None
    n_vertex = n_face = 0
    tags = {}
    current = None
    for line in header.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "comment" and len(parts) >= 3 and parts[1] in _TAG_KEYS:
            tags[parts[1]] = parts[2]
        elif parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vertex = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported PLY format {fmt!r}")
    return fmt, n_vertex, n_face, tags, body


def load_mesh_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    fmt, n_vertex, n_face, tags, body = _parse_ply_header(data)
    if fmt == "binary_little_endian":
        vbytes = n_vertex * 12
        verts = np.frombuffer(body[:vbytes], dtype="<f4").reshape(n_vertex, 3)
        face_rec = np.frombuffer(
            body[vbytes : vbytes + n_face * 13],
            dtype=[("n", "u1"), ("idx", "<u4", (3,))],
        )
        if face_rec.size and not np.all(face_rec["n"] == 3):
            raise ValueError("only triangle faces are supported")
        faces = face_rec["idx"].astype(np.int64)
    else:
        lines = body.decode("ascii").split("\n")
        verts = np.array(
            [[float(x) for x in lines[i].split()] for i in range(n_vertex)]
        ).reshape(n_vertex, 3)
        faces = np.zeros((n_face, 3), np.int64)
        for i in range(n_face):
            parts = lines[n_vertex + i].split()
            if parts[0] != "3":
                raise ValueError("only triangle faces are supported")
            faces[i] = [int(p) for p in parts[1:4]]
    return TriangleMesh(verts.astype(np.float64), faces, **tags)


def save_mesh_obj(m: TriangleMesh, path) -> Path:
    path = Path(path)
    lines = [f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in m.vertices]
    lines += [f"f {f[0]+1} {f[1]+1} {f[2]+1}" for f in m.faces]
    path.write_text("\n".join(lines) + "\n")
    return path


def save_voxel_grid(g: VoxelGrid, stem) -> Tuple[Path, Path]:
    """Write the ``<stem>.voxhdr.json`` / ``<stem>.vox`` pair."""
    stem = Path(stem)
    header = {
        "dims": list(g.dims),
        "spacing_mm": g.spacing,
        "origin_mm": list(map(float, g.origin)),
        "order": "x-fastest",
    }
    hdr_path = stem.with_suffix(".voxhdr.json")
    vox_path = stem.with_suffix(".vox")
    hdr_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    payload = np.where(g.occupancy, 255, 0).astype(np.uint8)
    vox_path.write_bytes(payload.tobytes(order="F"))
    return hdr_path, vox_path


def load_voxel_grid(stem) -> VoxelGrid:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".voxhdr.json").read_text())
    if header.get("order") != "x-fastest":
        raise ValueError(f"unsupported voxel order {header.get('order')!r}")
    dims = tuple(int(d) for d in header["dims"])
    raw = np.frombuffer(stem.with_suffix(".vox").read_bytes(), dtype=np.uint8)
    if raw.size != dims[0] * dims[1] * dims[2]:
        raise ValueError("voxel payload size does not match dims")
    occ = raw.reshape(dims, order="F") > 127
    return VoxelGrid(dims, float(header["spacing_mm"]), np.asarray(header["origin_mm"], float), occ)


def save_mask_stack(masks: List[SliceMask], directory) -> List[Path]:
    """Write masks as 0/255 PNGs named ``<plane>_<index>.png``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in masks:
        img = Image.fromarray(np.where(m.pixels, 255, 0).astype(np.uint8))
        p = directory / f"{m.plane}_{m.index}.png"
        img.save(p)
        paths.append(p)
    return paths


_MASK_NAME = re.compile(r"^(sagittal|coronal|axial)_(\d+)\.png$")


def load_mask_stack(directory, spacing: float = 1.0) -> List[SliceMask]:
    directory = Path(directory)
    masks = []
    for p in sorted(directory.iterdir()):
        match = _MASK_NAME.match(p.name)
        if not match:
            continue
        pixels = np.asarray(Image.open(p)) > 127
        masks.append(SliceMask(match.group(1), int(match.group(2)), pixels, spacing))
    return masks
