"""Checkpoint file: JSON header line + raw float32 weight blobs."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from ..conditioning import LateralityTable
from .model import architecture_hash, denoiser_from_config
from .schedule import DiffusionSchedule
from .train import TrainConfig
from .whitening import LatentWhitening

_MAGIC = "eyetwin-ddpm"


class CheckpointError(ValueError):
    """Unreadable, truncated, or architecture-mismatched checkpoint."""


def save_checkpoint(path, denoiser, sched: DiffusionSchedule,
                    whitening: LatentWhitening, config: TrainConfig,
                    table: LateralityTable = None) -> Path:
    path = Path(path)
    state = denoiser.state_dict()
    tensors = [
        {"name": name, "shape": list(t.shape)} for name, t in state.items()
    ]
    header = {
        "format": _MAGIC,
        "version": 1,
        "arch": denoiser.config,
        "arch_hash": architecture_hash(denoiser),
        "config": {k: (str(v) if isinstance(v, Path) else v)
                   for k, v in asdict(config).items()},
        "betas": [float(b) for b in sched.betas[1:]],
        "whitening": {
            "mean": [float(v) for v in whitening.mean],
            "scale": [float(v) for v in whitening.scale],
        },
        "tensors": tensors,
    }
    if table is not None:
        header["laterality_table"] = {"shape": list(table.weights.shape)}
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        for name, _ in ((t["name"], t) for t in tensors):
            f.write(state[name].detach().cpu().numpy().astype("<f4").tobytes())
        if table is not None:
            f.write(np.asarray(table.weights).astype("<f4").tobytes())
    return path


def load_checkpoint(path, expected_hash: str = None):
    """Rebuild (denoiser, schedule, whitening, config, table) from a file.

    The architecture hash stored at save time must match the rebuilt
    network (and expected_hash when the caller pins one). table is None
    for checkpoints trained without condition sources.
    """
    path = Path(path)
    with open(path, "rb") as f:
        try:
            header = json.loads(f.readline().decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable header ({exc})") from None
        if header.get("format") != _MAGIC:
            raise CheckpointError(f"{path} is not a diffusion checkpoint")
        blob = f.read()

    denoiser = denoiser_from_config(header["arch"])
    got_hash = architecture_hash(denoiser)
    if got_hash != header["arch_hash"]:
        raise CheckpointError(
            f"architecture hash mismatch: file {header['arch_hash'][:12]}, "
            f"rebuilt {got_hash[:12]}"
        )
    if expected_hash is not None and expected_hash != got_hash:
        raise CheckpointError(
            f"checkpoint hash {got_hash[:12]} != pinned {expected_hash[:12]}"
        )

    state = denoiser.state_dict()
    offset = 0
    loaded = {}
    for spec in header["tensors"]:
        name, shape = spec["name"], tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path} truncated at tensor {name!r}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(shape)
        loaded[name] = torch.from_numpy(arr.copy())
        offset += nbytes
    table = None
    if "laterality_table" in header:
        shape = tuple(header["laterality_table"]["shape"])
        nbytes = int(np.prod(shape)) * 4
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path} truncated at laterality table")
        table = LateralityTable(
            np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float64)
        )
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    missing = set(state) - set(loaded)
    if missing:
        raise CheckpointError(f"{path} missing tensors: {sorted(missing)}")
    denoiser.load_state_dict(loaded)
    denoiser.eval()

    betas = np.zeros(len(header["betas"]) + 1)
    betas[1:] = header["betas"]
    sched = DiffusionSchedule(betas)
    wh = header["whitening"]
    whitening = LatentWhitening(np.asarray(wh["mean"]), np.asarray(wh["scale"]))
    cfg = header["config"]
    config = TrainConfig(**cfg)
    return denoiser, sched, whitening, config, table
