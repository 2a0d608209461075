"""Guidance-vector assembly: image embedding + laterality lookup + Gaussian
label-distribution encoding of the continuous attributes, fused by
element-wise sum into a single 1024-dim condition.

Continuous attributes are discretized over 512 bins each; axial length and
spherical equivalent concatenate to exactly 1024 dims, so every source lives
in the same space and fusion is a plain sum. Dropout replaces the whole
conditioning set with the null condition (all zeros plus a flag), which is
what lets a trained model also sample unconditionally.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Protocol, Tuple

import numpy as np

from .validation import check_finite

__all__ = [
    "AL_CODEC",
    "EMBED_DIM",
    "LATERALITIES",
    "SE_CODEC",
    "ConditionEmbedding",
    "ConditionSources",
    "EyeRecord",
    "FileEmbeddingProvider",
    "LateralityTable",
    "LdlCodec",
    "StubEmbeddingProvider",
    "build_condition",
    "condition_dropout",
    "encode_continuous_conditions",
    "fuse_conditions",
    "laterality_embed",
    "ldl_encode",
    "null_condition",
    "read_records",
    "stub_embedding",
    "write_records",
]

EMBED_DIM = 1024
LATERALITIES = ("OD", "OS")


@dataclass(frozen=True)
class EyeRecord:
    """Per-case clinical metadata row."""

    case_id: str
    laterality: str
    al_mm: float
    se_d: float
    staphyloma: int
    va: Optional[float] = None
    embedding_id: Optional[str] = None

    def __post_init__(self):
        if self.laterality not in LATERALITIES:
            raise ValueError(f"laterality must be one of {LATERALITIES}")
        if not 20.0 <= self.al_mm <= 36.0:
            raise ValueError(f"AL {self.al_mm} mm outside [20, 36]")
        if not -30.0 <= self.se_d <= 5.0:
            raise ValueError(f"SE {self.se_d} D outside [-30, +5]")
        if self.staphyloma not in (0, 1, 2):
            raise ValueError("staphyloma class must be 0, 1 or 2")


@dataclass(frozen=True)
class LdlCodec:
    """Gaussian label-distribution codec over a linear bin grid.

    sigma is measured in bin-index units.
    """

    lo: float
    hi: float
    bins: int = 512
    sigma: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("codec range must satisfy lo < hi")
        if self.bins < 2 or self.sigma <= 0:
            raise ValueError("need bins >= 2 and sigma > 0")

    @property
    def bin_width(self) -> float:
        return (self.hi - self.lo) / (self.bins - 1)

    def bin_centers(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins)

    def fractional_index(self, value: float) -> float:
        return (value - self.lo) / self.bin_width

    def decode_argmax(self, vec: np.ndarray) -> float:
        vec = np.asarray(vec, np.float64)
        if vec.shape != (self.bins,):
            raise ValueError(f"expected a {self.bins}-vector")
        return float(self.bin_centers()[int(np.argmax(vec))])


AL_CODEC = LdlCodec(20.0, 36.0)
SE_CODEC = LdlCodec(-30.0, 5.0)


def ldl_encode(value: float, codec: LdlCodec) -> np.ndarray:
    """Encode a scalar as a normalized Gaussian over bin indices."""
    check_finite(value, "value")
    if not codec.lo <= value <= codec.hi:
        warnings.warn(
            f"value {value} outside codec range [{codec.lo}, {codec.hi}]; clamped",
            stacklevel=2,
        )
        value = min(max(value, codec.lo), codec.hi)
    center = codec.fractional_index(value)
    idx = np.arange(codec.bins, dtype=np.float64)
    weights = np.exp(-((idx - center) ** 2) / (2.0 * codec.sigma**2))
    return weights / weights.sum()


def encode_continuous_conditions(
    al: Optional[float],
    se: Optional[float],
    al_codec: LdlCodec = AL_CODEC,
    se_codec: LdlCodec = SE_CODEC,
) -> Optional[np.ndarray]:
    """Concatenated AL and SE encodings (1024 dims), or None if both absent.

    AL and SE are conditioned jointly; a one-sided value is an error.
    """
    if (al is None) != (se is None):
        raise ValueError("AL and SE must be both present or both absent")
    if al is None:
        return None
    return np.concatenate([ldl_encode(al, al_codec), ldl_encode(se, se_codec)])


@dataclass(frozen=True)
class LateralityTable:
    """Lookup rows for OD, OS and an unknown-laterality token.

    Rows are trainable: the training loop mirrors them into its own
    parameters and writes the updated values back into checkpoints.
    """

    weights: np.ndarray = field(
        default_factory=lambda: _init_laterality_weights(seed=0)
    )

    _ROWS = ("OD", "OS", "none")

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, np.float64))
        if w.shape != (3, EMBED_DIM):
            raise ValueError(f"laterality table must be 3x{EMBED_DIM}")
        check_finite(w, "laterality weights")
        if np.array_equal(w[0], w[1]):
            raise ValueError("OD and OS rows must be distinct")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def row_index(self, lat: Optional[str]) -> int:
        key = "none" if lat is None else lat
        if key not in self._ROWS:
            raise KeyError(f"unknown laterality {lat!r}")
        return self._ROWS.index(key)

    def row(self, lat: Optional[str]) -> np.ndarray:
        return self.weights[self.row_index(lat)]


def _init_laterality_weights(seed: int) -> np.ndarray:
    # sd 1/sqrt(dim) puts each row at unit norm, on par with the image
    # embedding and the label-distribution block; a hotter init would let
    # the laterality rows drown out the other sources in the shared sum.
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(EMBED_DIM), size=(3, EMBED_DIM))


def laterality_embed(lat: str, table: LateralityTable) -> np.ndarray:
    return table.row(lat)


@dataclass(frozen=True)
class ConditionEmbedding:
    """Fused 1024-dim guidance vector with provenance flags."""

    vector: np.ndarray
    present: Tuple[str, ...]

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vector, np.float64))
        if v.shape != (EMBED_DIM,):
            raise ValueError(f"condition vector must have length {EMBED_DIM}")
        check_finite(v, "condition vector")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def is_null(self) -> bool:
        return len(self.present) == 0


def null_condition() -> ConditionEmbedding:
    return ConditionEmbedding(np.zeros(EMBED_DIM), ())


def fuse_conditions(
    cfp: Optional[np.ndarray],
    lat: Optional[np.ndarray],
    cont: Optional[np.ndarray],
) -> ConditionEmbedding:
    """Element-wise sum of the available sources; absent sources are zeros."""
    total = np.zeros(EMBED_DIM)
    present = []
    for name, vec in (("cfp", cfp), ("laterality", lat), ("continuous", cont)):
        if vec is None:
            continue
        vec = np.asarray(vec, np.float64)
        if vec.shape != (EMBED_DIM,):
            raise ValueError(f"{name} vector must have length {EMBED_DIM}")
        total = total + vec
        present.append(name)
    return ConditionEmbedding(total, tuple(present))


@dataclass(frozen=True)
class ConditionSources:
    """Raw per-example conditioning inputs, before fusion.

    Keeping sources separate until fusion lets dropout act on the whole set
    and lets the trainer route laterality through its trainable table.
    """

    cfp: Optional[np.ndarray] = None
    laterality: Optional[str] = None
    al: Optional[float] = None
    se: Optional[float] = None

    @property
    def is_null(self) -> bool:
        return (
            self.cfp is None
            and self.laterality is None
            and self.al is None
            and self.se is None
        )


def condition_dropout(
    sources: ConditionSources,
    p: float,
    rng: np.random.Generator,
    per_source: bool = False,
) -> ConditionSources:
    """With probability p, null out conditioning for this example.

    Default drops the full set at once; per_source drops each source
    independently instead.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must be in [0, 1]")
    if not per_source:
        return ConditionSources() if rng.random() < p else sources
    out = sources
    if rng.random() < p:
        out = replace(out, cfp=None)
    if rng.random() < p:
        out = replace(out, laterality=None)
    if rng.random() < p:
        out = replace(out, al=None, se=None)
    return out


def build_condition(
    sources: ConditionSources,
    table: LateralityTable,
    al_codec: LdlCodec = AL_CODEC,
    se_codec: LdlCodec = SE_CODEC,
    use_null_row: bool = False,
) -> ConditionEmbedding:
    """Fuse one example's sources into the guidance vector.

    use_null_row routes an absent laterality through the table's dedicated
    unknown token instead of zeros (only sensible when other sources are
    present).
    """
    lat_vec = None
    if sources.laterality is not None:
        lat_vec = table.row(sources.laterality)
    elif use_null_row and not sources.is_null:
        lat_vec = table.row(None)
    cont = encode_continuous_conditions(sources.al, sources.se, al_codec, se_codec)
    cond = fuse_conditions(sources.cfp, lat_vec, cont)
    return cond


class EmbeddingProvider(Protocol):
    def get(self, embedding_id: str) -> np.ndarray: ...


_STUB_PROJECTION_SEED = 7741
_STUB_FEATURES = 8


def _stub_projection() -> np.ndarray:
    rng = np.random.default_rng(_STUB_PROJECTION_SEED)
    return rng.normal(0.0, 0.35, size=(EMBED_DIM, _STUB_FEATURES)) / np.sqrt(
        _STUB_FEATURES
    )


def stub_embedding(
    params,
    al_noise: float = 0.35,
    q_noise: float = 0.15,
    out_noise: float = 0.02,
) -> np.ndarray:
    """Deterministic stand-in for a fundus-image encoder.

    Maps the generative parameters of a synthetic eye through a fixed random
    projection. Staphyloma amplitude and position are encoded strongly (they
    are what a fundus photo actually shows); axial length and asphericity
    enter only weakly and with per-case noise, so the metadata pathway is
    the precise carrier of globe size and curvature, as in the clinical
    setting where refraction is measured rather than inferred from a photo.

    The result is L2-normalized, the usual output convention of image
    encoders; it also keeps the fused sources on comparable scales.
    """
    rng = np.random.default_rng(params.seed)
    st, ct = np.sin(params.staph_polar_rad), np.cos(params.staph_polar_rad)
    f = np.array(
        [
            0.6 * np.tanh((params.al_mm - 27.87) / 2.0) + rng.normal(0.0, al_noise),
            0.8 * (params.q_target + 0.19) + rng.normal(0.0, q_noise),
            params.staph_amp_mm / 2.2,
            params.staph_amp_mm * st * np.cos(params.staph_azimuth_rad),
            params.staph_amp_mm * st * np.sin(params.staph_azimuth_rad),
            params.staph_amp_mm * ct,
            1.0 if params.staph_class == 1 else 0.0,
            1.0 if params.staph_class == 2 else 0.0,
        ]
    )
    vec = _stub_projection() @ f + rng.normal(0.0, out_noise, size=EMBED_DIM)
    vec /= np.linalg.norm(vec)
    return vec.astype(np.float32)


class StubEmbeddingProvider:
    """Serves stub embeddings straight from a parameter table."""

    def __init__(self, params_by_id: Mapping[str, object]):
        self._params = dict(params_by_id)

    def get(self, embedding_id: str) -> np.ndarray:
        if embedding_id not in self._params:
            raise KeyError(f"unknown embedding id {embedding_id!r}")
        return stub_embedding(self._params[embedding_id])


class FileEmbeddingProvider:
    """Loads raw little-endian float32 1024-vectors from a directory."""

    def __init__(self, directory, suffix: str = ".emb"):
        self.directory = Path(directory)
        self.suffix = suffix

    def path_for(self, embedding_id: str) -> Path:
        return self.directory / f"{embedding_id}{self.suffix}"

    def get(self, embedding_id: str) -> np.ndarray:
        path = self.path_for(embedding_id)
        if not path.is_file():
            raise KeyError(f"no embedding file for id {embedding_id!r}")
        vec = np.frombuffer(path.read_bytes(), dtype="<f4")
        if vec.shape != (EMBED_DIM,):
            raise ValueError(f"{path} does not hold a {EMBED_DIM}-vector")
        return vec.copy()

    def put(self, embedding_id: str, vec: np.ndarray) -> Path:
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (EMBED_DIM,):
            raise ValueError(f"embedding must have length {EMBED_DIM}")
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path_for(embedding_id)
        path.write_bytes(vec.tobytes())
        return path


_CSV_HEADER = ["case_id", "laterality", "AL_mm", "SE_D", "VA", "staphyloma", "embedding_file"]


def write_records(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for r in records:
            writer.writerow(
                [
                    r.case_id,
                    r.laterality,
                    repr(r.al_mm),
                    repr(r.se_d),
                    "" if r.va is None else repr(r.va),
                    r.staphyloma,
                    "" if r.embedding_id is None else f"{r.embedding_id}.emb",
                ]
            )


def read_records(path) -> list:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _CSV_HEADER:
            raise ValueError(f"unexpected manifest header {header}")
        for row in reader:
            case_id, lat, al, se, va, staph, emb = row
            records.append(
                EyeRecord(
                    case_id=case_id,
                    laterality=lat,
                    al_mm=float(al),
                    se_d=float(se),
                    staphyloma=int(staph),
                    va=float(va) if va else None,
                    embedding_id=emb.removesuffix(".emb") if emb else None,
                )
            )
    return records
