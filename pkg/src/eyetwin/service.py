"""HTTP layer for the what-if explorer.

One immutable model snapshot serves every request; generated meshes go
into a bounded LRU keyed by content digest and are streamed back as
binary PLY. Nothing here mutates model state, so identical requests give
byte-identical payloads.
"""

from __future__ import annotations

import hashlib
import threading
import time
from collections import OrderedDict
from typing import List, Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response
from pydantic import BaseModel, Field

from . import __version__
from .conditioning import EMBED_DIM
from .counterfactual import MetaPoint, counterfactual_generate
from .geometry import mesh_ply_bytes
from .stack import ModelStack


class GenerateRequest(BaseModel):
    al: Optional[float] = Field(None, description="axial length, mm")
    se: Optional[float] = Field(None, description="spherical equivalent, D")
    laterality: Optional[str] = None
    cfp_id: Optional[str] = None
    unconditional: bool = False
    tta_k: Optional[int] = Field(None, ge=1, le=64)
    seed: int = 0

    def has_condition(self) -> bool:
        return any(v is not None for v in (self.al, self.se, self.laterality, self.cfp_id))


class GenerateResponse(BaseModel):
    mesh_id: str
    q: float
    rx: float
    rz: float
    latent_digest: str
    seed: int
    checkpoint_hash: str
    timing_ms: float


class CounterfactualPoint(BaseModel):
    al: float
    se: float


class CounterfactualRequest(BaseModel):
    case_id: str
    points: List[CounterfactualPoint]
    seed: int = 0
    tta_k: Optional[int] = Field(None, ge=1, le=64)


class CounterfactualRowOut(BaseModel):
    al: float
    se: float
    q: float
    is_factual: bool
    mesh_id: str
    latent_digest: str


class CounterfactualResponse(BaseModel):
    rows: List[CounterfactualRowOut]
    embedding_digest: str
    seed: int
    checkpoint_hash: str
    timing_ms: float


class _MeshCache:
    """Digest-keyed LRU of PLY payloads; bounded so the service stays flat."""

    def __init__(self, limit: int):
        self.limit = max(1, int(limit))
        self._store: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def put(self, payload: bytes) -> str:
        key = hashlib.sha256(payload).hexdigest()[:24]
        with self._lock:
            self._store[key] = payload
            self._store.move_to_end(key)
            while len(self._store) > self.limit:
                self._store.popitem(last=False)
        return key

    def get(self, key: str) -> Optional[bytes]:
        with self._lock:
            payload = self._store.get(key)
            if payload is not None:
                self._store.move_to_end(key)
            return payload


def build_app(stack: Optional[ModelStack], cases: Optional[list] = None,
              cors_origins: tuple = ("*",), mesh_cache_size: int = 256,
              workers: int = 2) -> FastAPI:
    """Assemble the service around an already-loaded stack.

    ``stack=None`` builds an app that answers 503 everywhere, covering the
    window where a supervisor starts HTTP before the checkpoint is ready.
    ``cases`` is the cohort metadata listing served to the case picker.
    """
    app = FastAPI(title="eyetwin", version=__version__)
    app.add_middleware(
        CORSMiddleware, allow_origins=list(cors_origins),
        allow_methods=["*"], allow_headers=["*"],
    )
    cache = _MeshCache(mesh_cache_size)
    # bounds concurrent generations; requests queue rather than pile up
    gate = threading.Semaphore(max(1, workers))
    case_rows = list(cases or [])
    case_ids = {row["case_id"] for row in case_rows}

    def ready() -> ModelStack:
        if stack is None:
            raise HTTPException(503, "model is still loading")
        return stack

    @app.get("/model/info")
    def model_info():
        s = ready()
        return {
            "checkpoint_hash": s.checkpoint_hash,
            "latent_dim": s.denoiser.latent_dim,
            "embed_dim": EMBED_DIM,
            "lateralities": s.models.lateralities(),
            "default_laterality": s.default_laterality,
            "tta_k": s.tta_k,
            "sample_steps": s.steps,
            "n_cases": len(case_rows),
            "version": __version__,
        }

    @app.get("/cohort/cases")
    def cohort_cases():
        ready()
        return {"cases": case_rows}

    @app.get("/mesh/{mesh_id}")
    def get_mesh(mesh_id: str):
        ready()
        payload = cache.get(mesh_id)
        if payload is None:
            raise HTTPException(404, f"unknown mesh {mesh_id!r}")
        return Response(payload, media_type="application/octet-stream")

    @app.post("/generate", response_model=GenerateResponse)
    def generate(req: GenerateRequest):
        s = ready()
        if not req.unconditional and not req.has_condition():
            raise HTTPException(
                400, "no conditioning given; set unconditional=true for a free draw"
            )
        if (req.al is None) != (req.se is None):
            raise HTTPException(400, "AL and SE must be given together")
        if req.cfp_id is not None and req.cfp_id not in case_ids:
            raise HTTPException(404, f"unknown case {req.cfp_id!r}")
        t0 = time.perf_counter()
        try:
            sources = s.sources_for(
                al=req.al, se=req.se, laterality=req.laterality, cfp_id=req.cfp_id,
            )
            with gate:
                result = s.generate(sources, seed=req.seed, tta_k=req.tta_k)
        except (ValueError, KeyError) as exc:
            raise HTTPException(400, str(exc))
        mesh_id = cache.put(mesh_ply_bytes(result.mesh))
        return GenerateResponse(
            mesh_id=mesh_id,
            q=result.q.q, rx=result.q.rx, rz=result.q.rz,
            latent_digest=result.latent_digest,
            seed=result.seed,
            checkpoint_hash=s.checkpoint_hash,
            timing_ms=(time.perf_counter() - t0) * 1e3,
        )

    @app.post("/counterfactual", response_model=CounterfactualResponse)
    def counterfactual(req: CounterfactualRequest):
        s = ready()
        factual = next((r for r in case_rows if r["case_id"] == req.case_id), None)
        if factual is None:
            raise HTTPException(404, f"unknown case {req.case_id!r}")
        if not req.points:
            raise HTTPException(400, "at least one counterfactual point required")
        t0 = time.perf_counter()
        try:
            points = [MetaPoint(p.al, p.se) for p in req.points]
            record = _as_record(factual)
            with gate:
                report = counterfactual_generate(
                    req.case_id, record, points, s,
                    seed=req.seed, tta_k=req.tta_k,
                )
        except (ValueError, KeyError) as exc:
            raise HTTPException(400, str(exc))
        rows = [
            CounterfactualRowOut(
                al=row.meta.al, se=row.meta.se, q=row.q.q,
                is_factual=row.is_factual,
                mesh_id=cache.put(mesh_ply_bytes(row.mesh)),
                latent_digest=row.latent_digest,
            )
            for row in report.rows
        ]
        return CounterfactualResponse(
            rows=rows,
            embedding_digest=report.embedding_digest,
            seed=report.seed,
            checkpoint_hash=s.checkpoint_hash,
            timing_ms=(time.perf_counter() - t0) * 1e3,
        )

    return app


def _as_record(row: dict):
    from .conditioning import EyeRecord

    return EyeRecord(
        case_id=row["case_id"], laterality=row["laterality"],
        al_mm=row["al_mm"], se_d=row["se_d"],
        staphyloma=row.get("staphyloma", 0), va=row.get("va"),
        embedding_id=row.get("embedding_id", row["case_id"]),
    )


def case_listing(records) -> list:
    """Rows for /cohort/cases from EyeRecord objects."""
    return [
        {
            "case_id": r.case_id,
            "laterality": r.laterality,
            "al_mm": r.al_mm,
            "se_d": r.se_d,
            "staphyloma": r.staphyloma,
            "va": r.va,
            "embedding_id": r.embedding_id,
        }
        for r in records
    ]
