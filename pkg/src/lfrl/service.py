"""HTTP front end for the shared-model registry."""
from __future__ import annotations

import json
from typing import Any

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field, field_validator

from . import __version__
from .cloud.registry import NoPendingUploads, Registry, RegistryError, UploadRejected
from .cloud.serialization import FormatError, doc_to_model
from .fusion import confidence, fuse_labels, memory_weights


class Health(BaseModel):
    status: str = "ok"
    version: str = __version__
    generation: int
    pending: int
    fusing: bool


class SharedModel(BaseModel):
    generation: int
    checksum: str
    model: dict[str, Any] = Field(description="serialized model document")


class UploadRequest(BaseModel):
    model: dict[str, Any]
    robot_id: str = "anonymous"
    env_tag: str = ""


class UploadAccepted(BaseModel):
    upload_id: str
    pending: int


class PendingSummary(BaseModel):
    upload_id: str
    robot_id: str
    env_tag: str
    received_at: str
    checksum: str


class GenerationSummary(BaseModel):
    generation: int
    checksum: str
    n_actors: int | None = None
    holdout_mse: float | None = None
    fidelity_argmax_agreement: float | None = None


class FusionOutcome(BaseModel):
    generation: int
    checksum: str
    report: dict[str, Any]


class ScoresRequest(BaseModel):
    scores: list[list[float]] = Field(description="one row of action scores per actor")

    @field_validator("scores")
    @classmethod
    def _rectangular(cls, v):
        if not v or not v[0]:
            raise ValueError("scores must be a non-empty matrix")
        if len({len(r) for r in v}) != 1:
            raise ValueError("every actor row needs the same number of actions")
        return v


class ScoresResponse(BaseModel):
    confidence: list[float]
    weights: list[float]
    label: list[float]


def _summary(rec) -> GenerationSummary:
    rep = rec.report or {}
    return GenerationSummary(generation=rec.generation, checksum=rec.checksum, n_actors=rep.get("n_actors"),
                             holdout_mse=rep.get("holdout_mse"),
                             fidelity_argmax_agreement=rep.get("fidelity_argmax_agreement"))


def create_app(registry: Registry) -> FastAPI:
    app = FastAPI(title="lfrl cloud", version=__version__)
    app.state.registry = registry

    @app.get("/health", response_model=Health)
    def health():
        st = registry.status()
        return Health(generation=st["generation"], pending=st["pending"], fusing=st["fusing"])

    @app.get("/shared", response_model=SharedModel)
    def shared():
        rec = registry.current()  # one reference read: never a torn model
        return SharedModel(generation=rec.generation, checksum=rec.checksum, model=json.loads(rec.payload))

    @app.get("/generations", response_model=list[GenerationSummary])
    def generations():
        return [_summary(r) for r in registry.history()]

    @app.get("/generations/{generation}/report")
    def generation_report(generation: int) -> dict:
        if not 0 <= generation <= registry.generation:
            raise HTTPException(404, f"no generation {generation}")
        rep = registry.record(generation).report
        if rep is None:
            raise HTTPException(404, f"generation {generation} was not produced by fusion")
        return rep

    @app.post("/uploads", response_model=UploadAccepted, status_code=201)
    def upload(req: UploadRequest):
        try:
            params = doc_to_model(req.model)
        except FormatError as exc:
            raise HTTPException(422, str(exc)) from exc
        try:
            uid = registry.upload(params, req.robot_id, req.env_tag)
        except UploadRejected as exc:
            raise HTTPException(409, str(exc)) from exc
        return UploadAccepted(upload_id=uid, pending=registry.status()["pending"])

    @app.get("/uploads", response_model=list[PendingSummary])
    def pending():
        return [PendingSummary(upload_id=u.upload_id, robot_id=u.robot_id, env_tag=u.env_tag,
                               received_at=u.received_at, checksum=u.params.checksum())
                for u in registry.pending()]

    @app.post("/fusion", response_model=FusionOutcome)
    def fusion():
        try:
            rec = registry.trigger_fusion()
        except NoPendingUploads as exc:
            raise HTTPException(409, str(exc)) from exc
        except RegistryError as exc:
            raise HTTPException(500, str(exc)) from exc
        return FusionOutcome(generation=rec.generation, checksum=rec.checksum, report=rec.report)

    @app.post("/confidence", response_model=ScoresResponse)
    def score_confidence(req: ScoresRequest):
        s = np.asarray(req.scores, dtype=float)
        if not np.all(np.isfinite(s)):
            raise HTTPException(422, "scores must be finite")
        c = confidence(s)
        return ScoresResponse(confidence=c.tolist(), weights=memory_weights(c).tolist(),
                              label=fuse_labels(s).tolist())

    return app
