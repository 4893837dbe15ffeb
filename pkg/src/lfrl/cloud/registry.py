"""Shared-model registry: generations, pending uploads, fusion installs.

Downloads read ``_current`` without taking a lock; the record it points to
is immutable and the reference is swapped in one assignment, so a reader
sees either the old or the new generation in full. Fusion runs under its
own lock, one job at a time; uploads that arrive while a job runs stay
queued for the next batch.
"""
from __future__ import annotations

import itertools
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .. import env as envmod
from ..fusion import FusionConfig, FusionError, FusionReport, fuse
from ..nn import NetworkParameters, init_random
from .serialization import atomic_write, canonical_json, doc_to_model, dumps_model, loads_model

log = logging.getLogger(__name__)

DEFAULT_DIMS = (envmod.OBS_DIM, 64, 64, envmod.N_ACTIONS)
_MODEL_RE = re.compile(r"^shared-gen-(\d+)\.model$")


class RegistryError(RuntimeError):
    code = "registry"


class NoPendingUploads(RegistryError):
    code = "no_pending"


class UploadRejected(RegistryError):
    code = "bad_upload"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


@dataclass(frozen=True)
class SharedModelRecord:
    generation: int
    params: NetworkParameters
    payload: bytes  # canonical serialized model document
    report: dict | None = None
    created_at: str = ""

    @property
    def checksum(self) -> str:
        return self.params.checksum()


@dataclass(frozen=True)
class PendingUpload:
    upload_id: str
    params: NetworkParameters
    robot_id: str
    env_tag: str
    received_at: str
    payload: bytes


@dataclass
class FusionPolicy:
    """Fuse after every ``every`` uploads, and/or every ``interval_s`` seconds."""

    every: int | None = 1
    interval_s: float | None = None

    def due(self, pending: int) -> bool:
        return self.every is not None and pending >= self.every


class Registry:
    def __init__(self, model_dir=None, *, seed: int = 0, layer_dims=DEFAULT_DIMS,
                 fusion_config: FusionConfig | None = None, policy: FusionPolicy | None = None,
                 fuse_initial: bool = False, initial: NetworkParameters | None = None):
        self.model_dir = Path(model_dir) if model_dir is not None else None
        self.seed = seed
        self.fusion_config = fusion_config or FusionConfig()
        self.policy = policy or FusionPolicy()
        # generation 0 is an untrained random network; by default it is left out of
        # the first fusion so that generation 1 carries only trained knowledge
        self.fuse_initial = fuse_initial
        self.layer_dims = list(layer_dims)
        self._history: list[SharedModelRecord] = []
        self._pending: list[PendingUpload] = []
        self._queue_lock = threading.Lock()
        self._fusion_lock = threading.Lock()
        self._ids = itertools.count(1)
        self.fusing = False
        self.last_error: str | None = None
        if self.model_dir is not None and self._load_dir():
            return
        params = initial if initial is not None else init_random(self.layer_dims, seed)
        self._install(params, None)

    # ---------------------------------------------------------- persistence
    def _model_path(self, g: int) -> Path:
        return self.model_dir / f"shared-gen-{g}.model"

    def _report_path(self, g: int) -> Path:
        return self.model_dir / f"shared-gen-{g}.report.json"

    def _pending_dir(self) -> Path:
        return self.model_dir / "pending"

    def _load_dir(self) -> bool:
        if not self.model_dir.is_dir():
            return False
        gens = sorted(int(m.group(1)) for p in self.model_dir.iterdir() if (m := _MODEL_RE.match(p.name)))
        if not gens:
            return False
        if gens != list(range(len(gens))):
            raise RegistryError(f"{self.model_dir}: generation files are not contiguous: {gens}")
        for g in gens:
            payload = self._model_path(g).read_bytes()
            params = loads_model(payload)
            report = None
            if self._report_path(g).exists():
                report = json.loads(self._report_path(g).read_text(encoding="utf-8"))
            self._history.append(SharedModelRecord(g, params, payload, report, ""))
        self._current = self._history[-1]
        self.layer_dims = list(self._current.params.layer_dims)
        max_id = 0
        if self._pending_dir().is_dir():
            for p in sorted(self._pending_dir().glob("*.json")):
                rec = json.loads(p.read_text(encoding="utf-8"))
                params = doc_to_model(rec["model"])
                up = PendingUpload(rec["upload_id"], params, rec["robot_id"], rec["env_tag"], rec["received_at"],
                                   dumps_model(params))
                self._pending.append(up)
                max_id = max(max_id, int(rec["upload_id"].lstrip("u")))
        self._ids = itertools.count(max_id + 1)
        return True

    def _install(self, params: NetworkParameters, report: dict | None) -> SharedModelRecord:
        g = len(self._history)
        payload = dumps_model(params, generation=g)
        rec = SharedModelRecord(g, params, payload, report, _now())
        if self.model_dir is not None:
            if report is not None:
                atomic_write(self._report_path(g), canonical_json(report))
            atomic_write(self._model_path(g), payload)
        self._history.append(rec)
        self._current = rec  # single reference swap: the atomic install
        return rec

    # ------------------------------------------------------------- reading
    @property
    def generation(self) -> int:
        return self._current.generation

    def current(self) -> SharedModelRecord:
        return self._current

    def record(self, generation: int) -> SharedModelRecord:
        return self._history[generation]

    def history(self) -> list[SharedModelRecord]:
        return list(self._history)

    def pending(self) -> list[PendingUpload]:
        with self._queue_lock:
            return list(self._pending)

    def status(self) -> dict:
        with self._queue_lock:
            n = len(self._pending)
        return {"generation": self.generation, "pending": n, "fusing": self.fusing,
                "checksum": self._current.checksum, "last_error": self.last_error}

    # ------------------------------------------------------------- writing
    def upload(self, params: NetworkParameters, robot_id: str = "anonymous", env_tag: str = "") -> str:
        cur = self._current.params
        if params.input_dim != cur.input_dim or params.output_dim != cur.output_dim:
            raise UploadRejected(
                f"uploaded model has I/O dims ({params.input_dim}, {params.output_dim}); "
                f"fusion needs ({cur.input_dim}, {cur.output_dim})")
        payload = dumps_model(params)
        with self._queue_lock:
            upload_id = f"u{next(self._ids):08d}"
            up = PendingUpload(upload_id, params, str(robot_id), str(env_tag), _now(), payload)
            if self.model_dir is not None:
                rec = {"upload_id": upload_id, "robot_id": up.robot_id, "env_tag": up.env_tag,
                       "received_at": up.received_at, "model": json.loads(payload)}
                atomic_write(self._pending_dir() / f"{upload_id}.json", canonical_json(rec))
            self._pending.append(up)
        return upload_id

    def fusion_due(self) -> bool:
        with self._queue_lock:
            return self.policy.due(len(self._pending))

    def trigger_fusion(self, config: FusionConfig | None = None) -> SharedModelRecord:
        """Fuse all pending uploads with the current shared model into generation g+1."""
        with self._fusion_lock:
            with self._queue_lock:
                batch = list(self._pending)
            if not batch:
                raise NoPendingUploads("fusion needs at least one pending upload")
            self.fusing = True
            try:
                base = self._current
                g = base.generation + 1
                actors = [u.params for u in batch]
                if base.generation > 0 or self.fuse_initial:
                    actors.append(base.params)
                cfg = config or self.fusion_config
                cfg = replace(cfg, sample_seed=cfg.sample_seed + 1000 * g, init_seed=cfg.init_seed + 1000 * g)
                try:
                    result = fuse(actors, cfg, generation=g)
                except (FusionError, ArithmeticError, ValueError, RuntimeError) as exc:
                    self.last_error = f"fusion for generation {g} failed: {exc}"
                    log.error(self.last_error)
                    raise RegistryError(self.last_error) from exc
                report = result.report.to_dict()
                report["uploads"] = [{"upload_id": u.upload_id, "robot_id": u.robot_id, "env_tag": u.env_tag}
                                     for u in batch]
                report["includes_previous_shared"] = len(actors) > len(batch)
                report["fusion_config"] = cfg.to_dict()
                rec = self._install(result.params, report)
                done = {u.upload_id for u in batch}
                with self._queue_lock:
                    self._pending = [u for u in self._pending if u.upload_id not in done]
                if self.model_dir is not None:
                    for uid in done:
                        p = self._pending_dir() / f"{uid}.json"
                        if p.exists():
                            p.unlink()
                self.last_error = None
                return rec
            finally:
                self.fusing = False

    def report(self, generation: int) -> FusionReport | None:
        rep = self._history[generation].report
        if rep is None:
            return None
        return FusionReport.from_dict({k: v for k, v in rep.items()
                                       if k not in ("uploads", "includes_previous_shared", "fusion_config")})
