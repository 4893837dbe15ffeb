"""Knowledge fusion: distil several Q-networks into one shared network.

Every actor scores a common set of synthetic observations. Per sample, each
actor's score vector is turned into a normalized-entropy "confidence" c in
[0, 1]; actors get weight proportional to 1 - c, so a decisive actor
dominates a hesitant one on that sample. The weighted sum of score vectors
is the label, and a fresh network is fitted to (sample, label) pairs.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import env as envmod
from .nn import NetworkParameters, TrainingBatch, forward, init_random, mse_loss, train_mse

REPORT_FORMAT_VERSION = 1


class FusionError(ValueError):
    pass


@dataclass
class FusionConfig:
    samples: int = 50_000
    sample_seed: int = 0
    holdout_samples: int = 1_000
    init_seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 200
    lr: float = 1e-2
    batch_size: int = 64
    tolerance: float = 0.0  # stop once the training MSE reaches this; 0 trains to the epoch cap
    optimizer: str = "adam"
    schedule: str = "cosine"
    standardize: bool = True
    world_diagonal: float = math.hypot(4.0, 4.0)
    workers: int = 1
    chunk: int = 8192

    def __post_init__(self) -> None:
        if self.samples < 1:
            raise FusionError("need at least one sample")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# --------------------------------------------------------------- labelling

def confidence(scores) -> np.ndarray | float:
    """Normalized entropy of score vectors along the last axis.

    Rows are turned into probability vectors by ratio normalization. Rows
    with a negative entry are first shifted so their minimum becomes
    1e-6 * (max - min); constant rows count as uniform (c = 1). Returns a
    float for a single vector, otherwise an array over the leading axes.
    """
    s = np.asarray(scores, dtype=np.float64)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    m = s.shape[-1]
    if m < 2:
        raise FusionError("confidence needs at least two action scores")
    lo = s.min(axis=-1, keepdims=True)
    hi = s.max(axis=-1, keepdims=True)
    constant = (hi == lo)[..., 0]
    eps = 1e-6 * (hi - lo)
    shifted = np.where(lo < 0, s - lo + eps, s)
    total = shifted.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = shifted / total
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    c = -plogp.sum(axis=-1) / math.log(m)
    c = np.clip(c, 0.0, 1.0)
    c = np.where(constant, 1.0, c)
    return float(c[0]) if single else c


def memory_weights(confidences) -> np.ndarray:
    """w_j = (1 - c_j) / sum_k (1 - c_k) along the last axis.

    If every actor has c = 1 the weights fall back to uniform 1/n.
    """
    c = np.asarray(confidences, dtype=np.float64)
    certainty = 1.0 - c
    total = certainty.sum(axis=-1, keepdims=True)
    n = c.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(total > 0, certainty / np.where(total > 0, total, 1.0), 1.0 / n)
    return w


def fuse_labels(score_matrix) -> np.ndarray:
    """Labels from scores shaped (n_actors, m) or (K, n_actors, m)."""
    s = np.asarray(score_matrix, dtype=np.float64)
    single = s.ndim == 2
    if single:
        s = s[None]
    if s.ndim != 3:
        raise FusionError(f"score matrix must be (n, m) or (K, n, m), got shape {s.shape}")
    w = memory_weights(confidence(s))
    labels = np.einsum("kn,knm->km", w, s)
    return labels[0] if single else labels


# ------------------------------------------------------------------ samples

def generate_samples(n: int, seed, layout: envmod.InputLayout, features=None) -> np.ndarray:
    """``n`` observation vectors, each feature uniform over its (low, high] range.

    ``features`` optionally maps the raw (n, dim) block to extra derived
    columns that get appended.
    """
    rng = np.random.default_rng(seed)
    u = rng.random((n, layout.dim))
    x = layout.high - u * (layout.high - layout.low)
    if features is not None:
        x = np.concatenate([x, np.asarray(features(x), dtype=np.float64)], axis=1)
    return x


def score_actors(actors: list[NetworkParameters], x: np.ndarray, workers: int = 1, chunk: int = 8192) -> np.ndarray:
    """(K, n, m) scores; chunks are independent, so they may be scored in parallel."""
    k = x.shape[0]
    out = np.empty((k, len(actors), actors[0].output_dim))
    bounds = [(i, min(i + chunk, k)) for i in range(0, k, chunk)]

    def work(b):
        lo, hi = b
        for j, actor in enumerate(actors):
            out[lo:hi, j, :] = forward(actor, x[lo:hi])

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, bounds))
    else:
        for b in bounds:
            work(b)
    if not np.all(np.isfinite(out)):
        raise FusionError("an actor produced non-finite scores")
    return out


def validate_actors(actors) -> None:
    if len(actors) < 1:
        raise FusionError("fusion needs at least one actor")
    d_in, d_out = actors[0].input_dim, actors[0].output_dim
    for i, a in enumerate(actors):
        if a.input_dim != d_in or a.output_dim != d_out:
            raise FusionError(
                f"actor {i} has I/O dims ({a.input_dim}, {a.output_dim}), expected ({d_in}, {d_out})")
    if d_out < 2:
        raise FusionError("actors must score at least two actions")


# -------------------------------------------------------------------- fuse

@dataclass
class FusionReport:
    generation: int | None
    n_actors: int
    samples: int
    label_mse: float
    holdout_mse: float
    fidelity_argmax_agreement: float
    epochs_run: int
    seeds: dict
    actor_checksums: list[str] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"format_version": REPORT_FORMAT_VERSION, "kind": "fusion_report"}
        d.update(asdict(self))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FusionReport":
        if d.get("format_version") != REPORT_FORMAT_VERSION or d.get("kind") != "fusion_report":
            raise FusionError(f"not a supported fusion report (format_version={d.get('format_version')!r})")
        return cls(**{k: v for k, v in d.items() if k not in ("format_version", "kind")})


@dataclass
class FusionResult:
    params: NetworkParameters
    report: FusionReport
    samples: np.ndarray
    labels: np.ndarray


def holdout_set(actors, config: FusionConfig, features=None):
    layout = envmod.raw_layout(config.world_diagonal)
    x = generate_samples(config.holdout_samples, [config.sample_seed, 1], layout, features)
    return x, fuse_labels(score_actors(actors, x, config.workers, config.chunk))


def fidelity(params: NetworkParameters, x: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(MSE, argmax agreement) of ``params`` against ``labels`` on ``x``."""
    pred = forward(params, x)
    mse = float(np.mean((pred - labels) ** 2))
    agree = float(np.mean(np.argmax(pred, axis=1) == np.argmax(labels, axis=1)))
    return mse, agree


def fuse(actors: list[NetworkParameters], config: FusionConfig | None = None,
         generation: int | None = None, features=None) -> FusionResult:
    """Synthesize samples, label them by confidence-weighted scores, and fit a fresh network."""
    config = config or FusionConfig()
    actors = list(actors)
    validate_actors(actors)
    layout = envmod.raw_layout(config.world_diagonal)
    x = generate_samples(config.samples, [config.sample_seed, 0], layout, features)
    if x.shape[1] != actors[0].input_dim:
        raise FusionError(f"samples have {x.shape[1]} features, actors take {actors[0].input_dim}")
    labels = fuse_labels(score_actors(actors, x, config.workers, config.chunk))
    dims = [actors[0].input_dim, *config.hidden, actors[0].output_dim]
    student = init_random(dims, config.init_seed)
    batch = TrainingBatch(x, labels)
    student, history = train_mse(student, batch, config.epochs, config.lr, config.batch_size,
                                 seed=[config.init_seed, 1], tol=config.tolerance, optimizer=config.optimizer,
                                 schedule=config.schedule, standardize=config.standardize)
    hx, hlabels = holdout_set(actors, config, features)
    h_mse, agree = fidelity(student, hx, hlabels)
    report = FusionReport(
        generation=generation,
        n_actors=len(actors),
        samples=config.samples,
        label_mse=history[-1],
        holdout_mse=h_mse,
        fidelity_argmax_agreement=agree,
        epochs_run=len(history) - 1,
        seeds={"sample": config.sample_seed, "init": config.init_seed, "holdout": [config.sample_seed, 1]},
        actor_checksums=[a.checksum() for a in actors],
        loss_history=history,
    )
    return FusionResult(student, report, x, labels)
