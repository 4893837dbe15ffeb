"""Seeding a new agent from a shared model.

Two modes: copy the shared parameters as the agent's initial Q-network
(``warm_start``), or keep the shared model frozen and append its action
scores to every raw observation (``feature_extractor``). In the second mode
the agent's network reads 12 raw features at indices 0..11 followed by the
shared model's 5 scores at indices 12..16; the shared model itself only ever
sees the raw 12.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import DimensionError, NetworkParameters, forward

MODES = ("none", "warm_start", "feature_extractor")


class TransferError(ValueError):
    pass


def warm_start(shared: NetworkParameters, agent_dims=None) -> NetworkParameters:
    """Deep copy of ``shared``; ``agent_dims`` (if given) must match layer by layer."""
    if agent_dims is not None:
        agent_dims = [int(d) for d in agent_dims]
        if len(agent_dims) != len(shared.layer_dims):
            raise TransferError(
                f"layer count differs: shared {shared.layer_dims} vs agent {agent_dims}")
        for l, (a, b) in enumerate(zip(shared.layer_dims, agent_dims)):
            if a != b:
                raise TransferError(f"layer {l} differs: shared has {a} units, agent expects {b}")
    return shared.copy()


def augmented_dim(shared: NetworkParameters) -> int:
    return shared.input_dim + shared.output_dim


def augment_observation(shared: NetworkParameters, raw) -> np.ndarray:
    """``raw ++ forward(shared, raw)`` for one vector or a batch of rows."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != shared.input_dim:
        raise DimensionError(f"raw observation has {raw.shape[-1]} features, shared model takes {shared.input_dim}")
    return np.concatenate([raw, forward(shared, raw)], axis=-1)


@dataclass
class FeatureExtractor:
    """Frozen shared model used to widen observations.

    The parameters are copied on construction, so the caller's model cannot
    be altered through the agent's training run.
    """

    shared: NetworkParameters

    def __post_init__(self) -> None:
        self.shared = self.shared.copy()
        for w in self.shared.weights + self.shared.biases:
            w.flags.writeable = False
        self.checksum = self.shared.checksum()

    @property
    def output_dim(self) -> int:
        return augmented_dim(self.shared)

    def __call__(self, raw) -> np.ndarray:
        return augment_observation(self.shared, raw)

    def check_agent_dims(self, agent_dims) -> None:
        if int(agent_dims[0]) != self.output_dim:
            raise TransferError(
                f"feature-extractor agents need input dim {self.output_dim} "
                f"({self.shared.input_dim} raw + {self.shared.output_dim} scores), got {agent_dims[0]}")
        if int(agent_dims[-1]) != self.shared.output_dim:
            raise TransferError(f"agent output dim {agent_dims[-1]} != shared output dim {self.shared.output_dim}")


@dataclass
class Init:
    """How an agent's Q-network starts: fresh(seed), warm_start(shared) or feature_extractor(shared)."""

    mode: str = "fresh"
    shared: NetworkParameters | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("fresh", "warm_start", "feature_extractor"):
            raise TransferError(f"unknown init mode {self.mode!r}")
        if self.mode != "fresh" and self.shared is None:
            raise TransferError(f"{self.mode} needs a shared model")

    @classmethod
    def fresh(cls, seed: int) -> "Init":
        return cls("fresh", None, seed)

    @classmethod
    def from_flag(cls, transfer: str, shared: NetworkParameters | None, seed: int) -> "Init":
        """Map the ``transfer = warm_start | feature_extractor | none`` flag to an Init."""
        if transfer not in MODES:
            raise TransferError(f"transfer must be one of {MODES}, got {transfer!r}")
        if transfer == "none" or shared is None:
            return cls.fresh(seed)
        return cls(transfer, shared, seed)
