"""Dense feedforward networks trained by mini-batch gradient descent.

Networks are plain weight/bias collections (``NetworkParameters``) with relu on
hidden layers and an identity output layer. Everything is float64.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Input vector or batch does not match the network's layer dims."""


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass
class NetworkParameters:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self) -> None:
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or any(d <= 0 for d in self.layer_dims):
            raise ValueError(f"invalid layer dims {self.layer_dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias vector per layer required")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[l + 1], self.layer_dims[l])
            if w.shape != shape:
                raise ValueError(f"layer {l}: weight shape {w.shape}, expected {shape}")
            if b.shape != (self.layer_dims[l + 1],):
                raise ValueError(f"layer {l}: bias shape {b.shape}, expected ({shape[0]},)")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l}: non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "NetworkParameters":
        return copy.deepcopy(self)

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def with_flat(self, vec: np.ndarray) -> "NetworkParameters":
        """Return a copy whose parameters are taken from ``vec`` (``flat()`` order)."""
        vec = np.asarray(vec, dtype=np.float64)
        weights, biases, i = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[i:i + w.size].reshape(w.shape))
            i += w.size
            biases.append(vec[i:i + b.size].copy())
            i += b.size
        if i != vec.size:
            raise DimensionError(f"flat vector has {vec.size} entries, expected {i}")
        return NetworkParameters(list(self.layer_dims), weights, biases, self.activation)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.layer_dims, dtype="<i8").tobytes())
        for w, b in zip(self.weights, self.biases):
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return h.hexdigest()

    def same_shape(self, other: "NetworkParameters") -> bool:
        return self.layer_dims == other.layer_dims


@dataclass
class TrainingBatch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.inputs.shape[0] == 0:
            raise ValueError("empty training batch")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets differ in sample count")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def init_random(layer_dims, seed: int) -> NetworkParameters:
    """Glorot-uniform weights, zero biases, reproducible for a fixed seed."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"invalid layer dims {list(layer_dims)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParameters(dims, weights, biases)


def _check_input(params: NetworkParameters, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim or x.ndim not in (1, 2):
        raise DimensionError(f"input shape {x.shape} does not match input dim {params.input_dim}")
    return x


def forward(params: NetworkParameters, x) -> np.ndarray:
    """Action scores for one input vector or a (batch, input_dim) array."""
    h = _check_input(params, x)
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if l < last:
            h = np.maximum(h, 0.0)
    return h


def _forward_cache(params: NetworkParameters, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    last = len(params.weights) - 1
    h = x
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if l < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def backward(params: NetworkParameters, acts: list[np.ndarray], grad_out: np.ndarray):
    """Backpropagate ``grad_out`` (d loss / d output) through cached activations."""
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.weights)
    delta = grad_out
    for l in range(len(params.weights) - 1, -1, -1):
        grads_w[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ params.weights[l]) * (acts[l] > 0.0)
    return grads_w, grads_b


def mse_loss(params: NetworkParameters, batch: TrainingBatch) -> float:
    """Mean over samples and outputs of the squared prediction error."""
    out = forward(params, batch.inputs)
    if out.shape != batch.targets.shape:
        raise DimensionError(f"target shape {batch.targets.shape} does not match output {out.shape}")
    return float(np.mean((out - batch.targets) ** 2))


def mse_gradients(params: NetworkParameters, inputs: np.ndarray, targets: np.ndarray):
    acts = _forward_cache(params, inputs)
    err = acts[-1] - targets
    grad_out = 2.0 * err / err.size
    return backward(params, acts, grad_out)


def sgd_step(params: NetworkParameters, grads_w, grads_b, lr: float) -> None:
    """In-place update; callers own the copy."""
    for w, b, gw, gb in zip(params.weights, params.biases, grads_w, grads_b):
        w -= lr * gw
        b -= lr * gb


class _Adam:
    def __init__(self, params: NetworkParameters, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(a) for a in params.weights + params.biases]
        self.v = [np.zeros_like(a) for a in self.m]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: NetworkParameters, grads_w, grads_b, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(zip(params.weights + params.biases, grads_w + grads_b)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            p -= lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def _fold_standardization(net: NetworkParameters, x_mean, x_std, y_mean, y_std) -> NetworkParameters:
    """Rewrite a network trained on standardized data to act on raw units."""
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    weights[0] = weights[0] / x_std
    biases[0] = biases[0] - weights[0] @ x_mean
    weights[-1] = weights[-1] * y_std
    biases[-1] = biases[-1] * y_std + y_mean
    return NetworkParameters(list(net.layer_dims), weights, biases, net.activation)


def train_mse(
    params: NetworkParameters,
    batch: TrainingBatch,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    seed=0,
    tol: float = 0.0,
    optimizer: str = "sgd",
    schedule: str = "constant",
    standardize: bool = False,
) -> tuple[NetworkParameters, list[float]]:
    """Fit ``params`` to ``batch`` by mini-batch gradient descent on mean squared error.

    Returns a trained copy and the full-batch loss history (raw units): one
    entry before each epoch plus the final loss. Training stops early once
    the full-batch loss is ``<= tol``.

    ``optimizer`` is "sgd" or "adam"; ``schedule`` "constant" or "cosine"
    (lr decays to zero over ``epochs``). With ``standardize`` the fit runs
    on z-scored inputs and targets and the affine maps are folded back into
    the first and last layers, so ``params`` then only supplies the shape
    and initial hidden weights.
    """
    if epochs < 1 or lr <= 0 or batch_size < 1:
        raise ValueError("epochs, lr and batch_size must be positive")
    if optimizer not in ("sgd", "adam") or schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown optimizer/schedule {optimizer!r}/{schedule!r}")
    x = _check_input(params, batch.inputs)
    y = batch.targets
    if y.shape[1] != params.output_dim:
        raise DimensionError(f"targets have dim {y.shape[1]}, network outputs {params.output_dim}")
    net = params.copy()
    if standardize:
        x_mean, x_std = x.mean(axis=0), x.std(axis=0)
        x_std = np.where(x_std > 0, x_std, 1.0)
        y_mean = y.mean(axis=0)
        y_std = float(y.std())
        y_std = y_std if y_std > 0 else 1.0
        x = (x - x_mean) / x_std
        y = (y - y_mean) / y_std
        unscale = y_std * y_std

        def raw(n):
            return _fold_standardization(n, x_mean, x_std, y_mean, y_std)
    else:
        unscale = 1.0

        def raw(n):
            return n.copy()
    work = TrainingBatch(x, y)
    opt = _Adam(net) if optimizer == "adam" else None
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    history: list[float] = []
    for epoch in range(epochs):
        loss = mse_loss(net, work) * unscale
        if not np.isfinite(loss):
            raise DivergenceError(epoch, loss)
        history.append(loss)
        if loss <= tol:
            return raw(net), history
        step_lr = lr if schedule == "constant" else 0.5 * lr * (1.0 + np.cos(np.pi * epoch / epochs))
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            gw, gb = mse_gradients(net, x[idx], y[idx])
            if opt is None:
                sgd_step(net, gw, gb, step_lr)
            else:
                opt.step(net, gw, gb, step_lr)
    loss = mse_loss(net, work) * unscale
    if not np.isfinite(loss):
        raise DivergenceError(epochs, loss)
    history.append(loss)
    return raw(net), history


def gradient_check(params: NetworkParameters, batch: TrainingBatch, h: float = 1e-5, grad_fn=None) -> float:
    """Max relative error between analytic and central-difference MSE gradients.

    ``grad_fn`` replaces the analytic gradient (used to confirm the check
    catches a broken backward pass).
    """
    grad_fn = grad_fn or mse_gradients
    gw, gb = grad_fn(params, batch.inputs, batch.targets)
    analytic = np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in zip(gw, gb)])
    theta = params.flat()
    numeric = np.zeros_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        up = mse_loss(params.with_flat(theta), batch)
        theta[i] = orig - h
        down = mse_loss(params.with_flat(theta), batch)
        theta[i] = orig
        numeric[i] = (up - down) / (2.0 * h)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
