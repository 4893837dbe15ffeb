"""DQN agent: epsilon-greedy exploration, FIFO replay, periodic target sync."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace

from pathlib import Path

import numpy as np

from . import env as envmod
from .nn import NetworkParameters, backward, forward, init_random, sgd_step
from .transfer import FeatureExtractor, Init, warm_start

# nominal control period used to turn step counts into a simulated time axis
TICK_SECONDS = 0.2
LOG_FIELDS = ("episode", "score", "steps", "outcome", "elapsed_s")


class TrainingError(RuntimeError):
    def __init__(self, message: str, episode: int | None = None):
        super().__init__(message if episode is None else f"episode {episode}: {message}")
        self.episode = episode


@dataclass
class DqnConfig:
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_episodes: int = 300
    replay_capacity: int = 50_000
    batch_size: int = 64
    target_sync: int = 500
    lr: float = 1e-3
    max_episodes: int = 800
    score_threshold: float | None = None  # None: use the world's threshold
    window: int = 5
    hidden: tuple[int, ...] = (64, 64)
    learn_start: int = 256
    train_every: int = 1
    grad_clip: float | None = 30.0  # global-norm clip; fused models have large output weights
    seed: int = 0
    env_seed: int | None = None  # first training-episode seed; None derives it from seed
    step_cap: int = envmod.TRAIN_STEP_CAP

    def __post_init__(self) -> None:
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        for name in ("epsilon_decay_episodes", "replay_capacity", "batch_size", "target_sync",
                     "max_episodes", "window", "train_every", "step_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)

    def epsilon(self, episode: int) -> float:
        frac = min(1.0, episode / self.epsilon_decay_episodes)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    def episode_seed(self, episode: int) -> int:
        base = self.env_seed if self.env_seed is not None else 1_000_000 * (self.seed + 1)
        return base + episode

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Transition:
    observation: np.ndarray
    action_index: int
    reward: float
    next_observation: np.ndarray
    terminal: bool


@dataclass
class EpisodeLog:
    episode: int
    score: float
    steps: int
    outcome: str
    elapsed_s: float  # simulated: cumulative steps * TICK_SECONDS
    wall_time: float = field(default=0.0, compare=False)

    def row(self) -> list[str]:
        return [str(self.episode), f"{self.score:.6f}", str(self.steps), self.outcome, f"{self.elapsed_s:.1f}"]


def logs_to_csv(logs: list[EpisodeLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for log in logs:
        w.writerow(log.row())
    return buf.getvalue()


def write_log_csv(logs: list[EpisodeLog], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(logs_to_csv(logs))


def read_log_csv(path) -> list[EpisodeLog]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        missing = set(LOG_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [EpisodeLog(int(r["episode"]), float(r["score"]), int(r["steps"]), r["outcome"],
                           float(r["elapsed_s"])) for r in reader]


class ReplayBuffer:
    """Fixed-capacity FIFO store of transitions held in flat arrays."""

    def __init__(self, capacity: int, obs_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.terminals = np.zeros(capacity, dtype=bool)
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action, reward, next_obs, terminal) -> None:
        i = self._next
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.terminals[i] = terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def oldest_index(self) -> int:
        return self._next if self.size == self.capacity else 0

    def sample(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, self.size, size=n)
        return self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.terminals[idx]


def greedy_action(params: NetworkParameters, x: np.ndarray) -> int:
    """argmax of the action scores; ties go to the lowest index."""
    return int(np.argmax(forward(params, x)))


def epsilon_greedy(params: NetworkParameters, x: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Uniform random action with probability ``epsilon``, else the greedy one."""
    if rng.random() < epsilon:
        return int(rng.integers(envmod.N_ACTIONS))
    q = _q_single(params, x)
    if not np.all(np.isfinite(q)):
        raise TrainingError("non-finite Q-values")
    return int(np.argmax(q))


def _q_single(params: NetworkParameters, x: np.ndarray) -> np.ndarray:
    h = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = w @ h + b
        if l < last:
            h = np.maximum(h, 0.0)
    return h


def bellman_targets(rewards, next_obs, terminals, target: NetworkParameters, gamma: float) -> np.ndarray:
    next_q = forward(target, next_obs).max(axis=1)
    return np.where(terminals, rewards, rewards + gamma * next_q)


def q_update(transitions, online: NetworkParameters, target: NetworkParameters, gamma: float, lr: float,
             grad_clip: float | None = None) -> tuple[NetworkParameters, float]:
    """One SGD step on the squared Bellman error of the taken actions.

    ``transitions`` is a list of Transition or a tuple of stacked arrays
    (obs, actions, rewards, next_obs, terminals). ``online`` is updated in
    place and returned with the pre-update batch loss.
    """
    if isinstance(transitions, (list, tuple)) and transitions and isinstance(transitions[0], Transition):
        obs = np.array([t.observation for t in transitions], dtype=np.float64)
        actions = np.array([t.action_index for t in transitions])
        rewards = np.array([t.reward for t in transitions], dtype=np.float64)
        next_obs = np.array([t.next_observation for t in transitions], dtype=np.float64)
        terminals = np.array([t.terminal for t in transitions], dtype=bool)
    else:
        obs, actions, rewards, next_obs, terminals = transitions
    n = len(actions)
    if n == 0:
        raise ValueError("q_update needs a non-empty batch")
    targets = bellman_targets(rewards, next_obs, terminals, target, gamma)
    if not np.all(np.isfinite(targets)):
        raise TrainingError("non-finite Bellman targets")
    acts = [obs]
    h = obs
    last = len(online.weights) - 1
    for l, (w, b) in enumerate(zip(online.weights, online.biases)):
        h = h @ w.T + b
        if l < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    rows = np.arange(n)
    err = acts[-1][rows, actions] - targets
    grad_out = np.zeros_like(acts[-1])
    grad_out[rows, actions] = 2.0 * err / n
    gw, gb = backward(online, acts, grad_out)
    if grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in gw + gb))
        if norm > grad_clip:
            scale = grad_clip / norm
            gw = [g * scale for g in gw]
            gb = [g * scale for g in gb]
    sgd_step(online, gw, gb, lr)
    return online, float(np.mean(err * err))


def early_stop(scores: list[float], threshold: float, window: int) -> bool:
    """True iff the last ``window`` scores all exceed ``threshold``."""
    return len(scores) >= window and all(s > threshold for s in scores[-window:])


def _initial_network(init: Init, obs_dim: int, config: DqnConfig):
    dims = [obs_dim, *config.hidden, envmod.N_ACTIONS]
    if init.mode == "fresh":
        return init_random(dims, init.seed), None
    if init.mode == "warm_start":
        return warm_start(init.shared, dims), None
    extractor = FeatureExtractor(init.shared)
    dims[0] = extractor.output_dim
    extractor.check_agent_dims(dims)
    return init_random(dims, init.seed), extractor


def warm_start_config(config: DqnConfig, epsilon_start: float = 0.3) -> DqnConfig:
    """Warm-started agents explore less: epsilon starts at 0.3 instead of 1.0."""
    return replace(config, epsilon_start=min(epsilon_start, config.epsilon_start),
                   epsilon_end=min(config.epsilon_end, epsilon_start))


def train(world, config: DqnConfig, init: Init | None = None, on_episode=None):
    """Run DQN episodes until ``max_episodes`` or the early-stop rule fires.

    Returns ``(params, logs, info)`` where ``info`` records whether and when
    the threshold was met. For feature-extractor runs ``params`` is the
    17-input private network; the frozen extractor is in ``info``.
    """
    spec = envmod.resolve_world(world)
    init = init or Init.fresh(config.seed)
    threshold = spec.score_threshold if config.score_threshold is None else config.score_threshold
    online, extractor = _initial_network(init, envmod.OBS_DIM, config)
    target = online.copy()
    encode = extractor if extractor is not None else (lambda v: v)
    nav = envmod.NavWorld(spec)
    replay = ReplayBuffer(config.replay_capacity, online.input_dim)
    rng = np.random.default_rng([config.seed, 7919])
    logs: list[EpisodeLog] = []
    scores: list[float] = []
    total_steps = 0
    converged_at = None
    t0 = time.perf_counter()
    for episode in range(config.max_episodes):
        eps = config.epsilon(episode)
        obs = encode(nav.reset(config.episode_seed(episode), "train").to_vector())
        nav.step_cap = config.step_cap
        score = 0.0
        while True:
            try:
                action = epsilon_greedy(online, obs, eps, rng)
            except TrainingError as exc:
                raise TrainingError(str(exc), episode) from None
            result = nav.step(action)
            next_obs = encode(result.observation.to_vector())
            done = result.terminal in ("goal", "collision")
            replay.add(obs, action, result.reward, next_obs, done)
            score += result.reward
            total_steps += 1
            obs = next_obs
            if len(replay) >= max(config.learn_start, config.batch_size) and total_steps % config.train_every == 0:
                try:
                    q_update(replay.sample(rng, config.batch_size), online, target, config.gamma, config.lr,
                             config.grad_clip)
                except TrainingError as exc:
                    raise TrainingError(str(exc), episode) from None
            if total_steps % config.target_sync == 0:
                target = online.copy()
            if result.terminal != "none":
                break
        if not all(np.all(np.isfinite(w)) for w in online.weights):
            raise TrainingError("non-finite network weights", episode)
        log = EpisodeLog(episode, score, nav.steps, result.terminal, total_steps * TICK_SECONDS,
                         time.perf_counter() - t0)
        logs.append(log)
        scores.append(score)
        if on_episode is not None:
            on_episode(log)
        if early_stop(scores, threshold, config.window):
            converged_at = episode + 1
            break
    info = {
        "converged": converged_at is not None,
        "episodes_to_threshold": converged_at,
        "episodes": len(logs),
        "total_steps": total_steps,
        "threshold": threshold,
        "extractor": extractor,
    }
    return online, logs, info


def evaluate(params: NetworkParameters, world, episodes: int, extractor: FeatureExtractor | None = None,
             seed_offset: int = 0) -> dict:
    """Greedy test-mode rollouts over episode seeds ``seed_offset + 0..episodes-1``."""
    if params.output_dim != envmod.N_ACTIONS:
        raise ValueError(f"policy must output {envmod.N_ACTIONS} scores, got {params.output_dim}")
    spec = envmod.resolve_world(world)
    nav = envmod.NavWorld(spec)
    encode = extractor if extractor is not None else (lambda v: v)
    goals, scores, steps, outcomes = 0, [], [], []
    for k in range(episodes):
        obs = encode(nav.reset(seed_offset + k, "test").to_vector())
        score = 0.0
        while True:
            result = nav.step(int(np.argmax(_q_single(params, obs))))
            score += result.reward
            if result.terminal != "none":
                break
            obs = encode(result.observation.to_vector())
        goals += result.terminal == "goal"
        scores.append(score)
        steps.append(nav.steps)
        outcomes.append(result.terminal)
    return {
        "goal_rate": goals / episodes if episodes else 0.0,
        "mean_score": float(np.mean(scores)) if scores else 0.0,
        "mean_steps": float(np.mean(steps)) if steps else 0.0,
        "outcomes": outcomes,
    }
