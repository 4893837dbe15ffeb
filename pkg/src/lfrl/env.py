"""2D navigation world: disc robot, lidar fan, static and patrolling obstacles.

The robot starts at a fixed pose, a goal is drawn uniformly over free space
per episode, and each of the five actions turns by a fixed angle and then
advances a fixed distance. Obstacles are circles or axis-aligned rectangles;
moving ones translate at constant speed and bounce off the walls.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

N_BEAMS = 10
RANGE_MIN = 0.13
RANGE_MAX = 4.0
# beam i points at heading - 90deg + i * 18deg, so beam 5 looks straight ahead
BEAM_OFFSETS = -math.pi / 2 + np.arange(N_BEAMS) * (math.pi / N_BEAMS)
CENTER_BEAM = N_BEAMS // 2

TURNS = np.radians([-30.0, -15.0, 0.0, 15.0, 30.0])
N_ACTIONS = len(TURNS)
STEP_LENGTH = 0.15
OBSTACLE_SPEED = 0.04

GOAL_REWARD = 200.0
COLLISION_REWARD = -200.0
PROGRESS_GAIN = 15.0
STEP_PENALTY = 0.1

TRAIN_STEP_CAP = 6000
TEST_STEP_CAP = 1000

OBS_DIM = N_BEAMS + 2


class WorldSpecError(ValueError):
    pass


class EpisodeError(RuntimeError):
    """Stepping a world that has no active episode."""


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a < 0.0:
        a += 2.0 * math.pi
    a -= math.pi
    return math.pi if a <= -math.pi else a


@dataclass
class Obstacle:
    kind: str  # "circle" | "rect"
    x: float  # circle: center; rect: lower-left corner
    y: float
    radius: float = 0.0
    width: float = 0.0
    height: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.kind not in ("circle", "rect"):
            raise WorldSpecError(f"unknown obstacle kind {self.kind!r}")
        if self.kind == "circle" and self.radius <= 0:
            raise WorldSpecError("circle radius must be positive")
        if self.kind == "rect" and (self.width <= 0 or self.height <= 0):
            raise WorldSpecError("rectangle width/height must be positive")
        self.velocity = (float(self.velocity[0]), float(self.velocity[1]))

    @property
    def moving(self) -> bool:
        return self.velocity != (0.0, 0.0)

    def extent(self) -> tuple[float, float, float, float]:
        if self.kind == "circle":
            return (self.x - self.radius, self.y - self.radius, self.x + self.radius, self.y + self.radius)
        return (self.x, self.y, self.x + self.width, self.y + self.height)

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind, "x": self.x, "y": self.y}
        if self.kind == "circle":
            d["radius"] = self.radius
        else:
            d["width"] = self.width
            d["height"] = self.height
        if self.moving:
            d["velocity"] = list(self.velocity)
        return d


@dataclass
class WorldSpec:
    name: str
    bounds: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    obstacles: list[Obstacle] = field(default_factory=list)
    robot_radius: float = 0.1
    start_pose: tuple[float, float, float] | None = None
    goal_tolerance: float = 0.25
    goal_clearance: float = 0.1
    min_goal_distance: float = 0.5
    # {"kind": "uniform"} or {"kind": "fixed", "point": [x, y]}
    goal_region: dict = field(default_factory=lambda: {"kind": "uniform"})
    range_noise: float = 0.0
    score_threshold: float = 100.0

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = (float(v) for v in self.bounds)
        if not (x1 > x0 and y1 > y0):
            raise WorldSpecError(f"degenerate bounds {self.bounds}")
        self.bounds = (x0, y0, x1, y1)
        if self.robot_radius <= 0:
            raise WorldSpecError("robot_radius must be positive")
        if self.start_pose is None:
            self.start_pose = ((x0 + x1) / 2.0, (y0 + y1) / 2.0, 0.0)
        self.start_pose = tuple(float(v) for v in self.start_pose)
        for ob in self.obstacles:
            ex0, ey0, ex1, ey1 = ob.extent()
            if ex0 < x0 or ey0 < y0 or ex1 > x1 or ey1 > y1:
                raise WorldSpecError(f"{self.name}: obstacle {ob.to_dict()} leaves the bounds")
        sx, sy, _ = self.start_pose
        if _collides(sx, sy, self.robot_radius, self.bounds, self.obstacles):
            raise WorldSpecError(f"{self.name}: start pose is in collision")
        if self.goal_region.get("kind") not in ("uniform", "fixed"):
            raise WorldSpecError(f"unknown goal region {self.goal_region}")

    @property
    def diagonal(self) -> float:
        x0, y0, x1, y1 = self.bounds
        return math.hypot(x1 - x0, y1 - y0)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "world",
            "name": self.name,
            "bounds": list(self.bounds),
            "obstacles": [ob.to_dict() for ob in self.obstacles],
            "robot_radius": self.robot_radius,
            "start_pose": list(self.start_pose),
            "goal_tolerance": self.goal_tolerance,
            "goal_clearance": self.goal_clearance,
            "min_goal_distance": self.min_goal_distance,
            "goal_region": self.goal_region,
            "range_noise": self.range_noise,
            "score_threshold": self.score_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        if d.get("format_version") != FORMAT_VERSION:
            raise WorldSpecError(f"unsupported world format_version {d.get('format_version')!r}")
        if d.get("kind", "world") != "world":
            raise WorldSpecError(f"not a world document: kind={d.get('kind')!r}")
        obstacles = [Obstacle(**{k: v for k, v in ob.items()}) for ob in d.get("obstacles", [])]
        kwargs = {k: d[k] for k in (
            "robot_radius", "goal_tolerance", "goal_clearance", "min_goal_distance",
            "goal_region", "range_noise", "score_threshold") if k in d}
        start = d.get("start_pose")
        return cls(name=d["name"], bounds=tuple(d["bounds"]), obstacles=obstacles,
                   start_pose=tuple(start) if start else None, **kwargs)


def load_world(path) -> WorldSpec:
    with open(path, encoding="utf-8") as f:
        return WorldSpec.from_dict(json.load(f))


def save_world(spec: WorldSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")


BUILTIN_WORLDS = ("env-1", "env-2", "env-3", "env-4", "test-env-1", "test-env-2", "test-env-3")


def builtin_world(name: str) -> WorldSpec:
    """One of the shipped world files, e.g. ``builtin_world("env-2")``."""
    if name not in BUILTIN_WORLDS:
        raise WorldSpecError(f"unknown builtin world {name!r}; choose from {BUILTIN_WORLDS}")
    text = resources.files("lfrl.worlds").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return WorldSpec.from_dict(json.loads(text))


def resolve_world(ref) -> WorldSpec:
    """Accept a WorldSpec, a builtin name, or a path to a world file."""
    if isinstance(ref, WorldSpec):
        return ref
    if str(ref) in BUILTIN_WORLDS:
        return builtin_world(str(ref))
    return load_world(ref)


# ---------------------------------------------------------------- geometry

def _point_rect_dist(px: float, py: float, x0: float, y0: float, x1: float, y1: float) -> float:
    dx = max(x0 - px, 0.0, px - x1)
    dy = max(y0 - py, 0.0, py - y1)
    return math.hypot(dx, dy)


def _collides(px, py, radius, bounds, obstacles, positions=None) -> bool:
    x0, y0, x1, y1 = bounds
    if px - radius < x0 or px + radius > x1 or py - radius < y0 or py + radius > y1:
        return True
    for i, ob in enumerate(obstacles):
        ox, oy = positions[i] if positions is not None else (ob.x, ob.y)
        if ob.kind == "circle":
            if math.hypot(px - ox, py - oy) < radius + ob.radius:
                return True
        elif _point_rect_dist(px, py, ox, oy, ox + ob.width, oy + ob.height) < radius:
            return True
    return False


def ray_distances(px: float, py: float, angles: np.ndarray, bounds, obstacles, positions) -> np.ndarray:
    """Unclamped distance from (px, py) to the first surface along each angle."""
    dx = np.cos(angles)
    dy = np.sin(angles)
    x0, y0, x1, y1 = bounds
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(dx > 0, (x1 - px) / dx, np.where(dx < 0, (x0 - px) / dx, np.inf))
        ty = np.where(dy > 0, (y1 - py) / dy, np.where(dy < 0, (y0 - py) / dy, np.inf))
    best = np.minimum(tx, ty)
    best = np.maximum(best, 0.0)
    for ob, (ox, oy) in zip(obstacles, positions):
        if ob.kind == "circle":
            cx, cy = ox - px, oy - py
            tca = cx * dx + cy * dy
            d2 = cx * cx + cy * cy - tca * tca
            r2 = ob.radius * ob.radius
            hit = d2 <= r2
            if not hit.any():
                continue
            thc = np.sqrt(np.maximum(r2 - d2, 0.0))
            t_near = tca - thc
            t_far = tca + thc
            t = np.where(t_near >= 0.0, t_near, np.where(t_far >= 0.0, 0.0, np.inf))
            t = np.where(hit, t, np.inf)
        else:
            rx0, ry0, rx1, ry1 = ox, oy, ox + ob.width, oy + ob.height
            with np.errstate(divide="ignore", invalid="ignore"):
                inv_x = 1.0 / dx
                inv_y = 1.0 / dy
                ax = (rx0 - px) * inv_x
                bx = (rx1 - px) * inv_x
                ay = (ry0 - py) * inv_y
                by = (ry1 - py) * inv_y
            # axis-parallel rays: slab is either all-in or all-out
            in_x = (rx0 <= px) & (px <= rx1)
            in_y = (ry0 <= py) & (py <= ry1)
            lo_x = np.where(dx == 0, np.where(in_x, -np.inf, np.inf), np.minimum(ax, bx))
            hi_x = np.where(dx == 0, np.where(in_x, np.inf, -np.inf), np.maximum(ax, bx))
            lo_y = np.where(dy == 0, np.where(in_y, -np.inf, np.inf), np.minimum(ay, by))
            hi_y = np.where(dy == 0, np.where(in_y, np.inf, -np.inf), np.maximum(ay, by))
            t_enter = np.maximum(lo_x, lo_y)
            t_exit = np.minimum(hi_x, hi_y)
            hit = (t_enter <= t_exit) & (t_exit >= 0.0)
            t = np.where(hit, np.maximum(t_enter, 0.0), np.inf)
        best = np.minimum(best, t)
    return best


def raycast(pose, spec: WorldSpec, positions=None) -> np.ndarray:
    """The 10 clamped lidar ranges seen from ``pose`` = (x, y, heading)."""
    x, y, heading = pose
    if positions is None:
        positions = [(ob.x, ob.y) for ob in spec.obstacles]
    d = ray_distances(x, y, heading + BEAM_OFFSETS, spec.bounds, spec.obstacles, positions)
    return np.clip(d, RANGE_MIN, RANGE_MAX)


# ------------------------------------------------------------ observation

@dataclass
class Observation:
    ranges: np.ndarray
    goal_distance: float
    goal_bearing: float

    def to_vector(self) -> np.ndarray:
        v = np.empty(OBS_DIM)
        v[:N_BEAMS] = self.ranges
        v[N_BEAMS] = self.goal_distance
        v[N_BEAMS + 1] = self.goal_bearing
        return v


@dataclass
class StepResult:
    observation: Observation
    reward: float
    terminal: str  # "none" | "goal" | "collision" | "timeout"


@dataclass
class InputLayout:
    """Names and physical ranges of the features a Q-network consumes."""

    names: list[str]
    low: np.ndarray
    high: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.names)


def raw_layout(spec_or_diagonal) -> InputLayout:
    diag = spec_or_diagonal.diagonal if isinstance(spec_or_diagonal, WorldSpec) else float(spec_or_diagonal)
    names = [f"range_{i}" for i in range(N_BEAMS)] + ["goal_distance", "goal_bearing"]
    low = np.array([RANGE_MIN] * N_BEAMS + [0.0, -math.pi])
    high = np.array([RANGE_MAX] * N_BEAMS + [diag, math.pi])
    return InputLayout(names, low, high)


# ------------------------------------------------------------------ world

class NavWorld:
    """Single-owner episodic simulator for one WorldSpec."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        self._active = False
        self.steps = 0
        self.step_cap = TRAIN_STEP_CAP
        self.pose = spec.start_pose
        self.goal = (0.0, 0.0)
        self.positions: list[tuple[float, float]] = []
        self.velocities: list[tuple[float, float]] = []
        self._rng = np.random.default_rng(0)

    def sample_goal(self, rng: np.random.Generator) -> tuple[float, float]:
        spec = self.spec
        if spec.goal_region["kind"] == "fixed":
            gx, gy = spec.goal_region["point"]
            return float(gx), float(gy)
        x0, y0, x1, y1 = spec.bounds
        margin = spec.robot_radius + spec.goal_clearance
        sx, sy, _ = spec.start_pose
        for _ in range(10000):
            gx = rng.uniform(x0 + margin, x1 - margin)
            gy = rng.uniform(y0 + margin, y1 - margin)
            if math.hypot(gx - sx, gy - sy) < spec.min_goal_distance:
                continue
            if not _collides(gx, gy, margin, spec.bounds, spec.obstacles):
                return float(gx), float(gy)
        raise WorldSpecError(f"{spec.name}: no collision-free goal found")

    def reset(self, seed: int, mode: str = "train") -> Observation:
        if mode not in ("train", "test"):
            raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
        self._rng = np.random.default_rng(seed)
        self.goal = self.sample_goal(self._rng)
        self.pose = self.spec.start_pose
        self.positions = [(ob.x, ob.y) for ob in self.spec.obstacles]
        self.velocities = []
        for ob in self.spec.obstacles:
            vx, vy = ob.velocity
            norm = math.hypot(vx, vy)
            self.velocities.append((0.0, 0.0) if norm == 0 else (OBSTACLE_SPEED * vx / norm, OBSTACLE_SPEED * vy / norm))
        self.steps = 0
        self.step_cap = TRAIN_STEP_CAP if mode == "train" else TEST_STEP_CAP
        self._active = True
        return self.observe()

    @property
    def goal_distance(self) -> float:
        return math.hypot(self.goal[0] - self.pose[0], self.goal[1] - self.pose[1])

    def observe(self) -> Observation:
        ranges = raycast(self.pose, self.spec, self.positions)
        if self.spec.range_noise > 0:
            ranges = np.clip(ranges + self._rng.uniform(-self.spec.range_noise, self.spec.range_noise, N_BEAMS),
                             RANGE_MIN, RANGE_MAX)
        x, y, heading = self.pose
        bearing = wrap_angle(math.atan2(self.goal[1] - y, self.goal[0] - x) - heading)
        return Observation(ranges, self.goal_distance, bearing)

    def advance_obstacles(self) -> None:
        x0, y0, x1, y1 = self.spec.bounds
        for i, ob in enumerate(self.spec.obstacles):
            vx, vy = self.velocities[i]
            if vx == 0.0 and vy == 0.0:
                continue
            px, py = self.positions[i]
            px += vx
            py += vy
            if ob.kind == "circle":
                lo_x, hi_x = x0 + ob.radius, x1 - ob.radius
                lo_y, hi_y = y0 + ob.radius, y1 - ob.radius
            else:
                lo_x, hi_x = x0, x1 - ob.width
                lo_y, hi_y = y0, y1 - ob.height
            # reflect off the wall and reverse that velocity component
            if px < lo_x:
                px, vx = 2 * lo_x - px, -vx
            elif px > hi_x:
                px, vx = 2 * hi_x - px, -vx
            if py < lo_y:
                py, vy = 2 * lo_y - py, -vy
            elif py > hi_y:
                py, vy = 2 * hi_y - py, -vy
            self.positions[i] = (min(max(px, lo_x), hi_x), min(max(py, lo_y), hi_y))
            self.velocities[i] = (vx, vy)

    def step(self, action: int) -> StepResult:
        if not self._active:
            raise EpisodeError("step() called without an active episode; call reset() first")
        action = int(action)
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action index {action} outside [0, {N_ACTIONS - 1}]")
        prev_dist = self.goal_distance
        x, y, heading = self.pose
        heading = wrap_angle(heading + TURNS[action])
        x += STEP_LENGTH * math.cos(heading)
        y += STEP_LENGTH * math.sin(heading)
        self.pose = (x, y, heading)
        self.advance_obstacles()
        self.steps += 1
        spec = self.spec
        if _collides(x, y, spec.robot_radius, spec.bounds, spec.obstacles, self.positions):
            terminal, reward = "collision", COLLISION_REWARD
        elif self.goal_distance <= spec.goal_tolerance:
            terminal, reward = "goal", GOAL_REWARD
        else:
            reward = PROGRESS_GAIN * (prev_dist - self.goal_distance) - STEP_PENALTY
            terminal = "timeout" if self.steps >= self.step_cap else "none"
        if terminal != "none":
            self._active = False
        return StepResult(self.observe(), float(reward), terminal)
