"""Experiment orchestration: lifelong curriculum, generalization, transfer study.

Every arm of a comparison shares the environment seed schedule of its
counterparts (paired design), all randomness is derived from the plan's
seeds, and every reported number is recomputed from the CSV logs written
to disk.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import env as envmod
from .agent import DqnConfig, EpisodeLog, early_stop, read_log_csv, train, warm_start_config, write_log_csv
from .cloud.registry import FusionPolicy, Registry
from .cloud.serialization import atomic_write, canonical_json, load_model, save_model
from .fusion import FusionConfig
from .nn import NetworkParameters
from .transfer import Init

log = logging.getLogger(__name__)

PLAN_FORMAT_VERSION = 1


class PlotFormatError(ValueError):
    pass


@dataclass
class ExperimentPlan:
    stages: list[str] = field(default_factory=lambda: ["env-1", "env-2", "env-3", "env-4"])
    test_worlds: list[str] = field(default_factory=lambda: ["test-env-1", "test-env-2", "test-env-3"])
    transfer_world: str = "test-env-1"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    agent: dict = field(default_factory=dict)  # DqnConfig overrides
    fusion: dict = field(default_factory=dict)  # FusionConfig overrides
    transfer: str = "warm_start"
    warm_epsilon: float = 0.3
    feature_epsilon: float | None = 0.3  # None: feature-extractor agents explore like fresh ones
    transfer_episodes: int = 300
    out: str = "runs"
    cloud: str = "inproc"  # "inproc" | "tcp" (local server per lineage) | "host:port"
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("a plan needs at least one stage")
        if not self.seeds:
            raise ValueError("a plan needs explicit seeds")
        if self.transfer not in ("warm_start", "feature_extractor", "none"):
            raise ValueError(f"unknown transfer mode {self.transfer!r}")
        # warm starts copy the shared model, so fused and private networks need the same hidden layers
        if tuple(self.fusion_config().hidden) != tuple(self.agent_config(0).hidden):
            raise ValueError(f"fusion hidden layers {list(self.fusion_config().hidden)} differ from agent "
                             f"hidden layers {list(self.agent_config(0).hidden)}")

    def agent_config(self, seed: int) -> DqnConfig:
        return DqnConfig(**{**self.agent, "seed": seed})

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(**self.fusion)

    def to_dict(self) -> dict:
        return {"format_version": PLAN_FORMAT_VERSION, "kind": "plan", **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        if d.get("format_version") != PLAN_FORMAT_VERSION:
            raise ValueError(f"unsupported plan format_version {d.get('format_version')!r}")
        return cls(**{k: v for k, v in d.items() if k not in ("format_version", "kind")})

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def ci_plan(**overrides) -> ExperimentPlan:
    """Desk-scale plan sized for a single CPU in well under half an hour."""
    plan = ExperimentPlan(
        agent={"max_episodes": 400, "step_cap": 1000},
        fusion={"samples": 5000},
        transfer_episodes=250,
    )
    return replace(plan, **overrides)


# ------------------------------------------------------------------ seeds

def stage_seed(seed: int, stage: int) -> int:
    return 1000 * seed + stage


def init_seed(seed: int, stage: int) -> int:
    return 7_000_000 + 1000 * seed + stage


# ---------------------------------------------------------------- metrics

@dataclass
class RunSummary:
    episodes: int
    converged: bool
    episodes_to_threshold: int | None
    steps_to_threshold: int | None
    mean_score: float
    last_five_mean: float

    @property
    def ett(self) -> float:
        """Episodes-to-threshold with non-converged runs ranked last."""
        return math.inf if self.episodes_to_threshold is None else float(self.episodes_to_threshold)


def summarize_logs(logs: list[EpisodeLog], threshold: float, window: int = 5) -> RunSummary:
    scores = [l.score for l in logs]
    ett = None
    steps = None
    total = 0
    for i, l in enumerate(logs):
        total += l.steps
        if early_stop(scores[:i + 1], threshold, window):
            ett, steps = i + 1, total
            break
    return RunSummary(
        episodes=len(logs),
        converged=ett is not None,
        episodes_to_threshold=ett,
        steps_to_threshold=steps,
        mean_score=float(np.mean(scores)) if scores else float("nan"),
        last_five_mean=float(np.mean(scores[-5:])) if scores else float("nan"),
    )


def summarize_csv(path, threshold: float, window: int = 5) -> RunSummary:
    return summarize_logs(read_log_csv(path), threshold, window)


def median(values) -> float:
    return float(statistics.median(values))


def _arm_summary(runs: list[RunSummary]) -> dict:
    return {
        "episodes_to_threshold": [r.episodes_to_threshold for r in runs],
        "steps_to_threshold": [r.steps_to_threshold for r in runs],
        "median_episodes_to_threshold": median([r.ett for r in runs]),
        "mean_score": [r.mean_score for r in runs],
        "median_mean_score": median([r.mean_score for r in runs]),
        "last_five_mean": [r.last_five_mean for r in runs],
        "median_last_five_mean": median([r.last_five_mean for r in runs]),
        "converged": [r.converged for r in runs],
    }


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ cloud

class InProcCloud:
    """Registry used directly, fusing right after each upload."""

    def __init__(self, registry: Registry):
        self.registry = registry

    def download(self) -> tuple[int, NetworkParameters]:
        rec = self.registry.current()
        return rec.generation, rec.params.copy()

    def upload(self, params: NetworkParameters, env_tag: str, robot_id: str) -> str:
        return self.registry.upload(params, robot_id, env_tag)

    def evolve(self) -> int:
        return self.registry.trigger_fusion().generation

    def close(self) -> None:
        pass


class RemoteCloud:
    """Talks to a cloud server over TCP; the server's every-upload policy does the fusing."""

    def __init__(self, address: str, server=None):
        from .cloud.client import CloudClient

        self.server = server
        self.client = CloudClient(address, robot_id="harness")
        self.client.connect()
        self._expected = self.client.status()["generation"]

    def download(self):
        return self.client.download()

    def upload(self, params, env_tag, robot_id):
        uid = self.client.upload(params, env_tag)
        self._expected += 1
        return uid

    def evolve(self) -> int:
        return self.client.wait_for_generation(self._expected)["generation"]

    def close(self) -> None:
        self.client.close()
        if self.server is not None:
            self.server.close()


def open_cloud(plan: ExperimentPlan, seed: int, model_dir: Path):
    kw = dict(seed=init_seed(seed, 1), fusion_config=plan.fusion_config(),
              layer_dims=[envmod.OBS_DIM, *plan.agent_config(0).hidden, envmod.N_ACTIONS])
    if plan.cloud == "inproc":
        return InProcCloud(Registry(model_dir, **kw))
    if plan.cloud == "tcp":
        from .cloud.server import serve

        reg = Registry(model_dir, policy=FusionPolicy(every=1), **kw)
        server = serve("127.0.0.1:0", reg)
        return RemoteCloud(server.address, server)
    if len(plan.seeds) > 1:
        raise ValueError("an external cloud holds a single lineage; run one seed per server")
    return RemoteCloud(plan.cloud)


# --------------------------------------------------------------- lifelong

def _world_name(ref) -> str:
    return envmod.resolve_world(ref).name


def _lifelong_seed(plan: ExperimentPlan, seed: int) -> dict:
    out = Path(plan.out) / "lifelong" / f"seed-{seed}"
    worlds = [envmod.resolve_world(s) for s in plan.stages]
    # scratch arm: each stage learned from a fresh network; final models are the generic models
    for k, world in enumerate(worlds, start=1):
        cfg = plan.agent_config(stage_seed(seed, k))
        params, logs, info = train(world, cfg, Init.fresh(init_seed(seed, k)))
        write_log_csv(logs, out / "scratch" / f"stage-{k}-{world.name}.csv")
        save_model(params, out / "generic" / f"model-{k}.model", env_tag=world.name)
    # LFRL arm: download shared, train, upload, fuse
    cloud = open_cloud(plan, seed, out / "cloud")
    generations = []
    try:
        for k, world in enumerate(worlds, start=1):
            g, shared = cloud.download()
            cfg = plan.agent_config(stage_seed(seed, k))
            if g == 0:
                # generation 0 is the registry's random initialization, identical to the scratch init
                init = Init("warm_start", shared, init_seed(seed, k))
            else:
                init = Init.from_flag(plan.transfer, shared, init_seed(seed, k))
                if init.mode == "warm_start":
                    cfg = warm_start_config(cfg, plan.warm_epsilon)
                elif init.mode == "feature_extractor" and plan.feature_epsilon is not None:
                    cfg = warm_start_config(cfg, plan.feature_epsilon)
            params, logs, info = train(world, cfg, init)
            write_log_csv(logs, out / "lfrl" / f"stage-{k}-{world.name}.csv")
            if init.mode == "feature_extractor":
                # 17-input private models cannot join fusion; the shared lineage advances from
                # a warm-started copy trained alongside it
                params, _, _ = train(world, warm_start_config(cfg, plan.warm_epsilon),
                                     Init("warm_start", shared, init.seed))
            cloud.upload(params, world.name, f"robot-{k}")
            generations.append(cloud.evolve())
    finally:
        cloud.close()
    return {"seed": seed, "generations": generations}


def lifelong_report(plan: ExperimentPlan) -> dict:
    """ComparisonReport for the curriculum, rebuilt from the CSVs under ``plan.out``."""
    root = Path(plan.out) / "lifelong"
    worlds = [envmod.resolve_world(s) for s in plan.stages]
    window = plan.agent_config(0).window
    stages = []
    for k, world in enumerate(worlds, start=1):
        arms = {}
        for arm in ("scratch", "lfrl"):
            runs = [summarize_csv(root / f"seed-{s}" / arm / f"stage-{k}-{world.name}.csv",
                                  _threshold(plan, world), window) for s in plan.seeds]
            arms[arm] = _arm_summary(runs)
        stages.append({"stage": k, "world": world.name, "threshold": _threshold(plan, world), "arms": arms})
    return {"kind": "lifelong", "seeds": list(plan.seeds), "stages": stages}


def _threshold(plan: ExperimentPlan, world: envmod.WorldSpec) -> float:
    t = plan.agent.get("score_threshold")
    return world.score_threshold if t is None else float(t)


def _run_parallel(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, *zip(*jobs)))
    return [fn(*j) for j in jobs]


def run_lifelong(plan: ExperimentPlan) -> dict:
    """Scratch vs LFRL over the curriculum for every seed; returns the report and writes CSVs."""
    results = _run_parallel(_lifelong_seed, [(plan, s) for s in plan.seeds], plan.workers)
    report = lifelong_report(plan)
    report["final_generations"] = [r["generations"][-1] for r in results]
    write_json(Path(plan.out) / "lifelong" / "report.json", report)
    _write_summary_csv(Path(plan.out) / "lifelong" / "summary.csv", report)
    return report


def _write_summary_csv(path: Path, report: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["stage", "world", "arm", "median_episodes_to_threshold", "median_mean_score",
                    "median_last_five_mean"])
        for st in report["stages"]:
            for arm, a in st["arms"].items():
                w.writerow([st["stage"], st["world"], arm, a["median_episodes_to_threshold"],
                            f"{a['median_mean_score']:.3f}", f"{a['median_last_five_mean']:.3f}"])


# ---------------------------------------------------------- generalization

def lifelong_products(plan: ExperimentPlan, seed: int) -> tuple[NetworkParameters, list[NetworkParameters]]:
    """(final shared model, generic models 1..n) left behind by a lifelong run."""
    out = Path(plan.out) / "lifelong" / f"seed-{seed}"
    shared = Registry(out / "cloud").current().params
    generics = [load_model(out / "generic" / f"model-{k}.model") for k in range(1, len(plan.stages) + 1)]
    return shared, generics


def _generalize_job(plan: ExperimentPlan, seed: int, name: str, model: NetworkParameters, world_ref, w_idx: int):
    world = envmod.resolve_world(world_ref)
    cfg = warm_start_config(plan.agent_config(stage_seed(seed, 100 + w_idx)), plan.warm_epsilon)
    _, logs, _ = train(world, cfg, Init("warm_start", model, 0))
    path = Path(plan.out) / "generalize" / f"seed-{seed}" / name / f"{world.name}.csv"
    write_log_csv(logs, path)
    return str(path)


def run_generalization(plan: ExperimentPlan, candidates: dict | None = None) -> dict:
    """Warm-start every candidate model in every test world and report Table-1 style metrics.

    ``candidates`` maps seed -> {name: params}; by default the shared model and
    generic models produced by ``run_lifelong`` for that seed.
    """
    if candidates is None:
        candidates = {}
        for s in plan.seeds:
            shared, generics = lifelong_products(plan, s)
            candidates[s] = {"shared": shared, **{f"model-{k}": g for k, g in enumerate(generics, start=1)}}
    jobs = [(plan, s, name, model, w, i)
            for s in plan.seeds for name, model in candidates[s].items() for i, w in enumerate(plan.test_worlds)]
    _run_parallel(_generalize_job, jobs, plan.workers)
    report = generalization_report(plan, list(candidates[plan.seeds[0]]))
    write_json(Path(plan.out) / "generalize" / "report.json", report)
    return report


def generalization_report(plan: ExperimentPlan, names: list[str]) -> dict:
    root = Path(plan.out) / "generalize"
    window = plan.agent_config(0).window
    envs = []
    for w in plan.test_worlds:
        world = envmod.resolve_world(w)
        models = {}
        for name in names:
            runs = [summarize_csv(root / f"seed-{s}" / name / f"{world.name}.csv", _threshold(plan, world), window)
                    for s in plan.seeds]
            models[name] = _arm_summary(runs)
        envs.append({"world": world.name, "models": models,
                     "rank_episodes_to_threshold": _rank(models, "median_episodes_to_threshold", lower=True),
                     "rank_last_five_mean": _rank(models, "median_last_five_mean", lower=False)})
    return {"kind": "generalization", "seeds": list(plan.seeds), "envs": envs}


def _rank(models: dict, key: str, lower: bool) -> list[str]:
    """Names ordered best first; ties keep the candidates' listed order."""
    names = list(models)
    return sorted(names, key=lambda n: (models[n][key] if lower else -models[n][key], names.index(n)))


# ------------------------------------------------------- transfer comparison

TRANSFER_ARMS = ("scratch", "warm_start", "feature_extractor")


def _transfer_job(plan: ExperimentPlan, seed: int, arm: str, shared: NetworkParameters):
    world = envmod.resolve_world(plan.transfer_world)
    cfg = plan.agent_config(stage_seed(seed, 200))
    # fixed budget so the three curves share an episode axis
    cfg = replace(cfg, max_episodes=plan.transfer_episodes, score_threshold=math.inf)
    if arm == "scratch":
        init = Init.fresh(init_seed(seed, 200))
    elif arm == "warm_start":
        init = Init("warm_start", shared, 0)
        cfg = warm_start_config(cfg, plan.warm_epsilon)
    else:
        init = Init("feature_extractor", shared, init_seed(seed, 200))
        if plan.feature_epsilon is not None:
            cfg = warm_start_config(cfg, plan.feature_epsilon)
    before = shared.checksum()
    _, logs, info = train(world, cfg, init)
    if arm == "feature_extractor" and info["extractor"].shared.checksum() != before:
        raise RuntimeError("feature extractor parameters changed during training")
    path = Path(plan.out) / "transfer" / f"seed-{seed}" / f"{arm}.csv"
    write_log_csv(logs, path)
    return str(path)


def run_transfer_comparison(plan: ExperimentPlan, shared_models: dict | None = None) -> dict:
    """Scratch vs warm-start vs feature-extractor on ``plan.transfer_world`` with paired seeds."""
    if shared_models is None:
        shared_models = {s: lifelong_products(plan, s)[0] for s in plan.seeds}
    jobs = [(plan, s, arm, shared_models[s]) for s in plan.seeds for arm in TRANSFER_ARMS]
    _run_parallel(_transfer_job, jobs, plan.workers)
    report = transfer_report(plan)
    write_json(Path(plan.out) / "transfer" / "report.json", report)
    return report


def inter_seed_std(curves: list[list[float]]) -> float:
    """Mean over aligned episodes of the across-seed standard deviation of scores."""
    n = min(len(c) for c in curves)
    if n == 0 or len(curves) < 2:
        return 0.0
    arr = np.array([c[:n] for c in curves])
    return float(np.mean(np.std(arr, axis=0)))


def transfer_report(plan: ExperimentPlan) -> dict:
    root = Path(plan.out) / "transfer"
    world = envmod.resolve_world(plan.transfer_world)
    window = plan.agent_config(0).window
    arms = {}
    for arm in TRANSFER_ARMS:
        logs = [read_log_csv(root / f"seed-{s}" / f"{arm}.csv") for s in plan.seeds]
        runs = [summarize_logs(l, _threshold(plan, world), window) for l in logs]
        summary = _arm_summary(runs)
        summary["inter_seed_std"] = inter_seed_std([[e.score for e in l] for l in logs])
        arms[arm] = summary
    return {"kind": "transfer", "world": world.name, "seeds": list(plan.seeds), "arms": arms}


# ------------------------------------------------------------------ plots

def _read_curve(path: Path) -> list[EpisodeLog]:
    try:
        logs = read_log_csv(path)
    except (ValueError, KeyError) as exc:
        raise PlotFormatError(f"{path}: {exc}") from exc
    if not logs:
        raise PlotFormatError(f"{path}: no episodes")
    return logs


def emit_plots(csv_dir, out_dir=None, smooth: int = 10, bin_size: int = 10, png: bool = False) -> list[Path]:
    """Write one gnuplot-ready ``.dat`` curve per CSV plus a stacked-share table per directory.

    Each ``.dat`` has columns ``episode score smoothed elapsed_s``. For every
    directory holding two or more arms, ``stacked.dat`` lists, per bin of
    ``bin_size`` episodes, each arm's positive part of its mean score and the
    total of those parts.
    """
    csv_dir = Path(csv_dir)
    out_dir = Path(out_dir) if out_dir is not None else csv_dir / "plots"
    files = sorted(csv_dir.rglob("*.csv"))
    files = [f for f in files if f.name != "summary.csv" and out_dir not in f.parents]
    if not files:
        raise PlotFormatError(f"no episode CSVs under {csv_dir}")
    written: list[Path] = []
    groups: dict[Path, dict[str, list[EpisodeLog]]] = {}
    for f in files:
        logs = _read_curve(f)
        rel = f.relative_to(csv_dir).with_suffix(".dat")
        target = out_dir / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        scores = np.array([l.score for l in logs])
        kernel = np.ones(min(smooth, len(scores))) / min(smooth, len(scores))
        smoothed = np.convolve(scores, kernel, mode="full")[:len(scores)]
        counts = np.minimum(np.arange(1, len(scores) + 1), len(kernel))
        smoothed = smoothed * len(kernel) / counts
        with open(target, "w", encoding="utf-8") as fh:
            fh.write("# episode score smoothed elapsed_s\n")
            for l, s in zip(logs, smoothed):
                fh.write(f"{l.episode} {l.score:.6f} {s:.6f} {l.elapsed_s:.1f}\n")
        written.append(target)
        groups.setdefault(rel.parent, {})[f.stem] = logs
    for rel_dir, arms in groups.items():
        if len(arms) < 2:
            continue
        table = stacked_shares(arms, bin_size)
        target = out_dir / rel_dir / "stacked.dat"
        with open(target, "w", encoding="utf-8") as fh:
            fh.write("# bin " + " ".join(arms) + " total\n")
            for row in table:
                fh.write(" ".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row) + "\n")
        written.append(target)
    if png:
        written.extend(_render_png(out_dir, groups))
    return written


def stacked_shares(arms: dict[str, list[EpisodeLog]], bin_size: int = 10) -> list[list]:
    """Rows ``[bin, pos_1, ..., pos_n, total]`` where pos_i = max(0, mean score of arm i in the bin)."""
    n_bins = max(math.ceil(len(l) / bin_size) for l in arms.values())
    rows = []
    for b in range(n_bins):
        parts = []
        for logs in arms.values():
            chunk = [l.score for l in logs[b * bin_size:(b + 1) * bin_size]]
            parts.append(max(0.0, float(np.mean(chunk))) if chunk else 0.0)
        rows.append([b, *parts, float(sum(parts))])
    return rows


def _render_png(out_dir: Path, groups) -> list[Path]:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping PNG output")
        return []
    written = []
    for rel_dir, arms in groups.items():
        fig, ax = plt.subplots(figsize=(7, 4))
        for name, logs in arms.items():
            ax.plot([l.episode for l in logs], [l.score for l in logs], label=name, lw=0.8)
        ax.set_xlabel("episode")
        ax.set_ylabel("score")
        ax.legend(fontsize=7)
        target = out_dir / rel_dir / "curves.png"
        fig.savefig(target, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(target)
    return written
