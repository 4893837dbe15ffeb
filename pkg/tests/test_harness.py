import json
import math

import numpy as np
import pytest

from lfrl.agent import EpisodeLog, write_log_csv
from lfrl.harness import (ExperimentPlan, PlotFormatError, RunSummary, emit_plots, inter_seed_std, lifelong_products,
                          run_generalization, run_lifelong, run_transfer_comparison, stacked_shares, summarize_logs)

TINY = dict(stages=["env-1", "env-2"], test_worlds=["test-env-1"], seeds=[0, 1],
            agent={"max_episodes": 12, "step_cap": 150, "learn_start": 64, "hidden": [16]},
            fusion={"samples": 400, "holdout_samples": 50, "epochs": 3, "hidden": [16]}, transfer_episodes=6)


def logs_from(scores, steps=10):
    return [EpisodeLog(i, float(s), steps, "goal" if s > 0 else "collision", (i + 1) * steps * 0.2)
            for i, s in enumerate(scores)]


def test_summary_metrics():
    s = summarize_logs(logs_from([-200, 150, 150, 150, 150, 150, -10]), threshold=100, window=5)
    assert s.converged and s.episodes_to_threshold == 6 and s.steps_to_threshold == 60
    assert s.mean_score == pytest.approx(np.mean([-200, 150, 150, 150, 150, 150, -10]))
    assert s.last_five_mean == pytest.approx(np.mean([150, 150, 150, 150, -10]))
    never = summarize_logs(logs_from([0, 0, 0]), threshold=100)
    assert not never.converged and never.ett == math.inf


def test_inter_seed_std_uses_aligned_episodes():
    assert inter_seed_std([[0, 10], [0, 10]]) == 0.0
    assert inter_seed_std([[0, 0, 99], [2, 4]]) == pytest.approx(np.mean([1.0, 2.0]))


def test_stacked_shares_sum_positive_parts():
    arms = {"a": logs_from([10, 30, -50, -50]), "b": logs_from([5, 5, 20, 40])}
    rows = stacked_shares(arms, bin_size=2)
    assert rows == [[0, 20.0, 5.0, 25.0], [1, 0.0, 30.0, 30.0]]


def test_plan_roundtrip_and_validation(tmp_path):
    plan = ExperimentPlan(**TINY, out=str(tmp_path))
    p = tmp_path / "plan.json"
    p.write_text(json.dumps(plan.to_dict()))
    assert ExperimentPlan.load(p) == plan
    with pytest.raises(ValueError):
        ExperimentPlan(seeds=[])
    with pytest.raises(ValueError):
        ExperimentPlan(transfer="finetune")
    with pytest.raises(ValueError, match="hidden"):
        ExperimentPlan(fusion={"hidden": [8]})


def test_emit_plots(tmp_path):
    write_log_csv(logs_from([1, 2, 3]), tmp_path / "runs" / "a.csv")
    write_log_csv(logs_from([4, -5]), tmp_path / "runs" / "b.csv")
    written = emit_plots(tmp_path / "runs", tmp_path / "plots", smooth=2, bin_size=2)
    names = sorted(p.name for p in written)
    assert names == ["a.dat", "b.dat", "stacked.dat"]
    lines = (tmp_path / "plots" / "a.dat").read_text().splitlines()
    assert lines[0].startswith("#") and lines[2].split()[:3] == ["1", "2.000000", "1.500000"]


def test_emit_plots_errors(tmp_path):
    with pytest.raises(PlotFormatError):
        emit_plots(tmp_path)
    (tmp_path / "empty.csv").write_text("episode,score,steps,outcome,elapsed_s\n")
    with pytest.raises(PlotFormatError, match="no episodes"):
        emit_plots(tmp_path)
    (tmp_path / "empty.csv").write_text("a,b\n1,2\n")
    with pytest.raises(PlotFormatError, match="missing"):
        emit_plots(tmp_path)


def _csvs(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def test_tiny_pipeline_inproc_matches_tcp(tmp_path):
    a = ExperimentPlan(**TINY, out=str(tmp_path / "a"), cloud="inproc")
    b = ExperimentPlan(**TINY, out=str(tmp_path / "b"), cloud="tcp")
    rep = run_lifelong(a)
    run_lifelong(b)
    assert _csvs(tmp_path / "a") == _csvs(tmp_path / "b")
    assert rep["final_generations"] == [2, 2]
    assert lifelong_products(a, 0)[0].checksum() == lifelong_products(b, 0)[0].checksum()
    # stage 1 of the lifelong arm starts from generation 0, the same network the scratch arm gets
    seed0 = tmp_path / "a" / "lifelong" / "seed-0"
    assert (seed0 / "scratch" / "stage-1-env-1.csv").read_bytes() == (seed0 / "lfrl" / "stage-1-env-1.csv").read_bytes()

    gen = run_generalization(a)
    env = gen["envs"][0]
    assert set(env["models"]) == {"shared", "model-1", "model-2"}
    assert sorted(env["rank_episodes_to_threshold"]) == sorted(env["models"])

    tr = run_transfer_comparison(a)
    assert set(tr["arms"]) == {"scratch", "warm_start", "feature_extractor"}
    for arm in tr["arms"].values():
        assert len(arm["mean_score"]) == 2
    lengths = {len((tmp_path / "a" / "transfer" / "seed-0" / f"{arm}.csv").read_text().splitlines())
               for arm in tr["arms"]}
    assert lengths == {TINY["transfer_episodes"] + 1}  # aligned episode axes


def test_feature_extractor_lineage(tmp_path):
    plan = ExperimentPlan(**{**TINY, "seeds": [0]}, out=str(tmp_path), transfer="feature_extractor")
    rep = run_lifelong(plan)
    assert rep["final_generations"] == [2]


def test_unconverged_stages_are_marked_and_the_run_continues(tmp_path):
    plan = ExperimentPlan(**{**TINY, "seeds": [0], "agent": {**TINY["agent"], "score_threshold": 1e9}},
                          out=str(tmp_path))
    rep = run_lifelong(plan)
    assert rep["final_generations"] == [2]
    for stage in rep["stages"]:
        for arm in stage["arms"].values():
            assert arm["converged"] == [False] and arm["episodes_to_threshold"] == [None]
            assert arm["median_episodes_to_threshold"] == math.inf
    saved = json.loads((tmp_path / "lifelong" / "report.json").read_text())
    assert saved["stages"][1]["arms"]["lfrl"]["median_episodes_to_threshold"] == "inf"
