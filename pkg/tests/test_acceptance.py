"""Acceptance criteria. Each test prints a single PASS/FAIL line with the measured numbers."""
import filecmp
import json
import math
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from lfrl.cloud.client import CloudClient
from lfrl.cloud.registry import FusionPolicy, NoPendingUploads, Registry
from lfrl.cloud.serialization import dumps_model, loads_model
from lfrl.cloud.server import serve
from lfrl.fusion import FusionConfig, confidence, fuse, fuse_labels, holdout_set, memory_weights
from lfrl.harness import lifelong_products, run_lifelong
from lfrl.nn import TrainingBatch, forward, gradient_check, init_random


def entropy_oracle(row):
    total = math.fsum(row)
    h = 0.0
    for v in row:
        p = v / total
        if p > 0:
            h -= p * math.log(p)
    return h / math.log(len(row))


def fmt(values):
    return "[" + ", ".join("inf" if v is None or v == math.inf else f"{v:g}" for v in values) + "]"


# ----------------------------------------------------------------- criterion 1

def _random_case(rng):
    n, m = int(rng.integers(1, 7)), int(rng.integers(2, 8))
    kind = rng.integers(4)
    if kind == 0:
        s = np.round(rng.uniform(-500, 500, size=(n, m)), 6)
    elif kind == 1:
        s = np.round(rng.uniform(0, 500, size=(n, m)), 6)
    elif kind == 2:
        s = np.repeat(rng.uniform(0.1, 500, size=(n, 1)), m, axis=1)
    else:
        s = np.zeros((n, m))
        s[np.arange(n), rng.integers(0, m, size=n)] = rng.uniform(0.1, 500, size=n)
    return kind, s


def test_criterion_1_fusion_math_properties(announce):
    rng = np.random.default_rng(2024)
    cases, failures = 10_000, []
    t0 = time.perf_counter()
    for i in range(cases):
        kind, s = _random_case(rng)
        c = confidence(s)
        checks = {
            "range": np.all((c >= 0) & (c <= 1)),
            "scale": all(np.allclose(confidence(s * k), c, rtol=0, atol=1e-9) for k in (0.25, 40.0)),
        }
        if kind == 2:
            checks["uniform"] = np.allclose(c, 1.0, rtol=0, atol=1e-12)
        if kind == 3:
            checks["one-hot"] = np.allclose(c, 0.0, rtol=0, atol=1e-12)
        w = memory_weights(c)
        checks["weights"] = bool(np.all(w >= 0) and abs(w.sum() - 1.0) <= 1e-12)
        label = fuse_labels(s)
        checks["convex"] = bool(np.all(label >= s.min(axis=0) - 1e-9) and np.all(label <= s.max(axis=0) + 1e-9))
        j = int(rng.integers(s.shape[1]))
        unanimous = s.copy()
        unanimous[:, j] = unanimous.max(axis=1) + 1.0
        checks["argmax"] = int(np.argmax(fuse_labels(unanimous))) == j
        failures += [(i, name) for name, ok in checks.items() if not ok]
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    announce("criterion 1", ok, f"{cases} randomized cases, {len(failures)} violations, {elapsed:.1f}s")
    assert not failures, failures[:10]
    assert elapsed < 60


# ----------------------------------------------------------------- criterion 2

def test_criterion_2_worked_confidence_ordering(announce):
    sharp, flat = [20, 20, 100, 10, 10], [85, 85, 84, 83, 86]
    c_sharp, c_flat = confidence(sharp), confidence(flat)
    err = max(abs(c_sharp - entropy_oracle(sharp)), abs(c_flat - entropy_oracle(flat)))
    w = memory_weights([c_sharp, c_flat])
    ok = c_sharp < c_flat and err <= 1e-9 and w[0] > w[1]
    announce("criterion 2", ok, f"c={c_sharp:.6f} < {c_flat:.6f}, oracle error {err:.1e}, "
                                f"weights ({w[0]:.5f}, {w[1]:.5f})")
    assert c_sharp < c_flat and w[0] > w[1]
    assert err <= 1e-9


# ----------------------------------------------------------------- criterion 3

@pytest.mark.slow
def test_criterion_3_single_actor_self_fusion(ci_runs, announce):
    plan = ci_runs["plan"]
    cfg = plan.fusion_config()
    assert cfg.samples == 5000
    rows, ok = [], True
    t0 = time.perf_counter()
    for seed in plan.seeds:
        teacher = lifelong_products(plan, seed)[1][0]  # the Env-1 expert of this seed
        student = fuse([teacher], cfg).params
        hx, _ = holdout_set([teacher], cfg)
        assert len(hx) == 1000
        want, got = forward(teacher, hx), forward(student, hx)
        mse = float(np.mean((got - want) ** 2))
        agree = float(np.mean(np.argmax(got, axis=1) == np.argmax(want, axis=1)))
        ok &= mse <= 1.0 and agree >= 0.95
        rows.append((seed, mse, agree))
    elapsed = time.perf_counter() - t0
    per_fusion = elapsed / len(plan.seeds)
    ok &= per_fusion < 600
    detail = "; ".join(f"teacher {s}: mse {m:.3f} agree {a:.3f}" for s, m, a in rows)
    announce("criterion 3", ok, f"{detail}; {per_fusion:.1f}s per fusion at K=5000")
    for s, m, a in rows:
        assert m <= 1.0 and a >= 0.95, f"teacher {s}: mse {m:.3f}, agreement {a:.3f}"
    assert per_fusion < 600


# ----------------------------------------------------------------- criterion 4

def test_criterion_4_gradient_check(announce):
    rng = np.random.default_rng(4)
    worst, sizes = 0.0, []
    for k in range(25):
        while True:
            dims = [int(rng.integers(1, 9)) for _ in range(int(rng.integers(2, 5)))]
            net = init_random(dims, k)
            if net.n_params <= 500:
                break
        for b in net.biases:
            b += rng.normal(scale=0.1, size=b.shape)
        batch = TrainingBatch(rng.normal(size=(8, dims[0])), rng.normal(size=(8, dims[-1])))
        worst = max(worst, gradient_check(net, batch))
        sizes.append(net.n_params)
    ok = worst < 1e-4
    announce("criterion 4", ok, f"max relative error {worst:.2e} over 25 networks of {min(sizes)}..{max(sizes)} "
                                "parameters")
    assert ok


# ----------------------------------------------------------------- criterion 5

@pytest.mark.slow
def test_criterion_5_lifelong_beats_scratch(ci_runs, announce):
    stages = ci_runs["lifelong"]["stages"]
    parts, ok = [], True
    first = stages[0]["arms"]
    lo = [min(v if v is not None else math.inf for v in first[a]["episodes_to_threshold"]) for a in first]
    hi = [max(v if v is not None else math.inf for v in first[a]["episodes_to_threshold"]) for a in first]
    overlap = max(lo) <= min(hi)
    ok &= overlap
    parts.append(f"stage 1 ranges scratch {fmt([lo[0], hi[0]])} lfrl {fmt([lo[1], hi[1]])}")
    for st in stages[1:]:
        lf = st["arms"]["lfrl"]["median_episodes_to_threshold"]
        sc = st["arms"]["scratch"]["median_episodes_to_threshold"]
        ok &= lf < sc
        parts.append(f"stage {st['stage']} median lfrl {lf:g} vs scratch {sc:g}")
    total = ci_runs["seconds"]["total"]
    ok &= total < 1800
    parts.append(f"CI run {total / 60:.1f} min")
    announce("criterion 5", ok, ", ".join(parts))
    assert overlap
    for st in stages[1:]:
        assert st["arms"]["lfrl"]["median_episodes_to_threshold"] < st["arms"]["scratch"]["median_episodes_to_threshold"]
    assert total < 1800


# ----------------------------------------------------------------- criterion 6

@pytest.mark.slow
def test_criterion_6_shared_model_generalizes(ci_runs, announce):
    envs = ci_runs["generalization"]["envs"]
    ok, parts = True, []
    firsts = {"rank_episodes_to_threshold": {}, "rank_last_five_mean": {}}
    for env in envs:
        for key in firsts:
            ranking = env[key]
            ok &= "shared" in ranking[:2]
            firsts[key][ranking[0]] = firsts[key].get(ranking[0], 0) + 1
        parts.append(f"{env['world']}: episodes {env['rank_episodes_to_threshold']}, "
                     f"last-5 {env['rank_last_five_mean']}")
    for counts in firsts.values():
        ok &= all(n <= 1 for name, n in counts.items() if name != "shared")
    announce("criterion 6", ok, "; ".join(parts))
    for env in envs:
        assert "shared" in env["rank_episodes_to_threshold"][:2], env["world"]
        assert "shared" in env["rank_last_five_mean"][:2], env["world"]
    for counts in firsts.values():
        assert all(n <= 1 for name, n in counts.items() if name != "shared"), counts


# ----------------------------------------------------------------- criterion 7

@pytest.mark.slow
def test_criterion_7_transfer_modes(ci_runs, announce):
    arms = ci_runs["transfer"]["arms"]
    med = {a: arms[a]["median_episodes_to_threshold"] for a in arms}
    std = {a: arms[a]["inter_seed_std"] for a in arms}
    order = med["warm_start"] < med["feature_extractor"] < med["scratch"]
    stable = std["feature_extractor"] < std["warm_start"]
    announce("criterion 7", order and stable,
             "median episodes warm_start {:g} / feature_extractor {:g} / scratch {:g}; inter-seed std "
             "feature_extractor {:.1f} vs warm_start {:.1f}".format(
                 med["warm_start"], med["feature_extractor"], med["scratch"],
                 std["feature_extractor"], std["warm_start"]))
    assert order, med
    assert stable, std


# ----------------------------------------------------------------- criterion 8

SMALL = FusionConfig(samples=300, holdout_samples=50, epochs=3, hidden=(16,))


def _roundtrip_preserves_checksums():
    reg = Registry(seed=8, fusion_config=SMALL, policy=FusionPolicy(every=None))
    with serve("127.0.0.1:0", reg) as srv, CloudClient(srv.address, "robot-a") as c:
        mine = init_random([12, 64, 64, 5], 80)
        c.upload(mine, "env-1")
        stored = reg.pending()[0]
        lossless = stored.payload == dumps_model(mine) and stored.params.checksum() == mine.checksum()
        reg.trigger_fusion()
        g, payload = c.download_payload()
        shared = loads_model(payload)
        return (lossless and g == 1 and payload == reg.record(1).payload
                and shared.checksum() == reg.record(1).checksum
                and reg.record(1).report["actor_checksums"] == [mine.checksum()]
                and dumps_model(shared, generation=1) == payload)


def _concurrent_uploads_acked_once(n=8):
    reg = Registry(seed=9, fusion_config=SMALL, policy=FusionPolicy(every=None))
    models = [init_random([12, 64, 64, 5], 90 + k) for k in range(n)]
    acks, errors = {}, []
    barrier = threading.Barrier(n)
    with serve("127.0.0.1:0", reg) as srv:
        def client(k):
            try:
                with CloudClient(srv.address, f"robot-{k}") as c:
                    barrier.wait()
                    acks[k] = c.upload(models[k], f"env-{k}")
            except Exception as exc:  # collected and reported below
                errors.append(exc)

        threads = [threading.Thread(target=client, args=(k,)) for k in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        pending = {u.upload_id: u.params.checksum() for u in reg.pending()}
        rec = reg.trigger_fusion()
        try:
            reg.trigger_fusion()
            refused = False
        except NoPendingUploads:
            refused = True
    fused_ids = [u["upload_id"] for u in rec.report["uploads"]]
    return (not errors and len(acks) == n and len(set(acks.values())) == n
            and pending == {acks[k]: models[k].checksum() for k in range(n)}
            and sorted(fused_ids) == sorted(acks.values()) and refused)


def _downloads_never_torn(fusions=6, readers=4):
    reg = Registry(seed=10, fusion_config=SMALL, policy=FusionPolicy(every=None))
    seen = {k: [] for k in range(readers)}
    bad = []
    done = threading.Event()
    with serve("127.0.0.1:0", reg) as srv:
        def reader(k):
            with CloudClient(srv.address, f"reader-{k}") as c:
                while not done.is_set():
                    g, payload = c.download_payload()
                    try:
                        model = loads_model(payload)
                    except Exception as exc:
                        bad.append((g, repr(exc)))
                        continue
                    if json.loads(payload).get("generation") != g or model.checksum() != reg.record(g).checksum:
                        bad.append((g, "mismatch"))
                    seen[k].append(g)

        threads = [threading.Thread(target=reader, args=(k,)) for k in range(readers)]
        for t in threads:
            t.start()
        for k in range(fusions):
            reg.upload(init_random([12, 64, 64, 5], 100 + k), "writer", "env-1")
            reg.trigger_fusion()
        time.sleep(0.2)
        done.set()
        for t in threads:
            t.join()
    every = [g for gs in seen.values() for g in gs]
    monotone = all(a <= b for gs in seen.values() for a, b in zip(gs, gs[1:]))
    ok = not bad and monotone and len(set(every)) >= 2 and max(every) == fusions
    return ok, len(every), len(set(every))


def test_criterion_8_protocol(announce):
    roundtrip = _roundtrip_preserves_checksums()
    concurrent = _concurrent_uploads_acked_once()
    untorn, reads, generations = _downloads_never_torn()
    ok = roundtrip and concurrent and untorn
    announce("criterion 8", ok, f"checksum round trip {roundtrip}, 8 concurrent uploads acked once {concurrent}, "
                                f"{reads} downloads across {generations} generations untorn {untorn}")
    assert roundtrip and concurrent and untorn


# ----------------------------------------------------------------- criterion 9

@pytest.mark.slow
def test_criterion_9_lifelong_csvs_are_reproducible(ci_runs, tmp_path, announce):
    first = ci_runs["plan"]
    again = type(first)(**{**first.__dict__, "out": str(tmp_path / "again")})
    run_lifelong(again)
    a_root, b_root = Path(first.out) / "lifelong", Path(again.out) / "lifelong"
    a = sorted(p.relative_to(a_root) for p in a_root.rglob("*.csv"))
    b = sorted(p.relative_to(b_root) for p in b_root.rglob("*.csv"))
    same = a == b and all(filecmp.cmp(a_root / p, b_root / p, shallow=False) for p in a)
    announce("criterion 9", same and len(a) > 0, f"{len(a)} CSVs compared byte for byte, identical={same}")
    assert a == b and len(a) > 0
    assert same
