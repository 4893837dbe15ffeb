"""Command line entry point: experiments, the cloud server, offline fusion and plots."""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
import urllib.request
from dataclasses import replace
from pathlib import Path

from .agent import TrainingError
from .cloud.client import CloudClient, CloudClientError
from .cloud.protocol import ProtocolError
from .cloud.registry import FusionPolicy, Registry, RegistryError
from .cloud.serialization import FormatError, canonical_json, load_model, model_to_doc, save_model
from .fusion import FusionConfig, FusionError, fuse
from .harness import (ExperimentPlan, PlotFormatError, ci_plan, emit_plots, run_generalization,
                      run_lifelong, run_transfer_comparison, write_json)

log = logging.getLogger("lfrl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _plan(args) -> ExperimentPlan:
    if args.config:
        plan = ExperimentPlan.load(args.config)
    elif args.scale == "ci":
        plan = ci_plan()
    else:
        plan = ExperimentPlan()
    over = {}
    if args.seed is not None:
        over["seeds"] = list(args.seed)
    if args.out is not None:
        over["out"] = args.out
    if args.cloud is not None:
        over["cloud"] = args.cloud
    if getattr(args, "transfer", None) is not None:
        over["transfer"] = args.transfer
    if getattr(args, "workers", None) is not None:
        over["workers"] = args.workers
    return replace(plan, **over) if over else plan


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# -------------------------------------------------------------- commands

def cmd_lifelong(args) -> int:
    plan = _plan(args)
    write_json(Path(plan.out) / "plan.json", plan.to_dict())
    report = run_lifelong(plan)
    for st in report["stages"]:
        arms = ", ".join(f"{a}={v['median_episodes_to_threshold']}" for a, v in st["arms"].items())
        print(f"stage {st['stage']} ({st['world']}): median episodes-to-threshold {arms}")
    print(f"report: {Path(plan.out) / 'lifelong' / 'report.json'}")
    return EXIT_OK


def cmd_generalize(args) -> int:
    plan = _plan(args)
    candidates = None
    if args.shared:
        models = {"shared": load_model(args.shared)}
        models.update({f"model-{k}": load_model(p) for k, p in enumerate(args.generic, start=1)})
        candidates = {s: models for s in plan.seeds}
    report = run_generalization(plan, candidates)
    for e in report["envs"]:
        print(f"{e['world']}: episodes rank {e['rank_episodes_to_threshold']}, "
              f"last-five rank {e['rank_last_five_mean']}")
    return EXIT_OK


def cmd_transfer_compare(args) -> int:
    plan = _plan(args)
    if args.world:
        plan = replace(plan, transfer_world=args.world)
    shared = {s: load_model(args.shared) for s in plan.seeds} if args.shared else None
    report = run_transfer_comparison(plan, shared)
    for arm, a in report["arms"].items():
        print(f"{arm}: median episodes-to-threshold {a['median_episodes_to_threshold']}, "
              f"inter-seed std {a['inter_seed_std']:.2f}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .cloud.server import CloudServer, parse_address

    seed = args.seed[0] if args.seed else 0
    fusion = FusionConfig(**json.loads(Path(args.fusion_config).read_text())) if args.fusion_config else None
    policy = FusionPolicy(every=args.fusion_every or None, interval_s=args.fusion_interval)
    registry = Registry(args.model_dir, seed=seed, fusion_config=fusion, policy=policy)
    server = CloudServer(parse_address(args.bind), registry, policy).start()
    print(f"cloud listening on {server.address} (generation {registry.generation})", flush=True)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    http = None
    if args.http:
        import uvicorn

        from .service import create_app

        host, port = parse_address(args.http)
        http = uvicorn.Server(uvicorn.Config(create_app(registry), host=host, port=port, log_level="warning"))
        threading.Thread(target=http.run, daemon=True).start()
        print(f"http listening on {host}:{port}", flush=True)
    stop.wait()
    if http is not None:
        http.should_exit = True
    server.close()
    return EXIT_OK


def cmd_fuse(args) -> int:
    actors = [load_model(p) for p in args.models]
    cfg = FusionConfig(**json.loads(Path(args.fusion_config).read_text())) if args.fusion_config else FusionConfig()
    over = {}
    if args.samples is not None:
        over["samples"] = args.samples
    if args.seed:
        over["sample_seed"] = over["init_seed"] = args.seed[0]
    cfg = replace(cfg, **over)
    result = fuse(actors, cfg)
    out = Path(args.output)
    save_model(result.params, out)
    report_path = out.with_suffix(".report.json")
    report = {**result.report.to_dict(), "fusion_config": cfg.to_dict()}
    report_path.write_bytes(canonical_json(report))
    r = result.report
    print(f"fused {r.n_actors} models: holdout MSE {r.holdout_mse:.4f}, "
          f"argmax agreement {r.fidelity_argmax_agreement:.3f}; wrote {out} and {report_path}")
    return EXIT_OK


def cmd_plot(args) -> int:
    written = emit_plots(args.csv_dir, args.out, smooth=args.smooth, bin_size=args.bin, png=args.png)
    print(f"wrote {len(written)} plot files")
    return EXIT_OK


def _http(url: str, path: str, body: dict | None = None) -> dict:
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(url.rstrip("/") + path, data=data,
                                 headers={"Content-Type": "application/json"}, method="POST" if data else "GET")
    with urllib.request.urlopen(req, timeout=60) as resp:
        return json.loads(resp.read())


def _cloud_addr(args) -> str:
    if not args.cloud or args.cloud == "inproc":
        raise SystemExit("this command needs --cloud host:port or --cloud http://host:port")
    return args.cloud


def cmd_status(args) -> int:
    addr = _cloud_addr(args)
    if addr.startswith("http"):
        _print_json(_http(addr, "/health"))
    else:
        with CloudClient(addr, "cli") as c:
            _print_json(c.status())
    return EXIT_OK


def cmd_download(args) -> int:
    addr = _cloud_addr(args)
    if addr.startswith("http"):
        from .cloud.serialization import doc_to_model

        reply = _http(addr, "/shared")
        g, params = reply["generation"], doc_to_model(reply["model"])
    else:
        with CloudClient(addr, "cli") as c:
            g, params = c.download()
    save_model(params, args.output, generation=g)
    print(f"generation {g} checksum {params.checksum()} -> {args.output}")
    return EXIT_OK


def cmd_upload(args) -> int:
    addr = _cloud_addr(args)
    params = load_model(args.model)
    if addr.startswith("http"):
        reply = _http(addr, "/uploads", {"model": model_to_doc(params), "robot_id": args.robot_id,
                                         "env_tag": args.env_tag})
        uid = reply["upload_id"]
    else:
        with CloudClient(addr, args.robot_id) as c:
            uid = c.upload(params, args.env_tag)
    print(f"accepted as {uid}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _seed_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand without clobbering
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=_seed_list, help="seed or comma list (0,1,2); experiments run one paired "
                                                         "replicate per seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="JSON plan file")
    common.add_argument("--cloud", help="inproc, tcp (local server per lineage), host:port or http://host:port")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lfrl", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    def experiment(sp):
        sp.add_argument("--scale", choices=("ci", "full"), default="full", help="preset when --config is absent")
        sp.add_argument("--workers", type=int, help="worker processes for independent runs")

    sp = add("lifelong", cmd_lifelong, "scratch vs lifelong federated curriculum")
    experiment(sp)
    sp.add_argument("--transfer", choices=("warm_start", "feature_extractor", "none"))

    sp = add("generalize", cmd_generalize, "warm-start candidate models in unseen worlds")
    experiment(sp)
    sp.add_argument("--shared", help="shared model file; default: products of a lifelong run in --out")
    sp.add_argument("--generic", nargs="*", default=[], help="generic model files")

    sp = add("transfer-compare", cmd_transfer_compare, "scratch vs warm-start vs feature-extractor")
    experiment(sp)
    sp.add_argument("--shared", help="shared model file; default: final shared model of a lifelong run")
    sp.add_argument("--world", help="world name or file")

    sp = add("serve", cmd_serve, "run the cloud server")
    sp.add_argument("--bind", default="127.0.0.1:7070")
    sp.add_argument("--model-dir", help="persist generations and pending uploads here")
    sp.add_argument("--fusion-every", type=int, default=1, help="fuse after N uploads; 0 disables")
    sp.add_argument("--fusion-interval", type=float, help="also fuse pending uploads every S seconds")
    sp.add_argument("--fusion-config", help="JSON fusion settings")
    sp.add_argument("--http", help="also serve the HTTP API on host:port")

    sp = add("fuse", cmd_fuse, "fuse model files offline")
    sp.add_argument("models", nargs="+")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--fusion-config")

    sp = add("plot", cmd_plot, "gnuplot-ready curves from episode CSVs")
    sp.add_argument("csv_dir")
    sp.add_argument("--smooth", type=int, default=10)
    sp.add_argument("--bin", type=int, default=10)
    sp.add_argument("--png", action="store_true", help="also render PNGs (needs matplotlib)")

    add("status", cmd_status, "query a cloud")
    sp = add("download", cmd_download, "fetch the shared model")
    sp.add_argument("-o", "--output", required=True)
    sp = add("upload", cmd_upload, "submit a private model")
    sp.add_argument("model")
    sp.add_argument("--env-tag", default="")
    sp.add_argument("--robot-id", default="cli")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("seed", "out", "config", "cloud", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingError, FusionError, RegistryError, FormatError, PlotFormatError, ProtocolError,
            CloudClientError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
