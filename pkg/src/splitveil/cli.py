"""Command-line entry point: ``splitveil <command> [flags]``.

Exit status is 0 on success, 2 for usage errors (argparse) and 1 for any
other failure, reported as a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import threading
from pathlib import Path

import numpy as np

from .attack import run_attack
from .calibration import PrivacyBudget, calibrate, sigma_for_budget
from .config import REFERENCE_SWEEP, ConfigError, RunConfig, load_config
from .defense import DEFENSES, DataConfig, evaluate_utility, load_run, save_run, train

log = logging.getLogger("splitveil")

DEFAULT_OUT_DIR = "splitveil-out"
COMMANDS = ("train", "attack", "eval", "calibrate", "serve", "infer", "sweep", "ablation")


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    return Path(args.out_dir or os.environ.get("SPLITVEIL_OUT_DIR") or DEFAULT_OUT_DIR)


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(defense=args.defense, fsinfo=args.fsinfo, dfil=args.dfil, lam=args.lam,
                              retained=args.retained, epochs=args.epochs, seed=args.seed)


def _echo(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml())


def _run_data(meta: dict):
    return DataConfig(**meta["config"]["data"]).load()


# -- commands ---------------------------------------------------------------------

def cmd_train(args) -> dict:
    cfg = resolve_config(args)
    out = _out_dir(args)
    res = train(cfg.train)
    save_run(res, out)
    _echo(cfg, out)
    summary = {"command": "train", "defense": cfg.train.defense, "seed": cfg.train.seed,
               "accuracy": res.report.accuracy, "sigma": res.report.sigma}
    _dump(out / "train_summary.json", {**summary, "config": cfg.to_dict()})
    return {**summary, "run": str(out)}


def cmd_attack(args) -> dict:
    cfg = resolve_config(args)
    out = _out_dir(args)
    if args.run:
        pipeline, _, _, meta = load_run(args.run)
        data = _run_data(meta)
    else:
        res = train(cfg.train)
        save_run(res, out)
        pipeline, data = res.pipeline, res.data
    report, _ = run_attack(pipeline, data.aux_x, data.test_x, cfg.attack, grid_path=out / "grid.png")
    _echo(cfg, out)
    _dump(out / "attack_report.json", {"config": cfg.to_dict(), "run": args.run,
                                       **report.deterministic_view()})
    _dump(out / "attack_timing.json", {"wall_clock_s": report.wall_clock_s})
    return {"command": "attack", "mse": report.mean_mse, "grid": str(out / "grid.png")}


def cmd_eval(args) -> dict:
    if not args.run:
        raise ConfigError("eval needs --run DIR")
    pipeline, top, _, meta = load_run(args.run)
    data = _run_data(meta)
    seed = args.seed or 0
    acc = evaluate_utility(pipeline, top, data.test_x, data.test_y, seed=seed)
    return {"command": "eval", "accuracy": acc, "n": int(len(data.test_y)), "sigma": pipeline.sigma, "seed": seed}


def cmd_calibrate(args) -> dict:
    cfg = resolve_config(args)
    kind = "dfil" if args.dfil is not None and args.fsinfo is None else "fsinfo"
    target = args.dfil if kind == "dfil" else (args.fsinfo if args.fsinfo is not None else cfg.train.fsinfo)
    budget = PrivacyBudget(kind, target)
    if args.probe == "identity":
        scale = sigma_for_budget(np.eye(args.probe_dim), budget)
        return {"command": "calibrate", "probe": "identity", "budget": kind, "target": target,
                "sigma": scale.sigma}
    if not args.run:
        raise ConfigError("calibrate needs --probe identity or --run DIR")
    pipeline, _, _, meta = load_run(args.run)
    data = _run_data(meta)
    calib = pipeline.preprocess(data.train_x[:cfg.train.calib_size])
    scale = calibrate(pipeline.deterministic, calib, budget)
    return {"command": "calibrate", "run": args.run, "budget": kind, "target": target, "sigma": scale.sigma,
            "rank_warning": scale.rank_warning}


def cmd_serve(args) -> dict:
    from .protocol import serve, top_infer_fn

    if not args.run:
        raise ConfigError("serve needs --run DIR")
    pipeline, top, _, _ = load_run(args.run)
    server = serve(args.bind, top_infer_fn(top), z_shape=pipeline.z_shape, background=True)
    print(json.dumps({"command": "serve", "listening": server.address}), flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return {"command": "serve", "stopped": True}


def cmd_infer(args) -> dict:
    from .protocol import client_infer

    if not args.run or not args.server:
        raise ConfigError("infer needs --run DIR and --server HOST:PORT")
    pipeline, _, _, meta = load_run(args.run)
    data = _run_data(meta)
    n = min(args.count, len(data.test_x))
    labels, _ = client_infer(pipeline, data.test_x[:n], args.server, seed=args.seed or 0)
    acc = float(np.mean(labels == data.test_y[:n])) if n else math.nan
    return {"command": "infer", "n": n, "accuracy": acc, "labels": labels.tolist()}


def cmd_sweep(args) -> dict:
    from .sweep import records_json, run_cells, summarize, write_outputs

    cfg = resolve_config(args)
    if cfg.sweep is None:
        cfg.sweep = REFERENCE_SWEEP
    out = _out_dir(args)
    cells = cfg.sweep.cells(cfg.train)
    records = run_cells(cells, cfg.attack, jobs=args.jobs)
    csv_path, svg_path = write_outputs(records, out, "sweep")
    _echo(cfg, out)
    _dump(out / "sweep_report.json", {"config": cfg.to_dict(), "records": records_json(records),
                                      "summary": summarize(records)})
    return {"command": "sweep", "cells": len(records), "failed": sum(not r.ok for r in records),
            "csv": str(csv_path), "svg": str(svg_path)}


def cmd_ablation(args) -> dict:
    from .sweep import ablation_cells, records_json, run_cells, summarize, write_outputs

    cfg = resolve_config(args)
    seeds = cfg.sweep.seeds if cfg.sweep is not None else [cfg.train.seed]
    out = _out_dir(args)
    records = run_cells(ablation_cells(cfg.train, seeds), cfg.attack, jobs=args.jobs)
    write_outputs(records, out, "ablation")
    _echo(cfg, out)
    table = summarize(records)
    _dump(out / "ablation_report.json", {"config": cfg.to_dict(), "records": records_json(records),
                                         "summary": table})
    for row in table:
        print(f"{row['params']:<18} acc={row['accuracy']:.4f} mse={row['mse']:.4f} "
              f"sigma={row['sigma']:.4g} ok={row['ok']}/{row['runs']}")
    return {"command": "ablation", "variants": [r["params"] for r in table], "csv": str(out / "ablation.csv")}


HANDLERS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "calibrate": cmd_calibrate,
            "serve": cmd_serve, "infer": cmd_infer, "sweep": cmd_sweep, "ablation": cmd_ablation}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes (sweep, ablation)")
    common.add_argument("--out-dir", help="output directory (default $SPLITVEIL_OUT_DIR or ./splitveil-out)")
    common.add_argument("--defense", choices=DEFENSES)
    common.add_argument("--fsinfo", type=float)
    common.add_argument("--dfil", type=float)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--retained", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--run", help="directory written by a previous train command")
    common.add_argument("--bind", default="127.0.0.1:7777")
    common.add_argument("--server", help="HOST:PORT of a running serve command")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(prog="splitveil", description="Split-inference privacy toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {"train": "train a defended split model", "attack": "train and score an inverse-network attack",
             "eval": "test accuracy of a trained run", "calibrate": "print the calibrated noise scale",
             "serve": "serve a run's top model over TCP", "infer": "classify test images through a server",
             "sweep": "utility-privacy sweep (CSV + SVG)", "ablation": "InfoDecom ablation table"}
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "calibrate":
            p.add_argument("--probe", choices=("identity",))
            p.add_argument("--probe-dim", type=int, default=64)
        if name == "infer":
            p.add_argument("--count", type=int, default=100)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    try:
        result = HANDLERS[args.command](args)
    except (ConfigError, ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
