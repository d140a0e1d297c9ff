"""Command-line entry point: ``noisylab {inject-noise,train,evaluate,suite,plot}``.

Errors print one JSON line ``{"error": <kind>, "field": ..., "message": ...}``
to stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .datahub import NoiseSpec, inject_symmetric_noise, load_packed, save_packed
from .metrics import RunLog, emit_curves, last_k_mean
from .runner import ConfigError, _read_toml, config_from_dict, default_out_root, evaluate_run, run_experiment, run_suite


def _config_data(args) -> dict:
    data = _read_toml(args.config) if args.config else {}
    data.pop("suite", None)
    if args.seed is not None:
        data["seed"] = args.seed
    if getattr(args, "out", None):
        data["out_dir"] = args.out
    return data


def cmd_inject_noise(args) -> dict:
    dataset = load_packed(args.input)
    noisy, mask = inject_symmetric_noise(dataset.with_observed(dataset.true_labels),
                                         NoiseSpec(args.rate, args.seed or 0))
    out = Path(args.out)
    save_packed(noisy, out)
    mask_path = Path(args.mask) if args.mask else out.with_suffix(".mask.csv")
    mask.save(mask_path)
    return {"dataset": str(out), "mask": str(mask_path), "flipped": int(mask.flipped.sum()), "n": len(mask)}


def cmd_train(args) -> dict:
    config = config_from_dict(_config_data(args))
    result = run_experiment(config, resume=args.resume)
    records = result.log.records
    summary = {
        "out_dir": str(result.out_dir),
        "epochs": len(records),
        "final_test_accuracy": records[-1].test_accuracy,
        "backbone_checksum_unchanged": result.backbone_checksum_before == result.backbone_checksum_after,
    }
    if len(records) >= 10:
        summary["last10_mean"] = last_k_mean(result.log, 10)
    return summary


def cmd_evaluate(args) -> dict:
    test = load_packed(args.data, split="test") if args.data else None
    return evaluate_run(args.run, test)


def cmd_suite(args) -> dict:
    data = _read_toml(args.config)
    suite = data.pop("suite", {})
    if args.seed is not None:
        suite["seeds"] = [args.seed]
    unknown = set(suite) - {"methods", "noise_rates", "seeds", "workers", "last_k"}
    if unknown:
        raise ConfigError(f"suite.{sorted(unknown)[0]}", "unknown field")
    out = args.out or data.pop("out_dir", None) or str(default_out_root() / "suite")
    data.pop("out_dir", None)
    res = run_suite(data, suite.get("methods", ["CUFIT"]), suite.get("noise_rates", [0.4]),
                    tuple(suite.get("seeds", [0, 1, 2])), out, suite.get("workers", 1), suite.get("last_k", 10))
    failed = [c for c in res["cells"] if c.error]
    return {
        "out_dir": str(res["out_dir"]),
        "table": {m: {f"{r:g}": v for r, v in row.items()} for m, row in res["table"].items()},
        "failed_cells": [{"method": c.method, "noise_rate": c.noise_rate, "seed": c.seed, "error": c.error} for c in failed],
    }


def cmd_plot(args) -> dict:
    logs = [RunLog.load(Path(p)) for p in args.runs]
    written = emit_curves(logs, args.out, render=not args.no_render)
    return {"written": [str(p) for p in written]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisylab", description="Noisy-label fine-tuning laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inject-noise", help="Inject symmetric label noise into a packed dataset.")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask", help="corruption mask output (default: <out>.mask.csv)")
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("train", help="Train one configured method.")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Evaluate a finished run's checkpoint.")
    p.add_argument("--run", required=True)
    p.add_argument("--data", help="packed test set (default: the run's own test split)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("suite", help="Run methods x noise rates x seeds.")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("plot", help="Emit per-metric CSVs and charts from run directories.")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-render", action="store_true")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = args.func(args)
    except Exception as exc:
        err = {"error": type(exc).__name__, "field": getattr(exc, "field", None), "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
