"""Command-line experiment harness.

Verbs:
  run       train one scenario from a config file, writing artifacts
  sweep     run the alpha grid {0.1, 0.25, 0.5, 0.75, 1} off one base config
  compare   paired-seed comparison of two sets of run directories
  verify    run the analytical self-check suites
  gen-data  materialize a scenario's train/meta/test splits as CSV

Exit codes: 0 success, 1 verification failure, 2 invalid configuration or
inputs, 3 numerical abort during training.  Relative output directories are
resolved under $ADVAUG_OUTPUT_ROOT (default: current directory).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import classifier as classifier_mod
from . import perturbation as perturbation_mod
from .config import ConfigError, RunConfig, parse_config, trainer_config, write_resolved
from .data import DataError, Dataset, save_csv
from .metrics import compare_runs, run_summary
from .scenarios import build_scenario
from .training import NumericalAbort, train
from .verification import run_all

OUTPUT_ROOT_ENV = "ADVAUG_OUTPUT_ROOT"

ALPHA_GRID = (0.1, 0.25, 0.5, 0.75, 1.0)


def _fail(message: str, code: int) -> int:
    print(message, file=sys.stderr)
    return code


def _resolve_output(configured: str, override: str | None) -> Path:
    raw = Path(override) if override else Path(configured)
    if not raw.is_absolute():
        raw = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / raw
    return raw


def _execute_run(cfg: RunConfig, out_dir: Path) -> tuple[int, dict | None]:
    """Train one configuration and write its artifacts."""
    try:
        data = build_scenario(cfg)
    except (DataError, OSError, ValueError) as exc:
        return _fail(f"config error: {exc}", 2), None

    if cfg.oracle_suite:
        records = run_all(seed=cfg.seed)
        failed = [r for r in records if not r["passed"]]
        for rec in failed:
            print(f"verification failed: {rec['name']}: {rec['detail']}",
                  file=sys.stderr)
        if failed:
            return 1, None

    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        # Divergence is reported once via the exit code; the overflow
        # warnings numpy emits on the way down would only add noise.
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            state, log = train(trainer_config(cfg), data.train, data.meta,
                               eval_data=data.test)
    except NumericalAbort as exc:
        return _fail(f"numerical abort: {exc}", 3), None

    log.write_csv(str(out_dir / "metrics.csv"))
    write_resolved(cfg, str(out_dir / "resolved_config.ini"))
    classifier_mod.save_checkpoint(state.params,
                                   str(out_dir / "classifier.npz"))
    perturbation_mod.save_checkpoint(state.perturb,
                                     str(out_dir / "perturb_net.npz"))
    summary = run_summary(log)
    wg = summary["worst_group_accuracy"]
    full = {
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "alpha": cfg.loss["alpha"],
        "beta": cfg.loss["beta"],
        "t1": cfg.training["t1"],
        "t2": cfg.training["t2"],
        "epochs": int(summary["epochs"]),
        "accuracy": summary["accuracy"],
        "worst_class_recall": summary["worst_class_recall"],
        "worst_group_accuracy": None if math.isnan(wg) else wg,
        "test_loss": summary["test_loss"],
        "per_class_recall": [log.rows[-1][f"recall_{c}"]
                             for c in range(log.num_classes)],
        "events": log.events,
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(full, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0, full


def cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        return _fail(f"config error: {exc}", 2)
    out_dir = _resolve_output(cfg.output_dir, args.output)
    code, summary = _execute_run(cfg, out_dir)
    if code == 0:
        print(f"run complete: {out_dir} "
              f"(accuracy {summary['accuracy']:.4f}, "
              f"worst-class recall {summary['worst_class_recall']:.4f})")
    return code


def cmd_sweep(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        return _fail(f"config error: {exc}", 2)
    root = _resolve_output(f"{cfg.scenario}_alpha_sweep_seed{cfg.seed}",
                           args.output)
    rows = []
    for alpha in ALPHA_GRID:
        member = copy.deepcopy(cfg)
        member.loss["alpha"] = alpha
        member.output_dir = str(root / f"alpha_{alpha}")
        code, summary = _execute_run(member, root / f"alpha_{alpha}")
        if code != 0:
            return code
        rows.append((alpha, summary["accuracy"],
                     summary["worst_class_recall"], summary["test_loss"]))
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep_summary.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "accuracy", "worst_class_recall",
                         "test_loss"])
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
    print("alpha  accuracy  worst_class_recall")
    for alpha, acc, wcr, _ in rows:
        print(f"{alpha:<6g} {acc:<9.4f} {wcr:.4f}")
    print(f"sweep complete: {root}")
    return 0


def _load_summaries(dirs) -> dict[int, dict]:
    out = {}
    for d in dirs:
        path = Path(d) / "summary.json"
        with open(path, encoding="utf-8") as fh:
            summary = json.load(fh)
        seed = summary["seed"]
        if seed in out:
            raise ValueError(f"duplicate seed {seed} in {d}")
        if summary.get("worst_group_accuracy") is None:
            summary["worst_group_accuracy"] = math.nan
        out[seed] = summary
    return out


def cmd_compare(args) -> int:
    try:
        baseline = _load_summaries(args.baseline)
        candidate = _load_summaries(args.candidate)
        report = compare_runs(baseline, candidate)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(f"compare error: {exc}", 2)
    print("seed  accuracy_delta  worst_class_recall_delta")
    for entry in report["per_seed"]:
        print(f"{entry['seed']:<5d} {entry['accuracy_delta']:+.4f}        "
              f"{entry['worst_class_recall_delta']:+.4f}")
    acc = report["accuracy_delta"]
    wcr = report["worst_class_recall_delta"]
    print(f"mean accuracy delta {acc['mean']:+.4f} (std {acc['std']:.4f})")
    print(f"mean worst-class recall delta {wcr['mean']:+.4f} "
          f"(std {wcr['std']:.4f})")
    wg = report["worst_group_delta"]
    if not math.isnan(wg["mean"]):
        print(f"mean worst-group delta {wg['mean']:+.4f} "
              f"(std {wg['std']:.4f})")
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_verify(args) -> int:
    records = run_all(seed=args.seed)
    ok = True
    for rec in records:
        status = "PASS" if rec["passed"] else "FAIL"
        ok = ok and rec["passed"]
        print(f"{rec['name']:<20s} {status}  {rec['detail']}")
    return 0 if ok else 1


def cmd_gen_data(args) -> int:
    try:
        cfg = parse_config(args.config)
        data = build_scenario(cfg)
    except (ConfigError, DataError, OSError, ValueError) as exc:
        return _fail(f"config error: {exc}", 2)
    out_dir = _resolve_output(f"{cfg.scenario}_data_seed{cfg.seed}",
                              args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_csv(data.train, out_dir / "train.csv")
    counts = np.bincount(data.meta.labels,
                         minlength=data.train.num_classes)
    save_csv(Dataset(data.meta.features, data.meta.labels, counts),
             out_dir / "meta.csv")
    save_csv(data.test, out_dir / "test.csv")
    if data.train.noise_mask is not None:
        with open(out_dir / "noise_mask.csv", "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["noisy"])
            for flag in data.train.noise_mask:
                writer.writerow([int(flag)])
    print(f"datasets written: {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advaug",
        description="Adversarial implicit augmentation experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one configured scenario")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--output", help="override the output directory")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="alpha-grid sweep of one config")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--output", help="sweep root directory")
    p_sweep.set_defaults(func=cmd_sweep)

    p_cmp = sub.add_parser("compare",
                           help="paired-seed comparison of run directories")
    p_cmp.add_argument("--baseline", nargs="+", required=True)
    p_cmp.add_argument("--candidate", nargs="+", required=True)
    p_cmp.add_argument("--output", help="write the JSON report here")
    p_cmp.set_defaults(func=cmd_compare)

    p_verify = sub.add_parser("verify", help="run analytical self-checks")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.set_defaults(func=cmd_verify)

    p_gen = sub.add_parser("gen-data", help="write scenario CSV datasets")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--output", help="output directory")
    p_gen.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
