"""Run metrics: evaluation helpers, the per-epoch log, and run comparison.

The log schema is stable and documented so downstream tooling can rely on
column names.  All per-class blocks are sized by the number of classes fixed
at construction time; optional quantities (group accuracy, noisy/clean
perturbation means) are emitted as ``nan`` when the scenario does not define
them.
"""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassifierParams, predict_logits


def evaluate(params: ClassifierParams, features: np.ndarray,
             labels: np.ndarray,
             group_ids: np.ndarray | None = None) -> dict:
    """Detached evaluation: loss, accuracy, per-class recall, worst group."""
    z = predict_logits(params, features)
    labels = np.asarray(labels)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    pred = z.argmax(axis=1)
    correct = pred == labels
    num_classes = z.shape[1]
    recall = np.full(num_classes, np.nan)
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            recall[c] = float(correct[mask].mean())
    out = {
        "loss": loss,
        "accuracy": float(correct.mean()),
        "per_class_recall": recall,
        "worst_class_recall": float(np.nanmin(recall)),
        "worst_group_accuracy": math.nan,
    }
    if group_ids is not None:
        group_ids = np.asarray(group_ids)
        accs = [float(correct[group_ids == g].mean())
                for g in np.unique(group_ids)]
        out["worst_group_accuracy"] = min(accs)
    return out


def log_columns(num_classes: int) -> list[str]:
    """Column names, in emission order, for a run with this many classes."""
    cols = ["epoch", "iteration", "phase", "train_loss", "test_loss",
            "test_accuracy"]
    cols += [f"recall_{c}" for c in range(num_classes)]
    cols += ["worst_group_accuracy"]
    cols += [f"mean_eps_{c}" for c in range(num_classes)]
    cols += [f"adv_ratio_{c}" for c in range(num_classes)]
    cols += ["eps_noisy_mean", "eps_clean_mean",
             "gen_term", "rob_term", "fair_term"]
    return cols


@dataclass
class MetricsLog:
    """Append-only per-epoch record of a training run."""

    num_classes: int
    rows: list[dict] = field(default_factory=list)
    events: list[str] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return log_columns(self.num_classes)

    def append(self, row: dict) -> None:
        cols = self.columns
        missing = set(cols) - set(row)
        extra = set(row) - set(cols)
        if missing or extra:
            raise ValueError(
                f"row keys mismatch: missing {sorted(missing)}, "
                f"unknown {sorted(extra)}")
        self.rows.append({k: row[k] for k in cols})

    def column(self, name: str) -> list:
        if name not in self.columns:
            raise KeyError(name)
        return [row[name] for row in self.rows]

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([_format_cell(row[c]) for c in self.columns])

    @classmethod
    def read_csv(cls, path: str) -> "MetricsLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            raw_rows = [dict(zip(header, row, strict=True)) for row in reader]
        num_classes = sum(1 for c in header if c.startswith("recall_"))
        log = cls(num_classes)
        if header != log.columns:
            raise ValueError(f"unexpected metrics header: {header}")
        for raw in raw_rows:
            row = {}
            for key, text in raw.items():
                if key == "phase":
                    row[key] = text
                elif key in ("epoch", "iteration"):
                    row[key] = int(text)
                else:
                    row[key] = float(text)
            log.append(row)
        return log


def _format_cell(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def run_summary(log: MetricsLog) -> dict:
    """Final-epoch summary used by run artifacts and by `compare`."""
    if not log.rows:
        raise ValueError("empty metrics log")
    last = log.rows[-1]
    recalls = [last[f"recall_{c}"] for c in range(log.num_classes)]
    return {
        "accuracy": last["test_accuracy"],
        "worst_class_recall": float(np.nanmin(np.asarray(recalls))),
        "worst_group_accuracy": last["worst_group_accuracy"],
        "test_loss": last["test_loss"],
        "epochs": last["epoch"],
    }


def compare_runs(baseline: dict[int, dict], candidate: dict[int, dict]) -> dict:
    """Paired, per-seed comparison of two runs' final summaries.

    Both arguments map seed -> summary dict (as from `run_summary`).  The
    seed sets must match exactly; deltas are candidate minus baseline.
    """
    if set(baseline) != set(candidate):
        raise ValueError(
            f"seed sets differ: baseline {sorted(baseline)} vs "
            f"candidate {sorted(candidate)}")
    if not baseline:
        raise ValueError("no seeds to compare")
    per_seed = []
    for seed in sorted(baseline):
        b, c = baseline[seed], candidate[seed]
        entry = {
            "seed": seed,
            "accuracy_delta": c["accuracy"] - b["accuracy"],
            "worst_class_recall_delta":
                c["worst_class_recall"] - b["worst_class_recall"],
        }
        bg, cg = b["worst_group_accuracy"], c["worst_group_accuracy"]
        if not (math.isnan(bg) or math.isnan(cg)):
            entry["worst_group_delta"] = cg - bg
        per_seed.append(entry)

    def agg(key: str) -> dict:
        vals = [e[key] for e in per_seed if key in e]
        if not vals:
            return {"mean": math.nan, "std": math.nan}
        std = statistics.pstdev(vals) if len(vals) > 1 else 0.0
        return {"mean": statistics.fmean(vals), "std": std}

    return {
        "per_seed": per_seed,
        "accuracy_delta": agg("accuracy_delta"),
        "worst_class_recall_delta": agg("worst_class_recall_delta"),
        "worst_group_delta": agg("worst_group_delta"),
    }
