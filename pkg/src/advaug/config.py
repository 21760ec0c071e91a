"""Run configuration: flat INI files with sections mirroring the modules.

Every key is typed and validated; unknown sections or keys are rejected so
config typos cannot silently change an experiment.  `write_resolved`
materializes all defaults, producing a file that reproduces the run exactly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

SCENARIOS = ("longtail", "noise", "subpop", "custom-csv")


class ConfigError(ValueError):
    pass


_REQUIRED = object()


def _cast_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _cast_hidden(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _cast_std(text: str) -> float | tuple[float, ...]:
    # Scalar shared by all classes, or a comma list with one std per class.
    parts = [part for part in text.split(",") if part.strip()]
    if len(parts) <= 1:
        return float(text)
    return tuple(float(part) for part in parts)


_RUN_SCHEMA = {
    "scenario": (str, _REQUIRED),
    "seed": (int, 0),
    "output_dir": (str, ""),
    "oracle_suite": (_cast_bool, False),
}

_BLOB_KEYS = {
    "num_classes": (int, 5),
    "dim": (int, 5),
    "radius": (float, 2.2),
    "blob_std": (_cast_std, 1.0),
    "nuisance_std": (float, 1.0),
    "meta_per_class": (int, 10),
    "test_per_class": (int, 250),
}

_DATA_SCHEMA = {
    "longtail": {
        **_BLOB_KEYS,
        "n_max": (int, 2000),
        "imbalance_ratio": (float, 100.0),
    },
    "noise": {
        **_BLOB_KEYS,
        "per_class": (int, 400),
        "noise_kind": (str, "flip"),
        "noise_rate": (float, 0.4),
    },
    "subpop": {
        "core_sep": (float, 2.0),
        "spurious_sep": (float, 4.0),
        "train_majority": (float, 0.45),
        "test_majority": (float, 0.25),
        "n_train": (int, 2000),
        "n_test": (int, 2000),
        "core_dim": (int, 2),
        "spurious_dim": (int, 2),
        "meta_size": (int, 40),
    },
    "custom-csv": {
        "train_csv": (str, _REQUIRED),
        "meta_csv": (str, _REQUIRED),
        "test_csv": (str, _REQUIRED),
    },
}

_MODEL_SCHEMA = {
    "hidden": (_cast_hidden, (64, 64)),
    "feat_dim": (int, 16),
    "perturb_hidden": (int, 100),
}

_LOSS_SCHEMA = {
    "alpha": (float, 0.5),
    "beta": (float, 1.0),
}

_TRAINING_SCHEMA = {
    "t1": (int, -1),  # -1 resolves to 30% of t2
    "t2": (int, 1500),
    "eta1": (float, 0.05),
    "eta2": (float, 1e-3),
    "batch_train": (int, 64),
    "batch_meta": (int, 32),
    "momentum": (float, 0.9),
    "weight_decay": (float, 5e-4),
    "freeze_eps": (_cast_bool, False),
    "detach_rho": (_cast_bool, False),
    "diagonal_sigma": (_cast_bool, False),
}


@dataclass
class RunConfig:
    """Fully resolved run description (all defaults materialized)."""

    scenario: str
    seed: int
    output_dir: str
    oracle_suite: bool
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)


def _schema_for(scenario: str) -> dict[str, dict]:
    return {
        "run": _RUN_SCHEMA,
        "data": _DATA_SCHEMA[scenario],
        "model": _MODEL_SCHEMA,
        "loss": _LOSS_SCHEMA,
        "training": _TRAINING_SCHEMA,
    }


def _resolve_section(name: str, schema: dict, given: dict[str, str]) -> dict:
    out = {}
    for key, (cast, default) in schema.items():
        if key in given:
            try:
                out[key] = cast(given[key])
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from exc
        elif default is _REQUIRED:
            raise ConfigError(f"[{name}] missing required key '{key}'")
        else:
            out[key] = default
    unknown = set(given) - set(schema)
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {sorted(unknown)}")
    return out


def parse_config(path: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file: {path}")
    sections = {name: dict(parser.items(name)) for name in parser.sections()}
    if parser.defaults():
        raise ConfigError("top-level keys outside any section are not allowed")

    run_raw = sections.pop("run", None)
    if run_raw is None:
        raise ConfigError("missing [run] section")
    scenario = run_raw.get("scenario")
    if scenario not in SCENARIOS:
        raise ConfigError(
            f"[run] scenario must be one of {SCENARIOS}, got {scenario!r}")

    schema = _schema_for(scenario)
    run = _resolve_section("run", schema["run"], run_raw)
    resolved = {}
    for name in ("data", "model", "loss", "training"):
        resolved[name] = _resolve_section(name, schema[name],
                                          sections.pop(name, {}))
    if sections:
        raise ConfigError(f"unknown sections: {sorted(sections)}")

    cfg = RunConfig(scenario=scenario, seed=run["seed"],
                    output_dir=run["output_dir"],
                    oracle_suite=run["oracle_suite"], **resolved)
    _validate(cfg)
    if cfg.training["t1"] < 0:
        cfg.training["t1"] = int(round(0.3 * cfg.training["t2"]))
    if not cfg.output_dir:
        cfg.output_dir = f"{cfg.scenario}_seed{cfg.seed}"
    return cfg


def _validate(cfg: RunConfig) -> None:
    tr = cfg.training
    if tr["t2"] < 1:
        raise ConfigError("[training] t2 must be >= 1")
    if tr["t1"] > tr["t2"]:
        raise ConfigError("[training] t1 must not exceed t2")
    if tr["eta1"] < 0 or tr["eta2"] < 0:
        raise ConfigError("[training] learning rates must be non-negative")
    if tr["batch_train"] < 1 or tr["batch_meta"] < 1:
        raise ConfigError("[training] batch sizes must be positive")
    if cfg.loss["alpha"] < 0 or cfg.loss["beta"] < 0:
        raise ConfigError("[loss] alpha and beta must be non-negative")
    if cfg.scenario in ("longtail", "noise"):
        std = cfg.data["blob_std"]
        stds = std if isinstance(std, tuple) else (std,)
        if any(s <= 0 for s in stds):
            raise ConfigError("[data] blob_std must be positive")
        if isinstance(std, tuple) and len(std) != cfg.data["num_classes"]:
            raise ConfigError(
                "[data] per-class blob_std needs one value per class")
    if cfg.scenario == "noise":
        kind = cfg.data["noise_kind"]
        if kind not in ("uniform", "flip"):
            raise ConfigError(
                f"[data] noise_kind must be uniform or flip, got {kind!r}")
        if not 0.0 <= cfg.data["noise_rate"] < 1.0:
            raise ConfigError("[data] noise_rate must be in [0, 1)")
    if cfg.scenario == "subpop":
        for key in ("train_majority", "test_majority"):
            if not 0.0 < cfg.data[key] < 0.5:
                raise ConfigError(f"[data] {key} must be in (0, 0.5)")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_resolved(cfg: RunConfig, path: str) -> None:
    """Write a fully explicit config that reproduces this run."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {
        "scenario": cfg.scenario,
        "seed": str(cfg.seed),
        "output_dir": cfg.output_dir,
        "oracle_suite": _format_value(cfg.oracle_suite),
    }
    for name in ("data", "model", "loss", "training"):
        parser[name] = {k: _format_value(v)
                        for k, v in getattr(cfg, name).items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def trainer_config(cfg: RunConfig):
    """Map a RunConfig onto the trainer's hyperparameter set."""
    from .training import TrainerConfig

    return TrainerConfig(
        t1=cfg.training["t1"], t2=cfg.training["t2"],
        eta1=cfg.training["eta1"], eta2=cfg.training["eta2"],
        batch_train=cfg.training["batch_train"],
        batch_meta=cfg.training["batch_meta"],
        alpha=cfg.loss["alpha"], beta=cfg.loss["beta"],
        momentum=cfg.training["momentum"],
        weight_decay=cfg.training["weight_decay"],
        hidden=cfg.model["hidden"], feat_dim=cfg.model["feat_dim"],
        perturb_hidden=cfg.model["perturb_hidden"],
        freeze_eps=cfg.training["freeze_eps"],
        detach_rho_w=cfg.training["detach_rho"],
        diagonal_sigma=cfg.training["diagonal_sigma"],
        seed=cfg.seed)
