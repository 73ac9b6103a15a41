"""Versioned JSON experiment configuration with strict key checking."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .activity import VARIABLES
from .evaluate import ExperimentPlan
from .federation import STRATEGIES, AttnAggConfig, MetaConfig, TrainSettings

CONFIG_VERSION = 1

_TOP_KEYS = {
    "version", "dataset", "variable", "include_unspecified", "strategies",
    "rounds", "local_iters", "model", "optimizer", "meta", "aggregation",
    "pretrain", "folds", "seeds", "fold_seed", "output_dir",
}
_DATASET_KEYS_GENERATED = {"kind", "spec_path", "seed"}
_DATASET_KEYS_CSV = {"kind", "events_path", "students_path", "n_videos", "max_sequence"}
_MODEL_KEYS = {"hidden_dim", "dropout", "batch_size"}
_OPT_KEYS = {"kind", "lr", "decay"}
_META_KEYS = {"inner_lr", "outer_lr", "mode", "hessian_step", "meta_batch"}
_AGG_KEYS = {"step", "mode"}
_PRETRAIN_KEYS = {"enabled", "epochs"}


class ConfigError(ValueError):
    """Raised for any malformed or inconsistent experiment configuration."""


@dataclass
class DatasetSource:
    kind: str                     # "generated" or "csv"
    spec_path: str | None = None
    seed: int = 0
    events_path: str | None = None
    students_path: str | None = None
    n_videos: int | None = None
    max_sequence: int = 256


@dataclass
class ExperimentConfig:
    dataset: DatasetSource
    plan: ExperimentPlan
    output_dir: str
    raw: dict


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return section[key]


def _path_exists(path: str, where: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"{where}: path does not exist: {path}")
    return path


def parse_config(data: dict, base_dir: str = ".") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a JSON object")
    _check_keys(data, _TOP_KEYS, "config")
    if data.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {data.get('version')!r}; expected {CONFIG_VERSION}")

    dataset_raw = _require(data, "dataset", "config")
    kind = _require(dataset_raw, "kind", "dataset")
    if kind == "generated":
        _check_keys(dataset_raw, _DATASET_KEYS_GENERATED, "dataset")
        spec_path = os.path.join(base_dir, _require(dataset_raw, "spec_path", "dataset"))
        dataset = DatasetSource(kind="generated",
                                spec_path=_path_exists(spec_path, "dataset.spec_path"),
                                seed=int(dataset_raw.get("seed", 0)))
    elif kind == "csv":
        _check_keys(dataset_raw, _DATASET_KEYS_CSV, "dataset")
        events = os.path.join(base_dir, _require(dataset_raw, "events_path", "dataset"))
        students = os.path.join(base_dir, _require(dataset_raw, "students_path", "dataset"))
        dataset = DatasetSource(
            kind="csv",
            events_path=_path_exists(events, "dataset.events_path"),
            students_path=_path_exists(students, "dataset.students_path"),
            n_videos=int(_require(dataset_raw, "n_videos", "dataset")),
            max_sequence=int(dataset_raw.get("max_sequence", 256)),
        )
    else:
        raise ConfigError(f"dataset.kind must be 'generated' or 'csv', got {kind!r}")

    variable = data.get("variable", "G")
    if variable not in VARIABLES:
        raise ConfigError(f"variable must be one of {VARIABLES}, got {variable!r}")

    strategies = data.get("strategies", ["PerFedAttn"])
    if not isinstance(strategies, list) or not strategies:
        raise ConfigError("strategies must be a non-empty list")
    for strategy in strategies:
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")

    model_raw = data.get("model", {})
    _check_keys(model_raw, _MODEL_KEYS, "model")
    opt_raw = data.get("optimizer", {})
    _check_keys(opt_raw, _OPT_KEYS, "optimizer")
    try:
        settings = TrainSettings(
            hidden_dim=int(model_raw.get("hidden_dim", 48)),
            dropout=float(model_raw.get("dropout", 0.5)),
            batch_size=int(model_raw.get("batch_size", 8)),
            opt_kind=str(opt_raw.get("kind", "adam")),
            lr=float(opt_raw.get("lr", 1e-3)),
            decay=float(opt_raw.get("decay", 1e-3)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if settings.hidden_dim < 1 or settings.batch_size < 1:
        raise ConfigError("model.hidden_dim and model.batch_size must be >= 1")
    if not 0.0 <= settings.dropout < 1.0:
        raise ConfigError("model.dropout must lie in [0, 1)")

    meta_raw = data.get("meta", {})
    _check_keys(meta_raw, _META_KEYS, "meta")
    try:
        meta_batch = meta_raw.get("meta_batch")
        meta = MetaConfig(
            inner_lr=float(meta_raw.get("inner_lr", 0.01)),
            outer_lr=float(meta_raw.get("outer_lr", settings.lr)),
            mode=str(meta_raw.get("mode", "first_order")),
            hessian_step=float(meta_raw.get("hessian_step", 1e-4)),
            meta_batch=int(meta_batch) if meta_batch is not None else None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    agg_raw = data.get("aggregation", {})
    _check_keys(agg_raw, _AGG_KEYS, "aggregation")
    try:
        attn = AttnAggConfig(
            step=float(agg_raw.get("step", 1.0)),
            mode=str(agg_raw.get("mode", "per_layer")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    pretrain_raw = data.get("pretrain", {})
    _check_keys(pretrain_raw, _PRETRAIN_KEYS, "pretrain")
    pretrain_enabled = bool(pretrain_raw.get("enabled", False))
    pretrain_epochs = int(pretrain_raw.get("epochs", 10))
    if pretrain_epochs < 0:
        raise ConfigError("pretrain.epochs must be >= 0")

    rounds = int(data.get("rounds", 10))
    local_iters = int(data.get("local_iters", 5))
    folds = int(data.get("folds", 5))
    seeds = data.get("seeds", [0, 1, 2, 3, 4])
    if rounds < 0 or local_iters < 1:
        raise ConfigError("need rounds >= 0 and local_iters >= 1")
    if folds < 1:
        raise ConfigError("folds must be >= 1")
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")

    plan = ExperimentPlan(
        variable=variable,
        include_unspecified=bool(data.get("include_unspecified", False)),
        strategies=tuple(strategies),
        rounds=rounds,
        local_iters=local_iters,
        settings=settings,
        meta=meta,
        attn=attn,
        pretrain_enabled=pretrain_enabled,
        pretrain_epochs=pretrain_epochs,
        folds=folds,
        seeds=tuple(seeds),
        fold_seed=int(data.get("fold_seed", 1234)),
    )
    output_dir = os.path.join(base_dir, data.get("output_dir", "out"))
    return ExperimentConfig(dataset=dataset, plan=plan, output_dir=output_dir, raw=data)


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file does not exist: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data, base_dir=os.path.dirname(os.path.abspath(path)))
