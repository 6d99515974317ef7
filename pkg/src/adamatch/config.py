"""Flat dotted-key configuration files (``adamatch.tau = 0.9``).

One ``key = value`` per line, ``#`` starts a comment. Every key must exist in
:data:`SCHEMA`; overrides from the command line are applied last.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .algorithms import AdaMatchConfig
from .augment import AugmentPolicy
from .data import (DOMAINS, TASK_KINDS, UDA, Dataset, TaskSpec, build_task, load_domain,
                   parse_shift, shift_domain, skew_classes, stratified_split)
from .nn.optim import Optimizer
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.strip() in ("", "none") else int(text)


def _floats(text: str):
    t = text.strip()
    return None if t in ("", "none") else [float(v) for v in t.split(",")]


# key -> (parser, default)
SCHEMA = {
    "task.source": (str, "mnist5k"),
    "task.target": (str, "digits"),
    "task.kind": (str, UDA),
    "task.n_target_labels": (_opt_int, None),
    "task.seed": (int, 0),
    "task.source_shift": (str, "pad:32"),
    "task.target_shift": (str, "pad:32"),
    "task.imbalance": (float, 1.0),
    "task.test_fraction": (float, 0.3),
    "task.pairs": (str, ""),
    "train.algo": (str, "AdaMatch"),
    "train.total_images": (int, 300_000),
    "train.n_sl": (int, 64),
    "train.checkpoint_every": (int, 8192),
    "train.eval_last_k": (int, 10),
    "train.seed": (int, 0),
    "train.dtype": (str, "float32"),
    "model.width": (int, 16),
    "model.input_side": (int, 32),
    "optim.lr": (float, 0.03),
    "optim.momentum": (float, 0.9),
    "optim.weight_decay": (float, 0.0005),
    "optim.final_lr_fraction": (float, 0.25),
    "adamatch.tau": (float, 0.9),
    "adamatch.uratio": (int, 3),
    "adamatch.target_prior": (_floats, None),
    "adamatch.dist_buffer_len": (int, 128),
    "augment.shift_fraction": (float, 0.125),
    "augment.mirror_x": (_bool, False),
    "augment.cutout_fraction": (float, 0.5),
    "augment.pad_fill": (float, 0.0),
    "ablate.seeds": (int, 3),
}


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def resolve(text: str = "", overrides=()) -> dict:
    """Defaults <- file text <- ``KEY=VALUE`` overrides, parsed and range-checked."""
    raw = parse_lines(text)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {raw[key]!r} ({exc})") from None
        else:
            values[key] = default
    if values["task.kind"] not in TASK_KINDS:
        raise ConfigError(f"task.kind must be one of {TASK_KINDS}")
    for key in ("task.source", "task.target"):
        if values[key] not in DOMAINS:
            raise ConfigError(f"{key}: unknown domain {values[key]!r}; known: {sorted(DOMAINS)}")
    for key in ("task.source_shift", "task.target_shift"):
        try:
            _shift_specs(values[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    if values["task.imbalance"] < 1 or not 0 < values["task.test_fraction"] < 1:
        raise ConfigError("task.imbalance must be >= 1 and task.test_fraction in (0, 1)")
    if values["ablate.seeds"] < 1:
        raise ConfigError("ablate.seeds must be positive")
    try:
        train_config(values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return values


def dump(values: dict) -> str:
    return "".join(f"{k} = {_format(values[k])}\n" for k in SCHEMA)


def train_config(values: dict) -> TrainConfig:
    prior = values["adamatch.target_prior"]
    return TrainConfig(
        algo=values["train.algo"],
        total_images=values["train.total_images"],
        n_sl=values["train.n_sl"],
        checkpoint_every=values["train.checkpoint_every"],
        eval_last_k=values["train.eval_last_k"],
        seed=values["train.seed"],
        width=values["model.width"],
        input_side=values["model.input_side"],
        dtype=values["train.dtype"],
        optimizer=Optimizer(values["optim.lr"], values["optim.momentum"],
                            values["optim.weight_decay"], values["optim.final_lr_fraction"]),
        adamatch=AdaMatchConfig(values["adamatch.tau"], values["adamatch.uratio"],
                                None if prior is None else np.asarray(prior),
                                values["adamatch.dist_buffer_len"]),
        augment=AugmentPolicy(values["augment.shift_fraction"], values["augment.mirror_x"],
                              values["augment.cutout_fraction"], values["augment.pad_fill"]),
    )


def parse_config(path=None, overrides=()):
    """Read a config file and return ``(task_builder, TrainConfig, values)``.

    ``task_builder(data_dir, source=None, target=None)`` materializes the
    configured task (``source``/``target`` override the configured pair).
    """
    text = Path(path).read_text(encoding="utf-8") if path else ""
    values = resolve(text, overrides)
    cfg = train_config(values)

    def builder(data_dir=None, source=None, target=None) -> TaskSpec:
        return make_task(values, data_dir, source, target)

    return builder, cfg, values


@dataclass(frozen=True)
class TaskRecipe:
    source: str
    target: str
    kind: str
    n_target_labels: Optional[int]
    seed: int
    source_shift: str
    target_shift: str
    imbalance: float
    test_fraction: float


def recipe(values: dict, source=None, target=None) -> TaskRecipe:
    return TaskRecipe(source or values["task.source"], target or values["task.target"],
                      values["task.kind"], values["task.n_target_labels"], values["task.seed"],
                      values["task.source_shift"], values["task.target_shift"],
                      values["task.imbalance"], values["task.test_fraction"])


def _shift_specs(text: str) -> list:
    return [parse_shift(item) for item in filter(None, (s.strip() for s in text.split(",")))]


def _shifted(ds: Dataset, shifts: str) -> Dataset:
    for spec in _shift_specs(shifts):
        ds = shift_domain(ds, spec)
    return ds


def materialize(r: TaskRecipe, data_dir=None) -> TaskSpec:
    """Load, split, skew and shift the two domains, then build the task.

    When source and target share a base domain the pool is split in two
    disjoint class-stratified halves first, so no target image is also a
    labeled source image. Domains without a test split get one carved out
    with ``test_fraction``.
    """
    src = load_domain(r.source, data_dir)
    if r.source == r.target:
        a, b = stratified_split(src.labels, 0.5, seed=r.seed)
        src, tgt_pool = src.subset(a), src.subset(b)
    else:
        tgt_pool = load_domain(r.target, data_dir)
    if DOMAINS[r.target].test is not None and r.source != r.target:
        tgt_train, tgt_test = tgt_pool, load_domain(r.target, data_dir, "test")
    else:
        tr, te = stratified_split(tgt_pool.labels, r.test_fraction, seed=r.seed + 1)
        tgt_train, tgt_test = tgt_pool.subset(tr), tgt_pool.subset(te)
    if r.imbalance != 1:
        src = skew_classes(src, r.imbalance, seed=r.seed)
        tgt_train = skew_classes(tgt_train, r.imbalance, seed=r.seed + 1)
        tgt_test = skew_classes(tgt_test, r.imbalance, seed=r.seed + 2)
    src = _shifted(src, r.source_shift)
    tgt_train = _shifted(tgt_train, r.target_shift)
    tgt_test = _shifted(tgt_test, r.target_shift)
    return build_task(src, tgt_train, r.kind, r.n_target_labels, r.seed, target_test=tgt_test)


def make_task(values: dict, data_dir=None, source=None, target=None) -> TaskSpec:
    return materialize(recipe(values, source, target), data_dir)


def with_overrides(values: dict, **changes) -> dict:
    """Copy of ``values`` with dotted keys given as ``task__kind=...`` keyword args."""
    out = dict(values)
    for k, v in changes.items():
        key = k.replace("__", ".")
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key}")
        out[key] = v
    return out


__all__ = ["ConfigError", "SCHEMA", "TaskRecipe", "dump", "materialize", "parse_config",
           "recipe", "resolve", "train_config", "with_overrides"]
