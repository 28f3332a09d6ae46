"""Experiment configuration: a versioned JSON document that names the model,
the data source, training settings, and evaluation settings.

Validation returns every violated field at once rather than stopping at the
first, and parse -> serialize -> parse is a fixed point.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelSpec, validate_spec
from .training import TrainConfig

SCHEMA_VERSION = 1
DATASET_KINDS = ("idx", "toy", "synthetic-digits", "synthetic-letters")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "out"
    model: dict = None
    dataset: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return {"schema_version": self.schema_version, "seed": self.seed,
                "out_dir": self.out_dir, "model": self.model,
                "dataset": self.dataset, "training": self.training,
                "eval": self.eval}

    @classmethod
    def from_dict(cls, d):
        known = {"schema_version", "seed", "out_dir", "model", "dataset",
                 "training", "eval"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        return cls(seed=d.get("seed", 0), out_dir=d.get("out_dir", "out"),
                   model=d.get("model"), dataset=d.get("dataset", {}),
                   training=d.get("training", {}), eval=d.get("eval", {}),
                   schema_version=d.get("schema_version", -1))

    def model_spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.model)

    def train_config(self) -> TrainConfig:
        merged = dict(self.training)
        merged.setdefault("seed", self.seed)
        return TrainConfig.from_dict(merged)


def validate_config(config: ExperimentConfig, need_model=False, need_dataset=False):
    """Collect every violated field; empty list means valid."""
    problems = []
    if config.schema_version != SCHEMA_VERSION:
        problems.append(f"schema_version must be {SCHEMA_VERSION}, "
                        f"got {config.schema_version}")
    if not isinstance(config.seed, int) or not (-2 ** 63 <= config.seed < 2 ** 63):
        problems.append(f"seed must be a 64-bit integer, got {config.seed!r}")
    if need_model:
        if config.model is None:
            problems.append("model: missing")
        else:
            try:
                problems += [f"model: {p}" for p in validate_spec(config.model_spec())]
            except (KeyError, TypeError, ValueError) as exc:
                problems.append(f"model: unparseable ({exc})")
    if need_dataset or config.dataset:
        kind = config.dataset.get("kind")
        if kind not in DATASET_KINDS:
            problems.append(f"dataset.kind must be one of {DATASET_KINDS}, got {kind!r}")
        elif kind == "idx":
            for key in ("images", "labels"):
                path = config.dataset.get(key)
                if not path:
                    problems.append(f"dataset.{key}: missing")
                elif not os.path.exists(path):
                    problems.append(f"dataset.{key}: no such file {path!r}")
    if config.training:
        try:
            problems += [f"training: {p}" for p in config.train_config().validate()]
        except ConfigError as exc:
            problems += [f"training: {p}" for p in exc.fields]
    ev = config.eval
    for key, low in (("n_samples", 1), ("grid_points", 2)):
        value = ev.get(key, low)
        if not isinstance(value, int) or value < low:
            problems.append(f"eval.{key} must be an integer >= {low}, got {value!r}")
    eps = ev.get("epsilons", [])
    if not all(isinstance(e, (int, float)) for e in eps):
        problems.append("eval.epsilons must be numbers")
    else:
        if any(e < 0 for e in eps):
            problems.append("eval.epsilons must be nonnegative")
        if any(b < a for a, b in zip(eps, eps[1:])):
            problems.append("eval.epsilons must be nondecreasing")
    return problems


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"])
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
