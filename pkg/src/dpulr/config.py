"""Run configuration: typed specs plus strict JSON parsing.

Unknown keys are rejected everywhere so a typo in a config file fails loudly
instead of silently running with a default.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any

from .network import LayerSpec, validate_architecture

__all__ = [
    "ConfigError",
    "DataSpec",
    "OptimizerSpec",
    "PrivacySpec",
    "RunConfig",
    "load_config",
    "parse_config",
]

ALGORITHMS = ("dp-ulr", "dp-sgd")
SAMPLING_MODES = ("poisson", "permutation")
INJECT_MODES = ("preact", "params")
OPTIMIZERS = ("adam", "sgd")
DATA_KINDS = ("synth", "mnist")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class PrivacySpec:
    """Hyperparameters shared by the controller and the accountant."""

    sampling_rate: float  # per-example inclusion probability q
    target_std: float  # required std of the released gradient, per clip unit
    batch_floor: int  # batches smaller than this are rejected and redrawn
    repeats: int  # noisy forward passes averaged per example
    clip_bound: float  # per-example l2 clip
    delta: float
    min_dataset_size: int  # minimum dataset size of the privacy domain

    def __post_init__(self) -> None:
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ConfigError(f"sampling_rate must lie in (0, 1], got {self}")
        if self.target_std <= 0 or self.clip_bound <= 0:
            raise ConfigError(f"target_std and clip_bound must be positive: {self}")
        if self.repeats < 1 or self.batch_floor < 1 or self.min_dataset_size < 1:
            raise ConfigError(f"counts must be >= 1: {self}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self}")


@dataclasses.dataclass(frozen=True)
class OptimizerSpec:
    name: str = "adam"
    learning_rate: float = 0.01
    decay_factor: float = 0.85
    decay_interval_epochs: int = 10

    def __post_init__(self) -> None:
        if self.name not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.name}")
        if self.learning_rate < 0 or self.decay_factor <= 0:
            raise ConfigError(
                f"learning_rate must be >= 0 and decay_factor positive: {self}"
            )
        if self.decay_interval_epochs < 1:
            raise ConfigError(f"decay_interval_epochs must be >= 1: {self}")


@dataclasses.dataclass(frozen=True)
class DataSpec:
    """Dataset source for the CLI train subcommand."""

    kind: str
    # synth fields
    n: int = 2000
    dim: int = 32
    classes: int = 4
    separation: float = 6.0
    seed: int = 0
    valid_fraction: float = 0.2
    # mnist fields
    dir: str = "data/mnist"
    train_limit: int = 0  # 0 means all

    def __post_init__(self) -> None:
        if self.kind not in DATA_KINDS:
            raise ConfigError(f"data kind must be one of {DATA_KINDS}, got {self.kind}")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    architecture: tuple[LayerSpec, ...]
    privacy: PrivacySpec
    optimizer: OptimizerSpec
    epochs: int
    seed: int
    sampling: str = "poisson"
    inject: str = "preact"
    algorithm: str = "dp-ulr"
    data: DataSpec | None = None

    def __post_init__(self) -> None:
        validate_architecture(self.architecture)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {SAMPLING_MODES}")
        if self.inject not in INJECT_MODES:
            raise ConfigError(f"inject must be one of {INJECT_MODES}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")


def _take(d: dict, allowed: dict[str, Any], where: str) -> dict:
    """Pop known keys with defaults; reject anything left over."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    out = {}
    d = dict(d)
    missing = object()
    for key, default in allowed.items():
        val = d.pop(key, missing)
        if val is missing:
            if default is _REQUIRED:
                raise ConfigError(f"{where}: missing required key {key!r}")
            val = default
        out[key] = val
    if d:
        raise ConfigError(f"{where}: unknown keys {sorted(d)}")
    return out


_REQUIRED = object()


def _parse_architecture(raw: Any) -> tuple[LayerSpec, ...]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError("architecture: expected a non-empty list of layers")
    specs = []
    for i, layer in enumerate(raw):
        fields = _take(
            layer,
            {"in": _REQUIRED, "out": _REQUIRED, "activation": "gelu"},
            f"architecture[{i}]",
        )
        try:
            specs.append(
                LayerSpec(
                    in_dim=int(fields["in"]),
                    out_dim=int(fields["out"]),
                    activation=str(fields["activation"]),
                )
            )
        except ValueError as e:
            raise ConfigError(f"architecture[{i}]: {e}") from e
    return tuple(specs)


def parse_config(raw: dict) -> RunConfig:
    top = _take(
        raw,
        {
            "architecture": _REQUIRED,
            "privacy": _REQUIRED,
            "optimizer": {},
            "epochs": _REQUIRED,
            "seed": 0,
            "sampling": "poisson",
            "inject": "preact",
            "algorithm": "dp-ulr",
            "data": None,
        },
        "config",
    )
    privacy = _take(
        top["privacy"],
        {
            "sampling_rate": _REQUIRED,
            "target_std": _REQUIRED,
            "batch_floor": _REQUIRED,
            "repeats": 100,
            "clip_bound": 1.0,
            "delta": 1e-5,
            "min_dataset_size": _REQUIRED,
        },
        "privacy",
    )
    optimizer = _take(
        top["optimizer"],
        {
            "name": "adam",
            "learning_rate": 0.01,
            "decay_factor": 0.85,
            "decay_interval_epochs": 10,
        },
        "optimizer",
    )
    data = None
    if top["data"] is not None:
        fields = _take(
            top["data"],
            {
                "kind": _REQUIRED,
                "n": 2000,
                "dim": 32,
                "classes": 4,
                "separation": 6.0,
                "seed": 0,
                "valid_fraction": 0.2,
                "dir": "data/mnist",
                "train_limit": 0,
            },
            "data",
        )
        data = DataSpec(
            kind=str(fields["kind"]),
            n=int(fields["n"]),
            dim=int(fields["dim"]),
            classes=int(fields["classes"]),
            separation=float(fields["separation"]),
            seed=int(fields["seed"]),
            valid_fraction=float(fields["valid_fraction"]),
            dir=str(fields["dir"]),
            train_limit=int(fields["train_limit"]),
        )
    try:
        return RunConfig(
            architecture=_parse_architecture(top["architecture"]),
            privacy=PrivacySpec(
                sampling_rate=float(privacy["sampling_rate"]),
                target_std=float(privacy["target_std"]),
                batch_floor=int(privacy["batch_floor"]),
                repeats=int(privacy["repeats"]),
                clip_bound=float(privacy["clip_bound"]),
                delta=float(privacy["delta"]),
                min_dataset_size=int(privacy["min_dataset_size"]),
            ),
            optimizer=OptimizerSpec(
                name=str(optimizer["name"]),
                learning_rate=float(optimizer["learning_rate"]),
                decay_factor=float(optimizer["decay_factor"]),
                decay_interval_epochs=int(optimizer["decay_interval_epochs"]),
            ),
            epochs=int(top["epochs"]),
            seed=int(top["seed"]),
            sampling=str(top["sampling"]),
            inject=str(top["inject"]),
            algorithm=str(top["algorithm"]),
            data=data,
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_config(raw)
