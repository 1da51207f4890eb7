"""Plain-text ``key=value`` run configuration.

Blank lines and lines starting with ``#`` are ignored. Every key is optional
(see ``DEFAULTS``), unknown or repeated keys are errors, and values are
validated by the dataclasses they end up in. ``conv_freeze_iters`` accepts
``inf`` to freeze conv layers for the whole run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

from .data import DatasetConfig
from .inflate import normalize_method
from .nn.train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    task: str = "shapes2d"
    num_classes: int = 4
    h: int = 16
    w: int = 16
    t: int = 8
    noise_std: float = 0.1
    samples_train: int = 512
    samples_test: int = 512
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    iterations: int = 600
    batch_size: int = 32
    conv_freeze_iters: float = 50
    dropout_rate: float = 0.5
    seed: int = 0
    inflate_method: str = "nwi"
    inflate_t0: int = 1
    pool_t: int = 2
    fc_units: int = 64

    def __post_init__(self):
        try:
            self.dataset()
            self.train_config()
            normalize_method(self.inflate_method)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.inflate_t0 < 1:
            raise ConfigError("inflate_t0 must be >= 1")
        if self.pool_t < 1:
            raise ConfigError("pool_t must be >= 1")
        if self.fc_units < 1:
            raise ConfigError("fc_units must be >= 1")

    def dataset(self, task: Optional[str] = None) -> DatasetConfig:
        return DatasetConfig(
            task=task or self.task, num_classes=self.num_classes,
            samples_train=self.samples_train, samples_test=self.samples_test,
            h=self.h, w=self.w, t=self.t, noise_std=self.noise_std, seed=self.seed,
        )

    def train_config(self, conv_freeze_iters=None) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.lr, momentum=self.momentum, iterations=self.iterations,
            batch_size=self.batch_size,
            conv_freeze_iters=self.conv_freeze_iters if conv_freeze_iters is None else conv_freeze_iters,
            dropout_rate=self.dropout_rate, weight_decay=self.weight_decay, seed=self.seed,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))


DEFAULTS = RunConfig.__dataclass_fields__


def _format(value) -> str:
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return str(value)


def _convert(key: str, raw: str):
    kind = DEFAULTS[key].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            if key == "conv_freeze_iters" and raw.lower() in ("inf", "infinity"):
                return math.inf
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(f"{raw!r} is not finite")
            return value
    except ValueError as exc:
        raise ConfigError(f"{key}: invalid value {raw!r} ({exc})") from None
    return raw


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = (part.strip() for part in line.partition("="))
        if not sep or not raw:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
