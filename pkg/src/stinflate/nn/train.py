"""SGD with momentum, the training loop and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..tensor import Rng
from . import net as netlib
from .spec import CONV_KINDS, NetSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    iterations: int = 300
    batch_size: int = 32
    # Conv layers receive no update while iter < conv_freeze_iters; math.inf
    # freezes them for the whole run.
    conv_freeze_iters: float = 0
    dropout_rate: Optional[float] = None
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.conv_freeze_iters >= 0):
            raise ValueError("conv_freeze_iters must be >= 0")
        if self.dropout_rate is not None and not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not (math.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ValueError("weight_decay must be finite and >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")


def conv_param_names(spec: NetSpec) -> set[str]:
    return {f"{l.name}.{p}" for l in spec.layers if l.kind in CONV_KINDS for p in ("weight", "bias")}


def sgd_step(params, grads, velocity, cfg: TrainConfig, iteration: int, frozen: frozenset | set = frozenset()):
    """One momentum step, in place on ``params`` and ``velocity``.

    ``v <- momentum*v - lr*(g + weight_decay*w); w <- w + v``. Names in
    ``frozen`` are skipped entirely (neither velocity nor value changes) while
    ``iteration < cfg.conv_freeze_iters``.
    """
    if cfg.learning_rate == 0:
        return params
    hold = iteration < cfg.conv_freeze_iters
    for name, w in params.items():
        if hold and name in frozen:
            continue
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        dt = w.dtype.type
        step = g + dt(cfg.weight_decay) * w if cfg.weight_decay else g
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= dt(cfg.momentum)
        v -= dt(cfg.learning_rate) * step
        w += v
    return params


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    eval_acc: list[tuple[int, float]] = field(default_factory=list)


def _batches(n: int, batch_size: int, rng: Rng):
    """Endless stream of index batches; a fresh permutation per epoch."""
    bs = min(batch_size, n)
    epoch = 0
    while True:
        order = rng.split(f"epoch{epoch}").permutation(n)
        for start in range(0, n - bs + 1, bs):
            yield order[start:start + bs]
        epoch += 1


def train(spec: NetSpec, params, dataset, cfg: TrainConfig, eval_set=None):
    """Train ``params`` (a copy; the input is untouched) on ``dataset=(x, labels)``.

    Returns ``(params, history)``. Everything random (batch order, dropout
    masks) is drawn from streams derived from ``cfg.seed``.
    """
    x, labels = dataset
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if x.shape[1:] != spec.input_shape:
        raise ValueError(f"dataset shape {x.shape[1:]} does not match net input {spec.input_shape}")
    if labels.shape != (x.shape[0],):
        raise ValueError("labels must have one entry per sample")
    netlib.check_params(spec, params)
    params = {k: v.copy() for k, v in params.items()}
    history = History()
    rng = Rng(cfg.seed)
    order_rng, drop_rng = rng.split("order"), rng.split("dropout")
    frozen = conv_param_names(spec)
    velocity: dict = {}
    batches = _batches(x.shape[0], cfg.batch_size, order_rng)
    for it in range(cfg.iterations):
        idx = next(batches)
        loss, grads = netlib.backward(spec, params, x[idx], labels[idx], train=True,
                                      rng=drop_rng.split(f"iter{it}"), dropout_rate=cfg.dropout_rate)
        sgd_step(params, grads, velocity, cfg, it, frozen)
        history.loss.append(loss)
        if eval_set is not None and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            acc, _ = evaluate(spec, params, eval_set)
            history.eval_acc.append((it + 1, acc))
            log.info("iter %d loss %.4f eval_acc %.4f", it + 1, loss, acc)
    return params, history


def accuracy(probs: np.ndarray, labels) -> float:
    # argmax breaks ties toward the lowest class index
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def evaluate(spec: NetSpec, params, dataset):
    """Eval-mode ``(accuracy, probs)`` on ``dataset=(x, labels)``."""
    x, labels = dataset
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    probs = netlib.predict(spec, params, x)
    return accuracy(probs, labels), probs
