"""Running a :class:`NetSpec` forward and backward over a parameter dict.

Parameters live in a flat ``dict`` keyed ``"<layer>.weight"`` and
``"<layer>.bias"`` (see :meth:`NetSpec.param_shapes`).
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..tensor import F32, Rng, rand_uniform, zeros
from . import ops
from .spec import CONV_KINDS, NetSpec

Params = dict[str, np.ndarray]


def init_params(spec: NetSpec, rng: Rng, dtype=F32) -> Params:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    params: Params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".weight"):
            bound = 1.0 / math.sqrt(math.prod(shape[1:]))
            params[name] = rand_uniform(rng.split(name), shape, -bound, bound, dtype)
        else:
            params[name] = zeros(shape, dtype)
    return params


def check_params(spec: NetSpec, params: Params) -> None:
    expected = spec.param_shapes()
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"params do not match spec (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, spec expects {shape}")


def forward(
    spec: NetSpec,
    params: Params,
    x: np.ndarray,
    *,
    train: bool = False,
    rng: Optional[Rng] = None,
    dropout_rate: Optional[float] = None,
    outputs: Optional[list] = None,
):
    """Return ``(probs, tape)``; ``tape`` feeds :func:`backward_from_tape`.

    ``dropout_rate`` overrides the rate stored in the spec's dropout layers.
    If ``outputs`` is a list, every layer's output is appended to it.
    """
    if x.shape[1:] != spec.input_shape:
        raise ops.ShapeError(f"input shape {x.shape[1:]} does not match net input {spec.input_shape}")
    tape = []
    h = x
    for layer in spec.layers:
        kind = layer.kind
        if kind in CONV_KINDS:
            h, cache = ops.conv_forward(h, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"],
                                        layer.stride, layer.padding)
        elif kind in ("maxpool2d", "maxpool3d"):
            h, cache = ops.maxpool_forward(h, layer.kernel, layer.stride)
        elif kind == "relu":
            h, cache = ops.relu_forward(h)
        elif kind == "dropout":
            rate = layer.rate if dropout_rate is None else dropout_rate
            h, cache = ops.dropout_forward(h, rate, rng.split(layer.name) if rng else None, train)
        elif kind == "flatten":
            h, cache = ops.flatten_forward(h)
        elif kind == "fc":
            h, cache = ops.fc_forward(h, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"])
        elif kind == "softmax":
            h = ops.softmax(h)
            cache = h
        else:  # pragma: no cover - LayerSpec validates kinds
            raise AssertionError(kind)
        tape.append(cache)
        if outputs is not None:
            outputs.append(h)
    return h, tape


def backward_from_tape(spec: NetSpec, params: Params, tape, labels) -> Params:
    probs = tape[-1]
    grads: Params = {}
    g = ops.softmax_cross_entropy_backward(probs, labels)
    for layer, cache in zip(reversed(spec.layers[:-1]), reversed(tape[:-1])):
        kind = layer.kind
        if kind in CONV_KINDS:
            g, dw, db = ops.conv_backward(g, cache)
            grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = dw, db
        elif kind in ("maxpool2d", "maxpool3d"):
            g = ops.maxpool_backward(g, cache)
        elif kind == "relu":
            g = ops.relu_backward(g, cache)
        elif kind == "dropout":
            g = ops.dropout_backward(g, cache)
        elif kind == "flatten":
            g = ops.flatten_backward(g, cache)
        elif kind == "fc":
            g, dw, db = ops.fc_backward(g, cache, params[f"{layer.name}.weight"])
            grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = dw, db
        else:  # pragma: no cover
            raise AssertionError(kind)
    return {name: grads[name] for name in params}


def backward(spec: NetSpec, params: Params, x, labels, *, train=False, rng=None, dropout_rate=None):
    """Mean cross-entropy of the batch and its gradient for every parameter."""
    probs, tape = forward(spec, params, x, train=train, rng=rng, dropout_rate=dropout_rate)
    loss = ops.cross_entropy(probs, labels)
    return loss, backward_from_tape(spec, params, tape, labels)


def predict(spec: NetSpec, params: Params, x, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class probabilities, computed in fixed-size chunks."""
    chunks = [forward(spec, params, x[i:i + batch_size])[0] for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)
