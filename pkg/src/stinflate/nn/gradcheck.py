"""Finite-difference checks of every hand-written backward pass (float64).

Each layer kind is exercised in isolation on a random small problem with the
scalar objective ``sum(r * layer(x))`` for a fixed random ``r``; the whole
stack is then checked end to end through softmax and cross-entropy on a tiny
3D network. Inputs to relu and max pooling are kept at least ``1e-3`` away
from kinks and ties so a step of ``eps`` never crosses one.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..tensor import F64, Rng
from . import net as netlib
from . import ops
from .spec import LayerSpec, NetSpec

EPS = 1e-5
# Relative-error denominator floor. Central differences at EPS resolve a
# float64 objective of order 1-10 to about 1e-10 absolute, so components below this
# floor are held to an absolute error of REL_FLOOR * tolerance instead.
REL_FLOOR = 1e-3
# Minimum distance of any relu input from 0, and of any pooling maximum from
# the runner-up in its window, for the end-to-end case.
KINK_MARGIN = 1e-3
# Random geometries drawn per conv / pool kind.
CASES = 3


def numerical_grad(f: Callable[[], np.ndarray], x: np.ndarray, eps: float = EPS, weights=None) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x``, perturbing in place.

    With ``weights`` the objective is ``sum(weights * f())``; the two
    perturbed outputs are differenced elementwise before that sum, which keeps
    roundoff proportional to the touched outputs, not the whole objective.
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = np.array(f(), copy=True)
        flat[i] = old - eps
        fm = np.array(f(), copy=True)
        flat[i] = old
        diff = fp - fm if weights is None else np.sum(weights * (fp - fm))
        gflat[i] = diff / (2 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _spaced(rng: Rng, shape) -> np.ndarray:
    """Distinct values, pairwise at least 1e-3 apart, in random order."""
    n = int(np.prod(shape))
    vals = np.linspace(-1.0, 1.0, n) if n > 1 else np.array([0.5])
    return vals[rng.permutation(n)].reshape(shape)


def _away_from_zero(rng: Rng, shape) -> np.ndarray:
    mag = rng.uniform(shape, 0.1, 1.0)
    sign = np.where(rng.uniform(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _check(fwd, inputs: dict[str, np.ndarray], bwd, rng: Rng) -> float:
    out = fwd(**inputs)
    r = rng.normal(out.shape)
    analytic = bwd(r, **inputs)
    worst = 0.0
    for name, arr in inputs.items():
        numeric = numerical_grad(lambda: fwd(**inputs), arr, weights=r)
        worst = max(worst, rel_error(analytic[name], numeric))
    return worst


def _geometry(rng: Rng, nd: int, window_max: int = 3, padded: bool = True):
    """Random (input size, window, stride, pad) per axis with integral output."""
    sizes, windows, strides, pads = [], [], [], []
    for _ in range(nd):
        k = int(rng.integers(1, window_max + 1))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 2)) if padded and k > 1 else 0
        n_out = int(rng.integers(1, 4))
        size = (n_out - 1) * s + k - 2 * p
        if size < 1:
            p, size = 0, (n_out - 1) * s + k
        sizes.append(size)
        windows.append(k)
        strides.append(s)
        pads.append(p)
    return tuple(sizes), tuple(windows), tuple(strides), tuple(pads)


def _conv_case(rng: Rng, nd: int) -> float:
    sizes, kernel, stride, pad = _geometry(rng.split("geometry"), nd)
    n, c, o = (int(v) for v in rng.integers(1, 4, size=3))
    x = rng.normal((n, c) + sizes)
    w = rng.normal((o, c) + kernel)
    b = rng.normal((o,))

    def fwd(x, w, b):
        return ops.conv_forward(x, w, b, stride, pad)[0]

    def bwd(r, x, w, b):
        _, cache = ops.conv_forward(x, w, b, stride, pad)
        dx, dw, db = ops.conv_backward(r, cache)
        return {"x": dx, "w": dw, "b": db}

    return _check(fwd, {"x": x, "w": w, "b": b}, bwd, rng)


def _pool_case(rng: Rng, nd: int) -> float:
    sizes, window, stride, _ = _geometry(rng.split("geometry"), nd, padded=False)
    x = _spaced(rng, tuple(int(v) for v in rng.integers(1, 3, size=2)) + sizes)

    def fwd(x):
        return ops.maxpool_forward(x, window, stride)[0]

    def bwd(r, x):
        _, cache = ops.maxpool_forward(x, window, stride)
        return {"x": ops.maxpool_backward(r, cache)}

    return _check(fwd, {"x": x}, bwd, rng)


def _relu_case(rng: Rng) -> float:
    def bwd(r, x):
        return {"x": ops.relu_backward(r, ops.relu_forward(x)[1])}

    return _check(lambda x: ops.relu_forward(x)[0], {"x": _away_from_zero(rng, (3, 2, 4, 4))}, bwd, rng)


def _dropout_case(rng: Rng) -> float:
    seed = int(rng.integers(0, 2**32))

    def fwd(x):
        return ops.dropout_forward(x, 0.5, Rng(seed), True)[0]

    def bwd(r, x):
        return {"x": ops.dropout_backward(r, ops.dropout_forward(x, 0.5, Rng(seed), True)[1])}

    return _check(fwd, {"x": rng.normal((4, 10))}, bwd, rng)


def _flatten_case(rng: Rng) -> float:
    x = rng.normal((2, 3, 2, 2, 2))

    def bwd(r, x):
        return {"x": ops.flatten_backward(r, x.shape)}

    return _check(lambda x: ops.flatten_forward(x)[0], {"x": x}, bwd, rng)


def _fc_case(rng: Rng) -> float:
    def fwd(x, w, b):
        return ops.fc_forward(x, w, b)[0]

    def bwd(r, x, w, b):
        dx, dw, db = ops.fc_backward(r, x, w)
        return {"x": dx, "w": dw, "b": db}

    inputs = {"x": rng.normal((4, 6)), "w": rng.normal((5, 6)), "b": rng.normal((5,))}
    return _check(fwd, inputs, bwd, rng)


def _softmax_case(rng: Rng) -> float:
    def bwd(r, x):
        return {"x": ops.softmax_backward(r, ops.softmax(x))}

    return _check(ops.softmax, {"x": rng.normal((4, 5))}, bwd, rng)


def _cross_entropy_case(rng: Rng) -> float:
    labels = rng.integers(0, 5, size=4)
    logits = rng.normal((4, 5))
    numeric = numerical_grad(lambda: ops.cross_entropy(ops.softmax(logits), labels), logits)
    err = rel_error(ops.softmax_cross_entropy_backward(ops.softmax(logits), labels), numeric)
    # Gradient with respect to the probabilities themselves; the objective
    # only reads p[label], so unnormalized rows are fine here.
    q = rng.uniform((4, 5), 0.2, 1.0)
    rows = np.arange(4)
    numeric = numerical_grad(lambda: float(np.mean(-np.log(q[rows, labels]))), q)
    return max(err, rel_error(ops.cross_entropy_backward(q, labels), numeric))


def tiny_net_3d(num_classes: int = 3) -> NetSpec:
    layers = (
        LayerSpec("conv1", "conv3d", out_channels=3, kernel=(2, 3, 3), stride=(1, 1, 1), padding=(0, 1, 1)),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool3d", kernel=(2, 2, 2), stride=(2, 2, 2)),
        LayerSpec("conv2", "conv3d", out_channels=4, kernel=(1, 3, 3), stride=(1, 1, 1), padding=(0, 1, 1)),
        LayerSpec("relu2", "relu"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc1", "fc", units=6),
        LayerSpec("relu3", "relu"),
        LayerSpec("drop1", "dropout", rate=0.3),
        LayerSpec("fc2", "fc", units=num_classes),
        LayerSpec("softmax", "softmax"),
    )
    return NetSpec(layers, (2, 3, 4, 4), num_classes)


def _kink_margin(spec: NetSpec, params, x, seed: int) -> float:
    outputs: list = []
    netlib.forward(spec, params, x, train=True, rng=Rng(seed), outputs=outputs)
    margin = np.inf
    for i, layer in enumerate(spec.layers):
        inp = x if i == 0 else outputs[i - 1]
        if layer.kind == "relu":
            margin = min(margin, float(np.min(np.abs(inp))))
        elif layer.kind in ("maxpool2d", "maxpool3d"):
            win = ops._windows(inp, layer.kernel, layer.stride)
            flat = np.sort(win.reshape(win.shape[:inp.ndim] + (-1,)), axis=-1)
            margin = min(margin, float(np.min(flat[..., -1] - flat[..., -2])))
    return margin


def _network_problem(rng: Rng):
    spec = tiny_net_3d()
    params = netlib.init_params(spec, rng.split("init"), F64)
    for name in params:
        if name.endswith(".bias"):
            params[name] = rng.split(name).normal(params[name].shape, 0.0, 0.1)
    x = rng.normal((3,) + spec.input_shape)
    labels = rng.integers(0, spec.num_classes, size=3)
    seed = int(rng.integers(0, 2**32))
    return spec, params, x, labels, seed


def _network_case(rng: Rng) -> float:
    for attempt in range(100):
        spec, params, x, labels, seed = _network_problem(rng.split(f"attempt{attempt}"))
        if _kink_margin(spec, params, x, seed) > KINK_MARGIN:
            break
    else:  # pragma: no cover - each attempt succeeds with probability ~0.5
        raise RuntimeError("could not draw a network problem away from relu/pool kinks")

    def loss():
        probs, _ = netlib.forward(spec, params, x, train=True, rng=Rng(seed))
        return ops.cross_entropy(probs, labels)

    _, grads = netlib.backward(spec, params, x, labels, train=True, rng=Rng(seed))
    return max(rel_error(grads[name], numerical_grad(loss, params[name])) for name in params)


def run_all(seed: int = 0) -> dict[str, float]:
    """Max relative error per layer kind (plus the end-to-end network)."""
    rng = Rng(seed)
    return {
        "conv2d": max(_conv_case(rng.split(f"conv2d_{i}"), 2) for i in range(CASES)),
        "conv3d": max(_conv_case(rng.split(f"conv3d_{i}"), 3) for i in range(CASES)),
        "maxpool2d": max(_pool_case(rng.split(f"pool2d_{i}"), 2) for i in range(CASES)),
        "maxpool3d": max(_pool_case(rng.split(f"pool3d_{i}"), 3) for i in range(CASES)),
        "relu": _relu_case(rng.split("relu")),
        "dropout": _dropout_case(rng.split("dropout")),
        "flatten": _flatten_case(rng.split("flatten")),
        "fc": _fc_case(rng.split("fc")),
        "softmax": _softmax_case(rng.split("softmax")),
        "cross_entropy": _cross_entropy_case(rng.split("xent")),
        "network": _network_case(rng.split("network")),
    }
