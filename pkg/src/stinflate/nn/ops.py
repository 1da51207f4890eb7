"""Forward and backward passes for every layer kind.

Convolution and pooling are written once for any number of spatial axes, so
the 2D and 3D variants share a single code path: ``x`` is ``(N, C, *S)`` and a
conv weight is ``(O, C, *K)``. Convolution is cross-correlation (no kernel
flip).

Backward functions take the upstream gradient plus whatever the matching
forward returned in its cache, and return gradients in the same dtype.
"""

from __future__ import annotations

import itertools
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..tensor import Rng

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


def _geometry(spatial: Sequence[int], kernel, stride, pad) -> tuple[int, ...]:
    out = []
    for n, k, s, p in zip(spatial, kernel, stride, pad):
        span = n + 2 * p - k
        if span < 0 or span % s:
            raise ShapeError(
                f"output size not integral for input {n}, kernel {k}, stride {s}, padding {p}"
            )
        out.append(span // s + 1)
    return tuple(out)


def _windows(x: np.ndarray, kernel, stride) -> np.ndarray:
    """View of shape (N, C, *out, *kernel); no copy."""
    nd = len(kernel)
    win = sliding_window_view(x, tuple(kernel), axis=tuple(range(2, 2 + nd)))
    return win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]


def conv_forward(x, w, b, stride, pad):
    nd = w.ndim - 2
    if x.ndim != nd + 2:
        raise ShapeError(f"conv with {nd} spatial axes needs a rank-{nd + 2} input, got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    stride, pad = tuple(stride), tuple(pad)
    out_sp = _geometry(x.shape[2:], w.shape[2:], stride, pad)
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad]) if any(pad) else x
    win = _windows(xp, w.shape[2:], stride)
    k_axes = list(range(2 + nd, 2 + 2 * nd))
    out = np.tensordot(win, w, axes=([1] + k_axes, [1] + list(range(2, 2 + nd))))
    out = np.moveaxis(out, -1, 1)
    out = out + b.reshape((1, -1) + (1,) * nd)
    assert out.shape[2:] == out_sp
    return np.ascontiguousarray(out), (xp, w, stride, pad, x.shape)


def conv_backward(dout, cache):
    xp, w, stride, pad, x_shape = cache
    nd = w.ndim - 2
    win = _windows(xp, w.shape[2:], stride)
    out_axes = list(range(2, 2 + nd))
    dw = np.tensordot(dout, win, axes=([0] + out_axes, [0] + out_axes))
    db = dout.sum(axis=(0,) + tuple(out_axes))
    dxp = np.zeros(xp.shape, dtype=dout.dtype)
    out_sp = dout.shape[2:]
    for offset in itertools.product(*(range(k) for k in w.shape[2:])):
        region = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_sp))
        contrib = np.tensordot(dout, w[(slice(None), slice(None)) + offset], axes=([1], [0]))
        dxp[(slice(None), slice(None)) + region] += np.moveaxis(contrib, -1, 1)
    if any(pad):
        dxp = dxp[(slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(pad, x_shape[2:]))]
    return np.ascontiguousarray(dxp), dw.astype(w.dtype, copy=False), db


def conv2d_forward(x, w, b, stride=(1, 1), pad=(0, 0)):
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be (O,C,kH,kW), got {w.shape}")
    return conv_forward(x, w, b, stride, pad)[0]


def conv3d_forward(x, w, b, stride=(1, 1, 1), pad=(0, 0, 0)):
    if w.ndim != 5:
        raise ShapeError(f"conv3d weight must be (O,C,kT,kH,kW), got {w.shape}")
    return conv_forward(x, w, b, stride, pad)[0]


def maxpool_forward(x, window, stride):
    window, stride = tuple(window), tuple(stride)
    nd = len(window)
    if x.ndim != nd + 2:
        raise ShapeError(f"pooling over {nd} axes needs a rank-{nd + 2} input, got {x.shape}")
    out_sp = _geometry(x.shape[2:], window, stride, (0,) * nd)
    win = _windows(x, window, stride)
    flat = win.reshape(x.shape[:2] + out_sp + (-1,))
    # np.argmax returns the first maximal index: ties go to the earliest
    # element of the window in row-major order.
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, window, stride, arg)


def maxpool_backward(dout, cache):
    x_shape, window, stride, arg = cache
    nd = len(window)
    out_sp = dout.shape[2:]
    offsets = np.unravel_index(arg, window)
    idx = [np.arange(x_shape[0]).reshape((-1,) + (1,) * (nd + 1)),
           np.arange(x_shape[1]).reshape((1, -1) + (1,) * nd)]
    for d in range(nd):
        base = (np.arange(out_sp[d]) * stride[d]).reshape((1, 1) + tuple(-1 if e == d else 1 for e in range(nd)))
        idx.append(base + offsets[d])
    dx = np.zeros(x_shape, dtype=dout.dtype)
    flat_idx = np.ravel_multi_index(np.broadcast_arrays(*idx), x_shape).ravel()
    if all(s >= k for s, k in zip(stride, window)):
        dx.ravel()[flat_idx] = dout.ravel()
    else:
        np.add.at(dx.ravel(), flat_idx, dout.ravel())
    return dx


def maxpool2d(x, window=(2, 2), stride=(2, 2)):
    return maxpool_forward(x, window, stride)[0]


def maxpool3d(x, window=(2, 2, 2), stride=(2, 2, 2)):
    return maxpool_forward(x, window, stride)[0]


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), mask


def relu_backward(dout, mask):
    return np.where(mask, dout, dout.dtype.type(0))


def check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")


def dropout_forward(x, rate: float, rng: Optional[Rng], train_mode: bool):
    """Inverted dropout. Identity (same object) in eval mode or at rate 0."""
    check_rate(rate)
    if not train_mode or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.uniform(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def flatten_forward(x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(dout, shape):
    return dout.reshape(shape)


def fc_forward(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"fc input {x.shape} incompatible with weight {w.shape}")
    return x @ w.T + b, x


def fc_backward(dout, x, w):
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def softmax(x):
    if x.ndim != 2:
        raise ShapeError(f"softmax expects (N, classes), got {x.shape}")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dout, probs):
    return probs * (dout - (dout * probs).sum(axis=1, keepdims=True))


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels.astype(np.int64)


def cross_entropy(probs, labels) -> float:
    n, k = probs.shape
    labels = _check_labels(labels, n, k)
    if not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-5):
        raise ValueError("probability rows must sum to 1")
    picked = probs[np.arange(n), labels].astype(np.float64)
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def cross_entropy_backward(probs, labels):
    """Gradient of the mean cross-entropy with respect to ``probs``."""
    n, k = probs.shape
    labels = _check_labels(labels, n, k)
    g = np.zeros_like(probs)
    rows = np.arange(n)
    picked = probs[rows, labels]
    g[rows, labels] = np.where(picked > PROB_FLOOR, -1.0 / (n * np.maximum(picked, PROB_FLOOR)), 0.0)
    return g


def softmax_cross_entropy_backward(probs, labels):
    """Gradient of the mean cross-entropy with respect to the softmax logits."""
    n, k = probs.shape
    labels = _check_labels(labels, n, k)
    g = probs.copy()
    g[np.arange(n), labels] -= 1
    return g / probs.dtype.type(n)
