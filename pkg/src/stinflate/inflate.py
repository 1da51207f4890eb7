"""Turning a trained image network into a clip network.

A conv2d kernel ``W`` of shape ``(O, C, kH, kW)`` becomes a conv3d kernel of
shape ``(O, C, T, kH, kW)`` whose temporal slices are ``alpha_t * W``. The
coefficients always sum to one, so the slices sum back to ``W`` and the
inflated layer reproduces the original response on a temporally constant
clip. The four profiles:

``IA``
    every ``alpha_t = 1/T``
``IS``
    positive coefficients; tuned presets for ``T`` in {2, 3}, otherwise a
    seeded draw of normalized i.i.d. exponentials (a flat Dirichlet)
``ZWI``
    ``alpha_t0 = 1``, every other slice zero
``NWI``
    ``alpha_t0 = (2T-1)/T``, every other slice ``-1/T``

Biases are copied unchanged; they are added once per output position either
way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .nn import ops
from .nn.net import Params, check_params, init_params
from .nn.spec import LayerSpec, NetSpec, SpecError
from .tensor import F64, Rng, max_abs_diff, sum_over_axis

METHODS = ("IA", "IS", "ZWI", "NWI")

IS_PRESETS = {
    2: (0.5, 0.5),
    3: (0.25, 0.5, 0.25),
}


class InflationError(ValueError):
    pass


@dataclass(frozen=True)
class AlphaProfile:
    method: str
    T: int
    alphas: tuple[float, ...]
    t0: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise InflationError(f"unknown method {self.method!r}")
        if len(self.alphas) != self.T:
            raise InflationError(f"{self.T} alphas expected, got {len(self.alphas)}")
        if abs(math.fsum(self.alphas) - 1.0) > 1e-12:
            raise InflationError(f"alphas must sum to 1, got {math.fsum(self.alphas)!r}")
        if self.method == "IS" and any(a <= 0 for a in self.alphas):
            raise InflationError("IS alphas must all be positive")

    def formatted(self, digits: int = 6) -> str:
        return ",".join(f"{a:.{digits}f}" for a in self.alphas)


def normalize_method(method: str) -> str:
    m = method.upper()
    if m not in METHODS:
        raise InflationError(f"unknown inflation method {method!r}; choose from {', '.join(METHODS)}")
    return m


def make_alphas(method: str, T: int, t0: int = 1, rng: Optional[Rng] = None) -> AlphaProfile:
    """Temporal coefficients for ``method`` and kernel depth ``T``.

    ``t0`` (1-based) picks the dominant slice for ZWI and NWI and is ignored by
    IA and IS. ``rng`` is only consulted for IS depths without a preset.
    """
    method = normalize_method(method)
    if T < 1:
        raise InflationError(f"temporal size must be >= 1, got {T}")
    if not 1 <= t0 <= T:
        raise InflationError(f"t0 must be in [1, {T}], got {t0}")
    if method == "IA":
        alphas = (1.0 / T,) * T
    elif method == "IS":
        if T == 1:
            alphas = (1.0,)
        elif T in IS_PRESETS:
            alphas = IS_PRESETS[T]
        else:
            if rng is None:
                raise InflationError(f"IS with T={T} has no preset; an rng is required")
            draws = rng.exponential(T)
            alphas = tuple(float(a) for a in draws / math.fsum(draws))
    elif method == "ZWI":
        alphas = tuple(1.0 if t == t0 else 0.0 for t in range(1, T + 1))
    else:
        alphas = tuple((2 * T - 1) / T if t == t0 else -1.0 / T for t in range(1, T + 1))
    return AlphaProfile(method, T, alphas, t0 if method in ("ZWI", "NWI") else 1)


def inflate_conv(w2d: np.ndarray, b2d: np.ndarray, profile: AlphaProfile):
    """Return ``(w3d, b3d)`` with ``w3d[:, :, t] = alphas[t] * w2d``."""
    if w2d.ndim != 4:
        raise InflationError(f"expected a (O, C, kH, kW) kernel, got shape {w2d.shape}")
    if b2d.shape != (w2d.shape[0],):
        raise InflationError(f"bias shape {b2d.shape} does not match {w2d.shape[0]} output channels")
    wide = w2d.astype(F64)
    slices = [(wide * a).astype(w2d.dtype) for a in profile.alphas]
    return np.ascontiguousarray(np.stack(slices, axis=2)), b2d.copy()


def verify_sum_constraint(w2d: np.ndarray, w3d: np.ndarray) -> float:
    """Largest elementwise gap between the temporal slice sum and ``w2d``."""
    if w3d.ndim != 5 or w2d.ndim != 4 or w3d.shape[:2] + w3d.shape[3:] != w2d.shape:
        raise InflationError(f"incompatible kernels {w2d.shape} and {w3d.shape}")
    return max_abs_diff(sum_over_axis(w3d, 2), w2d)


class ConvLayer(NamedTuple):
    weight: np.ndarray
    bias: np.ndarray
    stride: tuple[int, ...]
    padding: tuple[int, ...]


def _frame_size(k: int, s: int, p: int, target: int = 8) -> int:
    n = max(target, k - 2 * p)
    while (n + 2 * p - k) % s:
        n += 1
    return n


def verify_equivalence(layer2d: ConvLayer, layer3d: ConvLayer, rng: Rng, trials: int = 10) -> float:
    """Max |conv2d(frame) - conv3d(frame repeated kT times)| over random frames."""
    w2, w3 = layer2d.weight, layer3d.weight
    if w3.ndim != 5 or w3.shape[:2] + w3.shape[3:] != w2.shape:
        raise InflationError(f"kernel {w3.shape} is not an inflation of {w2.shape}")
    if tuple(layer3d.stride)[0] != 1 or tuple(layer3d.padding)[0] != 0:
        raise InflationError("equivalence needs temporal stride 1 and temporal padding 0")
    if tuple(layer3d.stride)[1:] != tuple(layer2d.stride) or tuple(layer3d.padding)[1:] != tuple(layer2d.padding):
        raise InflationError("spatial stride/padding of the two layers differ")
    if trials < 1:
        raise InflationError("trials must be >= 1")
    kT = w3.shape[2]
    h = _frame_size(w2.shape[2], layer2d.stride[0], layer2d.padding[0])
    w = _frame_size(w2.shape[3], layer2d.stride[1], layer2d.padding[1])
    worst = 0.0
    for trial in range(trials):
        frame = rng.split(f"trial{trial}").uniform((1, w2.shape[1], h, w), -1.0, 1.0).astype(w2.dtype)
        clip = np.ascontiguousarray(np.repeat(frame[:, :, None], kT, axis=2))
        out2 = ops.conv2d_forward(frame, w2, layer2d.bias, layer2d.stride, layer2d.padding)
        out3 = ops.conv3d_forward(clip, w3, layer3d.bias, layer3d.stride, layer3d.padding)
        worst = max(worst, max_abs_diff(out3[:, :, 0], out2))
    return worst


def temporal_slice_similarity(w3d: np.ndarray) -> float:
    """Mean cosine similarity over all pairs of flattened temporal slices.

    Pairs involving an all-zero slice count as 0.
    """
    if w3d.ndim != 5 or w3d.shape[2] < 2:
        raise InflationError(f"need a conv3d kernel with kT >= 2, got shape {w3d.shape}")
    slices = [w3d[:, :, t].astype(F64).ravel() for t in range(w3d.shape[2])]
    norms = [float(np.linalg.norm(s)) for s in slices]
    sims = []
    for i in range(len(slices)):
        for j in range(i + 1, len(slices)):
            if norms[i] == 0.0 or norms[j] == 0.0:
                sims.append(0.0)
            else:
                sims.append(float(slices[i] @ slices[j]) / (norms[i] * norms[j]))
    return float(np.mean(sims))


@dataclass(frozen=True)
class LayerPlan:
    method: str
    T: int
    t0: int = 1


@dataclass
class LayerReport:
    layer: str
    method: str
    T: int
    alphas: tuple[float, ...]
    residual: float


@dataclass
class InflationReport:
    layers: list[LayerReport] = field(default_factory=list)
    reinitialized: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = []
        for r in self.layers:
            alphas = ",".join(f"{a:.6f}" for a in r.alphas)
            lines.append(f"layer={r.layer} method={r.method} T={r.T} alphas={alphas} residual={r.residual:.3e}")
        lines.append("reinitialized=" + ",".join(self.reinitialized))
        return "\n".join(lines) + "\n"


def default_plan(spec2d: NetSpec, method: str, t0: int = 1, temporal_sizes: Sequence[int] = (3, 2)) -> dict[str, LayerPlan]:
    """One plan entry per conv layer, temporal sizes taken in layer order."""
    convs = [l.name for l in spec2d.layers if l.kind == "conv2d"]
    if len(temporal_sizes) < len(convs):
        raise InflationError(f"{len(convs)} conv layers but only {len(temporal_sizes)} temporal sizes")
    return {
        name: LayerPlan(normalize_method(method), T, min(t0, T))
        for name, T in zip(convs, temporal_sizes)
    }


def inflate_net(
    spec2d: NetSpec,
    params2d: Params,
    plan: Mapping[str, LayerPlan],
    clip_T: int,
    pool_T: int = 2,
    rng: Optional[Rng] = None,
    fc_units: Optional[int] = None,
):
    """Build the 3D counterpart of a trained 2D network.

    conv2d layers become conv3d layers with the planned temporal size
    (temporal stride 1, no temporal padding). Every maxpool2d becomes a
    maxpool3d with temporal window and stride ``pool_T``. Hidden fc layers are
    resized to ``fc_units`` (if given) and, like the classifier, re-drawn from
    ``rng`` because the flattened input no longer matches the 2D net.

    Returns ``(spec3d, params3d, report)``.
    """
    if spec2d.is_3d:
        raise InflationError("network is already 3D")
    check_params(spec2d, params2d)
    rng = rng or Rng(0)
    convs = [l.name for l in spec2d.layers if l.kind == "conv2d"]
    missing = [n for n in convs if n not in plan]
    if missing:
        raise InflationError(f"plan does not cover conv layers {missing}")
    unknown = sorted(set(plan) - set(convs))
    if unknown:
        raise InflationError(f"plan names layers that are not conv2d: {unknown}")
    if pool_T < 1:
        raise InflationError("pool_T must be >= 1")

    layers: list[LayerSpec] = []
    for layer in spec2d.layers:
        if layer.kind == "conv2d":
            T = plan[layer.name].T
            layers.append(replace(layer, kind="conv3d", kernel=(T,) + layer.kernel,
                                  stride=(1,) + layer.stride, padding=(0,) + layer.padding))
        elif layer.kind == "maxpool2d":
            layers.append(replace(layer, kind="maxpool3d", kernel=(pool_T,) + layer.kernel,
                                  stride=(pool_T,) + layer.stride, padding=()))
        elif layer.kind == "fc" and layer is not spec2d.layers[-2] and fc_units is not None:
            layers.append(replace(layer, units=fc_units))
        else:
            layers.append(layer)
    c, h, w = spec2d.input_shape
    try:
        spec3d = NetSpec(tuple(layers), (c, clip_T, h, w), spec2d.num_classes, "inflated")
    except SpecError as exc:
        raise InflationError(f"inflated network is invalid for clips of length {clip_T}: {exc}") from None

    dtype = params2d[f"{convs[0]}.weight"].dtype if convs else np.float32
    fresh = init_params(spec3d, rng.split("fc_reinit"), dtype)
    params3d: Params = {}
    report = InflationReport()
    for layer in spec3d.layers:
        if layer.kind == "conv3d":
            p = plan[layer.name]
            profile = make_alphas(p.method, p.T, p.t0, rng.split(f"alphas/{layer.name}"))
            w3, b3 = inflate_conv(params2d[f"{layer.name}.weight"], params2d[f"{layer.name}.bias"], profile)
            params3d[f"{layer.name}.weight"], params3d[f"{layer.name}.bias"] = w3, b3
            res = verify_sum_constraint(params2d[f"{layer.name}.weight"], w3)
            report.layers.append(LayerReport(layer.name, profile.method, profile.T, profile.alphas, res))
        elif layer.kind == "fc":
            params3d[f"{layer.name}.weight"] = fresh[f"{layer.name}.weight"]
            params3d[f"{layer.name}.bias"] = fresh[f"{layer.name}.bias"]
            report.reinitialized.append(layer.name)
    return spec3d, params3d, report


def conv_layer(spec: NetSpec, params: Params, name: str) -> ConvLayer:
    layer = spec.layer(name)
    if layer.kind not in ("conv2d", "conv3d"):
        raise InflationError(f"layer {name!r} is {layer.kind}, not a conv layer")
    return ConvLayer(params[f"{name}.weight"], params[f"{name}.bias"], layer.stride, layer.padding)
