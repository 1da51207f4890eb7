"""Network descriptions: layer specs, shape propagation and the text form.

The text form is what gets embedded in checkpoints. One header line, then
``key=value`` lines for the net-level fields, then one ``layer`` line per
layer::

    netspec 1
    input_shape=1,16,16
    num_classes=4
    stage=pretrained
    layer name=conv1 kind=conv2d out_channels=8 kernel=3,3 stride=1,1 padding=1,1
    layer name=relu1 kind=relu
    ...

Values never contain spaces or ``=``; integer tuples are comma separated and
floats are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

CONV_KINDS = ("conv2d", "conv3d")
POOL_KINDS = ("maxpool2d", "maxpool3d")
KINDS = CONV_KINDS + POOL_KINDS + ("relu", "dropout", "flatten", "fc", "softmax")
PARAM_KINDS = CONV_KINDS + ("fc",)

_SPATIAL_RANK = {"conv2d": 2, "conv3d": 3, "maxpool2d": 2, "maxpool3d": 3}
_TOKEN = re.compile(r"^[A-Za-z0-9_.,+\-]+$")
_NAME = re.compile(r"^[A-Za-z][A-Za-z0-9_]*$")


class SpecError(ValueError):
    """Invalid network description or unparseable spec text."""


def _ints(values: Iterable[int], what: str) -> tuple[int, ...]:
    out = tuple(int(v) for v in values)
    if not out:
        raise SpecError(f"{what} must be non-empty")
    return out


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    out_channels: Optional[int] = None
    units: Optional[int] = None
    kernel: tuple[int, ...] = ()
    stride: tuple[int, ...] = ()
    padding: tuple[int, ...] = ()
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if not _NAME.match(self.name):
            raise SpecError(f"invalid layer name {self.name!r}")
        rank = _SPATIAL_RANK.get(self.kind)
        if rank is not None:
            for attr in ("kernel", "stride"):
                vals = getattr(self, attr)
                if len(vals) != rank or any(v < 1 for v in vals):
                    raise SpecError(f"{self.name}: {attr} must be {rank} ints >= 1, got {vals}")
            pad = self.padding or (0,) * rank
            if len(pad) != rank or any(p < 0 for p in pad):
                raise SpecError(f"{self.name}: padding must be {rank} ints >= 0, got {pad}")
            object.__setattr__(self, "padding", tuple(pad))
            if self.kind in POOL_KINDS and any(self.padding):
                raise SpecError(f"{self.name}: pooling layers take no padding")
        elif self.kernel or self.stride or self.padding:
            raise SpecError(f"{self.name}: {self.kind} takes no kernel geometry")
        if self.kind in CONV_KINDS:
            if self.out_channels is None or self.out_channels < 1:
                raise SpecError(f"{self.name}: out_channels must be >= 1")
        elif self.out_channels is not None:
            raise SpecError(f"{self.name}: out_channels only applies to conv layers")
        if self.kind == "fc":
            if self.units is None or self.units < 1:
                raise SpecError(f"{self.name}: units must be >= 1")
        elif self.units is not None:
            raise SpecError(f"{self.name}: units only applies to fc layers")
        if self.kind == "dropout":
            if not (0.0 <= self.rate < 1.0):
                raise SpecError(f"{self.name}: dropout rate must be in [0, 1), got {self.rate}")
        elif self.rate != 0.0:
            raise SpecError(f"{self.name}: rate only applies to dropout layers")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def to_text(self) -> str:
        parts = [f"name={self.name}", f"kind={self.kind}"]
        if self.out_channels is not None:
            parts.append(f"out_channels={self.out_channels}")
        if self.units is not None:
            parts.append(f"units={self.units}")
        if self.kernel:
            parts.append("kernel=" + ",".join(map(str, self.kernel)))
            parts.append("stride=" + ",".join(map(str, self.stride)))
            parts.append("padding=" + ",".join(map(str, self.padding)))
        if self.kind == "dropout":
            parts.append(f"rate={self.rate!r}")
        return "layer " + " ".join(parts)


def _out_dim(size: int, k: int, s: int, p: int, where: str) -> int:
    span = size + 2 * p - k
    if span < 0:
        raise SpecError(f"{where}: window {k} larger than padded input {size + 2 * p}")
    if span % s:
        raise SpecError(f"{where}: output size not integral ((size {size} + 2*{p} - {k}) / stride {s})")
    return span // s + 1


def layer_output_shape(layer: LayerSpec, in_shape: Sequence[int]) -> tuple[int, ...]:
    """Per-sample output shape of ``layer`` given a per-sample input shape."""
    in_shape = tuple(in_shape)
    kind = layer.kind
    rank = _SPATIAL_RANK.get(kind)
    if rank is not None:
        if len(in_shape) != rank + 1:
            raise SpecError(f"{layer.name}: {kind} expects a rank-{rank + 1} input, got {in_shape}")
        spatial = tuple(
            _out_dim(n, k, s, p, layer.name)
            for n, k, s, p in zip(in_shape[1:], layer.kernel, layer.stride, layer.padding)
        )
        channels = layer.out_channels if kind in CONV_KINDS else in_shape[0]
        return (channels,) + spatial
    if kind == "flatten":
        return (math.prod(in_shape),)
    if kind == "fc":
        if len(in_shape) != 1:
            raise SpecError(f"{layer.name}: fc expects a flat input, got {in_shape}")
        return (layer.units,)
    if kind == "softmax":
        if len(in_shape) != 1:
            raise SpecError(f"{layer.name}: softmax expects a flat input, got {in_shape}")
        return in_shape
    return in_shape


@dataclass(frozen=True)
class NetSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    num_classes: int
    stage: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", _ints(self.input_shape, "input_shape"))
        if len(self.input_shape) not in (3, 4) or any(d < 1 for d in self.input_shape):
            raise SpecError(f"input_shape must be (C,H,W) or (C,T,H,W), got {self.input_shape}")
        if self.num_classes < 1:
            raise SpecError("num_classes must be >= 1")
        if self.stage and not _TOKEN.match(self.stage):
            raise SpecError(f"invalid stage tag {self.stage!r}")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise SpecError("layer names must be unique")
        if len(self.layers) < 2 or self.layers[-2].kind != "fc" or self.layers[-1].kind != "softmax":
            raise SpecError("the last two layers must be fc then softmax")
        if self.layers[-2].units != self.num_classes:
            raise SpecError("final fc layer must have num_classes units")
        self.shapes()

    @property
    def is_3d(self) -> bool:
        return len(self.input_shape) == 4

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape (without batch axis) of every layer, in order."""
        out = []
        shape = self.input_shape
        for layer in self.layers:
            shape = layer_output_shape(layer, shape)
            out.append(shape)
        return out

    def input_shapes(self) -> list[tuple[int, ...]]:
        return [self.input_shape] + self.shapes()[:-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Expected tensor shapes, keyed ``<layer>.weight`` / ``<layer>.bias``."""
        shapes = {}
        for layer, in_shape in zip(self.layers, self.input_shapes()):
            if layer.kind in CONV_KINDS:
                shapes[f"{layer.name}.weight"] = (layer.out_channels, in_shape[0]) + layer.kernel
                shapes[f"{layer.name}.bias"] = (layer.out_channels,)
            elif layer.kind == "fc":
                shapes[f"{layer.name}.weight"] = (layer.units, in_shape[0])
                shapes[f"{layer.name}.bias"] = (layer.units,)
        return shapes

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise SpecError(f"no layer named {name!r}")

    def with_stage(self, stage: str) -> "NetSpec":
        return replace(self, stage=stage)

    def to_text(self) -> str:
        lines = [
            "netspec 1",
            "input_shape=" + ",".join(map(str, self.input_shape)),
            f"num_classes={self.num_classes}",
            f"stage={self.stage}",
        ]
        lines += [l.to_text() for l in self.layers]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetSpec":
        return parse_spec(text)


def _parse_layer(line: str, lineno: int) -> LayerSpec:
    fields: dict[str, str] = {}
    for tok in line.split(" ")[1:]:
        key, sep, val = tok.partition("=")
        if not sep or not key or not _TOKEN.match(val) or key in fields:
            raise SpecError(f"line {lineno}: malformed field {tok!r}")
        fields[key] = val
    kwargs: dict = {}
    try:
        kwargs["name"] = fields.pop("name")
        kwargs["kind"] = fields.pop("kind")
        for key in ("out_channels", "units"):
            if key in fields:
                kwargs[key] = int(fields.pop(key))
        for key in ("kernel", "stride", "padding"):
            if key in fields:
                kwargs[key] = tuple(int(v) for v in fields.pop(key).split(","))
        if "rate" in fields:
            kwargs["rate"] = float(fields.pop("rate"))
    except KeyError as exc:
        raise SpecError(f"line {lineno}: missing field {exc}") from None
    except ValueError as exc:
        raise SpecError(f"line {lineno}: {exc}") from None
    if fields:
        raise SpecError(f"line {lineno}: unknown fields {sorted(fields)}")
    return LayerSpec(**kwargs)


def parse_spec(text: str) -> NetSpec:
    if not text.endswith("\n"):
        raise SpecError("spec text must end with a newline")
    lines = text[:-1].split("\n")
    for i, line in enumerate(lines, 1):
        if not line or line != line.strip() or "  " in line or not line.isprintable():
            raise SpecError(f"line {i}: malformed line {line!r}")
    if lines[0] != "netspec 1":
        raise SpecError("missing 'netspec 1' header")
    head: dict[str, str] = {}
    layers = []
    for i, line in enumerate(lines[1:], 2):
        if line.startswith("layer "):
            layers.append(_parse_layer(line, i))
            continue
        if layers:
            raise SpecError(f"line {i}: net fields must precede layers")
        key, sep, val = line.partition("=")
        if not sep or key in head or (val and not _TOKEN.match(val)):
            raise SpecError(f"line {i}: malformed header {line!r}")
        head[key] = val
    if set(head) != {"input_shape", "num_classes", "stage"}:
        raise SpecError(f"header fields must be input_shape, num_classes, stage; got {sorted(head)}")
    try:
        input_shape = tuple(int(v) for v in head["input_shape"].split(","))
        num_classes = int(head["num_classes"])
    except ValueError as exc:
        raise SpecError(str(exc)) from None
    spec = NetSpec(tuple(layers), input_shape, num_classes, head["stage"])
    if spec.to_text() != text:
        raise SpecError("spec text is not in canonical form")
    return spec


def reference_net_2d(
    in_channels: int = 1,
    height: int = 16,
    width: int = 16,
    num_classes: int = 4,
    conv_channels: tuple[int, int] = (8, 16),
    fc_units: int = 64,
    dropout_rate: float = 0.5,
) -> NetSpec:
    """The desk-scale image network that later gets inflated.

    Two 3x3 conv blocks (each followed by relu and 2x2 max pooling), a hidden
    fc layer with dropout, and the classifier.
    """
    c1, c2 = conv_channels
    layers = [
        LayerSpec("conv1", "conv2d", out_channels=c1, kernel=(3, 3), stride=(1, 1), padding=(1, 1)),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool2d", kernel=(2, 2), stride=(2, 2)),
        LayerSpec("conv2", "conv2d", out_channels=c2, kernel=(3, 3), stride=(1, 1), padding=(1, 1)),
        LayerSpec("relu2", "relu"),
        LayerSpec("pool2", "maxpool2d", kernel=(2, 2), stride=(2, 2)),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc1", "fc", units=fc_units),
        LayerSpec("relu3", "relu"),
        LayerSpec("drop1", "dropout", rate=dropout_rate),
        LayerSpec("fc2", "fc", units=num_classes),
        LayerSpec("softmax", "softmax"),
    ]
    return NetSpec(tuple(layers), (in_channels, height, width), num_classes, "init")
