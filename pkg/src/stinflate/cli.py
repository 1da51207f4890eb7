"""Command-line pipeline: pretrain2d, inflate, finetune3d, eval, fuse, verify,
gradcheck and dump-kernels.

Metrics go to stdout as ``key=value`` lines; progress goes to stderr.
Exit codes: 0 success, 1 validation or I/O error, 2 numerical tolerance
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import checkpoint, data, inflate
from .config import ConfigError, RunConfig, load_config
from .nn import gradcheck
from .nn.net import init_params
from .nn.spec import NetSpec, SpecError, reference_net_2d
from .nn.train import accuracy, evaluate, train
from .ppm import dump_kernel_images
from .tensor import Rng

EXIT_OK, EXIT_INVALID, EXIT_TOLERANCE = 0, 1, 2

SUM_TOL = {np.dtype(np.float32): 1e-5, np.dtype(np.float64): 1e-12}
EQUIV_TOL = {np.dtype(np.float32): 1e-4, np.dtype(np.float64): 1e-12}
GRADCHECK_TOL = 1e-6
# Temporal kernel sizes assigned to the conv layers, in order.
TEMPORAL_SIZES = (3, 2)

log = logging.getLogger("stinflate")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def emit(key: str, value) -> None:
    if isinstance(value, float):
        value = f"{value:.6f}" if abs(value) >= 1e-4 or value == 0 else f"{value:.3e}"
    print(f"{key}={value}", flush=True)


def _config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return load_config(path)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from None


def _read(path):
    try:
        return checkpoint.read_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None


def _read_model(path) -> tuple[NetSpec, dict]:
    spec, params = _read(path)
    if spec is None:
        raise CliError(f"{path} holds no network (data-only dump)")
    return spec, params


def _write(path, spec, tensors) -> None:
    try:
        checkpoint.write_checkpoint(path, spec, tensors)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}") from None


def _eval_split(spec: NetSpec, cfg: RunConfig):
    """Test split matching the model: clips for 3D nets, frames or images for 2D."""
    _, test = data.generate(cfg.dataset())
    if cfg.task == "motion3d" and not spec.is_3d:
        test = data.frames_of(test)
    if test.clips.shape[1:] != spec.input_shape:
        raise CliError(f"data shape {test.clips.shape[1:]} does not match model input {spec.input_shape}")
    return test


def cmd_pretrain2d(args) -> int:
    cfg = _config(args.config)
    if cfg.task != "shapes2d":
        raise CliError("pretrain2d needs task=shapes2d")
    train_set, test_set = data.gen_shapes2d(cfg.dataset())
    spec = reference_net_2d(1, cfg.h, cfg.w, cfg.num_classes, fc_units=cfg.fc_units, dropout_rate=cfg.dropout_rate)
    params = init_params(spec, Rng(cfg.seed).split("init"))
    # Nothing to preserve yet: conv layers train from the first iteration.
    params, _ = train(spec, params, train_set.as_dataset(), cfg.train_config(conv_freeze_iters=0))
    emit("train_acc", evaluate(spec, params, train_set.as_dataset())[0])
    emit("test_acc", evaluate(spec, params, test_set.as_dataset())[0])
    _write(args.out, spec.with_stage("pretrained"), params)
    return EXIT_OK


def cmd_inflate(args) -> int:
    cfg = _config(args.config)
    spec2d, params2d = _read_model(args.inp)
    if spec2d.is_3d:
        raise CliError("inflate needs a 2D checkpoint")
    method = args.method or cfg.inflate_method
    t0 = cfg.inflate_t0 if args.t0 is None else args.t0
    plan = inflate.default_plan(spec2d, method, t0, TEMPORAL_SIZES)
    for name, p in plan.items():
        if not 1 <= t0 <= p.T:
            raise CliError(f"t0={t0} out of range for {name} (T={p.T})")
    spec3d, params3d, report = inflate.inflate_net(
        spec2d, params2d, plan, clip_T=cfg.t, pool_T=cfg.pool_t,
        rng=Rng(cfg.seed).split("inflate"), fc_units=cfg.fc_units,
    )
    text = report.to_text()
    sys.stdout.write(text)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    _write(args.out, spec3d, params3d)
    tol = SUM_TOL[params3d[f"{report.layers[0].layer}.weight"].dtype] if report.layers else 0.0
    worst = max((r.residual for r in report.layers), default=0.0)
    emit("max_residual", worst)
    if worst > tol:
        raise CliError(f"sum-constraint residual {worst:.3e} exceeds {tol:.0e}", EXIT_TOLERANCE)
    return EXIT_OK


def cmd_finetune3d(args) -> int:
    cfg = _config(args.config)
    if cfg.task != "motion3d":
        raise CliError("finetune3d needs task=motion3d")
    spec, params = _read_model(args.inp)
    if not spec.is_3d:
        raise CliError("finetune3d needs a 3D checkpoint (run inflate first)")
    net_T = spec.input_shape[1]
    if cfg.t != net_T:
        raise CliError(f"config clip length t={cfg.t} but the network expects clips of {net_T} frames")
    train_set, test_set = data.gen_motion3d(cfg.dataset())
    params, hist = train(spec, params, train_set.as_dataset(), cfg.train_config())
    emit("final_loss", hist.loss[-1] if hist.loss else float("nan"))
    emit("test_acc", evaluate(spec, params, test_set.as_dataset())[0])
    _write(args.out, spec.with_stage("finetuned"), params)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    spec, params = _read_model(args.model)
    test = _eval_split(spec, cfg)
    acc, probs = evaluate(spec, params, test.as_dataset())
    emit("test_acc", acc)
    if args.dump_probs:
        _write(args.dump_probs, None, {"probs": probs.astype(np.float64),
                                       "labels": test.labels.astype(np.float64)})
    return EXIT_OK


def load_probs(path):
    spec, tensors = _read(path)
    if set(tensors) != {"probs", "labels"}:
        raise CliError(f"{path}: expected tensors 'probs' and 'labels', found {sorted(tensors)}")
    probs, labels = tensors["probs"], tensors["labels"]
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise CliError(f"{path}: probs must be (N, K) with N labels")
    return probs, labels


def fuse_probs(tables):
    """Unweighted mean of probability tables that share shape and labels."""
    probs0, labels0 = tables[0]
    for probs, labels in tables[1:]:
        if probs.shape != probs0.shape:
            raise CliError(f"probability shapes differ: {probs0.shape} vs {probs.shape}")
        if not np.array_equal(labels, labels0):
            raise CliError("label vectors differ between probability dumps")
    fused = probs0.astype(np.float64).copy()
    for probs, _ in tables[1:]:
        fused += probs
    return fused / len(tables), labels0


def cmd_fuse(args) -> int:
    paths = [p for p in args.probs.split(",") if p]
    if len(paths) < 1:
        raise CliError("--probs needs at least one file")
    tables = [load_probs(p) for p in paths]
    for i, (probs, labels) in enumerate(tables):
        emit(f"input{i}_acc", accuracy(probs, labels))
    fused, labels = fuse_probs(tables)
    emit("test_acc", accuracy(fused, labels))
    return EXIT_OK


def cmd_verify(args) -> int:
    spec2d, params2d = _read_model(args.model2d)
    spec3d, params3d = _read_model(args.model3d)
    if spec2d.is_3d or not spec3d.is_3d:
        raise CliError("verify needs a 2D model and a 3D model")
    convs = [l.name for l in spec2d.layers if l.kind == "conv2d"]
    convs3 = [l.name for l in spec3d.layers if l.kind == "conv3d"]
    if convs != convs3:
        raise CliError(f"conv layer names differ: {convs} vs {convs3}")
    post_training = spec3d.stage == "finetuned"
    failures = []
    for name in convs:
        l2 = inflate.conv_layer(spec2d, params2d, name)
        l3 = inflate.conv_layer(spec3d, params3d, name)
        try:
            residual = inflate.verify_sum_constraint(l2.weight, l3.weight)
            deviation = inflate.verify_equivalence(l2, l3, Rng(0).split(name), trials=10)
        except inflate.InflationError as exc:
            raise CliError(f"{name}: {exc}") from None
        dtype = l3.weight.dtype
        emit(f"{name}.residual", residual)
        emit(f"{name}.deviation", deviation)
        if residual > SUM_TOL[dtype] or deviation > EQUIV_TOL[dtype]:
            failures.append(name)
    if post_training:
        emit("status", "post-training,informational")
        return EXIT_OK
    if failures:
        emit("status", "fail")
        raise CliError(f"tolerance exceeded in layers: {', '.join(failures)}", EXIT_TOLERANCE)
    emit("status", "pass")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = gradcheck.run_all(args.seed)
    for kind, err in errors.items():
        emit(f"rel_err.{kind}", err)
    worst = max(errors.values())
    emit("max_rel_err", worst)
    if not worst < GRADCHECK_TOL:
        raise CliError(f"max relative error {worst:.3e} >= {GRADCHECK_TOL:.0e}", EXIT_TOLERANCE)
    return EXIT_OK


def cmd_dump_kernels(args) -> int:
    spec, params = _read_model(args.model)
    try:
        layer = spec.layer(args.layer)
    except SpecError as exc:
        raise CliError(str(exc)) from None
    if layer.kind != "conv3d":
        raise CliError(f"layer {args.layer!r} is {layer.kind}, not conv3d")
    w = params[f"{layer.name}.weight"]
    files = dump_kernel_images(w, args.out, layer.name)
    emit("files", len(files))
    if args.similarity:
        emit("similarity", inflate.temporal_slice_similarity(w))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stinflate", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain2d", help="train the 2D reference net on shapes2d")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain2d)

    p = sub.add_parser("inflate", help="inflate a 2D checkpoint to 3D")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--method", type=str.lower, choices=["ia", "is", "zwi", "nwi"],
                   help="default: inflate_method from --config")
    p.add_argument("--t0", type=int, help="default: inflate_t0 from --config")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--config", help="supplies t, pool_t, fc_units, seed and method defaults")
    p.set_defaults(func=cmd_inflate)

    p = sub.add_parser("finetune3d", help="fine-tune an inflated net on motion3d")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune3d)

    p = sub.add_parser("eval", help="evaluate a model on the config's test split")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--dump-probs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="average probability dumps and score the result")
    p.add_argument("--probs", required=True, help="comma-separated probability dumps")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("verify", help="check sum constraint and equivalence per conv layer")
    p.add_argument("--model2d", required=True)
    p.add_argument("--model3d", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-kernels", help="write conv3d kernel slices as PPM images")
    p.add_argument("--model", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--similarity", action="store_true")
    p.set_defaults(func=cmd_dump_kernels)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, SpecError, checkpoint.CheckpointError, inflate.InflationError,
            data.DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
