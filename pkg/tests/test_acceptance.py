"""Acceptance criteria, each checked at its stated tolerance.

Every test records a ``PASS``/``FAIL`` line (printed in the terminal summary)
before asserting. Criteria 5-7 share one set of desk-scale training runs.
"""

import contextlib
import io
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from stinflate import checkpoint
from stinflate.cli import main
from stinflate.data import DatasetConfig, frames_of, gen_motion3d
from stinflate.inflate import (
    METHODS, ConvLayer, inflate_conv, make_alphas, temporal_slice_similarity, verify_equivalence,
    verify_sum_constraint,
)
from stinflate.nn import TrainConfig, gradcheck, train
from stinflate.tensor import Rng

SEEDS = (0, 1, 2)
PRETRAIN_CFG = "seed={seed}\n"
FINETUNE_CFG = (
    "task=motion3d\nsamples_train=1024\nsamples_test=500\nlr=0.02\niterations=600\n"
    "conv_freeze_iters=50\ndropout_rate=0.5\nseed={seed}\n"
)


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def cli(*argv) -> dict:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main([str(a) for a in argv])
    assert code == 0, (argv, buf.getvalue())
    return dict(line.split("=", 1) for line in buf.getvalue().splitlines() if "=" in line and " " not in line)


def test_c1_sum_constraint():
    start = time.perf_counter()
    rng = Rng(101)
    worst = 0.0
    for i in range(100):
        r = rng.split(f"layer{i}")
        T = int(r.integers(1, 9))
        w2 = r.normal((int(r.integers(1, 9)), int(r.integers(1, 5)), 3, 3))
        for method in METHODS:
            t0 = int(r.integers(1, T + 1))
            w3, _ = inflate_conv(w2, np.zeros(w2.shape[0]), make_alphas(method, T, t0, r.split(method)))
            worst = max(worst, verify_sum_constraint(w2, w3))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and elapsed < 5
    record("1 (sum constraint)", ok, f"max residual {worst:.2e} < 1e-12, {elapsed:.2f}s < 5s")
    assert ok


def test_c2_equivalence():
    start = time.perf_counter()
    rng = Rng(202)
    worst = {np.float64: 0.0, np.float32: 0.0}
    for i in range(100):
        r = rng.split(f"layer{i}")
        T = int(r.integers(1, 6))
        k = (1, 3, 5)[int(r.integers(0, 3))]
        o, c = int(r.integers(1, 9)), int(r.integers(1, 5))
        stride = int(r.integers(1, 3))
        pad = int(r.integers(0, 2))
        for dtype in worst:
            w2 = r.normal((o, c, k, k)).astype(dtype)
            b2 = r.normal(o).astype(dtype)
            for method in METHODS:
                w3, b3 = inflate_conv(w2, b2, make_alphas(method, T, 1, r.split(method)))
                dev = verify_equivalence(ConvLayer(w2, b2, (stride, stride), (pad, pad)),
                                         ConvLayer(w3, b3, (1, stride, stride), (0, pad, pad)),
                                         r.split(f"eq{method}"), trials=3)
                worst[dtype] = max(worst[dtype], dev)
    elapsed = time.perf_counter() - start
    ok = worst[np.float64] < 1e-12 and worst[np.float32] < 1e-4 and elapsed < 30
    record("2 (equivalence)", ok,
           f"f64 {worst[np.float64]:.2e} < 1e-12, f32 {worst[np.float32]:.2e} < 1e-4, {elapsed:.1f}s < 30s")
    assert ok


def test_c3_alpha_exactness():
    failures = []
    for T in range(1, 17):
        if make_alphas("IA", T).alphas != (1 / T,) * T:
            failures.append(f"IA T={T}")
        nwi = make_alphas("NWI", T).alphas
        if nwi != ((2 * T - 1) / T,) + (-1 / T,) * (T - 1):
            failures.append(f"NWI T={T}")
        for method in METHODS:
            for t0 in range(1, T + 1):
                alphas = make_alphas(method, T, t0, Rng(T)).alphas
                if abs(math.fsum(alphas) - 1) > 1e-12:
                    failures.append(f"{method} T={T} t0={t0} sum")
    if make_alphas("IS", 3).alphas != (0.25, 0.5, 0.25):
        failures.append("IS T=3 preset")
    if make_alphas("IS", 2).alphas != (0.5, 0.5):
        failures.append("IS T=2 preset")
    ok = not failures
    record("3 (alpha exactness)", ok, "IA, NWI closed forms for T in 1..16, IS presets, sums within 1e-12"
           + ("" if ok else f"; failed: {failures}"))
    assert ok


def test_c4_gradient_check():
    start = time.perf_counter()
    worst: dict = {}
    for seed in range(40):
        for kind, err in gradcheck.run_all(seed).items():
            worst[kind] = max(worst.get(kind, 0.0), err)
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok = top < 1e-6 and elapsed < 120
    record("4 (gradient check)", ok,
           f"max rel err {top:.2e} < 1e-6 over {len(worst)} kinds x 40 seeds, {elapsed:.1f}s < 120s")
    assert ok


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Pretrain, frame baseline and four inflate+fine-tune runs per seed, via the CLI."""
    root = tmp_path_factory.mktemp("desk")
    runs = {"frame": {}, "acc": {}, "sim": {}, "time": {}, "dirs": {}}
    for seed in SEEDS:
        d = root / f"seed{seed}"
        d.mkdir()
        runs["dirs"][seed] = d
        (d / "p.cfg").write_text(PRETRAIN_CFG.format(seed=seed))
        (d / "f.cfg").write_text(FINETUNE_CFG.format(seed=seed))
        start = time.perf_counter()
        runs["pretrain_acc", seed] = float(cli("pretrain2d", "--config", d / "p.cfg", "--out", d / "m.stcw")["test_acc"])
        runs["pretrain_time", seed] = time.perf_counter() - start

        # frame baseline: the 2D net fine-tuned on middle frames of the clips
        start = time.perf_counter()
        spec, params = checkpoint.read_checkpoint(d / "m.stcw")
        clips, _ = gen_motion3d(DatasetConfig(task="motion3d", num_classes=4, samples_train=1024,
                                              samples_test=500, seed=seed))
        params, _ = train(spec, params, frames_of(clips).as_dataset(),
                          TrainConfig(learning_rate=0.02, iterations=600, conv_freeze_iters=50, seed=seed))
        checkpoint.write_checkpoint(d / "frame.stcw", spec.with_stage("finetuned"), params)
        runs["frame"][seed] = float(cli("eval", "--model", d / "frame.stcw", "--config", d / "f.cfg")["test_acc"])
        runs["time"]["frame", seed] = time.perf_counter() - start

        for method in METHODS:
            start = time.perf_counter()
            m = method.lower()
            cli("inflate", "--in", d / "m.stcw", "--method", m, "--config", d / "f.cfg", "--out", d / f"{m}3.stcw")
            out = cli("finetune3d", "--in", d / f"{m}3.stcw", "--config", d / "f.cfg", "--out", d / f"{m}T.stcw")
            runs["acc"][method, seed] = float(out["test_acc"])
            _, tuned = checkpoint.read_checkpoint(d / f"{m}T.stcw")
            runs["sim"][method, seed] = temporal_slice_similarity(tuned["conv1.weight"])
            runs["time"][method, seed] = time.perf_counter() - start
    return runs


def test_c5_frame_baseline(desk_runs):
    accs = desk_runs["frame"]
    worst_time = max(desk_runs["time"]["frame", s] + desk_runs["pretrain_time", s] for s in SEEDS)
    ok = all(abs(a - 0.25) <= 0.08 for a in accs.values()) and worst_time < 300
    detail = ", ".join(f"seed {s}: {a:.3f}" for s, a in accs.items())
    record("5 (frame baseline at chance)", ok, f"{detail} within 0.25 +- 0.08; "
           f"pretrain+baseline {worst_time:.0f}s < 300s")
    assert ok


def test_c6_temporal_learning(desk_runs):
    acc = desk_runs["acc"]
    floors = {"NWI": 0.90, "ZWI": 0.90, "IA": 0.60, "IS": 0.60}
    below = [f"{m} seed {s}: {acc[m, s]:.3f}" for m in METHODS for s in SEEDS if acc[m, s] < floors[m]]
    mean = {m: float(np.mean([acc[m, s] for s in SEEDS])) for m in METHODS}
    total = sum(desk_runs["time"][m, s] for m in METHODS for s in SEEDS)
    ok = not below and mean["NWI"] >= mean["IA"] and total < 1200
    detail = ", ".join(f"{m} mean {mean[m]:.3f} (min {min(acc[m, s] for s in SEEDS):.3f})" for m in METHODS)
    record("6 (temporal learning)", ok, f"{detail}; NWI mean >= IA mean; {total:.0f}s < 1200s"
           + ("" if not below else f"; below floor: {below}"))
    assert ok


def test_c7_symmetry_breaking(desk_runs):
    sim = desk_runs["sim"]
    ok = sim["IA", 0] > sim["NWI", 0]
    others = "; ".join(f"seed {s}: IA {sim['IA', s]:.3f} NWI {sim['NWI', s]:.3f}" for s in SEEDS[1:])
    record("7 (slice similarity IA > NWI)", ok,
           f"seed 0: IA {sim['IA', 0]:.3f} > NWI {sim['NWI', 0]:.3f} (asserted); {others} (reported); "
           f"IS {sim['IS', 0]:.3f}, ZWI {sim['ZWI', 0]:.3f}")
    assert ok


def _toy_models(n=200, k=4):
    """Two probability tables, each wrong on a disjoint tenth of the split.

    Right answers carry p=0.85; wrong answers put 0.4 on a wrong class and
    0.3 on the right one, so the partner's confidence wins after averaging.
    """
    labels = np.arange(n) % k
    errors_a = np.arange(0, n, 10)
    errors_b = np.arange(5, n, 10)

    def table(errors):
        p = np.full((n, k), 0.05)
        p[np.arange(n), labels] = 0.85
        wrong = (labels[errors] + 1) % k
        p[errors] = 0.15
        p[errors, wrong] = 0.4
        p[errors, labels[errors]] = 0.3
        return p

    return labels, table(errors_a), table(errors_b)


def test_c8_fusion(tmp_path):
    labels, pa, pb = _toy_models()
    for name, p in (("a", pa), ("b", pb)):
        checkpoint.write_checkpoint(tmp_path / f"{name}.stcw", None,
                                    {"probs": p, "labels": labels.astype(np.float64)})
    a, b = tmp_path / "a.stcw", tmp_path / "b.stcw"
    ab = cli("fuse", "--probs", f"{a},{b}")
    aa = cli("fuse", "--probs", f"{a},{a}")
    acc_a, acc_b, fused = float(ab["input0_acc"]), float(ab["input1_acc"]), float(ab["test_acc"])
    ok = (acc_a >= 0.9 and acc_b >= 0.9 and fused >= max(acc_a, acc_b)
          and aa["test_acc"] == aa["input0_acc"] == ab["input0_acc"])
    record("8 (fusion)", ok, f"A {acc_a:.3f}, B {acc_b:.3f} -> fused {fused:.3f} >= max; "
           f"fuse(A,A) {aa['test_acc']} == A {aa['input0_acc']}")
    assert ok


def test_c9_determinism_and_persistence(desk_runs, tmp_path):
    # repeat the seed-0 NWI pipeline from scratch and compare every artifact
    ref = desk_runs["dirs"][0]
    d = tmp_path
    (d / "p.cfg").write_text(PRETRAIN_CFG.format(seed=0))
    (d / "f.cfg").write_text(FINETUNE_CFG.format(seed=0))
    cli("pretrain2d", "--config", d / "p.cfg", "--out", d / "m.stcw")
    cli("inflate", "--in", d / "m.stcw", "--method", "nwi", "--config", d / "f.cfg", "--out", d / "nwi3.stcw")
    cli("finetune3d", "--in", d / "nwi3.stcw", "--config", d / "f.cfg", "--out", d / "nwiT.stcw")
    cli("eval", "--model", d / "nwiT.stcw", "--config", d / "f.cfg", "--dump-probs", d / "probs.stcw")
    cli("eval", "--model", ref / "nwiT.stcw", "--config", ref / "f.cfg", "--dump-probs", ref / "probs.stcw")
    names = ("m.stcw", "nwi3.stcw", "nwiT.stcw", "probs.stcw")
    identical = [(d / n).read_bytes() == (ref / n).read_bytes() for n in names]

    # round trip of a real checkpoint
    buf = (ref / "nwiT.stcw").read_bytes()
    spec, tensors = checkpoint.decode(buf)
    round_trip = checkpoint.encode(spec, tensors) == buf

    # every single-byte change of every header field is rejected
    accepted = 0
    tried = 0
    for off in checkpoint.header_offsets(buf):
        mutable = bytearray(buf)
        for value in range(256):
            if value == buf[off]:
                continue
            mutable[off] = value
            tried += 1
            try:
                checkpoint.decode(bytes(mutable))
                accepted += 1
            except checkpoint.CheckpointError:
                pass
    ok = all(identical) and round_trip and accepted == 0
    record("9 (determinism, persistence)", ok,
           f"repeat pipeline bitwise identical for {sum(identical)}/{len(names)} artifacts; "
           f"round trip {'bitwise' if round_trip else 'DIFFERS'}; "
           f"{tried} header corruptions, {accepted} accepted")
    assert ok
