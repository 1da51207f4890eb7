from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stinflate.inflate import (
    METHODS, AlphaProfile, ConvLayer, InflationError, LayerPlan, conv_layer, default_plan,
    inflate_conv, inflate_net, make_alphas, temporal_slice_similarity, verify_equivalence,
    verify_sum_constraint,
)
from stinflate.nn import evaluate, init_params, reference_net_2d
from stinflate.nn import ops
from stinflate.tensor import F64, Rng


def _w(rng, shape=(4, 3, 3, 3)):
    return rng.normal(shape)


def test_alpha_examples():
    assert make_alphas("IA", 3).alphas == (1 / 3, 1 / 3, 1 / 3)
    assert make_alphas("NWI", 3, t0=1).alphas == (5 / 3, -1 / 3, -1 / 3)
    assert make_alphas("IS", 3).alphas == (0.25, 0.5, 0.25)
    assert make_alphas("IS", 2).alphas == (0.5, 0.5)
    assert make_alphas("ZWI", 2, t0=1).alphas == (1.0, 0.0)
    assert make_alphas("zwi", 4, t0=3).alphas == (0.0, 0.0, 1.0, 0.0)


@pytest.mark.parametrize("T", range(1, 17))
def test_ia_and_nwi_closed_forms(T):
    ia = make_alphas("IA", T)
    assert ia.alphas == (1 / T,) * T
    for t0 in (1, T):
        nwi = make_alphas("NWI", T, t0=t0).alphas
        assert nwi[t0 - 1] == (2 * T - 1) / T
        assert all(a == -1 / T for i, a in enumerate(nwi) if i != t0 - 1)
        # exact rational check of the coefficient sum
        assert sum(Fraction(a) for a in nwi) == pytest.approx(1, abs=1e-12)


@pytest.mark.parametrize("T", range(1, 17))
def test_is_profiles_positive_and_normalized(T):
    prof = make_alphas("IS", T, rng=Rng(T))
    assert all(a > 0 for a in prof.alphas)
    assert abs(sum(prof.alphas) - 1) < 1e-12
    assert make_alphas("IS", T, rng=Rng(T)) == prof


def test_is_sampling_needs_rng():
    with pytest.raises(InflationError):
        make_alphas("IS", 5)


@pytest.mark.parametrize("args", [("IA", 0), ("NWI", 3, 0), ("NWI", 3, 4), ("XX", 3)])
def test_make_alphas_rejects(args):
    with pytest.raises(InflationError):
        make_alphas(*args)


def test_profile_invariants_enforced():
    with pytest.raises(InflationError):
        AlphaProfile("IA", 2, (0.5, 0.6))
    with pytest.raises(InflationError):
        AlphaProfile("IS", 2, (1.5, -0.5))


def test_inflate_conv_examples():
    w2 = np.array([[[[2.0]]]])
    b2 = np.array([0.3])
    w3, b3 = inflate_conv(w2, b2, make_alphas("IA", 3))
    np.testing.assert_allclose(w3[0, 0, :, 0, 0], [2 / 3, 2 / 3, 2 / 3], rtol=0, atol=1e-15)
    assert b3.tobytes() == b2.tobytes()
    w3, _ = inflate_conv(w2, b2, make_alphas("NWI", 3, t0=1))
    np.testing.assert_allclose(w3[0, 0, :, 0, 0], [10 / 3, -2 / 3, -2 / 3], rtol=0, atol=1e-15)
    assert w3.sum() == pytest.approx(2.0, abs=1e-14)


def test_zwi_copies_slice_bitwise(rng):
    w2 = _w(rng)
    w3, _ = inflate_conv(w2, np.zeros(4), make_alphas("ZWI", 4, t0=2))
    assert w3[:, :, 1].tobytes() == w2.tobytes()
    for t in (0, 2, 3):
        assert not np.any(w3[:, :, t])
    assert verify_sum_constraint(w2, w3) == 0.0


def test_ia_equals_uniform_is_bitwise(rng):
    for dtype in (np.float32, np.float64):
        w2 = _w(rng).astype(dtype)
        for T in (2, 3, 5):
            ia, _ = inflate_conv(w2, np.zeros(4, dtype), make_alphas("IA", T))
            uniform = AlphaProfile("IS", T, (1 / T,) * T)
            is_, _ = inflate_conv(w2, np.zeros(4, dtype), uniform)
            assert ia.tobytes() == is_.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(["ZWI", "NWI"]), st.integers(1, 6))
def test_permutation_property(seed, method, T):
    w2 = _w(Rng(seed), (2, 2, 3, 3))
    ref_prof = make_alphas(method, T, t0=1)
    ref, _ = inflate_conv(w2, np.zeros(2), ref_prof)
    for t0 in range(1, T + 1):
        prof = make_alphas(method, T, t0=t0)
        assert sorted(prof.alphas) == sorted(ref_prof.alphas)
        w3, _ = inflate_conv(w2, np.zeros(2), prof)
        perm = [t0 - 1] + [t for t in range(T) if t != t0 - 1]
        assert w3[:, :, perm].tobytes() == ref.tobytes()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(METHODS), st.integers(1, 8))
def test_sum_constraint_f64(seed, method, T):
    r = Rng(seed)
    w2 = r.normal((3, 2, 3, 3))
    t0 = int(r.integers(1, T + 1))
    w3, _ = inflate_conv(w2, np.zeros(3), make_alphas(method, T, t0, r.split("is")))
    assert verify_sum_constraint(w2, w3) < 1e-12


def test_sum_constraint_sensitivity(rng):
    w2 = _w(rng)
    w3, _ = inflate_conv(w2, np.zeros(4), make_alphas("IA", 3))
    w3[1, 2, 0, 1, 1] += 0.5
    assert verify_sum_constraint(w2, w3) >= 0.5 - 1e-12
    with pytest.raises(InflationError):
        verify_sum_constraint(w2, w3[:, :2])


@pytest.mark.parametrize("method", METHODS)
def test_equivalence_f64_and_f32(method, rng):
    for dtype, tol in ((np.float64, 1e-12), (np.float32, 1e-4)):
        w2 = _w(rng).astype(dtype)
        b2 = rng.normal(4).astype(dtype)
        w3, b3 = inflate_conv(w2, b2, make_alphas(method, 3, 2, rng))
        dev = verify_equivalence(ConvLayer(w2, b2, (1, 1), (1, 1)), ConvLayer(w3, b3, (1, 1, 1), (0, 1, 1)), rng)
        assert dev < tol


def test_equivalence_matches_direct_computation(rng):
    w2 = _w(rng, (2, 1, 3, 3))
    w3, b3 = inflate_conv(w2, np.zeros(2), make_alphas("NWI", 3))
    frame = rng.normal((1, 1, 6, 6))
    out2 = ops.conv2d_forward(frame, w2, np.zeros(2))
    out3 = ops.conv3d_forward(np.repeat(frame[:, :, None], 3, axis=2), w3, b3)
    assert np.abs(out3[:, :, 0] - out2).max() < 1e-12


def test_equivalence_grows_with_perturbation(rng):
    w2 = _w(rng)
    b = np.zeros(4)
    w3, _ = inflate_conv(w2, b, make_alphas("IA", 3))
    direction = rng.normal(w3.shape)
    devs = []
    for eps in (1e-3, 1e-2, 1e-1, 1.0):
        devs.append(verify_equivalence(ConvLayer(w2, b, (1, 1), (0, 0)),
                                       ConvLayer(w3 + eps * direction, b, (1, 1, 1), (0, 0, 0)), Rng(5)))
    assert devs == sorted(devs) and devs[0] > 0


def test_equivalence_preconditions(rng):
    w2 = _w(rng)
    w3, b = inflate_conv(w2, np.zeros(4), make_alphas("IA", 3))
    with pytest.raises(InflationError):
        verify_equivalence(ConvLayer(w2, b, (1, 1), (0, 0)), ConvLayer(w3, b, (2, 1, 1), (0, 0, 0)), rng)
    with pytest.raises(InflationError):
        verify_equivalence(ConvLayer(w2, b, (1, 1), (0, 0)), ConvLayer(w3, b, (1, 1, 1), (1, 0, 0)), rng)


def test_similarity_of_fresh_inflations(rng):
    w2 = _w(rng)
    b = np.zeros(4)
    assert temporal_slice_similarity(inflate_conv(w2, b, make_alphas("IA", 3))[0]) == pytest.approx(1.0, abs=1e-12)
    assert temporal_slice_similarity(inflate_conv(w2, b, make_alphas("IS", 3))[0]) == pytest.approx(1.0, abs=1e-12)
    assert temporal_slice_similarity(inflate_conv(w2, b, make_alphas("NWI", 3))[0]) == pytest.approx(-1 / 3, abs=1e-12)
    assert temporal_slice_similarity(inflate_conv(w2, b, make_alphas("ZWI", 3))[0]) == 0.0
    with pytest.raises(InflationError):
        temporal_slice_similarity(inflate_conv(w2, b, make_alphas("IA", 1))[0])


def _pretrained(seed=0):
    spec = reference_net_2d()
    return spec, init_params(spec, Rng(seed))


def test_inflate_net_reference_shapes():
    spec2d, params2d = _pretrained()
    plan = default_plan(spec2d, "NWI")
    assert plan == {"conv1": LayerPlan("NWI", 3, 1), "conv2": LayerPlan("NWI", 2, 1)}
    spec3d, params3d, report = inflate_net(spec2d, params2d, plan, clip_T=8, pool_T=2, rng=Rng(1), fc_units=32)
    temporal = [s[1] for s in spec3d.shapes()[:6]]
    assert [8] + temporal == [8, 6, 6, 3, 2, 2, 1]
    assert spec3d.layer("pool1").kind == "maxpool3d" and spec3d.layer("pool2").kind == "maxpool3d"
    assert spec3d.layer("fc1").units == 32 and spec3d.layer("fc2").units == 4
    assert params3d["conv1.weight"].shape == (8, 1, 3, 3, 3)
    assert params3d["conv2.weight"].shape == (16, 8, 2, 3, 3)
    assert params3d["conv1.bias"].tobytes() == params2d["conv1.bias"].tobytes()
    assert [r.layer for r in report.layers] == ["conv1", "conv2"]
    assert report.reinitialized == ["fc1", "fc2"]
    assert spec3d.stage == "inflated"
    text = report.to_text()
    assert "layer=conv1 method=NWI T=3 alphas=1.666667,-0.333333,-0.333333" in text
    assert text.endswith("reinitialized=fc1,fc2\n")


def test_inflate_net_deterministic():
    spec2d, params2d = _pretrained()
    plan = default_plan(spec2d, "IS")
    a = inflate_net(spec2d, params2d, plan, clip_T=8, rng=Rng(3))[1]
    b = inflate_net(spec2d, params2d, plan, clip_T=8, rng=Rng(3))[1]
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_inflate_net_zwi_t1_copies_weights():
    spec2d, params2d = _pretrained()
    plan = {n: LayerPlan("ZWI", 1) for n in ("conv1", "conv2")}
    spec3d, params3d, _ = inflate_net(spec2d, params2d, plan, clip_T=8, pool_T=1)
    for n in ("conv1", "conv2"):
        assert params3d[f"{n}.weight"][:, :, 0].tobytes() == params2d[f"{n}.weight"].tobytes()


def test_inflate_net_ia_constant_clip_matches_2d_conv_stack():
    # with T=1 everywhere and no temporal pooling the conv/pool stack is the 2D
    # stack per frame, so even the trained FC head can be carried over
    spec2d, params2d = _pretrained(4)
    plan = {n: LayerPlan("IA", 1) for n in ("conv1", "conv2")}
    spec3d, params3d, _ = inflate_net(spec2d, params2d, plan, clip_T=1, pool_T=1, rng=Rng(0))
    for n in ("fc1", "fc2"):
        for p in ("weight", "bias"):
            params3d[f"{n}.{p}"] = params2d[f"{n}.{p}"]
    x = Rng(2).uniform((20, 1, 16, 16)).astype(np.float32)
    labels = np.arange(20) % 4
    acc2, p2 = evaluate(spec2d, params2d, (x, labels))
    acc3, p3 = evaluate(spec3d, params3d, (x[:, :, None], labels))
    assert acc2 == acc3
    np.testing.assert_allclose(p2, p3, atol=1e-6)


@pytest.mark.parametrize("method", METHODS)
def test_inflate_net_conv_equivalence(method):
    spec2d, params2d = _pretrained(1)
    params2d = {k: v.astype(F64) for k, v in params2d.items()}
    spec3d, params3d, _ = inflate_net(spec2d, params2d, default_plan(spec2d, method), clip_T=8, rng=Rng(0))
    for name in ("conv1", "conv2"):
        dev = verify_equivalence(conv_layer(spec2d, params2d, name), conv_layer(spec3d, params3d, name), Rng(9))
        assert dev < 1e-12


def test_inflate_net_errors():
    spec2d, params2d = _pretrained()
    with pytest.raises(InflationError):
        inflate_net(spec2d, params2d, {"conv1": LayerPlan("IA", 3)}, clip_T=8)
    with pytest.raises(InflationError):
        inflate_net(spec2d, params2d, default_plan(spec2d, "IA"), clip_T=4)
    spec3d, params3d, _ = inflate_net(spec2d, params2d, default_plan(spec2d, "IA"), clip_T=8)
    with pytest.raises(InflationError):
        inflate_net(spec3d, params3d, default_plan(spec2d, "IA"), clip_T=8)
    with pytest.raises(InflationError):
        conv_layer(spec3d, params3d, "fc1")
