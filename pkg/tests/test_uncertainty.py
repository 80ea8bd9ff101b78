import numpy as np
import numpy.testing as npt
import pytest

from voxgeo import uncertainty
from voxgeo.uncertainty import (AmbiguityField, Conv3dParams, GatingMask,
                                RefinerParams)
from voxgeo.volcore import ProbVolume


def test_foreground_prob_extremes():
    zeros = ProbVolume(np.zeros((3, 3, 3), dtype=np.float32))
    ones = ProbVolume(np.ones((3, 3, 3), dtype=np.float32))
    npt.assert_array_equal(uncertainty.foreground_prob(zeros, zeros).data, 0.0)
    npt.assert_array_equal(uncertainty.foreground_prob(ones, zeros).data, 0.5)


def test_foreground_prob_matches_loop():
    rng = np.random.default_rng(20)
    up = rng.random((4, 4, 4)).astype(np.float32)
    low = rng.random((4, 4, 4)).astype(np.float32)
    out = uncertainty.foreground_prob(ProbVolume(up), ProbVolume(low)).data
    for idx in np.ndindex(4, 4, 4):
        assert abs(out[idx] - (float(up[idx]) + float(low[idx])) / 2) < 1e-6


def test_ambiguity_closed_forms():
    p = np.array([[[0.5, 0.0, 1.0, 0.25]]], dtype=np.float32)
    a = uncertainty.ambiguity_field(ProbVolume(p)).data
    npt.assert_allclose(a[0, 0], [1.0, 0.0, 0.0, 0.75], atol=1e-6)


def test_ambiguity_rejects_out_of_range():
    with pytest.raises(ValueError):
        uncertainty.ambiguity_field(np.full((2, 2, 2), 1.5))


def test_gating_strict_inequality():
    # exactly tau stays inactive; the active probability band at tau=0.95
    # is approximately (0.3882, 0.6118)
    field = AmbiguityField(np.array([[[0.95, 0.95001]]], dtype=np.float32))
    mask = uncertainty.gating_mask(field, 0.95)
    npt.assert_array_equal(mask.data[0, 0], [False, True])


def test_gating_band_endpoints():
    for p, active in [(0.5, True), (0.3881, False), (0.39, True),
                      (0.6119, False), (0.61, True)]:
        a = uncertainty.ambiguity_field(
            ProbVolume(np.full((1, 1, 1), p, dtype=np.float32)))
        assert bool(uncertainty.gating_mask(a, 0.95).data[0, 0, 0]) == active, p


def test_gating_tau_one_all_inactive():
    rng = np.random.default_rng(21)
    a = uncertainty.ambiguity_field(ProbVolume(rng.random((5, 5, 5)).astype(np.float32)))
    assert not uncertainty.gating_mask(a, 1.0).data.any()


def test_gating_rejects_bad_tau():
    a = AmbiguityField(np.zeros((2, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        uncertainty.gating_mask(a, 1.5)


def _conv(c_out, c_in, k, rng=None, fill=None):
    if fill is not None:
        w = np.full((c_out, c_in, k, k, k), fill)
        b = np.zeros(c_out)
    else:
        w = rng.normal(size=(c_out, c_in, k, k, k))
        b = rng.normal(size=c_out)
    return Conv3dParams(w, b)


def test_conv3d_identity_1x1():
    rng = np.random.default_rng(22)
    x = rng.normal(size=(1, 4, 4, 4))
    out = uncertainty.conv3d_forward(x, _conv(1, 1, 1, fill=1.0))
    npt.assert_allclose(out.data, x, atol=1e-12)


def test_conv3d_delta_box():
    x = np.zeros((1, 7, 7, 7))
    x[0, 3, 3, 3] = 1.0
    out = uncertainty.conv3d_forward(x, _conv(1, 1, 3, fill=1.0)).data[0]
    expected = np.zeros((7, 7, 7))
    expected[2:5, 2:5, 2:5] = 1.0
    npt.assert_allclose(out, expected, atol=1e-12)

    # the box clips at the border
    x[:] = 0.0
    x[0, 0, 0, 0] = 1.0
    out = uncertainty.conv3d_forward(x, _conv(1, 1, 3, fill=1.0)).data[0]
    assert out.sum() == 8.0  # only the 2x2x2 in-range corner survives


def test_conv3d_matches_naive_loops():
    rng = np.random.default_rng(23)
    x = rng.normal(size=(2, 5, 5, 5))
    p = _conv(3, 2, 3, rng=rng)
    out = uncertainty.conv3d_forward(x, p).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    for o in range(3):
        for z in range(5):
            for y in range(5):
                for xx in range(5):
                    acc = p.bias[o]
                    for c in range(2):
                        for dz in range(3):
                            for dy in range(3):
                                for dx in range(3):
                                    acc += p.weights[o, c, dz, dy, dx] * \
                                        xp[c, z + dz, y + dy, xx + dx]
                    assert abs(out[o, z, y, xx] - acc) < 1e-5


def test_refiner_zero_params_zero_output():
    rng = np.random.default_rng(24)
    z1 = _conv(4, 2, 3, fill=0.0)
    z2 = _conv(4, 4, 3, fill=0.0)
    z3 = _conv(2, 4, 1, fill=0.0)
    out = uncertainty.refiner_forward(rng.normal(size=(2, 4, 4, 4)),
                                      RefinerParams(z1, z2, z3))
    npt.assert_array_equal(out.data, 0.0)


def test_refiner_identity_chain_is_relu():
    # delta 1x1 kernels with identity channel map: the chain collapses to a
    # single ReLU because ReLU is idempotent and the last conv is linear
    eye1 = Conv3dParams(np.eye(2).reshape(2, 2, 1, 1, 1), np.zeros(2))
    rng = np.random.default_rng(25)
    x = rng.normal(size=(2, 3, 3, 3))
    out = uncertainty.refiner_forward(x, RefinerParams(eye1, eye1, eye1))
    npt.assert_allclose(out.data, np.maximum(x, 0.0), atol=1e-12)


def test_refiner_channel_chain_validation():
    rng = np.random.default_rng(26)
    with pytest.raises(ValueError):
        RefinerParams(_conv(4, 2, 3, rng=rng), _conv(5, 3, 3, rng=rng),
                      _conv(2, 5, 1, rng=rng))


def test_gated_fusion_alpha_zero_noop():
    rng = np.random.default_rng(27)
    f_in = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
    f_ref = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
    mask = GatingMask(rng.random((3, 3, 3)) > 0.5, 0.5)
    out = uncertainty.gated_fusion(f_in, f_ref, mask, 0.0)
    npt.assert_array_equal(out.data, f_in)


def test_gated_fusion_outside_gate_bit_identical():
    rng = np.random.default_rng(28)
    f_in = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
    f_ref = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
    gate = rng.random((4, 4, 4)) > 0.5
    out = uncertainty.gated_fusion(f_in, f_ref, GatingMask(gate, 0.5), 0.7).data
    npt.assert_array_equal(out[:, ~gate], f_in[:, ~gate])
    npt.assert_allclose(out[:, gate], f_in[:, gate] + 0.7 * f_ref[:, gate],
                        rtol=1e-6)


def test_gated_fusion_all_true_alpha_one():
    rng = np.random.default_rng(29)
    f_in = rng.normal(size=(1, 3, 3, 3))
    f_ref = rng.normal(size=(1, 3, 3, 3))
    out = uncertainty.gated_fusion(f_in, f_ref,
                                   GatingMask(np.ones((3, 3, 3), bool), 0.5), 1.0)
    npt.assert_allclose(out.data, f_in + f_ref, atol=1e-12)


def test_gated_fusion_grad_trivial_cases():
    rng = np.random.default_rng(30)
    shape = (2, 3, 3, 3)
    f_in = rng.normal(size=shape)
    f_ref = rng.normal(size=shape)
    mask = GatingMask(rng.random(shape[1:]) > 0.5, 0.5)
    ones = np.ones(shape)
    g_in, g_ref, g_a = uncertainty.gated_fusion_grad(f_in, f_ref, mask, 0.0, ones)
    npt.assert_array_equal(g_in.data, 1.0)
    npt.assert_array_equal(g_ref.data, 0.0)

    off = GatingMask(np.zeros(shape[1:], bool), 0.5)
    _, _, g_a = uncertainty.gated_fusion_grad(f_in, f_ref, off, 1.3, ones)
    assert g_a == 0.0


def test_gated_fusion_grad_finite_differences():
    rng = np.random.default_rng(31)
    shape = (2, 3, 3, 3)
    f_in = rng.normal(size=shape)
    f_ref = rng.normal(size=shape)
    up = rng.normal(size=shape)
    mask = GatingMask(rng.random(shape[1:]) > 0.4, 0.5)
    alpha = 0.8
    g_in, g_ref, g_a = uncertainty.gated_fusion_grad(f_in, f_ref, mask, alpha, up)

    def obj(fi, fr, al):
        return float(np.sum(uncertainty.gated_fusion(fi, fr, mask, al).data * up))

    h = 1e-3
    for idx in np.ndindex(*shape):
        e = np.zeros(shape)
        e[idx] = h
        fd = (obj(f_in + e, f_ref, alpha) - obj(f_in - e, f_ref, alpha)) / (2 * h)
        assert abs(g_in.data[idx] - fd) <= 1e-6 * max(1.0, abs(fd))
        fd = (obj(f_in, f_ref + e, alpha) - obj(f_in, f_ref - e, alpha)) / (2 * h)
        assert abs(g_ref.data[idx] - fd) <= 1e-6 * max(1.0, abs(fd))
    fd_a = (obj(f_in, f_ref, alpha + h) - obj(f_in, f_ref, alpha - h)) / (2 * h)
    assert abs(g_a - fd_a) <= 1e-6 * max(1.0, abs(fd_a))
