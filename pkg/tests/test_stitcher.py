import numpy as np
import numpy.testing as npt
import pytest

from voxgeo import stitcher
from voxgeo.uncertainty import Conv3dParams
from voxgeo.volcore import ProbVolume, ScalarVolume


def test_plan_single_window():
    plan = stitcher.plan_windows((8, 8, 8), (8, 8, 8), 0.5)
    assert plan.window_origins == ((0, 0, 0),)


def test_plan_27_windows():
    plan = stitcher.plan_windows((4, 4, 4), (2, 2, 2), 0.5)
    assert plan.stride == (1, 1, 1)
    assert len(plan.window_origins) == 27
    per_axis = sorted({o[0] for o in plan.window_origins})
    assert per_axis == [0, 1, 2]


def test_plan_zero_overlap_tiles():
    plan = stitcher.plan_windows((8, 8, 8), (4, 4, 4), 0.0)
    assert plan.stride == (4, 4, 4)
    assert sorted({o[2] for o in plan.window_origins}) == [0, 4]


def test_plan_clamps_final_origin():
    plan = stitcher.plan_windows((10, 10, 10), (4, 4, 4), 0.0)
    assert sorted({o[0] for o in plan.window_origins}) == [0, 4, 6]


def test_plan_rejects_oversized_window():
    with pytest.raises(ValueError):
        stitcher.plan_windows((4, 4, 4), (8, 4, 4), 0.5)
    with pytest.raises(ValueError):
        stitcher.plan_windows((4, 4, 4), (2, 2, 2), 1.0)


def test_weight_window_uniform():
    w = stitcher.make_weight_window((3, 4, 5), "uniform")
    npt.assert_array_equal(w.data, 1.0)


def test_weight_window_gaussian():
    w = stitcher.make_weight_window((8, 8, 8), "gaussian").data
    assert w.min() >= 1e-3
    # separable and symmetric, peak at the center
    npt.assert_allclose(w, w[::-1, ::-1, ::-1], atol=1e-15)
    assert w.max() == w[3:5, 3:5, 3:5].max()


def test_stitch_single_full_patch():
    rng = np.random.default_rng(80)
    p = rng.random((2, 6, 6, 6))
    p /= p.sum(axis=0)
    plan = stitcher.plan_windows((6, 6, 6), (6, 6, 6), 0.0)
    w = stitcher.make_weight_window((6, 6, 6), "uniform")
    out = stitcher.stitch([((0, 0, 0), p)], plan, w, (6, 6, 6))
    npt.assert_allclose(out.data, p.astype(np.float32), atol=1e-7)


def test_stitch_overlap_average():
    # two half-overlapping constant patches: overlap = (a + b) / 2
    plan = stitcher.plan_windows((1, 1, 6), (1, 1, 4), 0.5)
    w = stitcher.make_weight_window((1, 1, 4), "uniform")
    a = np.full((1, 1, 4), 0.2, dtype=np.float32)
    b = np.full((1, 1, 4), 0.6, dtype=np.float32)
    out = stitcher.stitch([((0, 0, 0), a), ((0, 0, 2), b)], plan, w, (1, 1, 6)).data
    npt.assert_allclose(out[0, 0], [0.2, 0.2, 0.4, 0.4, 0.6, 0.6], atol=1e-7)


def test_stitch_rejects_unplanned_origin():
    plan = stitcher.plan_windows((4, 4, 4), (4, 4, 4), 0.0)
    w = stitcher.make_weight_window((4, 4, 4), "uniform")
    with pytest.raises(ValueError):
        stitcher.stitch([((1, 0, 0), np.zeros((4, 4, 4)))], plan, w, (4, 4, 4))


def test_stitch_detects_uncovered_voxels():
    plan = stitcher.plan_windows((4, 4, 8), (4, 4, 4), 0.0)
    w = stitcher.make_weight_window((4, 4, 4), "uniform")
    with pytest.raises(ValueError):
        stitcher.stitch([((0, 0, 0), np.zeros((4, 4, 4)))], plan, w, (4, 4, 8))


def test_stitch_commutes_with_voxelwise_model():
    # receptive-field-1 model applied patchwise then stitched must equal the
    # model applied to the whole volume, for gaussian weights too
    rng = np.random.default_rng(81)
    vol = rng.random((12, 12, 12))

    def model(x):
        p1 = np.clip(x, 0.0, 1.0)
        return np.stack([1.0 - p1, p1])

    dims, window = (12, 12, 12), (6, 6, 6)
    plan = stitcher.plan_windows(dims, window, 0.5)
    for mode in ("uniform", "gaussian"):
        w = stitcher.make_weight_window(window, mode)
        patches = []
        for o in plan.window_origins:
            sl = tuple(slice(i, i + 6) for i in o)
            patches.append((o, model(vol[sl])))
        out = stitcher.stitch(patches, plan, w, dims)
        npt.assert_allclose(out.data, model(vol).astype(np.float32), atol=1e-6)


def test_argmax_one_hot():
    rng = np.random.default_rng(82)
    labels = rng.integers(0, 4, size=(4, 4, 4))
    onehot = (labels[None] == np.arange(4)[:, None, None, None]).astype(np.float32)
    out = stitcher.argmax_labels(ProbVolume(onehot))
    npt.assert_array_equal(out.data, labels)


def test_argmax_tie_lowest_index():
    uniform = ProbVolume(np.full((3, 2, 2, 2), 1 / 3, dtype=np.float32))
    out = stitcher.argmax_labels(uniform)
    npt.assert_array_equal(out.data, 0)


def test_argmax_matches_loop():
    rng = np.random.default_rng(83)
    p = rng.random((5, 4, 4, 4)).astype(np.float32)
    p /= p.sum(axis=0)
    out = stitcher.argmax_labels(ProbVolume(p)).data
    for idx in np.ndindex(4, 4, 4):
        col = p[(slice(None),) + idx]
        assert out[idx] == int(np.flatnonzero(col == col.max())[0])


def _identity_adapter():
    w = np.zeros((2, 2, 1, 1, 1))
    w[0, 0] = 1.0
    w[1, 1] = 1.0
    return Conv3dParams(w, np.zeros(2))


def test_compose_stage2_identity_adapter():
    rng = np.random.default_rng(84)
    img = ScalarVolume(rng.normal(size=(4, 4, 4)).astype(np.float32))
    up = ProbVolume(rng.random((4, 4, 4)).astype(np.float32))
    low = ProbVolume(rng.random((4, 4, 4)).astype(np.float32))
    out = stitcher.compose_stage2_input(img, up, low, _identity_adapter())
    assert out.channels == 3
    npt.assert_allclose(out.data[0], img.data, atol=1e-7)
    npt.assert_allclose(out.data[1], up.data, atol=1e-7)
    npt.assert_allclose(out.data[2], low.data, atol=1e-7)


def test_compose_stage2_zero_adapter():
    rng = np.random.default_rng(85)
    img = ScalarVolume(rng.normal(size=(3, 3, 3)).astype(np.float32))
    up = ProbVolume(rng.random((3, 3, 3)).astype(np.float32))
    low = ProbVolume(rng.random((3, 3, 3)).astype(np.float32))
    zero = Conv3dParams(np.zeros((2, 2, 1, 1, 1)), np.zeros(2))
    out = stitcher.compose_stage2_input(img, up, low, zero)
    npt.assert_array_equal(out.data[1:], 0.0)


def test_compose_stage2_rejects_wrong_adapter():
    img = ScalarVolume(np.zeros((2, 2, 2), dtype=np.float32))
    p = ProbVolume(np.zeros((2, 2, 2), dtype=np.float32))
    bad = Conv3dParams(np.zeros((2, 3, 1, 1, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        stitcher.compose_stage2_input(img, p, p, bad)
