import numpy as np
import numpy.testing as npt
import pytest

from voxgeo import volcore
from voxgeo.volcore import (LabelVolume, PatchSpec, ProbVolume, ScalarVolume,
                            VolumeFormatError)


def test_scalar_volume_validates_shape():
    with pytest.raises(ValueError):
        ScalarVolume(np.zeros((4, 4)))


def test_label_volume_rejects_out_of_range():
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 5, dtype=np.int64), 3)


def test_prob_volume_rejects_out_of_range():
    with pytest.raises(ValueError):
        ProbVolume(np.full((2, 2, 2), 1.5, dtype=np.float32))


def test_raw_roundtrip_zero_volume(tmp_path):
    data = np.zeros((3, 3, 3), dtype=np.float32)
    volcore.write_array_raw(tmp_path / "v.raw", data,
                            {"spacing": [0.2, 0.2, 0.2]})
    vol = volcore.read_volume(tmp_path / "v.raw", "scalar")
    assert isinstance(vol, ScalarVolume)
    npt.assert_array_equal(vol.data, data)
    assert vol.spacing == (0.2, 0.2, 0.2)


@pytest.mark.parametrize("ext", [".nii", ".raw"])
def test_roundtrip_bitwise(tmp_path, ext):
    rng = np.random.default_rng(3)
    vol = ScalarVolume(rng.normal(size=(8, 8, 8)).astype(np.float32),
                       (0.5, 0.4, 0.3))
    volcore.write_volume(vol, tmp_path / f"v{ext}")
    back = volcore.read_volume(tmp_path / f"v{ext}", "scalar")
    npt.assert_array_equal(back.data, vol.data)
    # NIfTI headers store pixdim as float32
    npt.assert_allclose(back.spacing, vol.spacing, rtol=1e-6)


def test_nifti_bad_magic(tmp_path):
    p = tmp_path / "bad.nii"
    vol = ScalarVolume(np.zeros((2, 2, 2), dtype=np.float32))
    volcore.write_volume(vol, p)
    blob = bytearray(p.read_bytes())
    blob[344:348] = b"nope"
    p.write_bytes(bytes(blob))
    with pytest.raises(VolumeFormatError):
        volcore.read_volume(p)


def test_label_roundtrip_preserves_classes(tmp_path):
    rng = np.random.default_rng(4)
    lab = LabelVolume(rng.integers(0, 40, size=(6, 6, 6)), 40)
    for name in ("l.nii", "l.raw"):
        volcore.write_volume(lab, tmp_path / name)
        back = volcore.read_volume(tmp_path / name, "label")
        npt.assert_array_equal(back.data, lab.data)


def test_zscore_constant_is_zero():
    vol = ScalarVolume(np.full((3, 3, 3), 7.0, dtype=np.float32))
    out = volcore.zscore_normalize(vol, mean=7.0, std=1.0)
    npt.assert_array_equal(out.data, 0.0)


def test_zscore_two_values():
    vol = ScalarVolume(np.array([[[0.0, 2.0]]], dtype=np.float32))
    out = volcore.zscore_normalize(vol, mean=1.0, std=1.0)
    npt.assert_array_equal(out.data, [[[-1.0, 1.0]]])


def test_zscore_self_stats():
    rng = np.random.default_rng(5)
    vol = ScalarVolume(rng.normal(3.0, 2.0, size=(8, 8, 8)).astype(np.float32))
    out = volcore.zscore_normalize(vol, float(vol.data.mean()),
                                   float(vol.data.std()))
    assert abs(out.data.mean()) < 1e-5
    assert abs(out.data.std() - 1.0) < 1e-5

    with pytest.raises(ValueError):
        volcore.zscore_normalize(vol, 0.0, 0.0)


def test_extract_patch_identity():
    rng = np.random.default_rng(6)
    vol = ScalarVolume(rng.normal(size=(5, 6, 7)).astype(np.float32))
    patch = volcore.extract_patch(vol, PatchSpec((5, 6, 7), (0, 0, 0)))
    npt.assert_array_equal(patch.data, vol.data)


def test_extract_patch_single_voxel():
    data = np.zeros((3, 3, 3), dtype=np.float32)
    data[1, 1, 1] = 7.0
    patch = volcore.extract_patch(ScalarVolume(data),
                                  PatchSpec((1, 1, 1), (1, 1, 1)))
    npt.assert_array_equal(patch.data, [[[7.0]]])


def test_extract_patch_zero_padding():
    vol = ScalarVolume(np.ones((4, 4, 4), dtype=np.float32))
    patch = volcore.extract_patch(vol, PatchSpec((4, 4, 4), (-2, 0, 0)),
                                  pad="zero")
    npt.assert_array_equal(patch.data[:2], 0.0)
    npt.assert_array_equal(patch.data[2:], 1.0)


def test_extract_patch_mirror_padding():
    # reflect-101: index -1 maps to 1, index n maps to n-2
    data = np.arange(4, dtype=np.float32).reshape(4, 1, 1)
    vol = ScalarVolume(np.ascontiguousarray(np.broadcast_to(data, (4, 4, 4))))
    patch = volcore.extract_patch(vol, PatchSpec((6, 4, 4), (-1, 0, 0)),
                                  pad="mirror")
    npt.assert_array_equal(patch.data[:, 0, 0], [1, 0, 1, 2, 3, 2])


def test_rotation_matrix_orthonormal():
    r = volcore.rotation_matrix(10.0, -7.0, 32.0)
    npt.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_augment_identity():
    rng = np.random.default_rng(7)
    vol = ScalarVolume(rng.normal(size=(5, 5, 5)).astype(np.float32))
    lab = LabelVolume(rng.integers(0, 3, size=(5, 5, 5)), 3)
    out_v, out_l = volcore.augment(vol, lab, rot_deg=(0, 0, 0),
                                   flips=(False, False, False))
    npt.assert_array_equal(out_v.data, vol.data)
    npt.assert_array_equal(out_l.data, lab.data)


def test_augment_double_flip_involution():
    rng = np.random.default_rng(8)
    vol = ScalarVolume(rng.normal(size=(5, 5, 5)).astype(np.float32))
    lab = LabelVolume(rng.integers(0, 3, size=(5, 5, 5)), 3)
    once = volcore.augment(vol, lab, rot_deg=(0, 0, 0),
                           flips=(False, False, True))
    twice = volcore.augment(once[0], once[1], rot_deg=(0, 0, 0),
                            flips=(False, False, True))
    npt.assert_array_equal(twice[0].data, vol.data)
    npt.assert_array_equal(twice[1].data, lab.data)


def test_augment_rotation_marker():
    # 90° about z on an odd cube moves a marker to the rotated index; the
    # configured range must be widened to allow the right angle
    data = np.zeros((5, 5, 5), dtype=np.float32)
    data[2, 1, 3] = 1.0
    lab = LabelVolume((data > 0).astype(np.int64), 2)
    _, out_l = volcore.augment(ScalarVolume(data), lab, rot_deg=(0, 0, 90),
                               flips=(False, False, False), max_deg=90.0)
    # about z, (y,x) rotates around center (2,2): (1,3) -> analytic image
    rot = volcore.rotation_matrix(0, 0, 90)
    src = np.array([2, 1, 3]) - 2
    dst = (rot @ src).round().astype(int) + 2
    assert out_l.data[tuple(dst)] == 1
    assert out_l.data.sum() == 1


def test_augment_rejects_out_of_range_rotation():
    vol = ScalarVolume(np.zeros((4, 4, 4), dtype=np.float32))
    lab = LabelVolume(np.zeros((4, 4, 4), dtype=np.int64), 2)
    with pytest.raises(ValueError):
        volcore.augment(vol, lab, rot_deg=(0, 0, 30),
                        flips=(False, False, False))


def test_augment_seed_reproducible():
    rng = np.random.default_rng(9)
    vol = ScalarVolume(rng.normal(size=(6, 6, 6)).astype(np.float32))
    lab = LabelVolume(rng.integers(0, 2, size=(6, 6, 6)), 2)
    a = volcore.augment(vol, lab, seed=42)
    b = volcore.augment(vol, lab, seed=42)
    npt.assert_array_equal(a[0].data, b[0].data)
    npt.assert_array_equal(a[1].data, b[1].data)


def test_downsample_identity():
    lab = LabelVolume(np.arange(8).reshape(2, 2, 2), 8)
    out = volcore.downsample_labels(lab, (1, 1, 1))
    npt.assert_array_equal(out.data, lab.data)


def test_downsample_checkerboard():
    z, y, x = np.indices((4, 4, 4))
    lab = LabelVolume(((z + y + x) % 2).astype(np.int64), 2)
    out = volcore.downsample_labels(lab, (2, 2, 2))
    assert out.data.shape == (2, 2, 2)
    npt.assert_array_equal(out.data, lab.data[::2, ::2, ::2])
    assert out.spacing == (2.0, 2.0, 2.0)


def test_resample_nearest_identity():
    rng = np.random.default_rng(10)
    data = rng.integers(0, 4, size=(5, 5, 5))
    npt.assert_array_equal(volcore.resample_nearest(data, (5, 5, 5)), data)


def test_resample_trilinear_constant():
    out = volcore.resample_trilinear(np.full((4, 4, 4), 3.5), (7, 6, 5))
    npt.assert_allclose(out, 3.5)
