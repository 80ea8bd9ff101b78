"""Embedded end-to-end verification suite.

Each check is oracle-based: brute-force enumerations, closed-form values,
or central finite differences, independent of the code path under test.
The CLI `voxgeo selftest` runs all checks and prints one line per check;
the pytest acceptance module drives the same functions.
"""

from __future__ import annotations

import math
import sys
import time

import numpy as np
from scipy import ndimage

from . import clinical, geometry, losses, metrics, stitcher, uncertainty, volcore
from .volcore import LabelVolume, PatchSpec, ProbVolume, ScalarVolume


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _fd_grad(fun, x, h=1e-4):
    """Central finite differences of a scalar function at every entry of x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        g[i] = (fun(xp) - fun(xm)) / (2.0 * h)
    return g


def _rel_err(analytic, fd):
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    fd = np.asarray(fd, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(fd)), 1e-12)
    return float(np.linalg.norm(analytic - fd)) / denom


def _random_labels(rng, max_side=16):
    while True:
        shape = tuple(int(s) for s in rng.integers(4, max_side + 1, size=3))
        data = (rng.random(shape) < rng.uniform(0.15, 0.85)).astype(np.int64)
        if data.any() and not data.all():
            return LabelVolume(data, 2)


# ---------------------------------------------------------------------------
# checks (numbered after the toolkit's release gate)
# ---------------------------------------------------------------------------

def check_sdm_exactness(n_volumes=100, seed=20260823):
    """Exact EDT vs O(n^2) oracle; 1-Lipschitz neighbor bound."""
    rng = np.random.default_rng(seed)
    for i in range(n_volumes):
        lab = _random_labels(rng)
        fg = lab.data > 0
        bnd = geometry.boundary_mask(fg)
        sq_fast = geometry.edt_squared(bnd, lab.spacing)
        sq_brute = geometry.edt_squared_bruteforce(bnd, lab.spacing)
        assert np.array_equal(sq_fast, sq_brute), \
            f"volume {i}: squared-distance mismatch {np.abs(sq_fast - sq_brute).max()}"
        phi = geometry.signed_distance_map(lab).data
        oracle = geometry.sdm_bruteforce_oracle(lab).data
        assert np.array_equal(phi, oracle), f"volume {i}: signed map mismatch"
        for axis, s in enumerate(lab.spacing):
            d = np.abs(np.diff(phi, axis=axis))
            assert d.size == 0 or d.max() <= s + 1e-6, \
                f"volume {i}: Lipschitz bound violated on axis {axis}"
    return f"{n_volumes} volumes exact vs oracle, Lipschitz bound held"


def check_gating_band(seed=7):
    """Threshold band at tau=0.95 and mask monotonicity over the tau sweep."""
    # roots of 4p(1-p) = 0.95
    lo = (1.0 - math.sqrt(1.0 - 0.95)) / 2.0
    hi = (1.0 + math.sqrt(1.0 - 0.95)) / 2.0
    assert abs(lo - 0.3882) < 5e-5 and abs(hi - 0.6118) < 5e-5, (lo, hi)
    ps = np.linspace(0.0, 1.0, 2001)
    field = uncertainty.ambiguity_field(ProbVolume(ps.reshape(-1, 1, 1).astype(np.float32)))
    mask = uncertainty.gating_mask(field, 0.95).data.ravel()
    inside = (ps > lo + 1e-4) & (ps < hi - 1e-4)
    outside = (ps < lo - 1e-4) | (ps > hi + 1e-4)
    assert mask[inside].all() and not mask[outside].any(), "band membership wrong"
    rng = np.random.default_rng(seed)
    rand_field = uncertainty.ambiguity_field(
        ProbVolume(rng.random((8, 8, 8)).astype(np.float32)))
    prev = None
    for tau in (0.0, 0.5, 0.8, 0.9, 0.95, 0.99):
        m = uncertainty.gating_mask(rand_field, tau).data
        if prev is not None:
            assert not (m & ~prev).any(), f"mask not nested at tau={tau}"
        prev = m
    return f"active band ({lo:.4f}, {hi:.4f}); masks nested over tau sweep"


def check_gradients(n_instances=20, seed=11):
    """Analytic gradients vs central finite differences, rel. error < 1e-6."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        # gated fusion
        shape = (2, 3, 3, 3)
        f_in = rng.normal(size=shape)
        f_ref = rng.normal(size=shape)
        up = rng.normal(size=shape)
        mask = uncertainty.GatingMask(rng.random(shape[1:]) > 0.4, 0.5)
        alpha = float(rng.normal())
        g_in, g_ref, g_a = uncertainty.gated_fusion_grad(f_in, f_ref, mask, alpha, up)

        def fuse_obj(fi=None, fr=None, al=None):
            out = uncertainty.gated_fusion(
                f_in if fi is None else fi, f_ref if fr is None else fr,
                mask, alpha if al is None else float(al)).data
            return float(np.sum(out * up))

        worst = max(worst, _rel_err(g_in.data, _fd_grad(lambda x: fuse_obj(fi=x), f_in)))
        worst = max(worst, _rel_err(g_ref.data, _fd_grad(lambda x: fuse_obj(fr=x), f_ref)))
        fd_a = (fuse_obj(al=alpha + 1e-4) - fuse_obj(al=alpha - 1e-4)) / 2e-4
        worst = max(worst, _rel_err([g_a], [fd_a]))

        # anatomical weighted pooling
        x = rng.normal(size=(2, 4, 4, 4))
        m = rng.random((4, 4, 4))
        upc = rng.normal(size=2)
        eps = 1e-5
        gx, gm = geometry.awp_grad(x, m, eps, upc)
        worst = max(worst, _rel_err(gx.data, _fd_grad(
            lambda v: float(upc @ geometry.anatomical_weighted_pooling(v, m, eps)), x)))
        worst = max(worst, _rel_err(gm, _fd_grad(
            lambda v: float(upc @ geometry.anatomical_weighted_pooling(x, v, eps)), m)))

        # losses
        gt = LabelVolume(rng.integers(0, 3, size=(4, 4, 4)), 3)
        # keep probabilities away from 0 so the FD oracle's truncation error
        # (third derivative of -log p) stays far below the 1e-6 gate
        p = rng.uniform(0.15, 1.0, size=(3, 4, 4, 4))
        p /= p.sum(axis=0)
        _, g_ce = losses.cross_entropy(p, gt)
        worst = max(worst, _rel_err(g_ce, _fd_grad(
            lambda v: losses.cross_entropy(v, gt)[0], p, h=1e-5)))
        _, g_dc = losses.soft_dice(p, gt, 1e-5)
        worst = max(worst, _rel_err(g_dc, _fd_grad(
            lambda v: losses.soft_dice(v, gt, 1e-5)[0], p)))
        assert worst < 1e-6, f"instance {i}: gradient rel. error {worst:.3e}"
    return f"{n_instances} instances, worst rel. error {worst:.2e}"


def check_awp_gap_reduction(seed=13):
    """Constant attention map reduces pooling to scaled global averaging."""
    rng = np.random.default_rng(seed)
    for c in (0.25, 1.0, 3.0):
        x = rng.normal(size=(4, 5, 5, 5))
        n = x[0].size
        eps = 1e-5
        z = geometry.anatomical_weighted_pooling(x, np.full((5, 5, 5), c), eps)
        gap = x.mean(axis=(1, 2, 3), dtype=np.float64)
        expected = gap * (c * n / (c * n + eps))
        assert np.abs(z - expected).max() <= 1e-7, np.abs(z - expected).max()
        # z - gap = -gap * eps / (c*n + eps) exactly
        assert np.abs(z - gap).max() <= np.abs(gap).max() * eps / (c * n + eps) + 1e-12
    return "constant-mask pooling equals scaled GAP within eps/sum(m)"


def check_losses(seed=17):
    """Closed-form CE, perfect-prediction Dice, deep-supervision linearity."""
    rng = np.random.default_rng(seed)
    c = 39
    shape = (4, 4, 4)
    gt_data = np.arange(np.prod(shape)).reshape(shape) % c
    gt = LabelVolume(gt_data, c)
    uniform = np.full((c,) + shape, 1.0 / c)
    ce, _ = losses.cross_entropy(uniform, gt)
    assert abs(ce - math.log(39)) <= 1e-4, ce
    onehot = (gt_data[None] == np.arange(c)[:, None, None, None]).astype(np.float64)
    dc, _ = losses.soft_dice(onehot, gt, 1e-5)
    assert dc < 1e-5, dc
    k = 5
    cfg = losses.LossConfig(ds_weights=losses.default_ds_weights(k))
    preds, gts = [], []
    dims = [8, 8, 4, 4, 2]
    for d in dims:
        g = LabelVolume(rng.integers(0, 3, size=(d, d, d)), 3)
        p = rng.uniform(0.05, 1.0, size=(3, d, d, d))
        p /= p.sum(axis=0)
        preds.append(p)
        gts.append(g)
    report, _ = losses.deep_supervision_loss(preds, gts, cfg)
    manual = 0.0
    for p, g, w in zip(preds, gts, cfg.ds_weights):
        manual += w * (losses.cross_entropy(p, g)[0] + losses.soft_dice(p, g, cfg.eps)[0])
    assert abs(report.total - manual) <= 1e-7, (report.total, manual)
    return f"CE(uniform,39)={ce:.4f}, perfect dice={dc:.2e}, DS matches summation"


def check_metrics_oracle(n_pairs=100, seed=19):
    """Indexed HD95/ASSD equal brute-force all-pairs; dilation fixture bound."""
    rng = np.random.default_rng(seed)
    for i in range(n_pairs):
        na, nb = rng.integers(2, 501, size=2)
        a = metrics.SurfacePointSet(rng.uniform(-20, 20, (na, 3)))
        b = metrics.SurfacePointSet(rng.uniform(-20, 20, (nb, 3)))
        d_ab = np.sqrt(((a.points[:, None] - b.points[None]) ** 2).sum(2)).min(1)
        d_ba = np.sqrt(((b.points[:, None] - a.points[None]) ** 2).sum(2)).min(1)
        h95_ab = np.sort(d_ab)[math.ceil(0.95 * d_ab.size) - 1]
        h95_ba = np.sort(d_ba)[math.ceil(0.95 * d_ba.size) - 1]
        assert metrics.hd95(a, b) == max(h95_ab, h95_ba), f"pair {i}: hd95"
        expected_assd = (d_ab.sum() + d_ba.sum()) / (len(a) + len(b))
        assert metrics.assd(a, b) == expected_assd, f"pair {i}: assd"
    # dsc/sen against set arithmetic
    gt = LabelVolume((rng.random((10, 10, 10)) < 0.4).astype(np.int64), 2)
    pred = LabelVolume((rng.random((10, 10, 10)) < 0.4).astype(np.int64), 2)
    p_set = set(map(tuple, np.argwhere(pred.data == 1)))
    g_set = set(map(tuple, np.argwhere(gt.data == 1)))
    dsc, sen = metrics.dsc_sen(pred, gt, 1)
    assert dsc == 2 * len(p_set & g_set) / (len(p_set) + len(g_set))
    assert sen == len(p_set & g_set) / len(g_set)
    # one-voxel 6-connected dilation at isotropic 1 mm
    blob = np.zeros((16, 16, 16), dtype=bool)
    blob[5:10, 6:11, 4:9] = True
    dil = ndimage.binary_dilation(blob, ndimage.generate_binary_structure(3, 1))
    sp = metrics.extract_surface(LabelVolume(dil.astype(np.int64), 2), 1)
    sg = metrics.extract_surface(LabelVolume(blob.astype(np.int64), 2), 1)
    h, a_ = metrics.hd95(sp, sg), metrics.assd(sp, sg)
    assert h <= 1.0 + 1e-12 and a_ <= 1.0 + 1e-12, (h, a_)
    return f"{n_pairs} pairs exact; dilation fixture hd95={h:.2f} assd={a_:.2f} mm"


def check_stitcher_commutation(seed=23):
    """Patchwise voxel-local model == whole-volume application after stitch."""
    rng = np.random.default_rng(seed)
    dims = (64, 64, 64)
    window = (32, 32, 32)
    image = rng.random(dims).astype(np.float32)

    def voxel_model(arr):
        # receptive-field-1 probabilistic lookup, 3 classes
        logits = np.stack([arr, arr ** 2, np.sin(3.0 * arr)]).astype(np.float64)
        e = np.exp(logits - logits.max(axis=0))
        return e / e.sum(axis=0)

    plan = stitcher.plan_windows(dims, window, 0.5)
    covered = np.zeros(dims, dtype=np.int32)
    patches = []
    for origin in plan.window_origins:
        sl = tuple(slice(o, o + w) for o, w in zip(origin, window))
        covered[sl] += 1
        patches.append((origin, voxel_model(image[sl])))
    assert covered.min() >= 1, "uncovered voxels"
    stitched = stitcher.stitch(patches, plan, stitcher.make_weight_window(window, "uniform"), dims)
    whole = voxel_model(image)
    diff = np.abs(stitched.data.astype(np.float64) - whole).max()
    assert diff < 1e-6, diff
    labels = stitcher.argmax_labels(stitched)
    assert np.array_equal(labels.data, np.argmax(whole, axis=0))
    return f"{len(plan.window_origins)} windows, max deviation {diff:.2e}"


def _sphere_pair_error(rng, spacing):
    r1, r2 = rng.uniform(3.0, 6.0, size=2)
    gap = rng.uniform(0.5, 4.0)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    margin = 2.0
    c1 = np.zeros(3)
    c2 = c1 + direction * (r1 + r2 + gap)
    lo = np.minimum(c1 - r1, c2 - r2) - margin
    hi = np.maximum(c1 + r1, c2 + r2) + margin
    dims = tuple(int(np.ceil((h - l) / spacing)) + 1 for l, h in zip(lo, hi))
    spec = clinical.PhantomSpec(dims=dims, spacing=(spacing,) * 3, origin=tuple(lo),
                                shapes=(clinical.Sphere(tuple(c1), r1, 1),
                                        clinical.Sphere(tuple(c2), r2, 2)))
    lab = clinical.make_phantom(spec)
    s1 = clinical.surface_points_mesh(lab, 1, "iso-surface")
    s2 = clinical.surface_points_mesh(lab, 2, "iso-surface")
    d_auto = clinical.proximity_distance(s1, s2)
    return abs(d_auto - gap)


def check_clinical_phantom(n_configs=20, seed=29):
    """Sphere-pair gap accuracy at 0.5 and 0.2 mm; penetration sign/magnitude."""
    rng = np.random.default_rng(seed)
    errs_05 = [_sphere_pair_error(rng, 0.5) for _ in range(n_configs)]
    assert max(errs_05) <= math.sqrt(3) * 0.5 + 1e-9, max(errs_05)
    rng = np.random.default_rng(seed + 1)
    errs_02 = [_sphere_pair_error(rng, 0.2) for _ in range(n_configs)]
    assert max(errs_02) <= 0.35, max(errs_02)
    # overlapping spheres: separate masks on a shared grid
    spacing = 0.5
    for d_centers, r1, r2 in ((6.0, 5.0, 3.0), (7.0, 5.0, 3.0)):
        origin = (-8.0, -8.0, -8.0)
        dims = (33, 33, 61)
        mk = lambda c, r: clinical.make_phantom(clinical.PhantomSpec(
            dims=dims, spacing=(spacing,) * 3, origin=origin,
            shapes=(clinical.Sphere(c, r, 1),)))
        la = mk((0.0, 0.0, 0.0), r1)
        lb = mk((0.0, 0.0, d_centers), r2)
        sa = clinical.surface_points_mesh(la, 1, "iso-surface")
        sb = clinical.surface_points_mesh(lb, 1, "iso-surface")
        d_auto = clinical.proximity_distance(sa, sb, la, lb)
        expected = -(r1 + r2 - d_centers)
        assert d_auto < 0, d_auto
        assert abs(d_auto - expected) <= math.sqrt(3) * spacing, (d_auto, expected)
    return (f"gap error max {max(errs_05):.3f} mm @0.5, "
            f"{max(errs_02):.3f} mm @0.2; penetration sign/magnitude ok")


def check_io_roundtrip(tmp_dir=None, seed=31):
    """Bit-exact round trips for the NIfTI-1 subset and the raw format."""
    import tempfile
    from pathlib import Path
    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory(dir=tmp_dir) as td:
        td = Path(td)
        spacing = (0.5, 0.25, 0.2)
        origin = (1.0, -2.0, 3.0)
        cases = [
            ("scalar", ScalarVolume(rng.random((6, 5, 4)).astype(np.float32),
                                    spacing, origin)),
            ("label", LabelVolume(rng.integers(0, 200, (6, 5, 4)).astype(np.int64),
                                  200, spacing, origin)),
            ("prob", ProbVolume(rng.random((6, 5, 4)).astype(np.float32),
                                spacing, origin)),
        ]
        for kind, vol in cases:
            for ext in (".nii", ".raw"):
                path = td / f"{kind}{ext}"
                volcore.write_volume(vol, path)
                back = volcore.read_volume(path, kind)
                assert np.array_equal(back.data, vol.data), (kind, ext)
                assert np.allclose(back.spacing, vol.spacing, atol=1e-6), (kind, ext)
                assert np.allclose(back.origin, vol.origin, atol=1e-5), (kind, ext)
        # int16 and uint8 NIfTI payloads round-trip bitwise
        for dtype in (np.uint8, np.int16):
            data = rng.integers(0, 120, (5, 4, 3)).astype(dtype)
            path = td / f"{np.dtype(dtype).name}.nii"
            volcore.write_nifti(path, data, spacing, origin)
            back, sp, og = volcore.read_nifti(path)
            assert back.dtype == dtype and np.array_equal(back, data)
    return "NIfTI-1 subset and raw+JSON round-trip bitwise (uint8/int16/float32)"


ALL_CHECKS = (
    ("1 SDM exactness + Lipschitz", check_sdm_exactness),
    ("2 gating band + monotonicity", check_gating_band),
    ("3 analytic vs numeric gradients", check_gradients),
    ("4 AWP/GAP reduction", check_awp_gap_reduction),
    ("5 loss closed forms + deep supervision", check_losses),
    ("6 metric oracle equivalence", check_metrics_oracle),
    ("7 stitcher commutation", check_stitcher_commutation),
    ("8 clinical phantom accuracy", check_clinical_phantom),
    ("9 I/O round trips", check_io_roundtrip),
)


def run_selftest(stream=None) -> int:
    stream = stream or sys.stdout
    failures = 0
    t0 = time.time()
    for name, check in ALL_CHECKS:
        t = time.time()
        try:
            detail = check()
            status = "PASS"
        except Exception as exc:  # report and continue
            detail = f"{type(exc).__name__}: {exc}"
            status = "FAIL"
            failures += 1
        print(f"[{status}] {name} ({time.time() - t:.1f}s): {detail}", file=stream)
    print(f"selftest: {len(ALL_CHECKS) - failures}/{len(ALL_CHECKS)} checks passed "
          f"in {time.time() - t0:.1f}s", file=stream)
    return 1 if failures else 0
