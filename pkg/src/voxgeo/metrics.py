"""Region and boundary evaluation metrics: DSC, SEN, HD95, ASSD.

Surfaces are boundary voxel centers in physical mm coordinates; nearest
neighbor queries run on an exact k-d tree. Degenerate cases (empty
prediction or ground truth) are flagged, never silently reported as 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .volcore import LabelVolume


@dataclass
class SurfacePointSet:
    """Deduplicated surface points in mm, (x, y, z), with a k-d tree index."""

    points: np.ndarray
    source: object = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise ValueError("surface point set must be nonempty")
        self.points = np.unique(pts, axis=0)
        self._tree = None

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def __len__(self):
        return self.points.shape[0]

    def nearest_distances(self, queries: np.ndarray) -> np.ndarray:
        """Exact nearest-neighbor distance from each query point."""
        d, _ = self.tree.query(np.asarray(queries, dtype=np.float64), k=1)
        return np.atleast_1d(d)


@dataclass(frozen=True)
class ClassMetrics:
    dsc: float
    sen: float
    hd95: float
    assd: float
    empty_pred: bool = False
    empty_gt: bool = False


@dataclass
class MetricReport:
    per_class: dict
    mean_dsc: float
    mean_sen: float
    mean_hd95: float
    mean_assd: float

    def as_rows(self):
        rows = []
        for cls in sorted(self.per_class):
            m = self.per_class[cls]
            flags = []
            if m.empty_pred:
                flags.append("empty_pred")
            if m.empty_gt:
                flags.append("empty_gt")
            rows.append((cls, m.dsc, m.sen, m.hd95, m.assd, "|".join(flags)))
        return rows


def dsc_sen(pred: LabelVolume, gt: LabelVolume, cls: int):
    """Dice overlap and sensitivity for one class, as voxel-set arithmetic.

    Both-empty yields dsc 1 by convention; sensitivity is NaN when the
    ground truth is empty. Callers needing flags should use evaluate().
    """
    if pred.shape != gt.shape:
        raise ValueError("prediction / ground-truth dims mismatch")
    p = pred.data == cls
    g = gt.data == cls
    np_, ng = int(p.sum()), int(g.sum())
    inter = int((p & g).sum())
    dsc = 1.0 if (np_ + ng) == 0 else 2.0 * inter / (np_ + ng)
    sen = math.nan if ng == 0 else inter / ng
    return dsc, sen


def extract_surface(labels: LabelVolume, cls: int) -> SurfacePointSet:
    """Surface voxels of a class: any different-class 6-neighbor exposes a
    voxel; the volume border counts as different. Points are voxel centers
    in mm (x, y, z)."""
    mask = labels.data == cls
    if not mask.any():
        raise ValueError(f"class {cls} absent from volume")
    interior = np.ones_like(mask)
    for axis in range(3):
        for d in (1, -1):
            shifted = np.zeros_like(mask)  # border neighbors differ
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if d == 1:
                src[axis], dst[axis] = slice(0, -1), slice(1, None)
            else:
                src[axis], dst[axis] = slice(1, None), slice(0, -1)
            shifted[tuple(dst)] = mask[tuple(src)]
            interior &= shifted
    surface = mask & ~interior
    idx = np.argwhere(surface).astype(np.float64)
    sz, sy, sx = labels.spacing
    oz, oy, ox = labels.origin
    pts = np.stack([ox + idx[:, 2] * sx, oy + idx[:, 1] * sy, oz + idx[:, 0] * sz],
                   axis=1)
    return SurfacePointSet(pts, source=cls)


def _h95(a: SurfacePointSet, b: SurfacePointSet) -> float:
    """Directed 95th-percentile surface distance (nearest-rank rule)."""
    d = np.sort(b.nearest_distances(a.points))
    idx = math.ceil(0.95 * d.size) - 1
    return float(d[idx])


def hd95(a: SurfacePointSet, b: SurfacePointSet) -> float:
    """95% Hausdorff distance: max of the two directed h95 values, mm."""
    return max(_h95(a, b), _h95(b, a))


def assd(a: SurfacePointSet, b: SurfacePointSet) -> float:
    """Average symmetric surface distance, mm."""
    d_ab = b.nearest_distances(a.points)
    d_ba = a.nearest_distances(b.points)
    return float((d_ab.sum() + d_ba.sum()) / (len(a) + len(b)))


def evaluate(pred: LabelVolume, gt: LabelVolume, classes) -> MetricReport:
    """Per-class metrics plus macro means over valid classes present in gt.

    Classes missing from either volume are flagged; flagged surface metrics
    are NaN and excluded from the macro means.
    """
    if pred.shape != gt.shape or pred.spacing != gt.spacing:
        raise ValueError("prediction / ground-truth dims or spacing mismatch")
    per_class = {}
    for cls in classes:
        p_present = bool((pred.data == cls).any())
        g_present = bool((gt.data == cls).any())
        d, s = dsc_sen(pred, gt, cls)
        if p_present and g_present:
            sp = extract_surface(pred, cls)
            sg = extract_surface(gt, cls)
            h, a = hd95(sp, sg), assd(sp, sg)
        else:
            h = a = math.nan
        per_class[int(cls)] = ClassMetrics(
            dsc=d, sen=s, hd95=h, assd=a,
            empty_pred=not p_present, empty_gt=not g_present)

    def _mean(vals):
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    # flagged classes (absent from gt or pred) are excluded from every mean
    valid = [m for m in per_class.values()
             if not m.empty_gt and not m.empty_pred]
    return MetricReport(
        per_class=per_class,
        mean_dsc=_mean([m.dsc for m in valid]),
        mean_sen=_mean([m.sen for m in valid]),
        mean_hd95=_mean([m.hd95 for m in valid]),
        mean_assd=_mean([m.assd for m in valid]))
