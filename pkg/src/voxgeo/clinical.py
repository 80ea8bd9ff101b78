"""Mesh-level proximity analysis between tooth roots and critical structures.

Distances are measured between surface point sets extracted either as
boundary voxel centers or as vertices of the 0.5-level isosurface of the
class indicator (marching cubes, linear interpolation, no smoothing).
Overlapping regions report a negative distance equal to the maximum
penetration depth; touching (6-adjacent) regions report exactly 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import measure

from .volcore import LabelVolume, array_of
from . import metrics as _metrics
from .metrics import SurfacePointSet


# Default class-id layout: teeth occupy classes 1..32, quadrant-major in
# ISO 3950 (FDI) order; named structures follow. Override per dataset.
FDI_CLASS_MAP = {i: f"{(i - 1) // 8 + 1}{(i - 1) % 8 + 1}" for i in range(1, 33)}
CLASS_FOR_FDI = {v: k for k, v in FDI_CLASS_MAP.items()}
STRUCTURE_CLASSES = {"sinus": 33, "iac": 34}


def fdi_code(class_id: int) -> str:
    """FDI (ISO 3950) two-digit code for a tooth class id."""
    try:
        return FDI_CLASS_MAP[int(class_id)]
    except KeyError:
        raise ValueError(f"class {class_id} has no FDI mapping") from None


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]  # mm, (z, y, x)
    radius: float
    cls: int


@dataclass(frozen=True)
class Capsule:
    a: tuple[float, float, float]  # mm endpoints, (z, y, x)
    b: tuple[float, float, float]
    radius: float
    cls: int


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    shapes: tuple = ()


@dataclass(frozen=True)
class ProximityResult:
    tooth_id: str
    structure: str
    d_auto: float
    d_ref: float | None = None
    delta_e: float | None = None
    risk_flag: bool = False


@dataclass(frozen=True)
class ProximityReport:
    results: tuple[ProximityResult, ...]
    mean_delta_e: float | None = None
    skipped: tuple[str, ...] = ()


def make_phantom(spec: PhantomSpec) -> LabelVolume:
    """Rasterize spheres/capsules: voxel centers inside a shape take its
    class id; later shapes overwrite earlier ones."""
    dims = tuple(int(d) for d in spec.dims)
    sz, sy, sx = spec.spacing
    oz, oy, ox = spec.origin
    zz = oz + np.arange(dims[0])[:, None, None] * sz
    yy = oy + np.arange(dims[1])[None, :, None] * sy
    xx = ox + np.arange(dims[2])[None, None, :] * sx
    labels = np.zeros(dims, dtype=np.int64)
    lo = np.array(spec.origin)
    hi = lo + (np.array(dims) - 1) * np.array(spec.spacing)
    max_cls = 0
    for shape in spec.shapes:
        if shape.radius <= 2.0 * max(spec.spacing):
            raise ValueError(f"radius {shape.radius} mm under 2 voxels is too thin")
        if isinstance(shape, Sphere):
            c = np.asarray(shape.center, dtype=np.float64)
            if np.any(c - shape.radius < lo) or np.any(c + shape.radius > hi):
                raise ValueError(f"sphere at {shape.center} leaves the volume")
            d2 = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2
            mask = d2 <= shape.radius ** 2
        elif isinstance(shape, Capsule):
            a = np.asarray(shape.a, dtype=np.float64)
            b = np.asarray(shape.b, dtype=np.float64)
            for end in (a, b):
                if np.any(end - shape.radius < lo) or np.any(end + shape.radius > hi):
                    raise ValueError("capsule leaves the volume")
            ab = b - a
            denom = float(ab @ ab)
            dz, dy, dx = zz - a[0], yy - a[1], xx - a[2]
            if denom == 0.0:
                t = 0.0
            else:
                t = np.clip((dz * ab[0] + dy * ab[1] + dx * ab[2]) / denom, 0.0, 1.0)
            d2 = (dz - t * ab[0]) ** 2 + (dy - t * ab[1]) ** 2 + (dx - t * ab[2]) ** 2
            mask = d2 <= shape.radius ** 2
        else:
            raise TypeError(f"unknown shape {type(shape)!r}")
        labels[mask] = shape.cls
        max_cls = max(max_cls, int(shape.cls))
    return LabelVolume(labels, max_cls + 1, spec.spacing, spec.origin)


def surface_points_mesh(labels: LabelVolume, cls: int,
                        mode: str = "iso-surface") -> SurfacePointSet:
    """Surface sample points of one class in mm.

    voxel-centers: boundary voxel centers (delegates to metrics).
    iso-surface: vertices of the 0.5-isocontour of the class indicator,
    linearly interpolated on the voxel grid (half-voxel resolution).
    """
    if mode == "voxel-centers":
        return _metrics.extract_surface(labels, cls)
    if mode != "iso-surface":
        raise ValueError(f"unknown surface mode {mode!r}")
    mask = (labels.data == cls)
    if not mask.any():
        raise ValueError(f"class {cls} absent from volume")
    sz, sy, sx = labels.spacing
    padded = np.pad(mask.astype(np.float32), 1)
    verts, _, _, _ = measure.marching_cubes(padded, level=0.5,
                                            spacing=(sz, sy, sx))
    verts = verts - np.array([sz, sy, sx])  # undo the pad shift
    oz, oy, ox = labels.origin
    pts = np.stack([ox + verts[:, 2], oy + verts[:, 1], oz + verts[:, 0]], axis=1)
    return SurfacePointSet(pts, source=cls)


def _region_mask(region) -> np.ndarray:
    data = array_of(region)
    return data > 0


def _regions_adjacent(a: np.ndarray, b: np.ndarray) -> bool:
    """True when the voxel regions share a face (6-connectivity)."""
    for axis in range(3):
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[axis] = slice(0, -1)
        sl_hi[axis] = slice(1, None)
        if (a[tuple(sl_lo)] & b[tuple(sl_hi)]).any():
            return True
        if (a[tuple(sl_hi)] & b[tuple(sl_lo)]).any():
            return True
    return False


def proximity_distance(a: SurfacePointSet, b: SurfacePointSet,
                       a_region=None, b_region=None) -> float:
    """Signed shortest distance between two structures, mm.

    Positive: minimum surface-to-surface gap. Negative: the voxel regions
    overlap; magnitude is the maximum penetration depth (largest distance
    from an overlapping voxel center of a to b's surface). Exactly 0 when
    the regions touch (share a voxel face) without overlapping.
    """
    if a_region is not None and b_region is not None:
        ma = _region_mask(a_region)
        mb = _region_mask(b_region)
        if ma.shape != mb.shape:
            raise ValueError("region volumes must share dims")
        overlap = ma & mb
        if overlap.any():
            ref = a_region if hasattr(a_region, "spacing") else b_region
            sz, sy, sx = ref.spacing
            oz, oy, ox = ref.origin
            idx = np.argwhere(overlap).astype(np.float64)
            centers = np.stack([ox + idx[:, 2] * sx, oy + idx[:, 1] * sy,
                                oz + idx[:, 0] * sz], axis=1)
            depth = float(b.nearest_distances(centers).max())
            return -depth
        if _regions_adjacent(ma, mb):
            return 0.0
    return float(b.nearest_distances(a.points).min())


def read_reference_csv(path):
    """Expert reference distances: CSV rows (tooth_id, structure, d_ref_mm)."""
    refs = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#") \
                    or row[0].strip().lower() == "tooth_id":
                continue
            tooth, structure, d_ref = row[0].strip(), row[1].strip(), float(row[2])
            refs[(tooth, structure)] = d_ref
    return refs


def proximity_report(labels: LabelVolume, tooth_classes, structure_class: int,
                     refs=None, structure_name: str = "structure",
                     mode: str = "iso-surface") -> ProximityReport:
    """Per-tooth signed distance to one structure, with optional ΔE vs refs.

    Tooth classes absent from the volume are skipped with a note. Mean ΔE
    is reported when references are supplied.
    """
    if not (labels.data == structure_class).any():
        raise ValueError(f"structure class {structure_class} absent from volume")
    structure_surface = surface_points_mesh(labels, structure_class, mode)
    structure_mask = labels.data == structure_class
    results, skipped, deltas = [], [], []
    for cls in tooth_classes:
        tooth_id = fdi_code(cls) if int(cls) in FDI_CLASS_MAP else str(cls)
        if not (labels.data == cls).any():
            skipped.append(f"tooth {tooth_id} (class {cls}) absent")
            continue
        tooth_surface = surface_points_mesh(labels, cls, mode)
        tooth_mask = labels.data == cls
        d_auto = proximity_distance(
            tooth_surface, structure_surface,
            a_region=LabelVolume(tooth_mask.astype(np.int64), 2,
                                 labels.spacing, labels.origin),
            b_region=LabelVolume(structure_mask.astype(np.int64), 2,
                                 labels.spacing, labels.origin))
        d_ref = refs.get((tooth_id, structure_name)) if refs else None
        delta = abs(d_auto - d_ref) if d_ref is not None else None
        if delta is not None:
            deltas.append(delta)
        results.append(ProximityResult(
            tooth_id=tooth_id, structure=structure_name, d_auto=d_auto,
            d_ref=d_ref, delta_e=delta, risk_flag=d_auto <= 0.0))
    mean_delta = float(np.mean(deltas)) if deltas else None
    return ProximityReport(tuple(results), mean_delta, tuple(skipped))
