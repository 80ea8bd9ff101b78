"""Volume containers, file I/O, preprocessing, patching, and augmentation.

Axis convention throughout the toolkit: arrays are C-contiguous with axis
order (z, y, x) == (D, H, W). Spacing and origin tuples follow the same
order and are expressed in millimetres. Voxel indices are 0-based.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

Triple = tuple[float, float, float]

_RAW_DTYPES = {"uint8": np.uint8, "int16": np.int16, "float32": np.float32,
               "float64": np.float64, "uint16": np.uint16, "int32": np.int32,
               "int64": np.int64}

# NIfTI-1 datatype codes for the supported subset
_NIFTI_CODE_TO_DTYPE = {2: np.uint8, 4: np.int16, 16: np.float32}
_NIFTI_DTYPE_TO_CODE = {np.dtype(np.uint8): (2, 8),
                        np.dtype(np.int16): (4, 16),
                        np.dtype(np.float32): (16, 32)}


class VolumeFormatError(ValueError):
    """Raised for malformed or unsupported volume files."""


def array_of(x) -> np.ndarray:
    """Unwrap a volume-like container (or pass through an ndarray)."""
    if isinstance(x, np.ndarray):
        return x
    d = getattr(x, "data", None)
    if isinstance(d, np.ndarray):
        return d
    return np.asarray(x)


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    return spacing


@dataclass(frozen=True)
class ScalarVolume:
    """Scalar intensity volume (e.g. a CBCT image), float32 (D, H, W)."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"ScalarVolume expects 3D data, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("ScalarVolume data must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    """Integer class-label volume, values in [0, num_classes)."""

    data: np.ndarray
    num_classes: int
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise ValueError(f"LabelVolume data must be integer, got {data.dtype}")
        if data.ndim != 3:
            raise ValueError(f"LabelVolume expects 3D data, got shape {data.shape}")
        if data.size and (data.min() < 0 or int(data.max()) >= self.num_classes):
            raise ValueError(
                f"label values must lie in [0, {self.num_classes}), "
                f"got range [{data.min()}, {data.max()}]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class ProbVolume:
    """Probability volume: (D, H, W) single channel or (C, D, H, W) multi-class."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim not in (3, 4):
            raise ValueError(f"ProbVolume expects 3D or 4D data, got shape {data.shape}")
        if data.size and (data.min() < -1e-6 or data.max() > 1 + 1e-6):
            raise ValueError("probabilities must lie in [0, 1]")
        if data.ndim == 4:
            sums = data.sum(axis=0, dtype=np.float64)
            if sums.size and np.abs(sums - 1.0).max() > 1e-4:
                raise ValueError("multi-class probabilities must sum to 1 per voxel")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def num_channels(self):
        return 1 if self.data.ndim == 3 else self.data.shape[0]

    @property
    def spatial_shape(self):
        return self.data.shape[-3:]


@dataclass(frozen=True)
class PatchSpec:
    """Axis-aligned patch: voxel size (d, h, w) and offset (z, y, x)."""

    size: tuple[int, int, int]
    offset: tuple[int, int, int]

    def __post_init__(self):
        size = tuple(int(s) for s in self.size)
        if any(s <= 0 for s in size):
            raise ValueError(f"patch size must be positive, got {size}")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "offset", tuple(int(o) for o in self.offset))


# ---------------------------------------------------------------------------
# File I/O: minimal NIfTI-1 subset and raw little-endian blob + JSON sidecar
# ---------------------------------------------------------------------------

def _wrap(data, kind, spacing, origin, num_classes=None):
    if kind == "scalar":
        return ScalarVolume(data.astype(np.float32), spacing, origin)
    if kind == "label":
        data = data.astype(np.int64) if not np.issubdtype(data.dtype, np.integer) else data
        if num_classes is None:
            num_classes = int(data.max()) + 1 if data.size else 1
        return LabelVolume(data, num_classes, spacing, origin)
    if kind == "prob":
        return ProbVolume(data.astype(np.float32), spacing, origin)
    raise ValueError(f"unknown volume kind {kind!r}")


def write_nifti(path, data, spacing, origin=(0.0, 0.0, 0.0)):
    """Write a 3D array as a minimal NIfTI-1 file (348-byte header, 'n+1')."""
    data = np.ascontiguousarray(data)
    if data.dtype not in _NIFTI_DTYPE_TO_CODE:
        raise VolumeFormatError(f"unsupported NIfTI dtype {data.dtype}")
    if data.ndim != 3:
        raise VolumeFormatError("NIfTI writer supports 3D volumes only")
    code, bitpix = _NIFTI_DTYPE_TO_CODE[data.dtype]
    d, h, w = data.shape
    sz, sy, sx = spacing
    oz, oy, ox = origin
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)    # scl_slope
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)  # srow_x
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)  # srow_y
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)  # srow_z
    hdr[344:348] = b"n+1\x00"
    # NIfTI data is stored x-fastest, which matches C order on (z, y, x)
    payload = data.astype(data.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(bytes(hdr) + payload)


def read_nifti(path):
    """Read a minimal NIfTI-1 file; returns (data, spacing, origin)."""
    blob = Path(path).read_bytes()
    if len(blob) < 352:
        raise VolumeFormatError(f"{path}: file too short for a NIfTI-1 header")
    if blob[344:348] != b"n+1\x00":
        raise VolumeFormatError(f"{path}: bad NIfTI magic {blob[344:348]!r}")
    end = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != 348:
        end = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        if sizeof_hdr != 348:
            raise VolumeFormatError(f"{path}: bad sizeof_hdr")
    dim = struct.unpack_from(end + "8h", blob, 40)
    if dim[0] != 3:
        raise VolumeFormatError(f"{path}: only 3D volumes supported, dim[0]={dim[0]}")
    w, h, d = dim[1], dim[2], dim[3]
    (code,) = struct.unpack_from(end + "h", blob, 70)
    if code not in _NIFTI_CODE_TO_DTYPE:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype code {code}")
    dtype = np.dtype(_NIFTI_CODE_TO_DTYPE[code]).newbyteorder(end)
    pixdim = struct.unpack_from(end + "8f", blob, 76)
    (vox_offset,) = struct.unpack_from(end + "f", blob, 108)
    offset = int(vox_offset) if vox_offset else 352
    srow_x = struct.unpack_from(end + "4f", blob, 280)
    srow_y = struct.unpack_from(end + "4f", blob, 296)
    srow_z = struct.unpack_from(end + "4f", blob, 312)
    origin = (srow_z[3], srow_y[3], srow_x[3])
    n = d * h * w
    raw = np.frombuffer(blob, dtype=dtype, count=n, offset=offset)
    if raw.size != n:
        raise VolumeFormatError(f"{path}: truncated data section")
    data = raw.reshape(d, h, w).astype(dtype.newbyteorder("="))
    spacing = (pixdim[3], pixdim[2], pixdim[1])
    return data, spacing, origin


def write_array_raw(path, data, meta=None):
    """Write an n-D array as little-endian raw bytes plus a JSON sidecar."""
    path = Path(path)
    if path.suffix != ".raw":
        path = path.with_suffix(".raw")
    data = np.ascontiguousarray(data)
    sidecar = {"dims": list(data.shape),
               "dtype": data.dtype.name}
    if meta:
        sidecar.update(meta)
    data.astype(data.dtype.newbyteorder("<")).tofile(path)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))


def read_array_raw(path):
    """Read a raw+JSON array; returns (data, sidecar-dict)."""
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix(".raw")
    elif path.suffix != ".raw":
        path = path.with_suffix(".raw")
    sidecar_path = path.with_suffix(".json")
    if not path.exists() or not sidecar_path.exists():
        raise VolumeFormatError(f"{path}: raw blob and JSON sidecar are both required")
    meta = json.loads(sidecar_path.read_text())
    dims = tuple(int(x) for x in meta["dims"])
    dtype_name = meta.get("dtype", "float32")
    if dtype_name not in _RAW_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype {dtype_name!r}")
    dtype = np.dtype(_RAW_DTYPES[dtype_name]).newbyteorder("<")
    data = np.fromfile(path, dtype=dtype)
    if data.size != int(np.prod(dims)):
        raise VolumeFormatError(
            f"{path}: blob has {data.size} elements, sidecar dims {dims} "
            f"require {int(np.prod(dims))}")
    return data.reshape(dims).astype(dtype.newbyteorder("=")), meta


def read_volume(path, kind="scalar"):
    """Read a volume from a minimal NIfTI-1 file or a raw+JSON pair.

    ``kind`` selects the returned container: scalar | label | prob.
    """
    path = Path(path)
    if path.suffix in (".nii",):
        data, spacing, origin = read_nifti(path)
        return _wrap(data, kind, spacing, origin)
    data, meta = read_array_raw(path)
    spacing = tuple(meta.get("spacing", (1.0, 1.0, 1.0)))
    origin = tuple(meta.get("origin", (0.0, 0.0, 0.0)))
    kind = meta.get("kind", kind)
    return _wrap(data, kind, spacing, origin, meta.get("num_classes"))


def write_volume(vol, path):
    """Write a volume so that ``read_volume`` reproduces it bit-exactly."""
    path = Path(path)
    if isinstance(vol, ScalarVolume):
        kind, data = "scalar", vol.data
    elif isinstance(vol, LabelVolume):
        kind, data = "label", vol.data
    elif isinstance(vol, ProbVolume):
        kind, data = "prob", vol.data
    else:
        raise TypeError(f"unsupported volume type {type(vol)!r}")
    if path.suffix == ".nii":
        if kind == "label":
            data = data.astype(np.int16 if vol.num_classes > 256 else np.uint8)
        write_nifti(path, data, vol.spacing, vol.origin)
        return
    meta = {"spacing": list(vol.spacing), "origin": list(vol.origin), "kind": kind}
    if kind == "label":
        meta["num_classes"] = vol.num_classes
    write_array_raw(path, data, meta)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def zscore_normalize(vol: ScalarVolume, mean: float, std: float) -> ScalarVolume:
    """Z-score normalize: (v - mean) / std, std must be positive."""
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    out = (vol.data.astype(np.float64) - mean) / std
    return ScalarVolume(out.astype(np.float32), vol.spacing, vol.origin)


def _gather_axis_indices(offset, size, n, pad):
    """Index vector for one axis plus an in-bounds mask (zero-pad mode)."""
    idx = np.arange(offset, offset + size)
    valid = (idx >= 0) & (idx < n)
    if pad == "zero":
        return np.clip(idx, 0, n - 1), valid
    if pad == "mirror":
        if n == 1:
            return np.zeros_like(idx), np.ones_like(valid)
        period = 2 * n - 2
        r = np.mod(idx, period)
        r = np.where(r >= n, period - r, r)
        return r, np.ones_like(valid)
    raise ValueError(f"unknown pad mode {pad!r}")


def extract_patch(vol, spec: PatchSpec, pad: str = "zero"):
    """Extract a patch under a zero or mirror padding policy.

    Works on any volume container; only the trailing three (spatial)
    axes are indexed. Spacing is preserved; the origin is shifted by
    offset * spacing.
    """
    data = vol.data
    spatial = data.shape[-3:]
    idx, masks = [], []
    for off, sz, n in zip(spec.offset, spec.size, spatial):
        i, m = _gather_axis_indices(off, sz, n, pad)
        idx.append(i)
        masks.append(m)
    patch = data[..., idx[0][:, None, None], idx[1][None, :, None], idx[2][None, None, :]]
    if pad == "zero":
        valid = (masks[0][:, None, None] & masks[1][None, :, None]
                 & masks[2][None, None, :])
        patch = np.where(valid, patch, np.zeros((), dtype=patch.dtype))
    origin = tuple(o + off * s for o, off, s in zip(vol.origin, spec.offset, vol.spacing))
    if isinstance(vol, LabelVolume):
        return LabelVolume(patch, vol.num_classes, vol.spacing, origin)
    if isinstance(vol, ProbVolume):
        return ProbVolume(patch, vol.spacing, origin)
    return ScalarVolume(patch, vol.spacing, origin)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """3x3 rotation acting on (z, y, x) index vectors; angles in degrees.

    rx/ry/rz rotate about the x/y/z axes respectively; composition order
    is Rz @ Ry @ Rx.
    """
    ax, ay, az = np.deg2rad([rx, ry, rz])
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    # about x: mixes (z, y); about y: mixes (z, x); about z: mixes (y, x)
    mx = np.array([[cx, sx, 0.0], [-sx, cx, 0.0], [0.0, 0.0, 1.0]])
    my = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    mz = np.array([[1.0, 0.0, 0.0], [0.0, cz, sz], [0.0, -sz, cz]])
    return mz @ my @ mx


def sample_augmentation(seed: int, max_deg: float = 15.0):
    """Draw reproducible rotation angles and flips from a 64-bit seed."""
    rng = np.random.default_rng(seed)
    rot = tuple(rng.uniform(-max_deg, max_deg, size=3))
    flips = tuple(bool(b) for b in rng.integers(0, 2, size=3))
    return rot, flips


def augment(vol, labels: LabelVolume, rot_deg=None, flips=None, seed=None,
            max_deg: float = 15.0):
    """Apply the identical flip+rotation transform to an image and its labels.

    Flips (bz, by, bx) are applied first (exact), then rotation about the
    geometric volume center: trilinear interpolation for the image, nearest
    neighbor for labels, zero / background fill outside the domain.
    When rot_deg/flips are omitted they are sampled from ``seed``.
    """
    if rot_deg is None or flips is None:
        s_rot, s_flips = sample_augmentation(0 if seed is None else seed, max_deg)
        rot_deg = s_rot if rot_deg is None else rot_deg
        flips = s_flips if flips is None else flips
    rot_deg = tuple(float(r) for r in rot_deg)
    if any(abs(r) > max_deg + 1e-9 for r in rot_deg):
        raise ValueError(f"rotation {rot_deg} outside configured range ±{max_deg}°")
    if vol.data.shape[-3:] != labels.data.shape:
        raise ValueError("image and label dims must match")

    img = vol.data
    lab = labels.data
    sl = tuple(slice(None, None, -1) if f else slice(None) for f in flips)
    img = img[..., sl[0], sl[1], sl[2]]
    lab = lab[sl]

    if any(r != 0.0 for r in rot_deg):
        rx, ry, rz = rot_deg
        rot = rotation_matrix(rx, ry, rz)
        center = (np.array(lab.shape, dtype=np.float64) - 1.0) / 2.0
        inv = rot.T  # rotation matrices: inverse == transpose
        offset = center - inv @ center
        img = ndimage.affine_transform(
            np.ascontiguousarray(img, dtype=np.float32), inv, offset=offset,
            order=1, mode="constant", cval=0.0)
        lab = ndimage.affine_transform(
            np.ascontiguousarray(lab), inv, offset=offset,
            order=0, mode="constant", cval=0)
    img = np.ascontiguousarray(img)
    lab = np.ascontiguousarray(lab)
    out_labels = LabelVolume(lab, labels.num_classes, labels.spacing, labels.origin)
    if isinstance(vol, ScalarVolume):
        return ScalarVolume(img, vol.spacing, vol.origin), out_labels
    return ProbVolume(np.clip(img, 0.0, 1.0), vol.spacing, vol.origin), out_labels


def downsample_labels(labels: LabelVolume, factor) -> LabelVolume:
    """Nearest-neighbor decimation; output dims = ceil(in / factor)."""
    fz, fy, fx = (int(f) for f in factor)
    if fz < 1 or fy < 1 or fx < 1:
        raise ValueError(f"factors must be >= 1, got {(fz, fy, fx)}")
    data = labels.data[::fz, ::fy, ::fx]
    spacing = (labels.spacing[0] * fz, labels.spacing[1] * fy, labels.spacing[2] * fx)
    return LabelVolume(np.ascontiguousarray(data), labels.num_classes,
                       spacing, labels.origin)


# ---------------------------------------------------------------------------
# Resampling helpers (shape priors / ambiguity fields at feature resolution)
# ---------------------------------------------------------------------------

def _resample_coords(in_shape, out_shape):
    axes = [ (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
             for n_in, n_out in zip(in_shape, out_shape) ]
    return np.meshgrid(*axes, indexing="ij")


def resample_nearest(data: np.ndarray, out_shape) -> np.ndarray:
    """Nearest-neighbor resample of a 3D array (masks, labels, gates)."""
    coords = _resample_coords(data.shape, out_shape)
    return ndimage.map_coordinates(data, coords, order=0, mode="nearest")


def resample_trilinear(data: np.ndarray, out_shape) -> np.ndarray:
    """Trilinear resample of a 3D array (continuous fields such as SDMs)."""
    coords = _resample_coords(data.shape, out_shape)
    return ndimage.map_coordinates(np.asarray(data, dtype=np.float64), coords,
                                   order=1, mode="nearest")
