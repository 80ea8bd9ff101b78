"""Signed distance maps and the anatomical attention forward path.

The signed distance map uses an exact separable squared-distance transform
(per-axis lower envelope of parabolas) with anisotropic spacing folded in
as a per-axis scale. Distances are measured voxel-center to voxel-center
against the region boundary, so squared distances are integer-exact when
spacing is 1.

Sign convention: boundary voxels (foreground with at least one background
6-neighbor) carry exactly 0; strict interior is negative; exterior positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .volcore import LabelVolume, ScalarVolume, Triple, _check_spacing, array_of
from .uncertainty import Conv3dParams, FeatureMap, relu

_BIG = 1e30


@dataclass(frozen=True)
class SignedDistanceVolume:
    """Signed Euclidean distance field in mm; negative strictly inside."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    source_label: object = "foreground-union"

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"SignedDistanceVolume expects 3D data, got {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))


@dataclass(frozen=True)
class SpatialAttentionMap:
    """Spatial attention weights min-max scaled to [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"SpatialAttentionMap expects 3D data, got {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("attention weights must lie in [0, 1]")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class AdapterParams:
    """Shape-prior adapter: affine on the prior, 1x1x1 conv, BN, ReLU."""

    gamma: float
    beta: float
    conv: Conv3dParams
    bn_mean: np.ndarray
    bn_var: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.conv.c_in != 1 or self.conv.kernel != 1:
            raise ValueError("adapter conv must be 1-input-channel with kernel 1")
        for name in ("bn_mean", "bn_var", "bn_gamma", "bn_beta"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.conv.c_out,):
                raise ValueError(f"{name} must have length C_ad={self.conv.c_out}")
            object.__setattr__(self, name, arr)
        if np.any(self.bn_var < 0):
            raise ValueError("bn_var must be nonnegative")


@dataclass(frozen=True)
class ChannelAttentionParams:
    """Two-layer MLP producing per-channel recalibration weights."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        w1 = np.ascontiguousarray(self.w1, dtype=np.float64)
        b1 = np.ascontiguousarray(self.b1, dtype=np.float64)
        w2 = np.ascontiguousarray(self.w2, dtype=np.float64)
        b2 = np.ascontiguousarray(self.b2, dtype=np.float64)
        if w1.ndim != 2 or w2.ndim != 2 or w1.shape[0] != w2.shape[1] \
                or w2.shape[0] != w1.shape[1]:
            raise ValueError(f"inconsistent MLP shapes {w1.shape}, {w2.shape}")
        if b1.shape != (w1.shape[0],) or b2.shape != (w2.shape[0],):
            raise ValueError("MLP bias shapes do not match weights")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", b2)

    @property
    def channels(self):
        return self.w2.shape[0]


# ---------------------------------------------------------------------------
# Exact Euclidean distance transform
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _edt_pass(rows, scale2):
    """One separable squared-EDT pass over independent rows.

    rows: (n_rows, n) float64, squared distances so far; updated in place
    with min_j rows[r, j] + scale2 * (i - j)^2 via the lower-envelope
    parabola method.
    """
    n_rows, n = rows.shape
    for r in prange(n_rows):
        f = rows[r]
        v = np.empty(n, dtype=np.int64)
        z = np.empty(n + 1, dtype=np.float64)
        d = np.empty(n, dtype=np.float64)
        # envelope bounds must be infinite: intersections of parabolas over
        # _BIG placeholder values can fall below any finite sentinel
        k = 0
        v[0] = 0
        z[0] = -np.inf
        z[1] = np.inf
        for q in range(1, n):
            s = ((f[q] + scale2 * q * q) - (f[v[k]] + scale2 * v[k] * v[k])) \
                / (2.0 * scale2 * (q - v[k]))
            while s <= z[k]:
                k -= 1
                s = ((f[q] + scale2 * q * q) - (f[v[k]] + scale2 * v[k] * v[k])) \
                    / (2.0 * scale2 * (q - v[k]))
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            d[q] = scale2 * (q - v[k]) * (q - v[k]) + f[v[k]]
        for q in range(n):
            f[q] = d[q]


def edt_squared(feature: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact squared Euclidean distance (mm^2) to the nearest True voxel."""
    feature = np.asarray(feature, dtype=bool)
    if feature.ndim != 3:
        raise ValueError("edt_squared expects a 3D boolean array")
    if not feature.any():
        raise ValueError("feature set is empty; distances are undefined")
    g = np.where(feature, 0.0, _BIG).astype(np.float64)
    for axis in range(3):
        moved = np.moveaxis(g, axis, -1)
        rows = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
        _edt_pass(rows, float(spacing[axis]) ** 2)
        g = np.moveaxis(rows.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(g)


_NEIGHBOR_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                     (0, -1, 0), (0, 0, 1), (0, 0, -1))


def _target_mask(labels: LabelVolume, target) -> np.ndarray:
    if target == "foreground-union":
        return labels.data > 0
    if np.isscalar(target):
        target = [target]
    return np.isin(labels.data, np.asarray(list(target)))


def boundary_mask(fg: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbor.

    The volume border alone does not make a voxel a boundary voxel.
    """
    fg = np.asarray(fg, dtype=bool)
    boundary = np.zeros_like(fg)
    for dz, dy, dx in _NEIGHBOR_OFFSETS:
        shifted = np.ones_like(fg)  # out-of-range neighbors count as foreground
        src = tuple(slice(max(-d, 0), fg.shape[i] - max(d, 0))
                    for i, d in enumerate((dz, dy, dx)))
        dst = tuple(slice(max(d, 0), fg.shape[i] + min(d, 0))
                    for i, d in enumerate((dz, dy, dx)))
        shifted[dst] = fg[src]
        boundary |= fg & ~shifted
    return boundary


def _signed_from_squared(fg, bnd, sq, spacing, source_label):
    phi = np.sqrt(sq)
    phi[fg & ~bnd] *= -1.0
    phi[bnd] = 0.0
    return SignedDistanceVolume(phi, spacing, source_label)


def signed_distance_map(labels: LabelVolume, target="foreground-union"):
    """Exact signed Euclidean distance to the region boundary, in mm.

    target is a class id, a collection of class ids, or "foreground-union".
    Raises when the target region is empty or fills the whole volume.
    """
    fg = _target_mask(labels, target)
    if not fg.any():
        raise ValueError("target region is empty; no boundary exists")
    if fg.all():
        raise ValueError("target region fills the volume; no boundary exists")
    bnd = boundary_mask(fg)
    sq = edt_squared(bnd, labels.spacing)
    return _signed_from_squared(fg, bnd, sq, labels.spacing, target)


def sdm_bruteforce_oracle(labels: LabelVolume, target="foreground-union",
                          max_side: int = 24):
    """O(n^2) exhaustive signed distance transform for verification."""
    if max(labels.shape) > max_side:
        raise ValueError(f"oracle guard: volume exceeds {max_side}^3")
    fg = _target_mask(labels, target)
    if not fg.any():
        raise ValueError("target region is empty; no boundary exists")
    if fg.all():
        raise ValueError("target region fills the volume; no boundary exists")
    bnd = boundary_mask(fg)
    sq = edt_squared_bruteforce(bnd, labels.spacing)
    return _signed_from_squared(fg, bnd, sq, labels.spacing, target)


def edt_squared_bruteforce(feature: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    """Exhaustive min over feature voxels of the squared distance."""
    feature = np.asarray(feature, dtype=bool)
    pts = np.argwhere(feature).astype(np.float64)
    if pts.size == 0:
        raise ValueError("feature set is empty")
    scale = np.asarray(spacing, dtype=np.float64)
    idx = np.indices(feature.shape).reshape(3, -1).T.astype(np.float64)
    sq = np.empty(idx.shape[0], dtype=np.float64)
    pts_s = pts * scale
    for start in range(0, idx.shape[0], 4096):  # bound peak memory
        chunk = idx[start:start + 4096] * scale
        d2 = ((chunk[:, None, :] - pts_s[None, :, :]) ** 2).sum(axis=2)
        sq[start:start + 4096] = d2.min(axis=1)
    return sq.reshape(feature.shape)


# ---------------------------------------------------------------------------
# Attention path: adapter, spatial attention, weighted pooling, recalibration
# ---------------------------------------------------------------------------

SIGMA_FLOOR = 1e-5


def instance_norm_affine(s, gamma: float, beta: float) -> ScalarVolume:
    """Instance-normalize a scalar field, then scale/shift by gamma/beta.

    Population (biased) standard deviation with a 1e-5 floor; a constant
    input maps to the all-beta field.
    """
    data = array_of(s).astype(np.float64)
    mu = data.mean()
    sigma = data.std()
    if sigma < SIGMA_FLOOR:
        out = np.full_like(data, beta)
    else:
        out = (data - mu) / sigma * gamma + beta
    spacing = s.spacing if hasattr(s, "spacing") else (1.0, 1.0, 1.0)
    return ScalarVolume(out.astype(np.float32), spacing)


def geometric_adapter(s_tilde, p: AdapterParams) -> FeatureMap:
    """Project the normalized prior to C_ad channels: ReLU(BN(Conv1x1(s)))."""
    data = array_of(s_tilde).astype(np.float64)
    if data.ndim != 3:
        raise ValueError("geometric_adapter expects a 3D scalar field")
    w = p.conv.weights[:, 0, 0, 0, 0]          # (C_ad,)
    y = w[:, None, None, None] * data[None] + p.conv.bias[:, None, None, None]
    inv = 1.0 / np.sqrt(p.bn_var + p.bn_eps)
    y = (y - p.bn_mean[:, None, None, None]) * inv[:, None, None, None]
    y = y * p.bn_gamma[:, None, None, None] + p.bn_beta[:, None, None, None]
    return FeatureMap(relu(y))


def spatial_attention(f_geo) -> SpatialAttentionMap:
    """Channel-mean of absolute activations, min-max scaled to [0, 1].

    A constant aggregate field degenerates to the all-zero map.
    """
    data = array_of(f_geo)
    if data.ndim != 4:
        raise ValueError("spatial_attention expects (C, D, H, W) features")
    agg = np.abs(data.astype(np.float64)).mean(axis=0)
    lo, hi = agg.min(), agg.max()
    if hi == lo:
        return SpatialAttentionMap(np.zeros_like(agg))
    return SpatialAttentionMap((agg - lo) / (hi - lo))


def anatomical_weighted_pooling(x, m, eps: float = 1e-5) -> np.ndarray:
    """Attention-weighted channel pooling: sum(X_c * m) / (sum(m) + eps).

    Reduces to global average pooling (up to eps/N) for a constant positive
    attention map; returns the zero descriptor for an all-zero map.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    data = array_of(x).astype(np.float64)
    mask = array_of(m).astype(np.float64)
    if data.ndim != 4 or mask.shape != data.shape[1:]:
        raise ValueError(f"feature {data.shape} / attention {mask.shape} mismatch")
    denom = mask.sum() + eps
    num = np.einsum("cdhw,dhw->c", data, mask, optimize=True)
    return num / denom


def awp_grad(x, m, eps: float, upstream) -> tuple[FeatureMap, SpatialAttentionMap]:
    """Analytic gradients of weighted pooling w.r.t. features and attention."""
    data = array_of(x).astype(np.float64)
    mask = array_of(m).astype(np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if data.ndim != 4 or mask.shape != data.shape[1:] or up.shape != (data.shape[0],):
        raise ValueError("shape mismatch in awp_grad")
    denom = mask.sum() + eps
    num = np.einsum("cdhw,dhw->c", data, mask, optimize=True)
    grad_x = up[:, None, None, None] * mask[None] / denom
    weighted = np.einsum("c,cdhw->dhw", up, data, optimize=True)
    grad_m = (weighted * denom - float(up @ num)) / (denom * denom)
    return FeatureMap(grad_x), grad_m


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def channel_scales(z: np.ndarray, p: ChannelAttentionParams) -> np.ndarray:
    """MLP bottleneck producing per-channel scales in (0, 1)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (p.channels,):
        raise ValueError(f"descriptor length {z.shape} != channels {p.channels}")
    h = relu(p.w1 @ z + p.b1)
    return _sigmoid(p.w2 @ h + p.b2)


def channel_recalibrate(x, z, p: ChannelAttentionParams) -> FeatureMap:
    """Scale every channel of x by the sigmoid MLP output for descriptor z."""
    data = array_of(x).astype(np.float64)
    if data.ndim != 4 or data.shape[0] != p.channels:
        raise ValueError("feature channel count does not match MLP")
    s = channel_scales(z, p)
    return FeatureMap(data * s[:, None, None, None])


def sdmaa_forward(x, shape_prior, ap: AdapterParams, cp: ChannelAttentionParams,
                  eps: float = 1e-5) -> FeatureMap:
    """Full attention path over a shape prior already at feature resolution.

    Chain: instance norm + affine -> geometric adapter -> spatial attention
    -> anatomical weighted pooling -> channel recalibration.
    """
    data = array_of(x)
    prior = array_of(shape_prior)
    if prior.shape != data.shape[1:]:
        raise ValueError(f"shape prior {prior.shape} must match feature "
                         f"resolution {data.shape[1:]}")
    s_tilde = instance_norm_affine(shape_prior, ap.gamma, ap.beta)
    f_geo = geometric_adapter(s_tilde, ap)
    m = spatial_attention(f_geo)
    z = anatomical_weighted_pooling(x, m, eps)
    return channel_recalibrate(x, z, cp)
