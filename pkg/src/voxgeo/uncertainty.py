"""Ambiguity quantification, gating, bottleneck refinement, and gated fusion.

Implements the uncertainty-driven boundary refinement math: a Gini-style
ambiguity field derived from two arch probability maps, a strict-threshold
binary gate, a three-convolution bottleneck refiner, and the gated residual
fusion together with its analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volcore import ProbVolume, Triple, _check_spacing, array_of


@dataclass(frozen=True)
class AmbiguityField:
    """Per-voxel ambiguity in [0, 1]; 1 marks maximal uncertainty."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"AmbiguityField expects 3D data, got {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))


@dataclass(frozen=True)
class GatingMask:
    """Boolean gate: True where the producing field exceeded tau (strict)."""

    data: np.ndarray
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "data", np.ascontiguousarray(self.data, dtype=bool))
        object.__setattr__(self, "tau", float(self.tau))


@dataclass(frozen=True)
class FeatureMap:
    """Dense feature tensor of shape (C, D, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if data.ndim != 4 or data.shape[0] < 1:
            raise ValueError(f"FeatureMap expects (C, D, H, W), got {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("FeatureMap values must be finite")
        object.__setattr__(self, "data", data)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def spatial_shape(self):
        return self.data.shape[1:]


@dataclass(frozen=True)
class Conv3dParams:
    """Weights for a 3D convolution layer: (C_out, C_in, k, k, k) + bias."""

    weights: np.ndarray
    bias: np.ndarray
    padding: int | None = None  # defaults to k // 2 ('same' output size)

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        b = np.ascontiguousarray(self.bias, dtype=np.float64)
        if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
            raise ValueError(f"conv weights must be (C_out, C_in, k, k, k), got {w.shape}")
        if w.shape[2] % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match C_out {w.shape[0]}")
        pad = self.padding if self.padding is not None else w.shape[2] // 2
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "padding", int(pad))

    @property
    def c_out(self):
        return self.weights.shape[0]

    @property
    def c_in(self):
        return self.weights.shape[1]

    @property
    def kernel(self):
        return self.weights.shape[2]


@dataclass(frozen=True)
class RefinerParams:
    """Bottleneck refiner: 3x3x3 -> 3x3x3 -> 1x1x1 convs plus residual scale."""

    conv1: Conv3dParams
    conv2: Conv3dParams
    conv3: Conv3dParams
    alpha: float = 0.0

    def __post_init__(self):
        if self.conv1.c_out != self.conv2.c_in:
            raise ValueError("conv1 output channels must feed conv2")
        if self.conv2.c_out != self.conv3.c_in:
            raise ValueError("conv2 output channels must feed conv3")
        if self.conv3.c_out != self.conv1.c_in:
            raise ValueError("refiner must restore the input channel count")
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        object.__setattr__(self, "alpha", float(self.alpha))


def _as_array(x, ndim=None):
    data = array_of(x)
    if ndim is not None and data.ndim != ndim:
        raise ValueError(f"expected {ndim}D array, got shape {data.shape}")
    return data


def foreground_prob(p_up: ProbVolume, p_low: ProbVolume) -> ProbVolume:
    """Foreground probability: per-voxel mean of the two arch maps."""
    up = _as_array(p_up, 3)
    low = _as_array(p_low, 3)
    if up.shape != low.shape:
        raise ValueError(f"shape mismatch {up.shape} vs {low.shape}")
    if hasattr(p_up, "spacing") and hasattr(p_low, "spacing") \
            and p_up.spacing != p_low.spacing:
        raise ValueError("spacing mismatch between probability maps")
    mean = (up.astype(np.float64) + low.astype(np.float64)) / 2.0
    spacing = p_up.spacing if hasattr(p_up, "spacing") else (1.0, 1.0, 1.0)
    return ProbVolume(mean.astype(np.float32), spacing)


def ambiguity_field(p_fg: ProbVolume) -> AmbiguityField:
    """Gini-style ambiguity 4·p·(1−p): 0 at confident voxels, 1 at p=0.5."""
    p = _as_array(p_fg, 3).astype(np.float64)
    if p.size and (p.min() < -1e-6 or p.max() > 1 + 1e-6):
        raise ValueError("foreground probabilities must lie in [0, 1]")
    a = 4.0 * p * (1.0 - p)
    spacing = p_fg.spacing if hasattr(p_fg, "spacing") else (1.0, 1.0, 1.0)
    return AmbiguityField(np.clip(a, 0.0, 1.0).astype(np.float32), spacing)


def gating_mask(a: AmbiguityField, tau: float) -> GatingMask:
    """Binary gate A(v) > tau (strict inequality; ties stay inactive)."""
    tau = float(tau)
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    field = _as_array(a, 3)
    return GatingMask(field > tau, tau)


def conv3d_forward(x, p: Conv3dParams):
    """Direct 3D cross-correlation with bias and zero padding.

    Input (C_in, D, H, W), output (C_out, D', H', W'); with the default
    padding k//2 spatial dims are preserved.
    """
    data = _as_array(x, 4)
    if data.shape[0] != p.c_in:
        raise ValueError(f"input has {data.shape[0]} channels, kernel expects {p.c_in}")
    k, pad = p.kernel, p.padding
    xp = np.pad(data.astype(np.float64),
                ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    od = xp.shape[1] - k + 1
    oh = xp.shape[2] - k + 1
    ow = xp.shape[3] - k + 1
    out = np.broadcast_to(p.bias[:, None, None, None], (p.c_out, od, oh, ow)).copy()
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                window = xp[:, dz:dz + od, dy:dy + oh, dx:dx + ow]
                out += np.einsum("oc,cdhw->odhw", p.weights[:, :, dz, dy, dx],
                                 window, optimize=True)
    return FeatureMap(out)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def refiner_forward(f_in, p: RefinerParams) -> FeatureMap:
    """Bottleneck refiner: Conv1x1(ReLU(Conv3x3(ReLU(Conv3x3(x)))))."""
    data = _as_array(f_in, 4)
    h = relu(conv3d_forward(data, p.conv1).data)
    h = relu(conv3d_forward(h, p.conv2).data)
    return conv3d_forward(h, p.conv3)


def _mask_for(f_in, m):
    mask = _as_array(m, 3)
    if mask.shape != f_in.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match features "
                         f"{f_in.shape[1:]}")
    return mask.astype(bool)


def gated_fusion(f_in, f_ref, m: GatingMask, alpha: float) -> FeatureMap:
    """Gated residual fusion: F_in + alpha * (M ⊙ F_ref).

    Voxels outside the gate are returned bit-identical to the input (the
    residual branch is not merely zeroed but bypassed entirely).
    """
    a = _as_array(f_in, 4)
    b = _as_array(f_ref, 4)
    if a.shape != b.shape:
        raise ValueError(f"feature shape mismatch {a.shape} vs {b.shape}")
    mask = _mask_for(a, m)
    fused = np.where(mask[None], a + alpha * b, a)
    return FeatureMap(fused)


def gated_fusion_grad(f_in, f_ref, m: GatingMask, alpha: float, upstream):
    """Analytic gradients of gated fusion w.r.t. inputs and alpha.

    Returns (grad_f_in, grad_f_ref, grad_alpha) for a scalar objective with
    the given upstream gradient. grad_alpha uses a float64 reduction.
    """
    a = _as_array(f_in, 4)
    b = _as_array(f_ref, 4)
    up = _as_array(upstream, 4)
    if not (a.shape == b.shape == up.shape):
        raise ValueError("feature/upstream shape mismatch")
    mask = _mask_for(a, m)
    gated_up = np.where(mask[None], up, 0.0)
    grad_f_in = up.copy()
    grad_f_ref = alpha * gated_up
    grad_alpha = float(np.sum(gated_up.astype(np.float64) * b.astype(np.float64)))
    return FeatureMap(grad_f_in), FeatureMap(grad_f_ref), grad_alpha
