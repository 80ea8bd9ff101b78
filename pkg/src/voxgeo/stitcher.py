"""Sliding-window inference assembly and cascade input composition.

Windows are placed at stride multiples with the final window clamped so it
ends at the volume edge (no padding of image content). Overlapping patch
probabilities are blended by a weighted average accumulated in float64.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .volcore import LabelVolume, ProbVolume, ScalarVolume, array_of
from .uncertainty import Conv3dParams, FeatureMap, conv3d_forward


@dataclass(frozen=True)
class StitchPlan:
    window: tuple[int, int, int]
    overlap_fraction: float
    stride: tuple[int, int, int]
    window_origins: tuple[tuple[int, int, int], ...]

    def __contains__(self, origin):
        return tuple(origin) in set(self.window_origins)


@dataclass(frozen=True)
class WeightWindow:
    """Strictly positive blending weights of the window's shape."""

    mode: str
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.min() <= 0:
            raise ValueError("weight window must be 3D with strictly positive weights")
        object.__setattr__(self, "data", data)


def make_weight_window(window, mode: str = "gaussian") -> WeightWindow:
    """Uniform or separable-Gaussian (sigma = size/8, floor 1e-3) weights."""
    window = tuple(int(w) for w in window)
    if mode == "uniform":
        return WeightWindow("uniform", np.ones(window))
    if mode == "gaussian":
        axes = []
        for n in window:
            sigma = max(n / 8.0, 1e-6)
            i = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
            axes.append(np.exp(-0.5 * (i / sigma) ** 2))
        w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
        return WeightWindow("gaussian", np.maximum(w, 1e-3))
    raise ValueError(f"unknown weight mode {mode!r}")


def plan_windows(dims, window, overlap: float) -> StitchPlan:
    """Sliding-window origin plan with full coverage.

    stride = round(window * (1 - overlap)), minimum 1; the final origin per
    axis is clamped to dims - window.
    """
    dims = tuple(int(d) for d in dims)
    window = tuple(int(w) for w in window)
    if not (0.0 <= overlap < 1.0):
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    if any(w <= 0 for w in window):
        raise ValueError(f"window must be positive, got {window}")
    if any(w > d for w, d in zip(window, dims)):
        raise ValueError(f"window {window} exceeds volume dims {dims}")
    stride = tuple(max(1, int(round(w * (1.0 - overlap)))) for w in window)
    per_axis = []
    for d, w, s in zip(dims, window, stride):
        origins = list(range(0, d - w + 1, s))
        if origins[-1] != d - w:
            origins.append(d - w)
        per_axis.append(origins)
    all_origins = tuple(itertools.product(*per_axis))
    return StitchPlan(window, float(overlap), stride, all_origins)


def _patch_channels(patch) -> np.ndarray:
    data = array_of(patch)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise ValueError(f"patch must be 3D or 4D, got shape {data.shape}")
    return data.astype(np.float64)


def stitch(patch_probs, plan: StitchPlan, weights: WeightWindow, dims) -> ProbVolume:
    """Blend origin-tagged probability patches into a full volume.

    patch_probs: iterable of (origin, ProbVolume or array). Every voxel must
    be covered at least once; origins must belong to the plan.
    """
    dims = tuple(int(d) for d in dims)
    accum = None
    wsum = np.zeros(dims, dtype=np.float64)
    spacing = (1.0, 1.0, 1.0)
    for origin, patch in patch_probs:
        origin = tuple(int(o) for o in origin)
        if origin not in plan:
            raise ValueError(f"origin {origin} not in the stitch plan")
        data = _patch_channels(patch)
        if hasattr(patch, "spacing"):
            spacing = patch.spacing
        if data.shape[1:] != plan.window:
            raise ValueError(f"patch shape {data.shape[1:]} != window {plan.window}")
        if accum is None:
            accum = np.zeros((data.shape[0],) + dims, dtype=np.float64)
        sl = tuple(slice(o, o + w) for o, w in zip(origin, plan.window))
        accum[(slice(None),) + sl] += weights.data[None] * data
        wsum[sl] += weights.data
    if accum is None:
        raise ValueError("no patches supplied")
    if (wsum == 0).any():
        raise ValueError("stitch plan leaves uncovered voxels")
    out = accum / wsum[None]
    if out.shape[0] == 1:
        out = out[0]
    return ProbVolume(np.clip(out, 0.0, 1.0).astype(np.float32), spacing)


def argmax_labels(probs: ProbVolume) -> LabelVolume:
    """Per-voxel argmax over channels; ties resolve to the lowest index."""
    data = array_of(probs)
    if data.ndim == 3:
        data = data[None]
    labels = np.argmax(data, axis=0)
    spacing = probs.spacing if hasattr(probs, "spacing") else (1.0, 1.0, 1.0)
    return LabelVolume(labels.astype(np.int64), int(data.shape[0]), spacing)


def compose_stage2_input(image: ScalarVolume, p_up: ProbVolume, p_low: ProbVolume,
                         adapter: Conv3dParams) -> FeatureMap:
    """Cascade input: [image, adapter(concat(p_up, p_low))] channel stack."""
    if adapter.c_in != 2:
        raise ValueError("stage-2 adapter must take 2 input channels")
    img = array_of(image)
    up = array_of(p_up)
    low = array_of(p_low)
    if not (img.shape == up.shape == low.shape):
        raise ValueError("image / probability dims mismatch")
    priors = np.stack([up, low]).astype(np.float64)
    adapted = conv3d_forward(priors, adapter).data
    return FeatureMap(np.concatenate([img[None].astype(np.float64), adapted]))
