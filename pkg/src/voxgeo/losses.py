"""Composite segmentation objective: cross-entropy, soft Dice, deep supervision.

All losses operate on probability tensors (C, D, H, W) against integer label
volumes and return both the scalar value and the analytic gradient with
respect to the probabilities. Reductions run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volcore import LabelVolume, array_of

LOG_CLAMP = 1e-7  # probability floor inside the log


@dataclass(frozen=True)
class LossConfig:
    lambda_ce: float = 1.0
    lambda_dc: float = 1.0
    eps: float = 1e-5
    ds_weights: tuple[float, ...] = (1.0,)
    ignore_label: int | None = None
    class_mask: tuple[int, ...] | None = None  # classes included in the Dice mean

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_dc < 0:
            raise ValueError("lambda weights must be nonnegative")
        if self.lambda_ce == 0 and self.lambda_dc == 0:
            raise ValueError("at least one lambda must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        ws = tuple(float(w) for w in self.ds_weights)
        if not ws or any(w <= 0 for w in ws):
            raise ValueError("deep supervision weights must be positive")
        object.__setattr__(self, "ds_weights", ws)


@dataclass(frozen=True)
class LossReport:
    total: float
    ce: float
    dice: float
    per_scale: tuple[float, ...] = ()

    def as_dict(self):
        return {"total": self.total, "ce": self.ce, "dice": self.dice,
                "per_scale": list(self.per_scale)}


def default_ds_weights(k: int) -> tuple[float, ...]:
    """Deep supervision weights 1/2^k for scales k = 0..K-1."""
    return tuple(0.5 ** i for i in range(k))


def _pred_array(pred) -> np.ndarray:
    data = array_of(pred)
    if data.ndim != 4:
        raise ValueError(f"prediction must be (C, D, H, W), got {data.shape}")
    return data.astype(np.float64)


def _gt_array(gt) -> np.ndarray:
    data = array_of(gt)
    if data.ndim != 3:
        raise ValueError(f"ground truth must be (D, H, W), got {data.shape}")
    return data


def cross_entropy(pred, gt, ignore_label=None):
    """Mean voxelwise cross-entropy over valid voxels.

    Returns (loss, grad) where grad is w.r.t. the probabilities: nonzero
    only at true-class entries, -1 / (p * |Omega|) with p clamped below.
    """
    p = _pred_array(pred)
    y = _gt_array(gt)
    if y.shape != p.shape[1:]:
        raise ValueError("prediction / label shape mismatch")
    valid = np.ones(y.shape, dtype=bool) if ignore_label is None else (y != ignore_label)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid voxels")
    c_idx = y.astype(np.intp)
    z, yy, xx = np.indices(y.shape)
    p_true = p[c_idx, z, yy, xx]
    p_clamped = np.maximum(p_true, LOG_CLAMP)
    loss = -float(np.sum(np.log(p_clamped), where=valid) / n)
    grad = np.zeros_like(p)
    gvals = np.where(valid, -1.0 / (p_clamped * n), 0.0)
    grad[c_idx, z, yy, xx] = gvals
    return loss, grad


def soft_dice(pred, gt, eps: float = 1e-5, class_mask=None):
    """Class-mean soft Dice complement with analytic gradient.

    class_mask optionally restricts the class mean (e.g. to classes present
    in the ground truth); default is all channels, background included.
    """
    p = _pred_array(pred)
    y = _gt_array(gt)
    if y.shape != p.shape[1:]:
        raise ValueError("prediction / label shape mismatch")
    c = p.shape[0]
    classes = np.arange(c) if class_mask is None else np.asarray(sorted(class_mask))
    if classes.size == 0:
        raise ValueError("class mask selects no classes")
    onehot = (y[None] == classes[:, None, None, None]).astype(np.float64)
    psel = p[classes]
    inter = np.einsum("cdhw,cdhw->c", psel, onehot, optimize=True)
    denom = psel.sum(axis=(1, 2, 3)) + onehot.sum(axis=(1, 2, 3)) + eps
    dice = 2.0 * inter / denom
    loss = float(np.mean(1.0 - dice))
    grad = np.zeros_like(p)
    nc = classes.size
    grad[classes] = -(2.0 * onehot * denom[:, None, None, None]
                      - 2.0 * inter[:, None, None, None]) \
        / (denom ** 2)[:, None, None, None] / nc
    return loss, grad


def combined_loss(pred, gt, cfg: LossConfig):
    """Weighted CE + Dice for a single scale; gradients sum linearly.

    Returns (report, grad).
    """
    ce, g_ce = cross_entropy(pred, gt, cfg.ignore_label)
    dc, g_dc = soft_dice(pred, gt, cfg.eps, cfg.class_mask)
    total = cfg.lambda_ce * ce + cfg.lambda_dc * dc
    grad = cfg.lambda_ce * g_ce + cfg.lambda_dc * g_dc
    return LossReport(total=total, ce=ce, dice=dc, per_scale=(total,)), grad


def deep_supervision_loss(preds, gts, cfg: LossConfig):
    """Weighted multi-scale objective: sum_k w_k * combined(pred_k, gt_k).

    Returns (report, grads) with one gradient tensor per scale; the report
    exposes the unweighted per-scale combined terms.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if len(preds) != len(cfg.ds_weights):
        raise ValueError(f"{len(preds)} scales vs {len(cfg.ds_weights)} weights")
    per_scale, grads = [], []
    total = ce_total = dc_total = 0.0
    for pred, gt, w in zip(preds, gts, cfg.ds_weights):
        rep, grad = combined_loss(pred, gt, cfg)
        per_scale.append(rep.total)
        grads.append(w * grad)
        total += w * rep.total
        ce_total += w * rep.ce
        dc_total += w * rep.dice
    report = LossReport(total=total, ce=ce_total, dice=dc_total,
                        per_scale=tuple(per_scale))
    return report, grads
