"""Loss terms for the multitask heads and their weighted total.

Default weights put 0.1 on the size term and 5.0 on the segmentation term
(unit weight on everything else) for an even impact of the heads.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, _accumulate, _make

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
LOG_EPS = 1e-6


@dataclass
class LossWeights:
    lambda_size: float = 0.1
    lambda_seg: float = 5.0
    lambda_joint: float = 1.0

    def __post_init__(self):
        if min(self.lambda_size, self.lambda_seg, self.lambda_joint) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    center: float = 0.0
    size: float = 0.0
    off: float = 0.0
    keyp: float = 0.0
    keyp_off: float = 0.0
    seg: float = 0.0
    total: float = 0.0
    active: set = field(default_factory=set)
    total_tensor: Tensor = None

    def as_dict(self):
        return {k: getattr(self, k) for k in
                ("center", "size", "off", "keyp", "keyp_off", "seg", "total")}


def focal_heatmap_loss(pred, gt, alpha=FOCAL_ALPHA, beta=FOCAL_BETA):
    """Penalty-reduced pixelwise focal loss over gaussian heatmaps.

    Peak cells (gt == 1) use -(1-p)^alpha log p; all others are
    down-weighted by (1-gt)^beta. Normalized by max(1, #peaks).
    """
    gt = np.asarray(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = np.clip(pred.data, LOG_EPS, 1.0 - LOG_EPS)
    pos = gt >= 1.0
    neg = ~pos
    npos = max(1.0, float(pos.sum()))

    pos_loss = -((1 - p) ** alpha) * np.log(p) * pos
    neg_loss = -((1 - gt) ** beta) * (p ** alpha) * np.log(1 - p) * neg
    value = (pos_loss.sum() + neg_loss.sum()) / npos

    def bwd(g):
        dpos = (alpha * (1 - p) ** (alpha - 1) * np.log(p)
                - (1 - p) ** alpha / p) * pos
        dneg = ((1 - gt) ** beta
                * (-alpha * p ** (alpha - 1) * np.log(1 - p)
                   + p ** alpha / (1 - p))) * neg
        _accumulate(pred, g * (dpos + dneg) / npos)

    return _make(np.asarray(value, dtype=pred.dtype), (pred,), bwd)


def masked_l1_loss(pred, gt, mask):
    """Sum of |pred - gt| over masked cells (all channels), divided by
    max(1, masked-cell count).

    ``mask`` is [..., h, w]; a channel axis in the mask (e.g. per-joint
    visibility) is broadcast over consecutive channel pairs of ``pred``.
    """
    gt = np.asarray(gt, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    chan_axis = pred.data.ndim - 3
    if mask.ndim == pred.data.ndim - 1:
        m = np.expand_dims(mask, chan_axis)
    elif mask.ndim == pred.data.ndim:
        reps = pred.shape[chan_axis] // mask.shape[chan_axis]
        m = np.repeat(mask, reps, axis=chan_axis)
    else:
        raise ValueError("mask rank incompatible with prediction")

    count = max(1.0, float(mask.sum()))
    diff = (pred.data - gt) * m
    value = np.abs(diff).sum() / count

    def bwd(g):
        _accumulate(pred, g * np.sign(diff) / count)

    return _make(np.asarray(value, dtype=pred.dtype), (pred,), bwd)


def seg_cross_entropy(seg_softmax, seg_gt):
    """Mean over pixels of -log(probability at the ground-truth channel)."""
    gt = np.asarray(seg_gt)
    probs = seg_softmax.data
    if probs.ndim == 3:
        probs_v = probs[None]
        gt_v = gt[None]
    else:
        probs_v = probs
        gt_v = gt
    n, c = probs_v.shape[:2]
    if gt_v.min(initial=0) < 0 or gt_v.max(initial=0) >= c:
        raise ValueError("segmentation id out of range")

    ni, yi, xi = np.indices(gt_v.shape)
    p = np.clip(probs_v[ni, gt_v, yi, xi], LOG_EPS, None)
    npix = gt_v.size
    value = -np.log(p).sum() / npix

    def bwd(g):
        grad = np.zeros_like(probs_v)
        np.subtract.at(grad, (ni, gt_v, yi, xi), g / (p * npix))
        _accumulate(seg_softmax, grad.reshape(probs.shape))

    return _make(np.asarray(value, dtype=seg_softmax.dtype), (seg_softmax,), bwd)


def total_loss(pred, targets, weights=None, active=None):
    """Weighted multitask loss.

    total = center + lambda_size*size + off + keyp + keyp_off
            + lambda_seg*seg, with inactive tasks contributing exactly 0.
    Returns a LossBreakdown whose ``total_tensor`` is differentiable.
    """
    weights = weights or LossWeights()
    if active is None:
        active = {"detection"}
        if pred.keypoint_heatmap is not None:
            active.add("pose")
        if pred.seg_softmax is not None:
            active.add("segmentation")

    zero = Tensor(np.zeros((), dtype=np.float64))
    center = size = off = keyp = keyp_off = seg = zero

    if "detection" in active:
        if pred.center_heatmap is None:
            raise ValueError("detection active but no detection outputs")
        center = focal_heatmap_loss(pred.center_heatmap, targets.center_gt)
        size = masked_l1_loss(pred.size_map, targets.size_gt, targets.reg_mask)
        off = masked_l1_loss(pred.offset_map, targets.offset_gt, targets.reg_mask)
    if "pose" in active:
        if pred.keypoint_heatmap is None:
            raise ValueError("pose active but no pose outputs")
        keyp = focal_heatmap_loss(pred.keypoint_heatmap, targets.keypoint_gt)
        if weights.lambda_joint:
            keyp = keyp + weights.lambda_joint * masked_l1_loss(
                pred.joint_regression, targets.joint_regression_gt,
                targets.joint_mask)
        keyp_off = masked_l1_loss(pred.keypoint_offset,
                                  targets.keypoint_offset_gt,
                                  targets.keypoint_mask)
    if "segmentation" in active:
        if pred.seg_softmax is None:
            raise ValueError("segmentation active but no segmentation output")
        seg = seg_cross_entropy(pred.seg_softmax, targets.seg_gt)

    total = (center + weights.lambda_size * size + off
             + keyp + keyp_off + weights.lambda_seg * seg)

    def val(t):
        return float(t.data)

    return LossBreakdown(
        center=val(center), size=val(size), off=val(off), keyp=val(keyp),
        keyp_off=val(keyp_off), seg=val(seg), total=val(total),
        active=set(active), total_tensor=total)


def combine_breakdown(center, size, off, keyp, keyp_off, seg, weights=None):
    """Scalar form of the total-loss equation, for fidelity checks."""
    weights = weights or LossWeights()
    return (center + weights.lambda_size * size + off + keyp + keyp_off
            + weights.lambda_seg * seg)
