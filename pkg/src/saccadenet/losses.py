"""Heatmap focal loss, masked L1 and the weighted training objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    beta: float = 4.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("focal alpha and beta must be positive")
        if not 0 < self.epsilon < 1e-3:
            raise ValueError("focal epsilon must lie in (0, 1e-3)")


@dataclass(frozen=True)
class LossWeights:
    center: float = 1.0
    corner: float = 1.0
    aggregation: float = 0.1
    wh: float = 0.1
    center_offset: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


TERMS = ("center_focal", "corner_focal", "wh_l1", "offset_l1", "refine_l1")


@dataclass
class LossBreakdown:
    total: float
    center_focal: float = 0.0
    corner_focal: float = 0.0
    wh_l1: float = 0.0
    offset_l1: float = 0.0
    refine_l1: float = 0.0

    def terms(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in TERMS}

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total, **self.terms()}


def focal_loss(pred: Tensor, gt, params: FocalParams = FocalParams()) -> Tensor:
    """Penalty-reduced focal loss, normalised by the number of ``gt == 1`` cells."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"focal_loss: pred {pred.shape} vs gt {gt.shape}")
    eps, a, b = params.epsilon, params.alpha, params.beta
    raw = pred.data
    p = np.clip(raw, eps, 1.0 - eps)
    inside = (raw >= eps) & (raw <= 1.0 - eps)
    pos = gt == 1.0
    neg_w = (1.0 - gt) ** b
    norm = max(1.0, float(pos.sum()))
    log_p, log_1mp = np.log(p), np.log(1.0 - p)
    per_cell = np.where(pos, -((1.0 - p) ** a) * log_p, -neg_w * p**a * log_1mp)
    value = per_cell.sum() / norm

    def backward(g):
        d_pos = a * (1.0 - p) ** (a - 1) * log_p - (1.0 - p) ** a / p
        d_neg = -neg_w * (a * p ** (a - 1) * log_1mp - p**a / (1.0 - p))
        return (float(g) * np.where(pos, d_pos, d_neg) * inside / norm,)

    return ad.record(np.asarray(value), (pred,), backward, "focal_loss")


def masked_l1(pred: Tensor, target, mask, channel_axis: int = -3) -> Tensor:
    """Sum of ``|pred - target|`` over masked locations, divided by max(1, #mask).

    ``mask`` has the shape of ``pred`` with ``channel_axis`` removed; every
    channel of a masked location contributes.
    """
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape:
        raise ShapeError(f"masked_l1: pred {pred.shape} vs target {target.shape}")
    expected = tuple(np.delete(np.array(pred.shape), channel_axis % pred.ndim))
    if mask.shape != expected:
        raise ShapeError(f"masked_l1: mask shape {mask.shape}, expected {expected}")
    m = np.broadcast_to(np.expand_dims(mask, channel_axis), pred.shape)
    norm = max(1.0, float(mask.sum()))
    diff = pred.data - target
    value = np.abs(diff)[m].sum() / norm
    return ad.record(np.asarray(value), (pred,), lambda g: (float(g) * np.sign(diff) * m / norm,), "masked_l1")


def zero_loss() -> Tensor:
    return Tensor(np.asarray(0.0))


def combine(terms: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the named loss terms (missing terms count as 0)."""
    w = {
        "center_focal": weights.center,
        "corner_focal": weights.corner,
        "wh_l1": weights.wh,
        "offset_l1": weights.center_offset,
        "refine_l1": weights.aggregation,
    }
    names = [k for k in TERMS if k in terms]
    total = ad.add_scalars([terms[k] for k in names], [w[k] for k in names]) if names else zero_loss()
    values = {k: float(terms[k].data) if k in terms else 0.0 for k in TERMS}
    return total, LossBreakdown(total=float(total.data), **values)


def total_loss(
    outputs,
    refine_residuals: Optional[Sequence[Tensor]],
    target,
    weights: LossWeights = LossWeights(),
    focal: FocalParams = FocalParams(),
    refine_targets: Optional[Sequence[np.ndarray]] = None,
) -> tuple[Tensor, LossBreakdown]:
    """Full objective for a (possibly batched) set of outputs and stacked targets.

    ``target`` exposes ``center_heatmap``, ``corner_heatmap``, ``wh_target``,
    ``offset_target`` and ``keypoint_mask`` arrays whose shapes match the
    outputs. ``refine_targets[i]`` is ``gt_wh - detached wh`` for pass ``i``.
    """
    terms = {
        "center_focal": focal_loss(outputs.center_heatmap, target.center_heatmap, focal),
        "wh_l1": masked_l1(outputs.wh_map, target.wh_target, target.keypoint_mask),
        "offset_l1": masked_l1(outputs.offset_map, target.offset_target, target.keypoint_mask),
    }
    if outputs.corner_heatmap is not None:
        terms["corner_focal"] = focal_loss(outputs.corner_heatmap, target.corner_heatmap, focal)
    if refine_residuals:
        if refine_targets is None or len(refine_targets) != len(refine_residuals):
            raise ValueError("each refinement pass needs a target")
        parts = []
        for res, tgt in zip(refine_residuals, refine_targets):
            parts.append(masked_l1(res, tgt, np.ones(res.shape[0], dtype=bool), channel_axis=-1))
        # average over passes keeps the term's scale independent of the iteration count
        terms["refine_l1"] = ad.add_scalars(parts, [1.0 / len(parts)] * len(parts))
    return combine(terms, weights)
