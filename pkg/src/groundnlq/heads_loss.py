"""Anchor-free prediction heads, pyramid label assignment and training losses."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import AssignmentConfig
from .data import Moment
from .encoder import MaskedConv1d, _zero_invalid
from .pyramid import Pyramid, level_lengths

PAD_LOGIT = -1e4
_EPS = 1e-8
MIN_FALLBACK_TARGET = 1e-3


class PredictionHead(nn.Module):
    """conv3 -> LayerNorm -> ReLU -> conv3, shared across pyramid levels."""

    def __init__(self, d_model: int, out_channels: int):
        super().__init__()
        self.conv1 = MaskedConv1d(d_model, d_model)
        self.norm = nn.LayerNorm(d_model)
        self.conv2 = MaskedConv1d(d_model, out_channels)

    def forward(self, x, mask):
        h = _zero_invalid(F.relu(self.norm(self.conv1(x, mask))), mask)
        return self.conv2(h, mask)


@dataclass
class HeadOutputs:
    logits: list[torch.Tensor]  # per level [B, T_l]
    distances: list[torch.Tensor]  # per level [B, T_l, 2], in stride units
    masks: list[torch.Tensor]  # per level [B, T_l]

    def sample(self, b: int) -> "HeadOutputs":
        return HeadOutputs(
            [x[b : b + 1] for x in self.logits],
            [x[b : b + 1] for x in self.distances],
            [x[b : b + 1] for x in self.masks],
        )


class GroundingHeads(nn.Module):
    def __init__(self, d_model: int, prior_prob: float = 0.01):
        super().__init__()
        self.prior_prob = prior_prob
        self.cls_head = PredictionHead(d_model, 1)
        self.reg_head = PredictionHead(d_model, 2)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if m is not self and hasattr(m, "reset_parameters"):
                m.reset_parameters()
        # foreground prior keeps the focal loss stable at initialization
        nn.init.constant_(self.cls_head.conv2.bias, -math.log((1 - self.prior_prob) / self.prior_prob))

    def forward(self, p: Pyramid) -> HeadOutputs:
        logits, dists = [], []
        for x, mask in zip(p.feats, p.masks):
            lg = self.cls_head(x, mask).squeeze(-1)
            logits.append(torch.where(mask, lg, torch.full_like(lg, PAD_LOGIT)))
            dists.append(_zero_invalid(F.softplus(self.reg_head(x, mask)), mask))
        return HeadOutputs(logits, dists, list(p.masks))


def head_forward(p: Pyramid, heads: GroundingHeads) -> HeadOutputs:
    return heads(p)


# ---------------------------------------------------------------- assignment


@dataclass
class LabelTargets:
    flags: list[np.ndarray]  # per level [T_l] bool
    targets: list[np.ndarray]  # per level [T_l, 2], zero off-foreground

    @property
    def num_foreground(self) -> int:
        return int(sum(f.sum() for f in self.flags))


def level_centers(n: int, stride: int) -> np.ndarray:
    """Location coordinates ``(i + 0.5) * stride`` in snippet units."""
    return (np.arange(n, dtype=np.float64) + 0.5) * stride


def assign_labels(
    T: int,
    snippet_duration_sec: float,
    moment: Moment,
    cfg: AssignmentConfig,
    n_levels: int = 7,
) -> LabelTargets:
    """Mark pyramid locations responsible for ``moment``.

    A location at coordinate ``t`` on a level of stride ``s`` is foreground
    when it lies inside the moment, its farther boundary distance falls in
    that level's regression range, and it is within
    ``center_sampling_radius * s`` of the moment center (or the moment is
    shorter than twice that radius). If nothing qualifies, the level-0
    location nearest the center is used.
    """
    if len(cfg.regression_ranges) < n_levels:
        raise ValueError(f"need {n_levels} regression ranges, got {len(cfg.regression_ranges)}")
    s, e = moment.start_sec / snippet_duration_sec, moment.end_sec / snippet_duration_sec
    c = 0.5 * (s + e)
    flags, targets = [], []
    for level, n in enumerate(level_lengths(T, n_levels)):
        stride = 2**level
        t = level_centers(n, stride)
        lo, hi = cfg.regression_ranges[level]
        dmax = np.maximum(t - s, e - t)
        radius = cfg.center_sampling_radius * stride
        fg = (
            (s <= t) & (t <= e)
            & (dmax > lo) & (dmax <= hi)
            & ((np.abs(t - c) <= radius) | ((e - s) < 2 * radius))
        )
        reg = np.zeros((n, 2))
        reg[fg, 0] = (t[fg] - s) / stride
        reg[fg, 1] = (e - t[fg]) / stride
        flags.append(fg)
        targets.append(reg)
    if not any(f.any() for f in flags):
        t = level_centers(level_lengths(T, 1)[0], 1)
        i = int(np.argmin(np.abs(t - c)))  # argmin returns the lowest index on ties
        flags[0][i] = True
        targets[0][i] = (max(t[i] - s, MIN_FALLBACK_TARGET), max(e - t[i], MIN_FALLBACK_TARGET))
    return LabelTargets(flags, targets)


@dataclass
class BatchTargets:
    flags: list[torch.Tensor]  # per level [B, T_l] bool
    targets: list[torch.Tensor]  # per level [B, T_l, 2]


def stack_targets(items: Sequence[LabelTargets], lengths: Sequence[int], dtype=torch.float32) -> BatchTargets:
    """Pad per-sample targets to the batch's level lengths."""
    flags, targets = [], []
    for level, n in enumerate(lengths):
        f = torch.zeros(len(items), n, dtype=torch.bool)
        r = torch.zeros(len(items), n, 2, dtype=dtype)
        for b, it in enumerate(items):
            m = len(it.flags[level])
            f[b, :m] = torch.from_numpy(it.flags[level])
            r[b, :m] = torch.from_numpy(it.targets[level]).to(dtype)
        flags.append(f)
        targets.append(r)
    return BatchTargets(flags, targets)


# -------------------------------------------------------------------- losses


def focal_loss(logits, flags, mask, alpha: float = 0.25, gamma: float = 2.0, normalizer=None):
    """Sigmoid focal loss summed over valid positions, divided by ``max(1, #fg)``."""
    y = flags.to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, y, reduction="none")
    p_t = p * y + (1 - p) * (1 - y)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = loss * (alpha * y + (1 - alpha) * (1 - y))
    if normalizer is None:
        normalizer = max(1, int(flags[mask].sum()))
    return (loss * mask.to(loss.dtype)).sum() / normalizer


def bce_loss(logits, flags, mask, normalizer=None):
    loss = F.binary_cross_entropy_with_logits(logits, flags.to(logits.dtype), reduction="none")
    if normalizer is None:
        normalizer = max(1, int(flags[mask].sum()))
    return (loss * mask.to(loss.dtype)).sum() / normalizer


def interval_iou_terms(pred: torch.Tensor, gt: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """IoU and squared normalized center gap for ``[..., 2]`` (start, end) intervals."""
    inter = (torch.minimum(pred[..., 1], gt[..., 1]) - torch.maximum(pred[..., 0], gt[..., 0])).clamp(min=0)
    union = (pred[..., 1] - pred[..., 0]) + (gt[..., 1] - gt[..., 0]) - inter
    iou = inter / union.clamp(min=_EPS)
    enclose = torch.maximum(pred[..., 1], gt[..., 1]) - torch.minimum(pred[..., 0], gt[..., 0])
    gap = 0.5 * ((pred[..., 0] + pred[..., 1]) - (gt[..., 0] + gt[..., 1]))
    return iou, gap**2 / enclose.clamp(min=_EPS) ** 2


def diou_interval_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    iou, penalty = interval_iou_terms(pred, gt)
    return 1 - iou + penalty


def _to_interval(dist: torch.Tensor) -> torch.Tensor:
    return torch.stack([-dist[..., 0], dist[..., 1]], dim=-1)


def diou_loss(pred_distances, target_distances, flags, kind: str = "diou"):
    """Mean ``1 - IoU + gap^2 / enclosing^2`` over foreground locations (0 without any)."""
    if not bool(flags.any()):
        return pred_distances.sum() * 0.0
    pred = _to_interval(pred_distances[flags])
    gt = _to_interval(target_distances[flags])
    iou, penalty = interval_iou_terms(pred, gt)
    loss = 1 - iou if kind == "iou" else 1 - iou + penalty
    return loss.mean()


def total_loss(outputs: HeadOutputs, targets: BatchTargets, cfg: AssignmentConfig):
    """Classification loss plus ``reg_loss_weight`` times the regression loss.

    Returns ``(total, breakdown)`` with ``loss_cls``, ``loss_reg`` and
    ``num_fg`` in the breakdown.
    """
    logits = torch.cat(outputs.logits, dim=1)
    mask = torch.cat(outputs.masks, dim=1)
    flags = torch.cat(targets.flags, dim=1) & mask
    dists = torch.cat(outputs.distances, dim=1)
    tgt = torch.cat(targets.targets, dim=1).to(dists.dtype)
    num_fg = int(flags.sum())
    norm = max(1, num_fg)
    if cfg.cls_loss == "focal":
        loss_cls = focal_loss(logits, flags, mask, cfg.focal_alpha, cfg.focal_gamma, norm)
    else:
        loss_cls = bce_loss(logits, flags, mask, norm)
    loss_reg = diou_loss(dists, tgt, flags, cfg.reg_loss)
    total = loss_cls
    if cfg.reg_loss_weight > 0:
        total = total + cfg.reg_loss_weight * loss_reg
    breakdown = {"loss_cls": float(loss_cls.detach()), "loss_reg": float(loss_reg.detach()), "num_fg": num_fg}
    return total, breakdown
