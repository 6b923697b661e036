"""Mask and box loss primitives and their composition into the fine-grained loss."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch

from .errors import ShapeMismatch
from .types import NormalizedBox

Scalar = torch.Tensor | float


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 2.0  # BCE weight
    alpha2: float = 0.5  # Dice weight
    beta1: float = 1.0  # L1 weight
    beta2: float = 1.0  # GIoU weight
    dice_epsilon: float = 1e-6
    # With both a mask and a box target, add both branches (False: mask branch only).
    combine_branches: bool = True

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.beta1, self.beta2) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dice_epsilon <= 0:
            raise ValueError("dice_epsilon must be positive")


@dataclass
class LossBreakdown:
    l_cgl: Scalar
    l_fgl: Scalar
    l_bce: Scalar | None = None
    l_dice: Scalar | None = None
    l_l1: Scalar | None = None
    l_giou: Scalar | None = None
    l_pixel: Scalar | None = None
    l_region: Scalar | None = None

    def to_dict(self) -> dict[str, float | None]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = None if v is None else _num(v)
        return out

    @property
    def branch(self) -> str:
        if self.l_pixel is not None and self.l_region is not None:
            return "pixel+region"
        if self.l_pixel is not None:
            return "pixel"
        if self.l_region is not None:
            return "region"
        return "none"


def _num(v: Scalar) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _as_target(target, like: torch.Tensor) -> torch.Tensor:
    if isinstance(target, np.ndarray):
        target = torch.from_numpy(np.ascontiguousarray(target))
    target = target.to(like.dtype)
    if target.shape != like.shape:
        raise ShapeMismatch(f"prediction shape {tuple(like.shape)} != target shape {tuple(target.shape)}")
    return target


def as_box_tensor(box, dtype=torch.float64) -> torch.Tensor:
    if isinstance(box, torch.Tensor):
        return box
    if isinstance(box, NormalizedBox):
        return torch.tensor(box.as_tuple(), dtype=dtype)
    return torch.as_tensor(np.asarray([b.as_tuple() if isinstance(b, NormalizedBox) else b for b in box]), dtype=dtype)


def bce_loss(logits: torch.Tensor, target) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy from logits: softplus(x) - t*x."""
    t = _as_target(target, logits)
    # exact softplus; F.softplus returns x itself past its threshold
    softplus = logits.clamp(min=0) + torch.log1p(torch.exp(-logits.abs()))
    return (softplus - t * logits).mean()


def dice_loss(logits: torch.Tensor, target, eps: float = 1e-6) -> torch.Tensor:
    """1 - soft Dice over the last two dims; leading dims (several masks) are averaged."""
    t = _as_target(target, logits)
    p = logits.sigmoid()
    inter = (p * t).sum(dim=(-2, -1))
    denom = p.sum(dim=(-2, -1)) + t.sum(dim=(-2, -1))
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def l1_box_loss(pred, target) -> torch.Tensor:
    pred = as_box_tensor(pred)
    target = as_box_tensor(target, pred.dtype).to(pred.dtype)
    return (pred - target).abs().mean()


def generalized_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU of corner boxes [..., 4]."""
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = area_a + area_b - inter
    cw = torch.maximum(a[..., 2], b[..., 2]) - torch.minimum(a[..., 0], b[..., 0])
    ch = torch.maximum(a[..., 3], b[..., 3]) - torch.minimum(a[..., 1], b[..., 1])
    enclose = cw * ch
    tiny = torch.finfo(a.dtype).tiny
    iou = inter / union.clamp(min=tiny)
    return iou - (enclose - union) / enclose.clamp(min=tiny)


def giou_loss(pred, target) -> torch.Tensor:
    pred = as_box_tensor(pred)
    target = as_box_tensor(target, pred.dtype).to(pred.dtype)
    return (1 - generalized_iou(pred, target)).mean()


def fine_grained_loss(
    l_cgl: Scalar,
    mask_pair: tuple[torch.Tensor, object] | None = None,
    box_pair: tuple[object, object] | None = None,
    cfg: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Add the mask branch and/or box branch to the LM loss.

    ``mask_pair`` is (logits, masks) with shapes [H, W] or [n, H, W]; ``box_pair``
    is (pred, target) boxes of shape [4] or [n, 4]. Several targets are averaged.
    """
    out = LossBreakdown(l_cgl=l_cgl, l_fgl=l_cgl)
    if mask_pair is not None:
        logits, masks = mask_pair
        out.l_bce = bce_loss(logits, masks)
        out.l_dice = dice_loss(logits, masks, cfg.dice_epsilon)
        out.l_pixel = cfg.alpha1 * out.l_bce + cfg.alpha2 * out.l_dice
        out.l_fgl = l_cgl + out.l_pixel
    if box_pair is not None and (mask_pair is None or cfg.combine_branches):
        pred, target = box_pair
        out.l_l1 = l1_box_loss(pred, target)
        out.l_giou = giou_loss(pred, target)
        out.l_region = cfg.beta1 * out.l_l1 + cfg.beta2 * out.l_giou
        out.l_fgl = out.l_fgl + out.l_region
    return out


def mean_breakdown(items: Sequence[LossBreakdown]) -> dict[str, float | None]:
    """Batch summary: each component averaged over the samples that carry it."""
    summary: dict[str, float | None] = {}
    for f in fields(LossBreakdown):
        vals = [_num(getattr(b, f.name)) for b in items if getattr(b, f.name) is not None]
        summary[f.name] = sum(vals) / len(vals) if vals else None
    return summary
