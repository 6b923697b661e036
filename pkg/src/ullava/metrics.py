"""Evaluation metrics (cumulative IoU, Prec@X, box IoU) and REC output fusion."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Callable, Protocol, Sequence

import numpy as np

from .data.rle import mask_to_bbox
from .errors import NoEvidence, ShapeMismatch, ValidationError
from .types import BOX_TASKS, MASK_TASKS, ConversationSample, NormalizedBox


@dataclass(frozen=True)
class CIoUAccumulator:
    """Integer pixel totals, so shard merges are exact and order-free."""

    total_intersection: int = 0
    total_union: int = 0

    def merge(self, other: "CIoUAccumulator") -> "CIoUAccumulator":
        return CIoUAccumulator(
            self.total_intersection + other.total_intersection, self.total_union + other.total_union
        )

    def finalize(self) -> float:
        if self.total_union == 0:
            return 1.0  # nothing predicted, nothing to find
        return self.total_intersection / self.total_union


@dataclass(frozen=True)
class PrecAccumulator:
    threshold: float = 0.5
    hits: int = 0
    total: int = 0

    def merge(self, other: "PrecAccumulator") -> "PrecAccumulator":
        if other.threshold != self.threshold:
            raise ValueError("cannot merge accumulators with different thresholds")
        return PrecAccumulator(self.threshold, self.hits + other.hits, self.total + other.total)

    def finalize(self) -> float:
        """Percentage of samples whose IoU is strictly above the threshold."""
        if self.total == 0:
            raise ValidationError("Prec@X over zero samples is undefined")
        return 100.0 * self.hits / self.total


def accumulate_ciou(acc: CIoUAccumulator, pred: np.ndarray, target: np.ndarray) -> CIoUAccumulator:
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    inter = int(np.count_nonzero(pred & target))
    union = int(np.count_nonzero(pred | target))
    return CIoUAccumulator(acc.total_intersection + inter, acc.total_union + union)


def box_iou(a: NormalizedBox, b: NormalizedBox) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 1.0 if a == b else 0.0
    return min(1.0, max(0.0, inter / union))


def accumulate_prec(acc: PrecAccumulator, pred: NormalizedBox | None, target: NormalizedBox) -> PrecAccumulator:
    hit = pred is not None and box_iou(pred, target) > acc.threshold
    return PrecAccumulator(acc.threshold, acc.hits + int(hit), acc.total + 1)


def fuse_rec_outputs(
    loc_box: NormalizedBox | None, mask: np.ndarray | None, gate: float = 0.5
) -> NormalizedBox:
    """Combine the region decoder's box with the box of the generated mask.

    Agreeing evidence (IoU >= ``gate``) is averaged; on disagreement the mask box wins.
    """
    mask_box = None
    if mask is not None and np.asarray(mask).any():
        mask_box = mask_to_bbox(mask)
    if loc_box is None and mask_box is None:
        raise NoEvidence("neither a decoded box nor a non-empty mask is available")
    if mask_box is None:
        return loc_box
    if loc_box is None:
        return mask_box
    if box_iou(loc_box, mask_box) >= gate:
        return NormalizedBox(*((a + b) / 2 for a, b in zip(loc_box, mask_box)))
    return mask_box


# -- split evaluation -----------------------------------------------------------------------


@dataclass
class SamplePrediction:
    masks: list[np.ndarray] = field(default_factory=list)
    boxes: list[NormalizedBox] = field(default_factory=list)


class Predictor(Protocol):
    def __call__(self, sample: ConversationSample) -> SamplePrediction: ...


@dataclass
class SplitResult:
    n_samples: int
    ciou: CIoUAccumulator = field(default_factory=CIoUAccumulator)
    prec: PrecAccumulator = field(default_factory=PrecAccumulator)
    n_seg: int = 0
    n_rec: int = 0

    def merge(self, other: "SplitResult") -> "SplitResult":
        return SplitResult(
            self.n_samples + other.n_samples,
            self.ciou.merge(other.ciou),
            self.prec.merge(other.prec),
            self.n_seg + other.n_seg,
            self.n_rec + other.n_rec,
        )

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_segmentation": self.n_seg,
            "n_rec": self.n_rec,
            "ciou": self.ciou.finalize() if self.n_seg else None,
            "total_intersection": self.ciou.total_intersection,
            "total_union": self.ciou.total_union,
            f"prec@{self.prec.threshold}": self.prec.finalize() if self.n_rec else None,
            "hits": self.prec.hits,
        }


def evaluate_shard(
    samples: Sequence[ConversationSample], predictor: Callable[[ConversationSample], SamplePrediction], threshold=0.5
) -> SplitResult:
    """Masks are paired with targets in order; missing predictions count as empty/miss."""
    res = SplitResult(0, prec=PrecAccumulator(threshold))
    for s in samples:
        pred = predictor(s)
        res.n_samples += 1
        if s.task_kind in MASK_TASKS:
            res.n_seg += 1
            for i, target in enumerate(s.target_masks):
                m = pred.masks[i] if i < len(pred.masks) else np.zeros_like(target)
                res.ciou = accumulate_ciou(res.ciou, m, target)
        if s.task_kind in BOX_TASKS:
            res.n_rec += 1
            for i, target in enumerate(s.target_boxes):
                box = pred.boxes[i] if i < len(pred.boxes) else None
                res.prec = accumulate_prec(res.prec, box, target)
    return res


def evaluate_split(
    samples: Sequence[ConversationSample],
    predictor: Callable[[ConversationSample], SamplePrediction],
    threshold: float = 0.5,
    n_shards: int = 1,
) -> SplitResult:
    samples = list(samples)
    if not samples:
        raise ValidationError("cannot evaluate an empty split")
    n_shards = max(1, min(n_shards, len(samples)))
    shards = [samples[i::n_shards] for i in range(n_shards)]
    return reduce(SplitResult.merge, (evaluate_shard(sh, predictor, threshold) for sh in shards))
