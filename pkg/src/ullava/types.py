"""Core data records shared by the tokenizer, data pipeline, heads and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

TASK_KINDS = ("captioning", "vqa", "res", "semantic_seg", "salient", "rec", "video_caption")
MASK_TASKS = frozenset({"res", "semantic_seg", "salient"})
BOX_TASKS = frozenset({"rec"})
CAPTION_TASKS = frozenset({"captioning", "video_caption"})

SEG_TOKEN = "<SEG>"
LOC_TOKEN = "<LOC>"


@dataclass(frozen=True)
class NormalizedBox:
    """Axis-aligned box in fractions of image width/height."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if not (0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0):
            raise ValueError(f"invalid normalized box {vals}")

    def __iter__(self) -> Iterator[float]:
        return iter((self.x1, self.y1, self.x2, self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Turn:
    role: str  # "user" | "assistant"
    text: str

    def __post_init__(self):
        if self.role not in ("user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class VisualRef:
    path: str
    kind: str  # "image" | "video"

    def __post_init__(self):
        if self.kind not in ("image", "video"):
            raise ValueError(f"unknown visual kind {self.kind!r}")


@dataclass
class ConversationSample:
    id: str
    task_kind: str
    turns: list[Turn]
    visual: VisualRef | None = None
    target_masks: list[np.ndarray] = field(default_factory=list)
    target_boxes: list[NormalizedBox] = field(default_factory=list)

    def assistant_text(self) -> str:
        return " ".join(t.text for t in self.turns if t.role == "assistant")

    def validate(self) -> None:
        """Raise ``ValueError`` when the sample breaks its structural invariants."""
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"{self.id}: unknown task kind {self.task_kind!r}")
        if not self.turns:
            raise ValueError(f"{self.id}: sample has no turns")
        if self.task_kind in MASK_TASKS and not self.target_masks:
            raise ValueError(f"{self.id}: {self.task_kind} sample needs a target mask")
        if self.task_kind in BOX_TASKS and not self.target_boxes:
            raise ValueError(f"{self.id}: rec sample needs a target box")
        answer = self.assistant_text()
        n_seg, n_loc = answer.count(SEG_TOKEN), answer.count(LOC_TOKEN)
        if n_seg != len(self.target_masks):
            raise ValueError(f"{self.id}: {n_seg} <SEG> tokens but {len(self.target_masks)} masks")
        if n_loc != len(self.target_boxes):
            raise ValueError(f"{self.id}: {n_loc} <LOC> tokens but {len(self.target_boxes)} boxes")
        for m in self.target_masks:
            if m.ndim != 2 or m.dtype != np.bool_:
                raise ValueError(f"{self.id}: masks must be 2-D boolean arrays")

    def __eq__(self, other):
        if not isinstance(other, ConversationSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.task_kind == other.task_kind
            and self.turns == other.turns
            and self.visual == other.visual
            and self.target_boxes == other.target_boxes
            and len(self.target_masks) == len(other.target_masks)
            and all(np.array_equal(a, b) for a, b in zip(self.target_masks, other.target_masks))
        )
