"""Instruction template pools per task kind."""

from __future__ import annotations

import random
import re
from dataclasses import dataclass

from ..errors import UnknownPlaceholder

_PLACEHOLDER_RE = re.compile(r"<(?:class|image|video)>")
_MODALITY = {
    "captioning": "<image>",
    "vqa": "<image>",
    "res": "<image>",
    "semantic_seg": "<image>",
    "salient": "<image>",
    "rec": "<image>",
    "video_caption": "<video>",
}


@dataclass(frozen=True)
class TemplatePool:
    task_kind: str
    templates: tuple[str, ...]

    def __post_init__(self):
        if not self.templates:
            raise ValueError(f"empty template pool for {self.task_kind}")
        needed = _MODALITY.get(self.task_kind)
        for t in self.templates:
            if needed and needed not in t:
                raise ValueError(f"template {t!r} lacks the {needed} placeholder")

    @property
    def uses_class(self) -> bool:
        return any("<class>" in t for t in self.templates)


USER_POOLS = {
    "salient": TemplatePool(
        "salient",
        (
            "<image> What makes the image stand out?",
            "<image> What is salient one in this image?",
            "<image> Look at the image, segment the main object in the picture and explain.",
        ),
    ),
    "video_caption": TemplatePool(
        "video_caption",
        (
            "<video> Describe the video concisely.",
            "<video> What's happening in this video?",
            "<video> Write a terse but informative summary of the VCR.",
        ),
    ),
    "res": TemplatePool(
        "res",
        (
            "<image> Segment out the <class>.",
            "<image> Output the mask of the <class>.",
            "<image> Find the <class> in the picture.",
        ),
    ),
    "semantic_seg": TemplatePool(
        "semantic_seg",
        (
            "<image> Segment all the <class> in the image.",
            "<image> Output the mask of every <class>.",
        ),
    ),
    "rec": TemplatePool(
        "rec",
        (
            "<image> Where is the <class>?",
            "<image> Locate the <class> in the picture.",
            "<image> Give the box of the <class>.",
        ),
    ),
    "captioning": TemplatePool(
        "captioning",
        (
            "<image> Describe the image briefly.",
            "<image> Give a short caption for this picture.",
        ),
    ),
}

# Answer formats: the tag pair sits right before the task token it names.
ANSWER_POOLS = {
    "res": TemplatePool("res_answer", ("Sure, it is <tag><class></tag> <SEG>.",)),
    "semantic_seg": TemplatePool("semantic_seg_answer", ("Sure, <tag><class></tag> <SEG>.",)),
    "rec": TemplatePool("rec_answer", ("It is <tag><class></tag> <LOC>.",)),
    "res+rec": TemplatePool("res_rec_answer", ("It is <tag><class></tag> <SEG> <LOC>.",)),
    "salient": TemplatePool("salient_answer", ("The salient one is <tag><class></tag> <SEG>.",)),
}


def fill(template: str, class_tag: str | None) -> str:
    if class_tag is not None:
        if "<class>" not in template:
            raise ValueError(f"class tag given but template {template!r} has no <class>")
        template = template.replace("<class>", class_tag)
    leftover = [m for m in _PLACEHOLDER_RE.findall(template) if m == "<class>"]
    if leftover:
        raise UnknownPlaceholder(f"unsubstituted placeholder {leftover[0]} in {template!r}")
    return template


def instantiate_template(pool: TemplatePool, class_tag: str | None, rng_seed: int | random.Random) -> str:
    """Seeded uniform choice from ``pool`` with ``<class>`` substituted."""
    rng = rng_seed if isinstance(rng_seed, random.Random) else random.Random(rng_seed)
    return fill(rng.choice(pool.templates), class_tag)
