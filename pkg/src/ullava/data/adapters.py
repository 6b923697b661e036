"""Adapters turning public-dataset annotations into conversation samples.

Only the referring-segmentation layout is handled here: a JSON list of
``{"id", "image", "mask": <RLE json>, "sentences": [str, ...]}`` entries, as exported
from RefCOCO-style annotation tools. Boxes for the REC view come from the masks.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

from ..types import ConversationSample, Turn, VisualRef
from .rle import RleMask, mask_to_bbox, rle_decode
from .templates import ANSWER_POOLS, USER_POOLS, fill, instantiate_template


def referring_samples(entries: list[dict], seed: int = 0, with_boxes: bool = True) -> list[ConversationSample]:
    rng = random.Random(seed)
    out: list[ConversationSample] = []
    for entry in entries:
        mask = rle_decode(RleMask.from_json(entry["mask"]))
        visual = VisualRef(entry["image"], "image")
        for j, sentence in enumerate(entry["sentences"]):
            ref = " ".join(sentence.replace("<", " ").replace(">", " ").split())
            out.append(
                ConversationSample(
                    f"{entry['id']}_res_{j}",
                    "res",
                    [
                        Turn("user", instantiate_template(USER_POOLS["res"], ref, rng)),
                        Turn("assistant", fill(ANSWER_POOLS["res"].templates[0], ref)),
                    ],
                    visual,
                    target_masks=[mask],
                )
            )
            if with_boxes:
                out.append(
                    ConversationSample(
                        f"{entry['id']}_rec_{j}",
                        "rec",
                        [
                            Turn("user", instantiate_template(USER_POOLS["rec"], ref, rng)),
                            Turn("assistant", fill(ANSWER_POOLS["rec"].templates[0], ref)),
                        ],
                        visual,
                        target_boxes=[mask_to_bbox(mask)],
                    )
                )
    for s in out:
        s.validate()
    return out


def load_referring_file(path: str | Path, seed: int = 0) -> list[ConversationSample]:
    return referring_samples(json.loads(Path(path).read_text(encoding="utf-8")), seed)
