"""Salient-object instruction data: crop -> caption -> tag -> template."""

from __future__ import annotations

import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import ClientError, EmptyMask
from ..types import ConversationSample, Turn, VisualRef
from .clients import CaptionClient, TagClient, encode_png, with_retries
from .rle import bbox_to_pixels, mask_to_bbox
from .templates import ANSWER_POOLS, USER_POOLS, fill, instantiate_template

log = logging.getLogger(__name__)


@dataclass
class SalientRecord:
    id: str
    image_path: str
    image: np.ndarray  # H×W×3 uint8
    mask: np.ndarray  # H×W bool


@dataclass
class BuildReport:
    seed: int
    n_records: int = 0
    n_samples: int = 0
    skipped: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "n_records": self.n_records, "n_samples": self.n_samples, "skipped": self.skipped}


def crop_to_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    r0, c0, r1, c1 = bbox_to_pixels(mask_to_bbox(mask), *mask.shape)
    return image[r0:r1, c0:c1]


def _clean_text(text: str) -> str:
    text = re.sub(r"[<>]", " ", text)
    return " ".join(text.split()).strip(" .")


def _describe(record: SalientRecord, captioner: CaptionClient, tagger: TagClient, attempts: int, backoff: float):
    if not np.asarray(record.mask).any():
        raise EmptyMask(f"record {record.id} has an empty mask")
    png = encode_png(crop_to_mask(record.image, record.mask))
    description = with_retries(lambda: captioner.caption(png), attempts, backoff)
    tag = with_retries(lambda: tagger.tag(description), attempts, backoff)
    return _clean_text(description), _clean_text(tag)


def build_salient15k(
    records: Sequence[SalientRecord],
    captioner: CaptionClient,
    tagger: TagClient,
    seed: int = 0,
    attempts: int = 3,
    backoff: float = 0.5,
    max_workers: int = 4,
) -> tuple[list[ConversationSample], BuildReport]:
    """Build one salient-segmentation sample per record; failures are skipped and reported.

    Client calls fan out over a thread pool; output keeps input order and every
    template choice is seeded per record, so results do not depend on scheduling.
    """
    report = BuildReport(seed=seed, n_records=len(records))

    def work(rec):
        try:
            return _describe(rec, captioner, tagger, attempts, backoff), None
        except (ClientError, EmptyMask) as e:
            return None, e

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        results = list(pool.map(work, records))

    samples = []
    for i, (rec, (desc, err)) in enumerate(zip(records, results)):
        if err is not None:
            log.warning("skipping salient record %s: %s", rec.id, err)
            report.skipped.append({"id": rec.id, "reason": f"{type(err).__name__}: {err}"})
            continue
        description, tag = desc
        rng = random.Random(f"{seed}:{i}")
        question = instantiate_template(USER_POOLS["salient"], None, rng)
        answer = f"{description}. " + fill(ANSWER_POOLS["salient"].templates[0], tag)
        sample = ConversationSample(
            id=rec.id,
            task_kind="salient",
            turns=[Turn("user", question), Turn("assistant", answer)],
            visual=VisualRef(rec.image_path, "image"),
            target_masks=[np.asarray(rec.mask, dtype=bool)],
        )
        sample.validate()
        samples.append(sample)
    report.n_samples = len(samples)
    return samples, report


def load_salient_source(root) -> list[SalientRecord]:
    """Pairs ``images/<stem>.png`` with ``masks/<stem>.png`` (nonzero = foreground)."""
    from pathlib import Path

    from PIL import Image

    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"salient source {root} needs images/ and masks/ subdirectories")
    records = []
    for img_path in sorted(img_dir.glob("*.png")):
        mask_path = mask_dir / img_path.name
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask {mask_path}")
        image = np.asarray(Image.open(img_path).convert("RGB"))
        mask = np.asarray(Image.open(mask_path).convert("L")) > 0
        records.append(SalientRecord(img_path.stem, str(img_path.relative_to(root)), image, mask))
    return records

