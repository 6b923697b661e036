"""Seeded toy scenes of colored rectangles, and samples for every task kind."""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from ..types import ConversationSample, Turn, VisualRef
from .clients import COLOR_NAMES
from .rle import mask_to_bbox
from .salient import SalientRecord
from .templates import ANSWER_POOLS, USER_POOLS, fill, instantiate_template
from .visuals import VisualStore

BACKGROUND = (60, 60, 60)
GRID = 4  # object edges snap to multiples of this many pixels


@dataclass
class SceneObject:
    name: str
    color: str
    mask: np.ndarray


def shape_name(h: int, w: int) -> str:
    ratio = max(h, w) / min(h, w)
    return "square" if ratio < 1.2 else ("bar" if ratio > 2.0 else "block")


def _rect(rng: np.random.Generator, size: int, lo: int, hi: int) -> tuple[int, int, int, int]:
    h = int(rng.integers(lo // GRID, hi // GRID + 1)) * GRID
    w = int(rng.integers(lo // GRID, hi // GRID + 1)) * GRID
    r0 = int(rng.integers(0, (size - h) // GRID + 1)) * GRID
    c0 = int(rng.integers(0, (size - w) // GRID + 1)) * GRID
    return r0, c0, h, w


def make_scene(
    rng: np.random.Generator, size: int = 64, n_objects: int = 2, lo: int | None = None, hi: int | None = None
):
    """Non-overlapping rectangles in distinct colors on a noisy gray background.

    Side lengths default to 12..32 px at size 64 and scale with ``size``.
    """
    lo = max(GRID, size * 12 // 64) if lo is None else lo
    hi = size // 2 if hi is None else hi
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = BACKGROUND
    image = np.clip(image.astype(int) + rng.integers(-8, 9, size=image.shape), 0, 255).astype(np.uint8)
    colors = rng.permutation(list(COLOR_NAMES))[:n_objects]
    occupied = np.zeros((size, size), dtype=bool)
    objects: list[SceneObject] = []
    for color in colors:
        for _ in range(200):
            r0, c0, h, w = _rect(rng, size, lo, hi)
            m = np.zeros((size, size), dtype=bool)
            m[r0 : r0 + h, c0 : c0 + w] = True
            grown = np.zeros_like(m)
            grown[max(r0 - GRID, 0) : r0 + h + GRID, max(c0 - GRID, 0) : c0 + w + GRID] = True
            if not (grown & occupied).any():
                break
        else:
            raise RuntimeError("could not place non-overlapping objects")
        occupied |= m
        image[m] = COLOR_NAMES[str(color)]
        objects.append(SceneObject(f"{color} {shape_name(h, w)}", str(color), m))
    return image, objects


def _describe(objects: list[SceneObject]) -> str:
    ordered = sorted(objects, key=lambda o: np.flatnonzero(o.mask.any(axis=0))[0])
    return " and ".join(f"a {o.name}" for o in ordered)


def make_corpus(
    kind: str,
    n: int,
    seed: int = 0,
    size: int = 64,
    n_frames: int = 4,
    prefix: str | None = None,
) -> tuple[list[ConversationSample], VisualStore]:
    """``n`` samples of ``kind`` (a task kind, or "res+rec" for mask-and-box answers)."""
    rng = np.random.default_rng(seed)
    trng = random.Random(seed)
    prefix = prefix or kind.replace("+", "_")
    samples: list[ConversationSample] = []
    store = VisualStore()
    for i in range(n):
        sid = f"{prefix}_{i:04d}"
        if kind == "video_caption":
            frames, caption = _moving_object_video(rng, size, n_frames)
            path = f"videos/{sid}.npy"
            store.arrays[path] = frames
            turns = [Turn("user", instantiate_template(USER_POOLS[kind], None, trng)), Turn("assistant", caption)]
            samples.append(ConversationSample(sid, kind, turns, VisualRef(path, "video")))
            continue
        image, objects = make_scene(rng, size)
        path = f"images/{sid}.png"
        store.arrays[path] = image
        target = objects[int(rng.integers(len(objects)))]
        visual = VisualRef(path, "image")
        if kind == "captioning":
            turns = [
                Turn("user", instantiate_template(USER_POOLS[kind], None, trng)),
                Turn("assistant", _describe(objects)),
            ]
            samples.append(ConversationSample(sid, kind, turns, visual))
        elif kind == "vqa":
            turns = [
                Turn("user", f"<image> What color is the {target.name.split()[1]}?"),
                Turn("assistant", target.color),
            ]
            samples.append(ConversationSample(sid, kind, turns, visual))
        elif kind in ("res", "semantic_seg", "salient"):
            question = instantiate_template(
                USER_POOLS[kind], None if kind == "salient" else target.name, trng
            )
            answer = fill(ANSWER_POOLS[kind].templates[0], target.name)
            turns = [Turn("user", question), Turn("assistant", answer)]
            samples.append(ConversationSample(sid, kind, turns, visual, target_masks=[target.mask]))
        elif kind == "rec":
            turns = [
                Turn("user", instantiate_template(USER_POOLS["rec"], target.name, trng)),
                Turn("assistant", fill(ANSWER_POOLS["rec"].templates[0], target.name)),
            ]
            samples.append(ConversationSample(sid, kind, turns, visual, target_boxes=[mask_to_bbox(target.mask)]))
        elif kind == "res+rec":
            turns = [
                Turn("user", instantiate_template(USER_POOLS["res"], target.name, trng)),
                Turn("assistant", fill(ANSWER_POOLS["res+rec"].templates[0], target.name)),
            ]
            samples.append(
                ConversationSample(
                    sid, "res", turns, visual, target_masks=[target.mask], target_boxes=[mask_to_bbox(target.mask)]
                )
            )
        else:
            raise ValueError(f"unknown synthetic kind {kind!r}")
    for s in samples:
        s.validate()
    return samples, store


def _moving_object_video(rng: np.random.Generator, size: int, n_frames: int):
    color = str(rng.choice(list(COLOR_NAMES)))
    h = w = 16
    r0 = int(rng.integers(0, size - h + 1))
    direction = "right" if rng.integers(2) else "left"
    step = max((size - w) // max(n_frames - 1, 1), 1)
    frames = np.empty((n_frames, size, size, 3), dtype=np.uint8)
    for t in range(n_frames):
        c0 = min(t * step, size - w)
        if direction == "left":
            c0 = size - w - c0
        frames[t] = BACKGROUND
        frames[t, r0 : r0 + h, c0 : c0 + w] = COLOR_NAMES[color]
    return frames, f"a {color} square moves {direction}"


def make_salient_records(n: int, seed: int = 0, size: int = 64) -> list[SalientRecord]:
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        image, objects = make_scene(rng, size, n_objects=1, lo=16, hi=40)
        records.append(SalientRecord(f"salient_{i:04d}", f"images/salient_{i:04d}.png", image, objects[0].mask))
    return records
