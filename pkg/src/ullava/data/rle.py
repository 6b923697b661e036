"""Run-length mask codec (column-major, first run counts zeros) and mask -> box."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyMask, MalformedRle
from ..types import NormalizedBox


@dataclass(frozen=True)
class RleMask:
    height: int
    width: int
    counts: tuple[int, ...]

    def to_json(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        try:
            h, w = obj["size"]
            counts = tuple(int(c) for c in obj["counts"])
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedRle(f"bad RLE record: {e}") from e
        return cls(int(h), int(w), counts)


def rle_encode(mask: np.ndarray) -> RleMask:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    h, w = mask.shape
    flat = mask.ravel(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return RleMask(h, w, tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    total = rle.height * rle.width
    if rle.height < 0 or rle.width < 0 or any(c < 0 for c in rle.counts):
        raise MalformedRle("negative size or run length")
    if sum(rle.counts) != total:
        raise MalformedRle(f"run lengths sum to {sum(rle.counts)}, expected {total}")
    values = np.arange(len(rle.counts)) % 2 == 1
    flat = np.repeat(values, rle.counts)
    return flat.reshape((rle.height, rle.width), order="F")


def mask_to_bbox(mask: np.ndarray) -> NormalizedBox:
    """Tight box over the true pixels; pixel (r, c) covers [c/W, (c+1)/W] x [r/H, (r+1)/H]."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("mask has no foreground pixels")
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return NormalizedBox(cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)


def bbox_to_pixels(box: NormalizedBox, height: int, width: int) -> tuple[int, int, int, int]:
    """Inclusive-exclusive pixel bounds (r0, c0, r1, c1) covering the box."""
    r0 = int(np.floor(box.y1 * height))
    c0 = int(np.floor(box.x1 * width))
    r1 = max(int(np.ceil(box.y2 * height)), r0 + 1)
    c1 = max(int(np.ceil(box.x2 * width)), c0 + 1)
    return r0, c0, min(r1, height), min(c1, width)
