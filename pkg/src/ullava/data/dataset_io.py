"""Line-delimited JSON dataset files.

Line 1 is a header ``{"format": "ullava-dataset", "version": 1}``. Every further
line is one sample::

    {"id": str, "task_kind": str,
     "visual": {"path": str, "kind": "image"|"video"} | null,
     "turns": [{"role": "user"|"assistant", "text": str}, ...],
     "masks": [{"size": [H, W], "counts": [int, ...]}, ...],   # column-major RLE
     "boxes": [[x1, y1, x2, y2], ...]}                          # normalized corners

Keys are sorted and separators fixed, so equal samples give equal bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

from ..errors import ParseError, ValidationError
from ..types import ConversationSample, NormalizedBox, Turn, VisualRef
from .rle import RleMask, rle_decode, rle_encode

FORMAT = "ullava-dataset"
VERSION = 1


def sample_to_record(sample: ConversationSample) -> dict:
    return {
        "id": sample.id,
        "task_kind": sample.task_kind,
        "visual": None if sample.visual is None else {"path": sample.visual.path, "kind": sample.visual.kind},
        "turns": [{"role": t.role, "text": t.text} for t in sample.turns],
        "masks": [rle_encode(m).to_json() for m in sample.target_masks],
        "boxes": [list(b.as_tuple()) for b in sample.target_boxes],
    }


def record_to_sample(rec: dict) -> ConversationSample:
    visual = rec.get("visual")
    return ConversationSample(
        id=str(rec["id"]),
        task_kind=rec["task_kind"],
        turns=[Turn(t["role"], t["text"]) for t in rec["turns"]],
        visual=None if visual is None else VisualRef(visual["path"], visual["kind"]),
        target_masks=[rle_decode(RleMask.from_json(m)) for m in rec.get("masks", [])],
        target_boxes=[NormalizedBox(*b) for b in rec.get("boxes", [])],
    )


def dumps_sample(sample: ConversationSample) -> str:
    return json.dumps(sample_to_record(sample), sort_keys=True, separators=(",", ":"))


def write_dataset(samples: Iterable[ConversationSample], path: str | Path) -> int:
    """Validate and write samples; returns the number written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"format": FORMAT, "version": VERSION}, sort_keys=True)]
    for s in samples:
        try:
            s.validate()
        except ValueError as e:
            raise ValidationError(f"refusing to write invalid sample: {e}") from e
        lines.append(dumps_sample(s))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return len(lines) - 1


def load_dataset(path: str | Path) -> Iterator[ConversationSample]:
    """Stream samples; malformed lines raise ``ParseError`` with their 1-based line number."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: invalid JSON ({e.msg})", lineno) from e
            if lineno == 1:
                if rec.get("format") != FORMAT or rec.get("version") != VERSION:
                    raise ParseError(f"{path}: unsupported header {rec}", lineno)
                continue
            try:
                sample = record_to_sample(rec)
                sample.validate()
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"{path}: invalid sample ({e})", lineno) from e
            yield sample
