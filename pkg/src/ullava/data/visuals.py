"""Resolve ``VisualRef`` paths to pixel arrays (PNG images, NPY images/videos)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

from ..errors import ValidationError
from ..types import VisualRef


class VisualStore:
    """In-memory arrays first, then files under ``root``."""

    def __init__(self, root: str | Path | None = None, arrays: Mapping[str, np.ndarray] | None = None):
        self.root = Path(root) if root is not None else None
        self.arrays = dict(arrays or {})

    def __contains__(self, path: str) -> bool:
        return path in self.arrays or (self.root is not None and (self.root / path).exists())

    def load(self, ref: VisualRef) -> np.ndarray:
        if ref.path in self.arrays:
            arr = self.arrays[ref.path]
        else:
            if self.root is None:
                raise ValidationError(f"no array or root directory for visual {ref.path}")
            path = self.root / ref.path
            if not path.exists():
                raise ValidationError(f"visual file {path} not found")
            if path.suffix == ".npy":
                arr = np.load(path)
            else:
                arr = np.asarray(Image.open(path).convert("RGB"))
        expected = 3 if ref.kind == "image" else 4
        if arr.ndim != expected:
            raise ValidationError(f"{ref.path}: expected a {expected}-D {ref.kind} array, got shape {arr.shape}")
        return arr

    def save_all(self, root: str | Path) -> None:
        root = Path(root)
        for rel, arr in sorted(self.arrays.items()):
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            if path.suffix == ".npy":
                np.save(path, arr)
            else:
                Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
