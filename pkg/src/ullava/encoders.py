"""Frozen toy vision encoder, spatio-temporal video pooling and the visual projector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import BadShape, DimMismatch


@dataclass
class ImageFeature:
    patch_embeddings: torch.Tensor  # [n_img_patches, d_vis]
    grid_shape: tuple[int, int]

    @property
    def n_tokens(self) -> int:
        return self.patch_embeddings.shape[0]


@dataclass
class VideoFeature:
    spatial_embeddings: torch.Tensor  # [n_img_patches, d_vis], temporal mean
    temporal_embeddings: torch.Tensor  # [T, d_vis], per-frame spatial mean
    grid_shape: tuple[int, int]

    @property
    def n_tokens(self) -> int:
        return self.spatial_embeddings.shape[0] + self.temporal_embeddings.shape[0]

    def concatenated(self) -> torch.Tensor:
        return torch.cat([self.spatial_embeddings, self.temporal_embeddings], dim=0)

    def as_image_feature(self) -> ImageFeature:
        return ImageFeature(self.spatial_embeddings, self.grid_shape)


def _as_float_pixels(pixels) -> torch.Tensor:
    if isinstance(pixels, torch.Tensor):
        arr = pixels.detach().cpu().numpy()
    else:
        arr = np.asarray(pixels)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=torch.float32)


class ToyVisionEncoder(nn.Module):
    """Linear patch embedding plus a fixed position code, both frozen at construction.

    Stands in for a pretrained CLIP tower: same input/output contract, no training.
    """

    def __init__(self, image_size: int = 64, patch_size: int = 16, d_vis: int = 32, seed: int = 0):
        super().__init__()
        if image_size % patch_size:
            raise BadShape(f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.d_vis = d_vis
        g = torch.Generator().manual_seed(seed)
        fan_in = patch_size * patch_size * 3
        grid = image_size // patch_size
        self.register_buffer("weight", torch.randn(fan_in, d_vis, generator=g) / fan_in**0.5)
        self.register_buffer("position", 0.5 * torch.randn(grid * grid, d_vis, generator=g))

    @property
    def grid_shape(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def n_patches(self) -> int:
        r, c = self.grid_shape
        return r * c

    def _patchify(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[2] != 3:
            raise BadShape(f"expected an H×W×3 image, got shape {tuple(x.shape)}")
        h, w, _ = x.shape
        p = self.patch_size
        if h % p or w % p:
            raise BadShape(f"image {h}×{w} not divisible by patch size {p}")
        if (h // p, w // p) != self.grid_shape:
            raise BadShape(f"image {h}×{w} gives a {h // p}×{w // p} grid, encoder expects {self.grid_shape}")
        x = x.reshape(h // p, p, w // p, p, 3).permute(0, 2, 1, 3, 4)
        return x.reshape((h // p) * (w // p), p * p * 3)

    @torch.no_grad()
    def encode_image(self, pixels) -> ImageFeature:
        x = _as_float_pixels(pixels).to(self.weight.dtype)
        emb = self._patchify(x) @ self.weight + self.position
        return ImageFeature(emb, self.grid_shape)

    @torch.no_grad()
    def encode_video(self, frames, n_frames: int | None = None) -> VideoFeature:
        x = _as_float_pixels(frames).to(self.weight.dtype)
        if x.ndim != 4:
            raise BadShape(f"expected T×H×W×3 frames, got shape {tuple(x.shape)}")
        if n_frames is not None and x.shape[0] != n_frames:
            raise BadShape(f"expected {n_frames} frames, got {x.shape[0]}")
        per_frame = torch.stack([self.encode_image(f).patch_embeddings for f in x])  # [T, n, d]
        return VideoFeature(per_frame.mean(dim=0), per_frame.mean(dim=1), self.grid_shape)


class VisualProjector(nn.Module):
    def __init__(self, d_vis: int, d_lm: int):
        super().__init__()
        self.linear = nn.Linear(d_vis, d_lm, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(x)


def project_visual(feature: ImageFeature | VideoFeature, proj: VisualProjector) -> torch.Tensor:
    """Map encoder features to LM input embeddings, one row per visual patch token."""
    x = feature.concatenated() if isinstance(feature, VideoFeature) else feature.patch_embeddings
    if x.shape[-1] != proj.linear.in_features:
        raise DimMismatch(f"feature width {x.shape[-1]} != projector input {proj.linear.in_features}")
    return proj(x.to(proj.linear.weight.dtype))
