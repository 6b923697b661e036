"""Task heads: pixel path (projector + promptable mask decoder) and region path
(projector + MLP location decoder)."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import ImageFeature
from .errors import DimMismatch
from .types import NormalizedBox


def mlp(widths: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def linear_widths(seq: nn.Sequential) -> list[tuple[int, int]]:
    return [(m.in_features, m.out_features) for m in seq if isinstance(m, nn.Linear)]


class ToyMaskDecoder(nn.Module):
    """Promptable decoder: (patch features, prompt embedding) -> per-pixel logits.

    The prompt is added to every patch embedding after a linear map; a conv and two
    stride-``p`` transposed convs upsample to pixel resolution. As in SAM, the final
    logits are a dot product between a prompt-derived vector and the upsampled
    embedding, so a zero prompt with zero biases yields a constant map.
    """

    def __init__(self, d_vis: int, d_prompt: int, patch_size: int, channels: int = 32, up_channels: int = 16):
        super().__init__()
        self.d_prompt = d_prompt
        self.patch_size = patch_size
        s1 = 4 if patch_size % 4 == 0 else 1
        s2 = patch_size // s1
        self.feat_proj = nn.Linear(d_vis, channels)
        self.prompt_proj = nn.Linear(d_prompt, channels)
        self.mix = nn.Conv2d(channels, channels, 3, padding=1)
        self.up1 = nn.ConvTranspose2d(channels, channels, s1, stride=s1)
        self.up2 = nn.ConvTranspose2d(channels, up_channels, s2, stride=s2)
        self.hyper = mlp([d_prompt, d_prompt, up_channels])
        self.out_bias = nn.Parameter(torch.zeros(()))

    def forward(self, features: torch.Tensor, grid: tuple[int, int], prompts: torch.Tensor) -> torch.Tensor:
        """``features`` [n, P, d_vis] and ``prompts`` [n, d_prompt] -> logits [n, H, W]."""
        n = features.shape[0]
        r, c = grid
        x = self.feat_proj(features) + self.prompt_proj(prompts)[:, None, :]
        x = x.transpose(1, 2).reshape(n, -1, r, c)
        x = F.gelu(self.mix(x))
        x = F.gelu(self.up1(x))
        x = self.up2(x)  # [n, up, H, W]
        w = self.hyper(prompts)  # [n, up]
        return torch.einsum("nc,nchw->nhw", w, x) + self.out_bias


class PixelHead(nn.Module):
    def __init__(self, d_lm: int, d_vis: int, patch_size: int, d_prompt: int = 32, channels: int = 32, up_channels: int = 16):
        super().__init__()
        self.projector = mlp([d_lm, d_lm, d_prompt])
        self.mask_decoder = ToyMaskDecoder(d_vis, d_prompt, patch_size, channels, up_channels)

    def forward(self, seg_states: torch.Tensor, features: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        if seg_states.shape[-1] != self.projector[0].in_features:
            raise DimMismatch(f"seg state width {seg_states.shape[-1]} != {self.projector[0].in_features}")
        if features.shape[-1] != self.mask_decoder.feat_proj.in_features:
            raise DimMismatch(f"feature width {features.shape[-1]} != {self.mask_decoder.feat_proj.in_features}")
        return self.mask_decoder(features, grid, self.projector(seg_states))

    def predict_mask_logits(self, seg_state: torch.Tensor, image_feature: ImageFeature) -> torch.Tensor:
        """Logits [H, W] for one <SEG> hidden state over one image."""
        feats = image_feature.patch_embeddings.to(seg_state.dtype)[None]
        return self.forward(seg_state[None], feats, image_feature.grid_shape)[0]


def sorted_box(raw: torch.Tensor) -> torch.Tensor:
    """Sigmoid-squash raw [..., 4] outputs and order each axis so x1<=x2, y1<=y2."""
    p = raw.sigmoid()
    xa, ya, xb, yb = p.unbind(-1)
    return torch.stack([torch.minimum(xa, xb), torch.minimum(ya, yb), torch.maximum(xa, xb), torch.maximum(ya, yb)], -1)


class RegionHead(nn.Module):
    def __init__(self, d_lm: int, d_box: int = 32):
        super().__init__()
        self.projector = mlp([d_lm, d_lm, d_box])
        self.decoder = mlp([d_box, d_box, d_box // 2, 4])

    def raw(self, loc_states: torch.Tensor) -> torch.Tensor:
        if loc_states.shape[-1] != self.projector[0].in_features:
            raise DimMismatch(f"loc state width {loc_states.shape[-1]} != {self.projector[0].in_features}")
        return self.decoder(self.projector(loc_states))

    def forward(self, loc_states: torch.Tensor) -> torch.Tensor:
        """Corner boxes [..., 4] in [0, 1], differentiable almost everywhere."""
        return sorted_box(self.raw(loc_states))

    def predict_box(self, loc_state: torch.Tensor) -> NormalizedBox:
        with torch.no_grad():
            return NormalizedBox(*(float(v) for v in self.forward(loc_state)))
