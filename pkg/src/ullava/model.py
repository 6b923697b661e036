"""The full toy model: frozen encoder, visual projector, causal LM, pixel and region heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .encoders import ImageFeature, ToyVisionEncoder, VideoFeature, VisualProjector, project_visual
from .errors import ValidationError
from .heads import PixelHead, RegionHead
from .lm import LMConfig, LMOutput, TinyCausalLM, coarse_grained_loss_batch, generate
from .losses import LossBreakdown, LossConfig, fine_grained_loss
from .tokens import TokenLayout, Tokenizer, render_prompt, render_sample
from .types import ConversationSample, NormalizedBox

Feature = ImageFeature | VideoFeature

# Parameter namespaces used by freezing policies and checkpoints.
SCOPES = ("encoder", "projector", "lm", "pixel_head", "region_head")


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 16
    n_frames: int = 4
    d_vis: int = 32
    d_lm: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_sequence_length: int = 512
    context_window: int | None = None
    d_prompt: int = 32
    d_box: int = 32
    decoder_channels: int = 32
    upsample_channels: int = 16
    seed: int = 0

    @property
    def n_img_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prediction:
    text: str
    layout: TokenLayout
    mask_logits: list[torch.Tensor] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    boxes: list[NormalizedBox] = field(default_factory=list)


class ULlava(nn.Module):
    def __init__(self, config: ModelConfig, tokenizer: Tokenizer):
        super().__init__()
        if tokenizer.table.n_img_patches != config.n_img_patches or tokenizer.table.n_frames != config.n_frames:
            raise ValidationError(
                f"tokenizer expects {tokenizer.table.n_img_patches} patches/{tokenizer.table.n_frames} frames, "
                f"model gives {config.n_img_patches}/{config.n_frames}"
            )
        self.config = config
        self.tokenizer = tokenizer
        torch.manual_seed(config.seed)
        self.encoder = ToyVisionEncoder(config.image_size, config.patch_size, config.d_vis, seed=config.seed)
        self.projector = VisualProjector(config.d_vis, config.d_lm)
        self.lm = TinyCausalLM(
            LMConfig(
                vocab_size=tokenizer.vocab_size,
                d_lm=config.d_lm,
                n_layers=config.n_layers,
                n_heads=config.n_heads,
                context_window=config.context_window,
                max_sequence_length=config.max_sequence_length,
                video_token_ids=tokenizer.table.video_ids,
            )
        )
        self.pixel_head = PixelHead(
            config.d_lm, config.d_vis, config.patch_size, config.d_prompt, config.decoder_channels, config.upsample_channels
        )
        self.region_head = RegionHead(config.d_lm, config.d_box)

    @classmethod
    def for_samples(cls, config: ModelConfig, samples: Sequence[ConversationSample], extra_words=()) -> "ULlava":
        tok = Tokenizer.from_samples(samples, extra_words, n_img_patches=config.n_img_patches, n_frames=config.n_frames)
        return cls(config, tok)

    def n_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad or not trainable_only)

    @property
    def dtype(self) -> torch.dtype:
        return self.projector.linear.weight.dtype

    # -- visual path -------------------------------------------------------------------------

    def encode(self, pixels, kind: str) -> Feature:
        if kind == "image":
            return self.encoder.encode_image(pixels)
        return self.encoder.encode_video(pixels, self.config.n_frames)

    def visual_rows(self, feature: Feature) -> torch.Tensor:
        return project_visual(feature, self.projector)

    @staticmethod
    def image_feature(feature: Feature) -> ImageFeature:
        return feature.as_image_feature() if isinstance(feature, VideoFeature) else feature

    # -- training path -----------------------------------------------------------------------

    def render(self, sample: ConversationSample, token_limit: int | None = None) -> TokenLayout:
        return render_sample(sample, self.tokenizer, token_limit)

    def forward_batch(self, layouts: Sequence[TokenLayout], features: Sequence[Feature | None]):
        """Right-padded batched LM pass. Returns (output, ids, loss_mask)."""
        length = max(len(l) for l in layouts)
        b = len(layouts)
        ids = torch.full((b, length), self.tokenizer.pad_id, dtype=torch.long)
        loss_mask = torch.zeros((b, length), dtype=torch.bool)
        vis_mask = torch.zeros((b, length), dtype=torch.bool)
        rows = []
        for i, (lay, feat) in enumerate(zip(layouts, features)):
            ids[i, : len(lay)] = torch.tensor(lay.token_ids)
            loss_mask[i, : len(lay)] = torch.tensor(lay.loss_mask)
            if lay.visual_span is not None:
                if feat is None:
                    raise ValidationError("layout has a visual span but no visual feature was given")
                start, n = lay.visual_span
                vis_mask[i, start : start + n] = True
                rows.append(self.visual_rows(feat))
        visual_rows = torch.cat(rows) if rows else None
        return self.lm(ids, vis_mask, visual_rows), ids, loss_mask

    def sample_losses(
        self,
        samples: Sequence[ConversationSample],
        layouts: Sequence[TokenLayout],
        features: Sequence[Feature | None],
        loss_cfg: LossConfig = LossConfig(),
    ) -> list[LossBreakdown]:
        out, ids, loss_mask = self.forward_batch(layouts, features)
        l_cgl = coarse_grained_loss_batch(out.logits, ids, loss_mask)
        hidden = out.hidden_states

        seg_rows, seg_owner, loc_rows, loc_owner = [], [], [], []
        for i, lay in enumerate(layouts):
            seg_rows.extend(hidden[i, p] for p in lay.seg_positions)
            seg_owner.extend([i] * len(lay.seg_positions))
            loc_rows.extend(hidden[i, p] for p in lay.loc_positions)
            loc_owner.extend([i] * len(lay.loc_positions))

        mask_logits: list[list[torch.Tensor]] = [[] for _ in layouts]
        if seg_rows:
            feats = []
            for i in seg_owner:
                if features[i] is None:
                    raise ValidationError(f"sample {samples[i].id} has <SEG> but no visual input")
                feats.append(self.image_feature(features[i]).patch_embeddings)
            grid = self.encoder.grid_shape
            logits = self.pixel_head(torch.stack(seg_rows), torch.stack(feats).to(hidden.dtype), grid)
            for i, lg in zip(seg_owner, logits):
                mask_logits[i].append(lg)
        boxes: list[list[torch.Tensor]] = [[] for _ in layouts]
        if loc_rows:
            for i, bx in zip(loc_owner, self.region_head(torch.stack(loc_rows))):
                boxes[i].append(bx)

        results = []
        for i, s in enumerate(samples):
            mask_pair = box_pair = None
            if mask_logits[i]:
                if len(mask_logits[i]) != len(s.target_masks):
                    raise ValidationError(f"sample {s.id}: {len(mask_logits[i])} <SEG> vs {len(s.target_masks)} masks")
                target = torch.from_numpy(np.stack(s.target_masks)).to(hidden.dtype)
                mask_pair = (torch.stack(mask_logits[i]), target)
            if boxes[i]:
                if len(boxes[i]) != len(s.target_boxes):
                    raise ValidationError(f"sample {s.id}: {len(boxes[i])} <LOC> vs {len(s.target_boxes)} boxes")
                target = torch.tensor([b.as_tuple() for b in s.target_boxes], dtype=hidden.dtype)
                box_pair = (torch.stack(boxes[i]), target)
            results.append(fine_grained_loss(l_cgl[i], mask_pair, box_pair, loss_cfg))
        return results

    # -- inference path ----------------------------------------------------------------------

    @torch.no_grad()
    def predict(
        self,
        user_text: str,
        pixels=None,
        kind: str | None = None,
        max_new_tokens: int = 32,
        feature: Feature | None = None,
    ) -> Prediction:
        """Greedy answer; decode a mask per generated <SEG> and a box per generated <LOC>."""
        if pixels is not None and feature is None:
            feature = self.encode(pixels, kind or "image")
        if feature is not None and kind is None:
            kind = "video" if isinstance(feature, VideoFeature) else "image"
        prompt = render_prompt(user_text, kind if feature is not None else None, self.tokenizer)
        rows = self.visual_rows(feature) if feature is not None else None
        layout = generate(self.lm, prompt, self.tokenizer, max_new_tokens, rows)
        new_ids = layout.token_ids[len(prompt) :]
        if new_ids and new_ids[-1] == self.tokenizer.eos_id:
            new_ids = new_ids[:-1]
        pred = Prediction(text=self.tokenizer.decode(new_ids), layout=layout)
        if not layout.seg_positions and not layout.loc_positions:
            return pred
        out: LMOutput = self.lm.forward_layout(layout, rows)
        if layout.seg_positions and feature is not None:
            img = self.image_feature(feature)
            for p in layout.seg_positions:
                lg = self.pixel_head.predict_mask_logits(out.hidden_states[p], img)
                pred.mask_logits.append(lg)
                pred.masks.append((lg > 0).cpu().numpy())
        for p in layout.loc_positions:
            pred.boxes.append(self.region_head.predict_box(out.hidden_states[p]))
        return pred
