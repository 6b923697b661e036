"""Tiny causal transformer LM with visual-embedding injection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimMismatch, EmptyLossMask, IndexOutOfRange, SequenceTooLong
from .tokens import TokenLayout, Tokenizer


@dataclass
class LMConfig:
    vocab_size: int
    d_lm: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_window: int | None = None  # None: full attention over max_sequence_length
    max_sequence_length: int = 512
    video_token_ids: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.d_lm % self.n_heads:
            raise ValueError(f"d_lm={self.d_lm} not divisible by n_heads={self.n_heads}")
        self.video_token_ids = tuple(self.video_token_ids)

    @property
    def window(self) -> int:
        return self.context_window or self.max_sequence_length


@dataclass
class LMOutput:
    logits: torch.Tensor  # [L, V] or [B, L, V]
    hidden_states: torch.Tensor  # final layer, pre-head


class CausalSelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, l, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (t.view(b, l, h, d // h).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // h)
        att = att.masked_fill(~allowed[:, None], float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, l, d)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x, allowed):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.mlp(self.ln2(x))


class TinyCausalLM(nn.Module):
    def __init__(self, config: LMConfig):
        super().__init__()
        self.config = config
        d = config.d_lm
        self.tok_embed = nn.Embedding(config.vocab_size, d)
        # Video special tokens get their own table so alignment can train just these rows.
        self.video_embed = nn.Parameter(torch.zeros(len(config.video_token_ids), d))
        self.pos_embed = nn.Embedding(config.max_sequence_length, d)
        self.blocks = nn.ModuleList(Block(d, config.n_heads) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, config.vocab_size, bias=False)
        self.apply(self._init)
        nn.init.normal_(self.video_embed, std=0.02)
        self.register_buffer("_video_ids", torch.tensor(config.video_token_ids, dtype=torch.long), persistent=False)

    @staticmethod
    def _init(m):
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=0.02)
        if isinstance(m, nn.Linear) and m.bias is not None:
            nn.init.zeros_(m.bias)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        emb = self.tok_embed(ids)
        if len(self.config.video_token_ids):
            match = ids[..., None] == self._video_ids  # [..., 3]
            is_video = match.any(dim=-1)
            video = self.video_embed[match.to(torch.long).argmax(dim=-1)]
            emb = torch.where(is_video[..., None], video, emb)
        return emb

    def attention_mask(self, visual_mask: torch.Tensor) -> torch.Tensor:
        """[B, L, L] boolean: causal, limited to the context window, visual keys always visible."""
        l = visual_mask.shape[1]
        q = torch.arange(l)[:, None]
        k = torch.arange(l)[None, :]
        causal = k <= q
        in_window = (q - k) < self.config.window
        return causal & (in_window | visual_mask[:, None, :])

    def forward(
        self,
        ids: torch.Tensor,
        visual_mask: torch.Tensor | None = None,
        visual_rows: torch.Tensor | None = None,
    ) -> LMOutput:
        """Batched forward over right-padded ids ``[B, L]``.

        ``visual_rows`` holds one embedding per True entry of ``visual_mask``, in
        row-major order; they replace the token embeddings at those positions.
        """
        b, l = ids.shape
        if l > self.config.max_sequence_length:
            raise SequenceTooLong(f"sequence length {l} > max {self.config.max_sequence_length}")
        x = self.embed(ids)
        if visual_mask is None:
            visual_mask = torch.zeros_like(ids, dtype=torch.bool)
        n_vis = int(visual_mask.sum())
        if n_vis:
            if visual_rows is None or visual_rows.shape != (n_vis, self.config.d_lm):
                got = None if visual_rows is None else tuple(visual_rows.shape)
                raise DimMismatch(f"expected visual rows of shape {(n_vis, self.config.d_lm)}, got {got}")
            x = x.masked_scatter(visual_mask[..., None], visual_rows.to(x.dtype))
        x = x + self.pos_embed(torch.arange(l))
        allowed = self.attention_mask(visual_mask)
        for block in self.blocks:
            x = block(x, allowed)
        hidden = self.ln_f(x)
        return LMOutput(self.lm_head(hidden), hidden)

    def forward_layout(self, layout: TokenLayout, visual_embeds: torch.Tensor | None = None) -> LMOutput:
        ids = torch.tensor([layout.token_ids], dtype=torch.long)
        mask = torch.zeros_like(ids, dtype=torch.bool)
        if layout.visual_span is not None:
            start, length = layout.visual_span
            if visual_embeds is None or visual_embeds.shape[0] != length:
                got = None if visual_embeds is None else visual_embeds.shape[0]
                raise DimMismatch(f"layout has {length} visual positions, got {got} embeddings")
            mask[0, start : start + length] = True
        elif visual_embeds is not None:
            raise DimMismatch("visual embeddings given for a layout without a visual span")
        out = self.forward(ids, mask, visual_embeds)
        return LMOutput(out.logits[0], out.hidden_states[0])


def token_nll(logits: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    """Per-position NLL of ``ids[..., i]`` under ``logits[..., i-1, :]``; position 0 gets 0."""
    logp = logits[..., :-1, :].log_softmax(dim=-1)
    nll = -logp.gather(-1, ids[..., 1:, None]).squeeze(-1)
    return F.pad(nll, (1, 0))


def coarse_grained_loss(output: LMOutput, layout: TokenLayout) -> torch.Tensor:
    """Mean next-token NLL over the loss-masked positions of one layout."""
    mask = torch.tensor(layout.loss_mask, dtype=torch.bool)
    mask[0] = False
    if not mask.any():
        raise EmptyLossMask("layout has no loss-bearing positions")
    nll = token_nll(output.logits, torch.tensor(layout.token_ids, dtype=torch.long))
    return nll[mask].mean()


def coarse_grained_loss_batch(logits: torch.Tensor, ids: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Per-sample mean NLL ``[B]`` for right-padded batches."""
    loss_mask = loss_mask.clone()
    loss_mask[:, 0] = False
    counts = loss_mask.sum(dim=1)
    if (counts == 0).any():
        raise EmptyLossMask("a sample in the batch has no loss-bearing positions")
    nll = token_nll(logits, ids) * loss_mask
    return nll.sum(dim=1) / counts


def extract_task_states(output: LMOutput, layout: TokenLayout) -> tuple[torch.Tensor, torch.Tensor]:
    hidden = output.hidden_states
    n = hidden.shape[0]
    for p in (*layout.seg_positions, *layout.loc_positions):
        if not 0 <= p < n:
            raise IndexOutOfRange(f"position {p} outside sequence of length {n}")
    seg = hidden[list(layout.seg_positions)]
    loc = hidden[list(layout.loc_positions)]
    return seg, loc


@torch.no_grad()
def generate(
    lm: TinyCausalLM,
    prompt: TokenLayout,
    tokenizer: Tokenizer,
    max_new_tokens: int,
    visual_embeds: torch.Tensor | None = None,
) -> TokenLayout:
    """Greedy decoding until ``</s>`` or the token budget; no KV cache."""
    if len(prompt) + max_new_tokens > lm.config.max_sequence_length:
        raise SequenceTooLong(
            f"prompt of {len(prompt)} tokens + {max_new_tokens} new exceeds {lm.config.max_sequence_length}"
        )
    ids = list(prompt.token_ids)
    loss = list(prompt.loss_mask)
    for _ in range(max_new_tokens):
        layout = TokenLayout(tuple(ids), prompt.visual_span, prompt.visual_kind, (), (), tuple(loss))
        logits = lm.forward_layout(layout, visual_embeds).logits
        nxt = int(logits[-1].argmax())
        ids.append(nxt)
        loss.append(True)
        if nxt == tokenizer.eos_id:
            break
    table = tokenizer.table
    start = len(prompt)
    return TokenLayout(
        token_ids=tuple(ids),
        visual_span=prompt.visual_span,
        visual_kind=prompt.visual_kind,
        seg_positions=tuple(i for i in range(start, len(ids)) if ids[i] == table.seg),
        loc_positions=tuple(i for i in range(start, len(ids)) if ids[i] == table.loc),
        loss_mask=tuple(loss),
    )
