"""Special-token vocabulary and rendering of conversations into token layouts.

Layout of a rendered sample::

    [visual span] <user> ...user text... <assistant> ...answer... </s> <user> ...

The visual span (``<img_beg> <img_patch>*N </img_end>`` or the video variant with
``N + T`` patch tokens) always comes first. The LM loss applies to assistant
content and its closing ``</s>`` only.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import SequenceTooLong, UnknownPlaceholder, ValidationError
from .types import ConversationSample, Turn

PAD, UNK, EOS, USER, ASSISTANT = "<pad>", "<unk>", "</s>", "<user>", "<assistant>"
BASE_SPECIALS = (PAD, UNK, EOS, USER, ASSISTANT)

# Column order of the modality/task table: image, video, tag, region, pixel.
SPECIAL_TOKENS = (
    "<img_beg>",
    "<img_patch>",
    "</img_end>",
    "<vid_beg>",
    "<vid_patch>",
    "</vid_end>",
    "<tag>",
    "</tag>",
    "<LOC>",
    "<SEG>",
)

VISUAL_PLACEHOLDERS = {"<image>": "image", "<video>": "video"}

_TOKEN_RE = re.compile(r"</?[A-Za-z_]+>|\w+|[^\w\s]")
_ANGLE_RE = re.compile(r"</?[A-Za-z_]+>")


@dataclass(frozen=True)
class SpecialTokenTable:
    """Ids of the special tokens appended after a base vocabulary of ``base_size``."""

    base_size: int
    n_img_patches: int = 256
    n_frames: int = 8

    def __post_init__(self):
        if self.n_img_patches < 1 or self.n_frames < 0:
            raise ValueError("n_img_patches must be >= 1 and n_frames >= 0")

    def id_of(self, token: str) -> int:
        return self.base_size + SPECIAL_TOKENS.index(token)

    img_beg = property(lambda self: self.base_size + 0)
    img_patch = property(lambda self: self.base_size + 1)
    img_end = property(lambda self: self.base_size + 2)
    vid_beg = property(lambda self: self.base_size + 3)
    vid_patch = property(lambda self: self.base_size + 4)
    vid_end = property(lambda self: self.base_size + 5)
    tag_open = property(lambda self: self.base_size + 6)
    tag_close = property(lambda self: self.base_size + 7)
    loc = property(lambda self: self.base_size + 8)
    seg = property(lambda self: self.base_size + 9)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(range(self.base_size, self.base_size + len(SPECIAL_TOKENS)))

    @property
    def video_ids(self) -> tuple[int, int, int]:
        return (self.vid_beg, self.vid_patch, self.vid_end)

    @property
    def n_video_patches(self) -> int:
        return self.n_img_patches + self.n_frames

    def n_patches(self, kind: str) -> int:
        return self.n_img_patches if kind == "image" else self.n_video_patches

    def render_image_span(self) -> list[int]:
        return [self.img_beg] + [self.img_patch] * self.n_img_patches + [self.img_end]

    def render_video_span(self) -> list[int]:
        return [self.vid_beg] + [self.vid_patch] * self.n_video_patches + [self.vid_end]

    def render_span(self, kind: str) -> list[int]:
        return self.render_image_span() if kind == "image" else self.render_video_span()


class Tokenizer:
    """Lower-casing word/punctuation tokenizer over a fixed vocabulary.

    Token ids: base specials, then ``words``, then the modality/task specials.
    """

    def __init__(self, words: Iterable[str], n_img_patches: int = 256, n_frames: int = 8):
        base = list(BASE_SPECIALS)
        seen = set(base) | set(SPECIAL_TOKENS)
        for w in words:
            w = w.lower()
            if w in seen:
                continue
            if _TOKEN_RE.fullmatch(w) is None:
                raise ValueError(f"vocabulary entry {w!r} is not a single token")
            seen.add(w)
            base.append(w)
        self.tokens: list[str] = base + list(SPECIAL_TOKENS)
        self.table = SpecialTokenTable(len(base), n_img_patches, n_frames)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_texts(cls, texts: Iterable[str], **kwargs) -> "Tokenizer":
        words: list[str] = []
        for text in texts:
            for piece in _TOKEN_RE.findall(text):
                if not _ANGLE_RE.fullmatch(piece):
                    words.append(piece.lower())
        return cls(sorted(set(words)), **kwargs)

    @classmethod
    def from_samples(cls, samples: Iterable[ConversationSample], extra: Iterable[str] = (), **kwargs):
        texts = [t.text for s in samples for t in s.turns]
        return cls.from_texts(texts + list(extra), **kwargs)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> list[str]:
        return self.tokens[len(BASE_SPECIALS) : self.table.base_size]

    def id(self, token: str) -> int:
        return self._index[token]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    def encode(self, text: str) -> list[int]:
        ids = []
        for piece in _TOKEN_RE.findall(text):
            if _ANGLE_RE.fullmatch(piece):
                if piece not in self._index:
                    raise UnknownPlaceholder(f"unsubstituted placeholder {piece} in {text!r}")
                ids.append(self._index[piece])
            else:
                ids.append(self._index.get(piece.lower(), self._index[UNK]))
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def save_vocab(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load_vocab(cls, path: str | Path, **kwargs) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_token_list(lines, **kwargs)

    @classmethod
    def from_token_list(cls, tokens: Sequence[str], **kwargs) -> "Tokenizer":
        tokens = list(tokens)
        n_base = len(BASE_SPECIALS)
        if tuple(tokens[:n_base]) != BASE_SPECIALS or tuple(tokens[-len(SPECIAL_TOKENS) :]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary does not follow the fixed special-token order")
        return cls(tokens[n_base : -len(SPECIAL_TOKENS)], **kwargs)


@dataclass(frozen=True)
class TokenLayout:
    token_ids: tuple[int, ...]
    visual_span: tuple[int, int] | None
    visual_kind: str | None
    seg_positions: tuple[int, ...]
    loc_positions: tuple[int, ...]
    loss_mask: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.token_ids)

    def visual_positions(self) -> range:
        if self.visual_span is None:
            return range(0)
        start, length = self.visual_span
        return range(start, start + length)


def _strip_visual_placeholders(turns: Sequence[Turn]) -> tuple[list[Turn], list[str]]:
    found: list[str] = []
    out = []
    for t in turns:
        text = t.text
        for ph, kind in VISUAL_PLACEHOLDERS.items():
            n = text.count(ph)
            if n and t.role != "user":
                raise ValidationError(f"visual placeholder {ph} outside a user turn")
            found.extend([kind] * n)
            text = text.replace(ph, " ")
        out.append(Turn(t.role, " ".join(text.split())))
    return out, found


def render_turns(
    turns: Sequence[Turn],
    visual_kind: str | None,
    tokenizer: Tokenizer,
    token_limit: int | None = None,
    add_generation_prompt: bool = False,
) -> TokenLayout:
    """Render turns (placeholders already stripped) after an optional visual span."""
    if not turns:
        raise ValidationError("a sample needs at least one turn")
    table = tokenizer.table
    ids: list[int] = []
    loss: list[bool] = []
    span = None
    if visual_kind is not None:
        vis = table.render_span(visual_kind)
        span = (1, len(vis) - 2)
        ids.extend(vis)
        loss.extend([False] * len(vis))
    role_id = {"user": tokenizer.id(USER), "assistant": tokenizer.id(ASSISTANT)}
    task_ids = {table.seg, table.loc}
    for i, turn in enumerate(turns):
        expected = "user" if i % 2 == 0 else "assistant"
        if turn.role != expected:
            raise ValidationError(f"turn {i} should be a {expected} turn, got {turn.role}")
        content = tokenizer.encode(turn.text)
        if any(c in table.video_ids or c in (table.img_beg, table.img_patch, table.img_end) for c in content):
            raise ValidationError("visual special tokens may not appear in turn text")
        if turn.role == "user" and task_ids.intersection(content):
            raise ValidationError("<SEG>/<LOC> may only appear in assistant turns")
        ids.append(role_id[turn.role])
        loss.append(False)
        ids.extend(content)
        if turn.role == "assistant":
            ids.append(tokenizer.eos_id)
            loss.extend([True] * (len(content) + 1))
        else:
            loss.extend([False] * len(content))
    if add_generation_prompt:
        if turns[-1].role != "user":
            raise ValidationError("generation prompt must end with a user turn")
        ids.append(role_id["assistant"])
        loss.append(False)
    if token_limit is not None and len(ids) > token_limit:
        raise SequenceTooLong(f"sequence of {len(ids)} tokens exceeds limit {token_limit}")
    return TokenLayout(
        token_ids=tuple(ids),
        visual_span=span,
        visual_kind=visual_kind,
        seg_positions=tuple(i for i, t in enumerate(ids) if t == table.seg),
        loc_positions=tuple(i for i, t in enumerate(ids) if t == table.loc),
        loss_mask=tuple(loss),
    )


def _visual_kind_for(turns: Sequence[Turn], visual_kind: str | None) -> tuple[list[Turn], str | None]:
    turns, found = _strip_visual_placeholders(turns)
    if len(found) > 1:
        raise ValidationError("only one visual input per sample is supported")
    if found:
        if visual_kind is None:
            raise ValidationError(f"prompt references <{found[0]}> but no visual input was given")
        if found[0] != visual_kind:
            raise ValidationError(f"prompt references <{found[0]}> but the visual input is a {visual_kind}")
    return turns, visual_kind


def render_sample(
    sample: ConversationSample, tokenizer: Tokenizer, token_limit: int | None = None
) -> TokenLayout:
    kind = sample.visual.kind if sample.visual is not None else None
    turns, kind = _visual_kind_for(sample.turns, kind)
    return render_turns(turns, kind, tokenizer, token_limit)


def render_prompt(
    user_text: str, visual_kind: str | None, tokenizer: Tokenizer, token_limit: int | None = None
) -> TokenLayout:
    """Single user turn followed by the assistant role token, ready for generation."""
    turns, kind = _visual_kind_for([Turn("user", user_text)], visual_kind)
    return render_turns(turns, kind, tokenizer, token_limit, add_generation_prompt=True)


def decode_layout(layout: TokenLayout, tokenizer: Tokenizer) -> tuple[list[Turn], str | None]:
    """Recover turns and visual kind from rendered ids (inverse of ``render_turns``)."""
    ids = list(layout.token_ids)
    table = tokenizer.table
    kind = None
    if ids and ids[0] in (table.img_beg, table.vid_beg):
        kind = "image" if ids[0] == table.img_beg else "video"
        ids = ids[table.n_patches(kind) + 2 :]
    user, assistant = tokenizer.id(USER), tokenizer.id(ASSISTANT)
    turns: list[Turn] = []
    role, buf = None, []
    for t in ids + [None]:
        if t in (user, assistant, None):
            if role is not None:
                if role == "assistant" and buf and buf[-1] == tokenizer.eos_id:
                    buf = buf[:-1]
                turns.append(Turn(role, tokenizer.decode(buf)))
            role, buf = ("user" if t == user else "assistant"), []
        else:
            buf.append(t)
    return turns, kind
