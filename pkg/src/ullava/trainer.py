"""Stage I (visual alignment) and Stage II (joint instruction tuning) training, and checkpoints."""

from __future__ import annotations

import io
import logging
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .data.visuals import VisualStore
from .encoders import ImageFeature, VideoFeature
from .errors import BadCorpus, CorruptCheckpoint, ValidationError, VersionMismatch
from .losses import LossConfig, mean_breakdown
from .model import ModelConfig, ULlava
from .tokens import TokenLayout, Tokenizer
from .types import CAPTION_TASKS, ConversationSample, Turn

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ullava-checkpoint"
CHECKPOINT_VERSION = 1

STAGE_DEFAULTS = {
    # Text-only language modelling that turns the random toy LM into a "pretrained" one.
    "LM": dict(learning_rate=3e-3, batch_size=32, token_limit=512, trainable_scopes=("lm",)),
    "I": dict(learning_rate=2e-3, batch_size=48, token_limit=1024, trainable_scopes=("projector",)),
    "II": dict(
        learning_rate=2e-5,
        batch_size=16,
        token_limit=512,
        trainable_scopes=("projector", "lm", "pixel_head", "region_head"),
    ),
}


@dataclass(frozen=True)
class StageConfig:
    stage: str
    learning_rate: float
    batch_size: int
    token_limit: int
    trainable_scopes: tuple[str, ...]
    max_steps: int = 100
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")
        object.__setattr__(self, "trainable_scopes", tuple(self.trainable_scopes))

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "StageConfig":
        return cls(stage=stage, **{**STAGE_DEFAULTS[stage], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_scopes"] = list(self.trainable_scopes)
        return d


@dataclass
class TrainReport:
    stage: str
    seed: int
    history: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint_path: str | None = None

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prepared:
    sample: ConversationSample
    layout: TokenLayout
    feature: ImageFeature | VideoFeature | None


def in_scope(name: str, scopes: Sequence[str]) -> bool:
    return any(name == s or name.startswith(s + ".") for s in scopes)


def prepare(
    model: ULlava, samples: Sequence[ConversationSample], visuals: VisualStore | None, token_limit: int | None
) -> list[Prepared]:
    """Render layouts and run the frozen encoder once per sample."""
    out = []
    for s in samples:
        feature = None
        if s.visual is not None:
            if visuals is None:
                raise ValidationError(f"sample {s.id} references {s.visual.path} but no visual store was given")
            feature = model.encode(visuals.load(s.visual), s.visual.kind)
            if model.dtype != torch.float32:
                feature = _cast_feature(feature, model.dtype)
        out.append(Prepared(s, model.render(s, token_limit), feature))
    return out


def _cast_feature(f, dtype):
    if isinstance(f, VideoFeature):
        return VideoFeature(f.spatial_embeddings.to(dtype), f.temporal_embeddings.to(dtype), f.grid_shape)
    return ImageFeature(f.patch_embeddings.to(dtype), f.grid_shape)


class BatchSampler:
    """Whole corpus per step when it fits; otherwise uniform over task kinds, then samples."""

    def __init__(self, items: Sequence[Prepared], batch_size: int, seed: int):
        self.items = list(items)
        self.batch_size = batch_size
        self.rng = random.Random(seed)
        self.by_kind: dict[str, list[int]] = {}
        for i, p in enumerate(self.items):
            self.by_kind.setdefault(p.sample.task_kind, []).append(i)
        self.kinds = sorted(self.by_kind)

    def next(self) -> list[Prepared]:
        if self.batch_size >= len(self.items):
            return self.items
        picks = []
        for _ in range(self.batch_size):
            kind = self.rng.choice(self.kinds)
            picks.append(self.items[self.rng.choice(self.by_kind[kind])])
        return picks


def batch_loss(model: ULlava, batch: Sequence[Prepared], loss_cfg: LossConfig, coarse_only: bool = False):
    breakdowns = model.sample_losses(
        [p.sample for p in batch], [p.layout for p in batch], [p.feature for p in batch], loss_cfg
    )
    terms = [b.l_cgl if coarse_only else b.l_fgl for b in breakdowns]
    return torch.stack(terms).mean(), breakdowns


def run_stage(
    model: ULlava,
    prepared: Sequence[Prepared],
    cfg: StageConfig,
    loss_cfg: LossConfig = LossConfig(),
    coarse_only: bool = False,
    log_every: int = 50,
) -> TrainReport:
    torch.manual_seed(cfg.seed)
    previous = {n: p.requires_grad for n, p in model.named_parameters()}
    trainable = []
    for name, p in model.named_parameters():
        p.requires_grad_(in_scope(name, cfg.trainable_scopes))
        if p.requires_grad:
            trainable.append(p)
    if not trainable:
        raise ValidationError(f"no parameters match trainable scopes {cfg.trainable_scopes}")
    # Adam with zero gradient leaves a parameter bitwise unchanged, so only scoped params move.
    opt = torch.optim.AdamW(trainable, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sampler = BatchSampler(prepared, cfg.batch_size, cfg.seed)
    report = TrainReport(stage=cfg.stage, seed=cfg.seed)
    start = time.perf_counter()
    model.train()
    try:
        for step in range(cfg.max_steps):
            batch = sampler.next()
            loss, breakdowns = batch_loss(model, batch, loss_cfg, coarse_only)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            report.history.append(
                {
                    "step": step,
                    "loss": loss.item(),
                    "mean": mean_breakdown(breakdowns),
                    "branches": [b.branch for b in breakdowns],
                }
            )
            if log_every and step % log_every == 0:
                log.info("stage %s step %d loss %.4f", cfg.stage, step, loss.item())
    finally:
        model.eval()
        for name, p in model.named_parameters():
            p.requires_grad_(previous[name])
    report.wall_clock = time.perf_counter() - start
    return report


def train_stage1(
    model: ULlava,
    corpus: Sequence[ConversationSample],
    cfg: StageConfig,
    visuals: VisualStore | None = None,
    loss_cfg: LossConfig = LossConfig(),
) -> TrainReport:
    """Align visual features with the frozen LM using the coarse-grained loss only."""
    if cfg.stage != "I":
        raise ValidationError("train_stage1 needs a stage I config")
    bad = [s.id for s in corpus if s.task_kind not in CAPTION_TASKS]
    if bad:
        raise BadCorpus(f"stage I corpus must be captioning only; offending samples: {bad[:5]}")
    if not corpus:
        raise BadCorpus("empty stage I corpus")
    prepared = prepare(model, corpus, visuals, cfg.token_limit)
    return run_stage(model, prepared, cfg, loss_cfg, coarse_only=True)


def train_stage2(
    model: ULlava,
    corpus: Sequence[ConversationSample],
    cfg: StageConfig,
    visuals: VisualStore | None = None,
    loss_cfg: LossConfig = LossConfig(),
) -> TrainReport:
    """Joint tuning of LM and task heads under the fine-grained loss."""
    if cfg.stage != "II":
        raise ValidationError("train_stage2 needs a stage II config")
    if not corpus:
        raise BadCorpus("empty stage II corpus")
    for s in corpus:
        try:
            s.validate()
        except ValueError as e:
            raise ValidationError(str(e)) from e
    prepared = prepare(model, corpus, visuals, cfg.token_limit)
    return run_stage(model, prepared, cfg, loss_cfg)


def text_only(sample: ConversationSample) -> ConversationSample:
    turns = [Turn(t.role, t.text.replace("<image>", " ").replace("<video>", " ")) for t in sample.turns]
    return ConversationSample(sample.id, sample.task_kind, turns)


def pretrain_language_model(
    model: ULlava, corpus: Sequence[ConversationSample], cfg: StageConfig | None = None
) -> TrainReport:
    """Next-token training of the LM on the dialogue text alone, visual inputs dropped.

    Stands in for starting from a pretrained language model: the alignment stage
    trains only the projector, which cannot reshape an untrained LM's outputs.
    """
    cfg = cfg or StageConfig.for_stage("LM")
    if cfg.stage != "LM":
        raise ValidationError("pretrain_language_model needs an LM stage config")
    if not corpus:
        raise BadCorpus("empty language-model corpus")
    prepared = prepare(model, [text_only(s) for s in corpus], None, cfg.token_limit)
    return run_stage(model, prepared, cfg, coarse_only=True)


# -- checkpoints ----------------------------------------------------------------------------


def save_checkpoint(model: ULlava, path: str | Path, config_hash: str | None = None) -> Path:
    """Container: format tag, version, model config, vocabulary, config hash, state dict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "vocab": list(model.tokenizer.tokens),
        "config_hash": config_hash,
        "dtype": str(model.dtype).removeprefix("torch."),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> ULlava:
    path = Path(path)
    try:
        payload = torch.load(io.BytesIO(path.read_bytes()), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:  # noqa: BLE001 - any unpickling failure means a damaged file
        raise CorruptCheckpoint(f"{path}: cannot read checkpoint ({e})") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpoint(f"{path}: not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {payload.get('version')} != {CHECKPOINT_VERSION}")
    try:
        config = ModelConfig(**payload["model_config"])
        if expected_config is not None and config != expected_config:
            raise VersionMismatch(f"{path}: checkpoint model config {config} differs from expected {expected_config}")
        tok = Tokenizer.from_token_list(payload["vocab"], n_img_patches=config.n_img_patches, n_frames=config.n_frames)
        model = ULlava(config, tok)
        model.to(getattr(torch, payload.get("dtype", "float32")))
        model.load_state_dict(payload["state_dict"])
    except VersionMismatch:
        raise
    except (KeyError, TypeError, ValueError, RuntimeError) as e:
        raise CorruptCheckpoint(f"{path}: incomplete checkpoint ({e})") from e
    model.checkpoint_config_hash = payload.get("config_hash")
    model.eval()
    return model

