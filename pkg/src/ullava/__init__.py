"""Toy-scale unified multimodal assistant: captioning, referring segmentation and grounding."""

from .errors import UllavaError, ValidationError
from .losses import LossConfig, fine_grained_loss
from .model import ModelConfig, Prediction, ULlava
from .tokens import SpecialTokenTable, Tokenizer, render_sample
from .trainer import StageConfig, load_checkpoint, save_checkpoint, train_stage1, train_stage2
from .types import ConversationSample, NormalizedBox, Turn, VisualRef

__version__ = "0.1.0"

__all__ = [
    "ConversationSample",
    "LossConfig",
    "ModelConfig",
    "NormalizedBox",
    "Prediction",
    "SpecialTokenTable",
    "StageConfig",
    "Tokenizer",
    "Turn",
    "ULlava",
    "UllavaError",
    "ValidationError",
    "VisualRef",
    "fine_grained_loss",
    "load_checkpoint",
    "render_sample",
    "save_checkpoint",
    "train_stage1",
    "train_stage2",
]
