"""condlab: a desk-scale lab for multimodal conditional text generation.

A miniature decoder-only transformer trainable from scratch, three pluggable
conditioning mechanisms (prefix, per-layer key/value injection,
cross-attention) plus an unconditional control, modality dropout, captioning
metrics, and a deterministic synthetic image+title -> description dataset.
"""

__version__ = "0.1.0"

from .autograd import Tensor, backward, no_grad
from .conditioning import (
    CondMode,
    CondSpec,
    ConditioningBundle,
    SequenceBatch,
    apply_modality_dropout,
    build_inputs,
    build_prefix,
    make_pseudo_self_inputs,
)
from .model import GenerationConfig, ModelConfig, TransformerLM, generate, load_checkpoint, save_checkpoint
from .tokenizer import Vocab, decode, encode, load_vocab, save_vocab, train_bpe, vocab_hash
from .trainer import TrainConfig, TrainReport, lr_at, train
from .vision import Image, ImageProjector

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "CondMode",
    "CondSpec",
    "ConditioningBundle",
    "SequenceBatch",
    "apply_modality_dropout",
    "build_inputs",
    "build_prefix",
    "make_pseudo_self_inputs",
    "GenerationConfig",
    "ModelConfig",
    "TransformerLM",
    "generate",
    "load_checkpoint",
    "save_checkpoint",
    "Vocab",
    "decode",
    "encode",
    "load_vocab",
    "save_vocab",
    "train_bpe",
    "vocab_hash",
    "TrainConfig",
    "TrainReport",
    "lr_at",
    "train",
    "Image",
    "ImageProjector",
]
