"""Hierarchical recurrent attention network for multi-turn response generation."""

from hran.corpus import Batch, Example, FilterRules, Vocab, build_vocab, encode_batch
from hran.model import HRAN, ModelConfig
from hran.training import TrainSchedule, fit

__all__ = [
    "Batch",
    "Example",
    "FilterRules",
    "HRAN",
    "ModelConfig",
    "TrainSchedule",
    "Vocab",
    "build_vocab",
    "encode_batch",
    "fit",
]

__version__ = "0.1.0"
