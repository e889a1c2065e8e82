"""Sparse adapters trained by connection sensitivity, and overlap-weighted merging."""

from ._accel import backend_name
from .errors import (
    BadMagicError,
    DimensionError,
    FormatError,
    InputError,
    NumericError,
    SparseMergeError,
    TrainingError,
    VersionError,
)
from .merging import MergeSpec, apply_merge, merge, merge_sparse
from .model import Adapter, LoraAdapter, Model, ModelConfig, TaskVector, build_model
from .numerics import Rng
from .saliency import SparseMask
from .trainer import TrainConfig, train_full, train_lora, train_multitask, train_sparse

__version__ = "0.1.0"
