"""Minimal numpy reverse-mode engine: tensors, layers, Adam, checkpoints."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .params import Adam, ParamStore, adam_step
from .tensor import GraphError, Tensor

__all__ = [
    "ops", "Tensor", "GraphError", "ParamStore", "Adam", "adam_step",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
