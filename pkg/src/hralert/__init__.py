"""Hyper-relational link prediction for network alert graphs."""

from ._kernels import BACKEND
from .graph import HyperRelGraph, SplitSpec, Statement, Vocab, build_graph
from .training import MODEL_KINDS, TrainConfig, train

__all__ = ["BACKEND", "HyperRelGraph", "MODEL_KINDS", "SplitSpec", "Statement", "TrainConfig",
           "Vocab", "build_graph", "train"]
__version__ = "0.1.0"
