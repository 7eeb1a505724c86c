"""Structured channel pruning with reversible, nested capacity levels.

A trained CNN is pruned in steps; every step stores the removed slices so
the network can later be grown back level by level, with the smaller
model embedded bit-for-bit in each larger one.
"""

from .checkpoint import Checkpoint
from .data import SynthDataset, make_synth
from .depgraph import CouplingEntry, DependencyGroup, apply_index_drop, build_groups
from .elastic import (
    FreezeMask,
    LevelStack,
    PruneRecord,
    cost_report,
    extract_core,
    hard_prune,
    iterative_pipeline,
    rebuild,
    rebuild_levels,
    soft_prune,
)
from .errors import DataError, DivergenceError, ElasticError, GraphError, PruneError, ShapeError, TapeError
from .graph import ModelGraph, count_params, forward, model_size_bytes
from .importance import ImportanceVector, rank_for_drop, score_groups
from .tensor import Tape, Tensor
from .trainer import TrainConfig, cosine_lr, evaluate, fit
from .zoo import ZOO, ArchSpec, build

__version__ = "0.1.0"
