"""Robust node classification on heterogeneous graphs with heterophily.

Structure learning (kNN graphs plus Gumbel-sigmoid edge refinement),
PPR-kernel class affinity and gated fusion, built on a small numpy autodiff.
"""

from .affinity import PprConfig, extended_affinity, hetero_affinity, ppr_kernel
from .graph import HeteroGraph, MetaRelation, generate_synthetic, load_graph, normalize_adjacency, save_graph
from .perturb import PerturbConfig, perturb_graph, robustness_sweep
from .presets import synthetic_config
from .tensor import Tape, Tensor, check_gradients
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "HeteroGraph",
    "MetaRelation",
    "PerturbConfig",
    "PprConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "check_gradients",
    "extended_affinity",
    "generate_synthetic",
    "hetero_affinity",
    "load_graph",
    "normalize_adjacency",
    "perturb_graph",
    "ppr_kernel",
    "robustness_sweep",
    "save_graph",
    "synthetic_config",
    "train",
]
