"""Tree-structured Schrödinger bridges and entropic barycentres by iterative Markovian fitting."""

from .bridge_matching import EdgeTrainer, TrainingParams, bm_loss, bm_target, train_edge
from .config import ExperimentConfig
from .data import MarginalSource, load_csv_marginal, sample_marginal
from .drift_net import Architecture, DriftNet, OptimState, grad_step
from .imf import ImfState, init_coupling, run_imf
from .metrics import bw2_squared, bw2_uvp, l2_uvp, sinkhorn_divergence
from .oracles import (
    GaussianSpec,
    gaussian_fixed_point_barycentre,
    gaussian_ot_map,
    grid_entropic_barycentre,
    grid_entropic_coupling_1d,
)
from .reference import build_precision, conditional_given_observed, sample_brownian_bridge, sample_reciprocal
from .simulation import CouplingSamples, euler_maruyama_edge, generate_coupling, simulate_tree
from .tree import Tree, star_tree, traversal_from, validate_tree

__all__ = [
    "Architecture",
    "CouplingSamples",
    "DriftNet",
    "EdgeTrainer",
    "ExperimentConfig",
    "GaussianSpec",
    "ImfState",
    "MarginalSource",
    "OptimState",
    "TrainingParams",
    "Tree",
    "bm_loss",
    "bm_target",
    "build_precision",
    "bw2_squared",
    "bw2_uvp",
    "conditional_given_observed",
    "euler_maruyama_edge",
    "gaussian_fixed_point_barycentre",
    "gaussian_ot_map",
    "generate_coupling",
    "grad_step",
    "grid_entropic_barycentre",
    "grid_entropic_coupling_1d",
    "init_coupling",
    "l2_uvp",
    "load_csv_marginal",
    "run_imf",
    "sample_brownian_bridge",
    "sample_marginal",
    "sample_reciprocal",
    "simulate_tree",
    "sinkhorn_divergence",
    "star_tree",
    "traversal_from",
    "train_edge",
    "validate_tree",
]
