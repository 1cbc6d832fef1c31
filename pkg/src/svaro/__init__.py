"""Spatially varying autoregressive-order regression for voxel time series."""

from .lattice import LatticeGraph, build_lattice, color_for_sweep, cube_neighbor_pair_count, laplacian
from .model import Dataset, Hyperparams, ModelState, log_joint, log_likelihood
from .sampler import ChainOutput, SamplerConfig, fixed_order_baseline, run_chain

__all__ = [
    "LatticeGraph", "build_lattice", "color_for_sweep", "cube_neighbor_pair_count", "laplacian",
    "Dataset", "Hyperparams", "ModelState", "log_joint", "log_likelihood",
    "ChainOutput", "SamplerConfig", "fixed_order_baseline", "run_chain",
]
