"""Deep Gaussian processes trained with a nested variational compression bound."""

from .deep import (AUTOENCODER, REGRESSION, DeepGpModel, deep_bound, deep_bound_minibatch, encode,
                   layer_penalties, predict, propagate_message)
from .kernels import KernelSpec, eq, linear
from .optim import LayerSpec, OptimizerConfig, initialize, maximize
from .parallel import ChunkPlan, map_reduce_bound, map_reduce_grad
from .params import finite_difference_check, pack, unpack, value_and_grad
from .psi import GaussianMessage, compute_psi, monte_carlo_psi
from .sparse import VariationalLayer, collapsed_bound, exact_gp_lml, svi_bound

__version__ = "0.1.0"

__all__ = [
    "AUTOENCODER", "REGRESSION", "ChunkPlan", "DeepGpModel", "GaussianMessage", "KernelSpec",
    "LayerSpec", "OptimizerConfig", "VariationalLayer", "collapsed_bound", "compute_psi",
    "deep_bound", "deep_bound_minibatch", "encode", "eq", "exact_gp_lml", "layer_penalties",
    "finite_difference_check", "initialize", "linear", "map_reduce_bound", "map_reduce_grad",
    "maximize", "monte_carlo_psi", "pack", "predict", "propagate_message", "svi_bound", "unpack", "value_and_grad",
]
