"""Sparse zeroth-order training of leaky integrate-and-fire networks."""

from . import data, distributions, harness, rng, snn, thresholds, zo_surrogate
from .distributions import Laplace, Normal, Tabulated, Uniform
from .snn import LifConfig, LifNetwork, LocalZO, SparseGrad, Surrogate
from .thresholds import expected_threshold
from .zo_surrogate import ZOConfig, derive_lambda, expected_surrogate, local_zo_grad

__version__ = "0.1.0"
