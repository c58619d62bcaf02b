"""Warped infinite Gaussian mixtures for clustering and density estimation.

The estimator classes are the front door:

>>> from warpmix import WarpedMixture
>>> model = WarpedMixture(n_iter=500, burn_in=100, random_state=0)

Lower-level pieces (kernels, the collapsed mixture state, the chain
driver, predictive densities, data utilities) live in the submodules.
"""

from .estimators import InfiniteGaussianMixture, LooKde, WarpedMixture
from .gp import KernelParams
from .latent_mixture import NiwPrior
from .sampler import ChainConfig, HmcConfig, run_chain

__version__ = "0.1.0"

__all__ = [
    "ChainConfig",
    "HmcConfig",
    "InfiniteGaussianMixture",
    "KernelParams",
    "LooKde",
    "NiwPrior",
    "WarpedMixture",
    "run_chain",
    "__version__",
]
