"""Estimator front end with a scikit-learn flavored surface.

Each estimator takes its settings in the constructor, learns everything
in ``fit``, and exposes fitted state through trailing-underscore
attributes.  Densities reported by ``score_samples`` are always in the
units of the data handed to ``fit``: when an estimator standardizes
internally, the transform Jacobian is folded back in.
"""

from __future__ import annotations

import inspect

import numpy as np

from . import data as data_mod
from . import evaluation, predictive
from .gp import KernelParams
from .latent_mixture import NiwPrior
from .sampler import ChainConfig, run_chain


class _ParamSurface:
    """get_params / set_params over the constructor signature."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"unknown parameter {name!r} for {type(self).__name__}"
                )
            setattr(self, name, value)
        return self

    def _check_fitted(self, attr: str):
        if not hasattr(self, attr):
            raise RuntimeError(f"{type(self).__name__} is not fitted yet")


def _as_matrix(y) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(y, dtype=float))
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError("expected a nonempty 2-D array of observations")
    return arr


def _standardize_or_identity(y: np.ndarray, standardize: bool):
    if standardize:
        ds, transform = data_mod.standardize(data_mod.Dataset(y))
        return ds.y, transform
    return y, None


class WarpedMixture(_ParamSurface):
    """Dirichlet process mixture fitted in a warped latent space.

    The observations are modeled as a smooth random map applied to
    latent coordinates that follow an infinite Gaussian mixture.  ``fit``
    runs the full chain (assignment scans plus Hamiltonian updates of the
    latent coordinates and kernel parameters) and keeps the thinned
    posterior samples.

    Parameters
    ----------
    latent_dim : int or None
        Latent dimension; ``None`` matches the observed dimension.
    n_iter, burn_in, thin : int
        Chain schedule.
    concentration : float
        New-cluster rate of the partition prior.
    prior : NiwPrior, optional
        Latent Gaussian-Wishart prior; defaults to the unit prior.
    init_params : KernelParams, optional
        Starting kernel parameters.
    param_prior_std : float or 3-tuple
        Prior widths on the log kernel parameters.
    single_cluster : bool
        Pin all points to one component (the warped single Gaussian).
    standardize : bool
        Standardize columns before fitting; scores fold the Jacobian back.
    m_inner : int
        Latent draws per posterior sample in ``score_samples``.
    point_estimate : {"max_joint", "last"}
        Which retained sample supplies ``labels_``.
    random_state : int, Generator, or None
        Seed for the chain and for predictive draws.

    Attributes
    ----------
    labels_ : ndarray of shape (n,)
        Point-estimate cluster assignments.
    n_clusters_ : int
    samples_ : list of PosteriorSample
    latent_ : ndarray of shape (n, latent_dim)
        Latent coordinates of the point-estimate sample.
    diagnostics_ : ChainDiagnostics
    transform_ : StandardizeTransform or None
    """

    def __init__(
        self,
        latent_dim: int | None = 2,
        n_iter: int = 5000,
        burn_in: int = 1000,
        thin: int = 5,
        concentration: float = 1.0,
        prior: NiwPrior | None = None,
        init_params: KernelParams | None = None,
        param_prior_std=1.0,
        single_cluster: bool = False,
        standardize: bool = True,
        m_inner: int = 1000,
        point_estimate: str = "max_joint",
        random_state=None,
    ):
        self.latent_dim = latent_dim
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.concentration = concentration
        self.prior = prior
        self.init_params = init_params
        self.param_prior_std = param_prior_std
        self.single_cluster = single_cluster
        self.standardize = standardize
        self.m_inner = m_inner
        self.point_estimate = point_estimate
        self.random_state = random_state

    def _chain_config(self) -> ChainConfig:
        kwargs = dict(
            latent_dim=self.latent_dim,
            prior=self.prior,
            concentration=self.concentration,
            param_prior_std=self.param_prior_std,
            n_iter=self.n_iter,
            burn_in=self.burn_in,
            thin=self.thin,
            single_cluster=self.single_cluster,
        )
        if self.init_params is not None:
            kwargs["init_params"] = self.init_params
        return ChainConfig(**kwargs)

    def fit(self, y):
        y = _as_matrix(y)
        self.config_ = self._chain_config()
        y_fit, self.transform_ = _standardize_or_identity(y, self.standardize)
        self.train_y_ = y_fit
        run = run_chain(y_fit, self.config_, seed=self.random_state)
        self.samples_ = run.samples
        self.diagnostics_ = run.diagnostics
        best = evaluation._point_labels(run.samples, self.point_estimate)
        self.labels_ = best
        self.n_clusters_ = int(np.unique(best).size)
        if self.point_estimate == "last":
            chosen = run.samples[-1]
        else:
            # max keeps the first maximum, matching the earliest-tie rule
            chosen = max(run.samples, key=lambda s: s.joint_log_prob)
        self.latent_ = np.array(chosen.x, copy=True)
        return self

    def score_samples(self, y) -> np.ndarray:
        """Posterior predictive log density of each row, original units."""
        self._check_fitted("samples_")
        pts = _as_matrix(y)
        jac = 0.0
        if self.transform_ is not None:
            pts = self.transform_.apply(pts)
            jac = self.transform_.log_jacobian
        out = predictive.predictive_log_density(
            pts,
            self.samples_,
            self.train_y_,
            prior=self.config_.prior,
            concentration=self.config_.concentration,
            m_inner=self.m_inner,
            rng=np.random.default_rng(_score_seed(self.random_state)),
        )
        return np.asarray(out) + jac

    def score(self, y) -> float:
        """Mean predictive log density over the rows of ``y``."""
        return float(np.mean(self.score_samples(y)))

    def density_grid(self, axes_spec) -> predictive.DensityGrid:
        """Predictive log density on a rectangular grid, original units.

        ``axes_spec`` is one (low, high, count) triple per observed
        dimension, expressed in the units of the training data.
        """
        self._check_fitted("samples_")
        spec = tuple((float(a), float(b), int(c)) for a, b, c in axes_spec)
        inner = spec
        jac = 0.0
        if self.transform_ is not None:
            mean, scale = self.transform_.mean, self.transform_.scale
            inner = tuple(
                ((a - mean[i]) / scale[i], (b - mean[i]) / scale[i], c)
                for i, (a, b, c) in enumerate(spec)
            )
            jac = self.transform_.log_jacobian
        grid = predictive.density_grid(
            self.samples_,
            self.train_y_,
            inner,
            prior=self.config_.prior,
            concentration=self.config_.concentration,
            m_inner=self.m_inner,
            rng=np.random.default_rng(_score_seed(self.random_state)),
        )
        return predictive.DensityGrid(
            axes=spec,
            log_density=grid.log_density + jac,
            sample_count=grid.sample_count,
        )


class InfiniteGaussianMixture(_ParamSurface):
    """Dirichlet process Gaussian mixture fitted directly in data space.

    The fixed-identity-map special case of :class:`WarpedMixture`: only
    cluster assignments are sampled; predictive densities come from the
    closed-form conjugate mixture.
    """

    def __init__(
        self,
        n_iter: int = 5000,
        burn_in: int = 1000,
        thin: int = 5,
        concentration: float = 1.0,
        prior: NiwPrior | None = None,
        single_cluster: bool = False,
        standardize: bool = True,
        point_estimate: str = "max_joint",
        random_state=None,
    ):
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.concentration = concentration
        self.prior = prior
        self.single_cluster = single_cluster
        self.standardize = standardize
        self.point_estimate = point_estimate
        self.random_state = random_state

    def fit(self, y):
        y = _as_matrix(y)
        y_fit, self.transform_ = _standardize_or_identity(y, self.standardize)
        self.train_y_ = y_fit
        self.prior_ = self.prior or NiwPrior.default(y.shape[1])
        self.samples_ = evaluation.igmm_fit(
            y_fit,
            prior=self.prior_,
            concentration=self.concentration,
            n_iter=self.n_iter,
            burn_in=self.burn_in,
            thin=self.thin,
            single_cluster=self.single_cluster,
            seed=self.random_state,
        )
        self.labels_ = evaluation._point_labels(self.samples_, self.point_estimate)
        self.n_clusters_ = int(np.unique(self.labels_).size)
        return self

    def score_samples(self, y) -> np.ndarray:
        self._check_fitted("samples_")
        pts = _as_matrix(y)
        jac = 0.0
        if self.transform_ is not None:
            pts = self.transform_.apply(pts)
            jac = self.transform_.log_jacobian
        out = evaluation.igmm_log_density(
            pts,
            self.samples_,
            self.train_y_,
            prior=self.prior_,
            concentration=self.concentration,
        )
        return np.asarray(out) + jac

    def score(self, y) -> float:
        return float(np.mean(self.score_samples(y)))


class LooKde(_ParamSurface):
    """Kernel density estimate with a leave-one-out fitted bandwidth.

    One isotropic Gaussian bandwidth shared by all points, chosen to
    maximize the summed leave-one-out log density of the training set.
    """

    def __init__(self, standardize: bool = False):
        self.standardize = standardize

    def fit(self, y):
        y = _as_matrix(y)
        y_fit, self.transform_ = _standardize_or_identity(y, self.standardize)
        self.fit_ = evaluation.fit_kde(y_fit)
        self.bandwidth_ = self.fit_.bandwidth
        return self

    def score_samples(self, y) -> np.ndarray:
        self._check_fitted("fit_")
        pts = _as_matrix(y)
        jac = 0.0
        if self.transform_ is not None:
            pts = self.transform_.apply(pts)
            jac = self.transform_.log_jacobian
        return np.asarray(evaluation.kde_log_density(self.fit_, pts)) + jac

    def score(self, y) -> float:
        return float(np.mean(self.score_samples(y)))


def _score_seed(random_state):
    # derived stream so scoring does not replay the chain's randomness
    if random_state is None:
        return None
    if isinstance(random_state, np.random.Generator):
        return random_state
    return (int(random_state), 0x5C09E)
