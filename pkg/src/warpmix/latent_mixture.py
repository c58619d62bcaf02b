"""Dirichlet process Gaussian mixture over latent positions, collapsed.

Component means and precisions carry a conjugate Gaussian-Wishart prior and
are integrated out analytically, so the mixture side of the model only ever
touches per-cluster sufficient statistics.  Cluster precision posteriors are
kept as Cholesky factors of the scale matrix and maintained by rank-one
updates as points move between clusters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
from scipy.linalg.lapack import dtrtri
from scipy.special import gammaln

from . import numerics
from .numerics import DowndateError

__all__ = [
    "NiwPrior",
    "ClusterStats",
    "MixtureState",
    "posterior_stats",
    "log_marginal_x",
    "log_predictive_point",
    "crp_log_prob",
    "gibbs_weights",
    "grad_logprior_x",
    "sample_component_params",
]

LOG_PI = np.log(np.pi)


@dataclass(frozen=True)
class NiwPrior:
    """Gaussian-Wishart prior over a component mean and precision.

    Parameters
    ----------
    mean : ndarray of shape (q,)
        Prior location of the component mean.
    precision_scale : float
        Relative precision of the mean, must be positive.
    scale : ndarray of shape (q, q)
        Symmetric positive definite scale matrix of the Wishart factor.
    dof : float
        Wishart degrees of freedom, must exceed ``q - 1``.
    """

    mean: np.ndarray
    precision_scale: float
    scale: np.ndarray
    dof: float
    scale_chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        scale = np.asarray(self.scale, dtype=float)
        q = mean.shape[0]
        if scale.shape != (q, q):
            raise ValueError(f"scale shape {scale.shape} does not match mean dim {q}")
        if self.precision_scale <= 0.0:
            raise ValueError("precision_scale must be positive")
        if self.dof <= q - 1:
            raise ValueError(f"dof must exceed dim - 1 = {q - 1}, got {self.dof}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "scale_chol", numerics.cholesky(scale))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def default(cls, dim: int) -> "NiwPrior":
        """Unit prior: zero mean, unit precision scale, identity scale, dof dim + 2."""
        return cls(np.zeros(dim), 1.0, np.eye(dim), float(dim + 2))

    @cached_property
    def empty_stats(self) -> "ClusterStats":
        """Shared empty-cluster statistics; read only, never mutate."""
        return ClusterStats(self)


class ClusterStats:
    """Posterior Gaussian-Wishart parameters of one cluster.

    Mutable, single owner.  ``add`` and ``remove`` shift one point in or out
    with rank-one factor updates; ``remove`` raises
    :class:`~warpmix.numerics.DowndateError` when roundoff has degraded the
    factor, in which case the owner rebuilds from the member points.
    """

    __slots__ = (
        "prior",
        "count",
        "precision_scale",
        "dof",
        "mean",
        "scale_chol",
        "_logdet",
        "_inv_chol",
    )

    def __init__(self, prior: NiwPrior):
        self.prior = prior
        self._reset()

    def _reset(self):
        self.count = 0
        self.precision_scale = self.prior.precision_scale
        self.dof = self.prior.dof
        self.mean = self.prior.mean.copy()
        self.scale_chol = self.prior.scale_chol.copy()
        self._logdet = None
        self._inv_chol = None

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    # The log determinant and inverse factor are read once per predictive
    # but change only when a point moves, so they are cached lazily.
    @property
    def scale_logdet(self) -> float:
        if self._logdet is None:
            self._logdet = numerics.chol_logdet(self.scale_chol)
        return self._logdet

    @property
    def inv_chol(self) -> np.ndarray:
        if self._inv_chol is None:
            self._inv_chol = dtrtri(self.scale_chol, lower=1)[0]
        return self._inv_chol

    def copy(self) -> "ClusterStats":
        dup = ClusterStats.__new__(ClusterStats)
        dup.prior = self.prior
        dup.count = self.count
        dup.precision_scale = self.precision_scale
        dup.dof = self.dof
        dup.mean = self.mean.copy()
        dup.scale_chol = self.scale_chol.copy()
        dup._logdet = self._logdet
        dup._inv_chol = self._inv_chol
        return dup

    def add(self, x: np.ndarray) -> None:
        r = self.precision_scale
        w = np.sqrt(r / (r + 1.0)) * (x - self.mean)
        self.scale_chol = numerics.rank_one_update(self.scale_chol, w)
        self.mean = (r * self.mean + x) / (r + 1.0)
        self.precision_scale = r + 1.0
        self.dof += 1.0
        self.count += 1
        self._logdet = None
        self._inv_chol = None

    def remove(self, x: np.ndarray) -> None:
        if self.count <= 0:
            raise ValueError("cannot remove a point from an empty cluster")
        if self.count == 1:
            # Restore the prior exactly rather than downdating back to it.
            self._reset()
            return
        r = self.precision_scale
        new_mean = (r * self.mean - x) / (r - 1.0)
        w = np.sqrt((r - 1.0) / r) * (x - new_mean)
        # Downdate before committing scalars so a failure leaves us intact.
        self.scale_chol = numerics.rank_one_update(self.scale_chol, w, downdate=True)
        self.mean = new_mean
        self.precision_scale = r - 1.0
        self.dof -= 1.0
        self.count -= 1
        self._logdet = None
        self._inv_chol = None


def posterior_stats(prior: NiwPrior, points: np.ndarray) -> ClusterStats:
    """Batch posterior statistics for a cluster holding the given points.

    Uses the centered update
    ``S_c = S + sum (x - u_c)(x - u_c)^T + r (u - u_c)(u - u_c)^T``
    which is algebraically identical to accumulating raw outer products but
    better conditioned.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    stats = ClusterStats(prior)
    n = points.shape[0]
    if n == 0:
        return stats
    r, u = prior.precision_scale, prior.mean
    stats.count = n
    stats.precision_scale = r + n
    stats.dof = prior.dof + n
    stats.mean = (r * u + points.sum(axis=0)) / (r + n)
    centered = points - stats.mean
    scale = prior.scale + centered.T @ centered
    du = u - stats.mean
    scale = scale + r * np.outer(du, du)
    stats.scale_chol = numerics.cholesky(scale, validate=False)
    return stats


def _cluster_log_marginal(stats: ClusterStats) -> float:
    """Collapsed log marginal of the points summarized by ``stats``."""
    prior = stats.prior
    q = stats.dim
    return (
        -0.5 * stats.count * q * LOG_PI
        + 0.5 * q * (np.log(prior.precision_scale) - np.log(stats.precision_scale))
        + 0.5 * prior.dof * numerics.chol_logdet(prior.scale_chol)
        - 0.5 * stats.dof * stats.scale_logdet
        + numerics.log_gamma_product(q, stats.dof / 2.0)
        - numerics.log_gamma_product(q, prior.dof / 2.0)
    )


def log_marginal_x(x: np.ndarray, labels: np.ndarray, prior: NiwPrior) -> float:
    """Log marginal density of the latent positions given an assignment.

    Component parameters are integrated out cluster by cluster; an empty
    assignment contributes zero.
    """
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        total += _cluster_log_marginal(posterior_stats(prior, x[labels == c]))
    return float(total)


def log_predictive_point(x: np.ndarray, stats: ClusterStats) -> float:
    """Log predictive density of one point joining the summarized cluster.

    This is the ratio of collapsed marginals with and without the point,
    evaluated without forming the updated factor: the updated determinant
    comes from the matrix determinant lemma and the gamma ratio telescopes.
    Passing prior statistics (count zero) gives the fresh-cluster predictive.
    """
    q = stats.dim
    r = stats.precision_scale
    dof = stats.dof
    t = stats.inv_chol @ (x - stats.mean)
    quad = (r / (r + 1.0)) * float(t @ t)
    logdet = stats.scale_logdet
    logdet_new = logdet + np.log1p(quad)
    return float(
        -0.5 * q * LOG_PI
        + 0.5 * q * (np.log(r) - np.log(r + 1.0))
        + 0.5 * dof * logdet
        - 0.5 * (dof + 1.0) * logdet_new
        + gammaln((dof + 1.0) / 2.0)
        - gammaln((dof + 1.0 - q) / 2.0)
    )


def crp_log_prob(counts: np.ndarray, concentration: float) -> float:
    """Exchangeable partition probability of the given occupancy counts."""
    counts = np.asarray(counts)
    if np.any(counts <= 0):
        raise ValueError("occupancy counts must be positive")
    if concentration <= 0.0:
        raise ValueError("concentration must be positive")
    n = int(counts.sum())
    return float(
        counts.size * np.log(concentration)
        + np.sum(gammaln(counts))
        + gammaln(concentration)
        - gammaln(concentration + n)
    )


def gibbs_weights(
    x: np.ndarray,
    clusters: list[ClusterStats],
    prior: NiwPrior,
    concentration: float,
) -> np.ndarray:
    """Assignment probabilities for one held-out point.

    Entry ``c`` couples the occupancy count with the cluster predictive;
    the final entry is the fresh-cluster branch weighted by the
    concentration.  Returned normalized, computed with a max shift.
    """
    log_w = np.empty(len(clusters) + 1)
    for c, stats in enumerate(clusters):
        log_w[c] = np.log(stats.count) + log_predictive_point(x, stats)
    log_w[-1] = np.log(concentration) + log_predictive_point(x, prior.empty_stats)
    log_w -= log_w.max()
    w = np.exp(log_w)
    return w / w.sum()


def grad_logprior_x(
    x: np.ndarray, labels: np.ndarray, clusters: list[ClusterStats]
) -> np.ndarray:
    """Gradient of the collapsed latent log marginal w.r.t. each position.

    ``clusters`` must be the point-inclusive posterior statistics for the
    given labels.  For a member point the collapsed gradient is exactly
    ``-dof_c S_c^{-1} (x_n - mean_c)``.
    """
    grad = np.zeros_like(x)
    for c, stats in enumerate(clusters):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        diff = x[members] - stats.mean
        solved = stats.inv_chol.T @ (stats.inv_chol @ diff.T)
        grad[members] = -stats.dof * solved.T
    return grad


def sample_component_params(
    stats: ClusterStats, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw an explicit (mean, precision) pair from the cluster posterior.

    The precision comes from the Wishart with inverse scale ``S_c`` and the
    mean from a Gaussian with covariance ``(r_c R)^{-1}``.
    """
    precision = numerics.sample_wishart(
        numerics.chol_of_inverse(stats.scale_chol), stats.dof, rng
    )
    prec_chol = numerics.cholesky(precision)
    z = rng.standard_normal(stats.dim)
    offset = scipy.linalg.solve_triangular(prec_chol.T, z, lower=False, check_finite=False)
    mean = stats.mean + offset / np.sqrt(stats.precision_scale)
    return mean, precision


class MixtureState:
    """Latent positions, assignments, and per-cluster statistics, kept coherent.

    Cluster ids are dense in ``0..n_clusters - 1``; removing the last member
    of a cluster relabels the highest id into the vacated slot.  Detached
    points (mid Gibbs step) carry the label -1.
    """

    def __init__(self, x: np.ndarray, labels: np.ndarray, prior: NiwPrior):
        self.x = np.asarray(x, dtype=float)
        self.labels = np.asarray(labels, dtype=int).copy()
        self.prior = prior
        self.clusters: list[ClusterStats] = []
        self.refresh()

    @property
    def n_points(self) -> int:
        return self.x.shape[0]

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def counts(self) -> np.ndarray:
        return np.array([c.count for c in self.clusters])

    def refresh(self, x: np.ndarray | None = None) -> None:
        """Rebuild all cluster statistics from scratch, optionally at new positions."""
        if x is not None:
            self.x = np.asarray(x, dtype=float)
        present = self.labels >= 0
        ids = np.unique(self.labels[present])
        if ids.size > 0 and (ids[0] != 0 or ids[-1] != ids.size - 1):
            raise ValueError("cluster ids must be dense starting at zero")
        self.clusters = [
            posterior_stats(self.prior, self.x[self.labels == c]) for c in ids
        ]

    def remove_point(self, n: int) -> int:
        """Detach point ``n``, compacting ids if its cluster empties."""
        c = self.labels[n]
        if c < 0:
            raise ValueError(f"point {n} is already detached")
        self.labels[n] = -1
        stats = self.clusters[c]
        try:
            stats.remove(self.x[n])
        except DowndateError:
            self.clusters[c] = posterior_stats(self.prior, self.x[self.labels == c])
            stats = self.clusters[c]
        if stats.count == 0:
            last = self.n_clusters - 1
            if c != last:
                self.clusters[c] = self.clusters[last]
                self.labels[self.labels == last] = c
            self.clusters.pop()
        return int(c)

    def insert_point(self, n: int, c: int) -> None:
        """Attach point ``n`` to cluster ``c``; ``c == n_clusters`` opens a new one."""
        if self.labels[n] >= 0:
            raise ValueError(f"point {n} is already assigned")
        if c == self.n_clusters:
            self.clusters.append(ClusterStats(self.prior))
        elif not 0 <= c < self.n_clusters:
            raise ValueError(f"cluster id {c} out of range")
        self.clusters[c].add(self.x[n])
        self.labels[n] = c

    def log_marginal(self) -> float:
        """Collapsed log marginal of the current configuration."""
        return float(sum(_cluster_log_marginal(s) for s in self.clusters))

    def check_consistency(self, atol: float = 1e-9) -> None:
        """Assert incremental statistics agree with a batch rebuild."""
        if np.any(self.labels < 0):
            raise AssertionError("detached points present")
        counts = np.bincount(self.labels, minlength=self.n_clusters)
        for c, stats in enumerate(self.clusters):
            batch = posterior_stats(self.prior, self.x[self.labels == c])
            if stats.count != counts[c]:
                raise AssertionError(f"cluster {c}: count {stats.count} != {counts[c]}")
            np.testing.assert_allclose(stats.mean, batch.mean, atol=atol, rtol=0)
            np.testing.assert_allclose(
                stats.scale_chol @ stats.scale_chol.T,
                batch.scale_chol @ batch.scale_chol.T,
                atol=atol,
                rtol=atol,
            )
