"""Squared exponential Gaussian process layer mapping latent to observed space.

The observed coordinates are modeled as independent GP draws over the latent
positions, with the function values integrated out.  All likelihoods and
gradients here are for that marginal, so the only free quantities are the
latent positions and the three kernel hyperparameters, carried in log form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import numerics

__all__ = [
    "KernelParams",
    "GramMatrix",
    "kernel_eval",
    "gram_matrix",
    "gplvm_log_marginal",
    "gplvm_gradients",
    "gp_conditional",
    "cross_kernel",
]

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class KernelParams:
    """Kernel hyperparameters in log domain.

    ``signal`` scales the squared exponential term, ``noise_precision`` is
    the precision of the additive observation noise on the diagonal, and
    ``lengthscale`` sets the latent distance scale.
    """

    log_signal: float = 0.0
    log_noise_precision: float = 0.0
    log_lengthscale: float = 0.0

    @property
    def signal(self) -> float:
        return float(np.exp(self.log_signal))

    @property
    def noise_variance(self) -> float:
        return float(np.exp(-self.log_noise_precision))

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))

    def as_array(self) -> np.ndarray:
        return np.array([self.log_signal, self.log_noise_precision, self.log_lengthscale])

    @classmethod
    def from_array(cls, arr) -> "KernelParams":
        return cls(float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class GramMatrix:
    """Kernel gram matrix over a fixed latent configuration.

    Holds the matrix, its lower Cholesky factor, the pairwise squared
    distances, and references to the exact inputs it was built from so
    staleness is detectable by identity.
    """

    k: np.ndarray
    chol: np.ndarray
    d2: np.ndarray
    x: np.ndarray
    params: KernelParams

    @property
    def logdet(self) -> float:
        return numerics.chol_logdet(self.chol)


def _sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def kernel_eval(x_a: np.ndarray, x_b: np.ndarray, params: KernelParams, *, same_index: bool = False) -> float:
    """Covariance between two latent points.

    The noise term attaches to repeated indices, not repeated coordinates,
    so equal positions at distinct indices get only the smooth part.
    """
    d2 = float(np.sum((np.asarray(x_a, dtype=float) - np.asarray(x_b, dtype=float)) ** 2))
    val = params.signal * np.exp(-0.5 * d2 / params.lengthscale**2)
    if same_index:
        val += params.noise_variance
    return float(val)


def gram_matrix(x: np.ndarray, params: KernelParams) -> GramMatrix:
    """Build the noise-inclusive gram matrix and its Cholesky factor.

    Raises
    ------
    NotPositiveDefiniteError
        If the matrix cannot be factored even with jitter; with the noise
        term on the diagonal this indicates pathological hyperparameters.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"latent positions must be 2-d, got shape {x.shape}")
    d2 = _sq_dists(x)
    k = params.signal * np.exp(-0.5 * d2 / params.lengthscale**2)
    k[np.diag_indices_from(k)] += params.noise_variance
    if not np.all(np.isfinite(k)):
        raise numerics.NotPositiveDefiniteError("gram matrix has nonfinite entries")
    return GramMatrix(
        k=k, chol=numerics.cholesky(k, validate=False), d2=d2, x=x, params=params
    )


def cross_kernel(x_star: np.ndarray, x: np.ndarray, params: KernelParams) -> np.ndarray:
    """Smooth-part covariances between query points and the training set."""
    x_star = np.atleast_2d(np.asarray(x_star, dtype=float))
    d2 = (
        np.sum(x_star * x_star, axis=1)[:, None]
        + np.sum(x * x, axis=1)[None, :]
        - 2.0 * (x_star @ x.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return params.signal * np.exp(-0.5 * d2 / params.lengthscale**2)


def gplvm_log_marginal(y: np.ndarray, gram: GramMatrix) -> float:
    """Marginal log likelihood of the observed matrix under the GP layer.

    Each observed dimension is an independent zero mean GP draw with shared
    gram matrix, which collapses to
    ``-(D N / 2) log 2 pi - (D / 2) log |K| - tr(Y.T K^{-1} Y) / 2``.
    """
    n, d = y.shape
    alpha, logdet = numerics.solve_and_logdet(gram.chol, y)
    return -0.5 * (d * n * LOG_2PI + d * logdet + float(np.sum(y * alpha)))


def gplvm_gradients(
    y: np.ndarray, gram: GramMatrix
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the GP marginal w.r.t. latent positions and log kernel params.

    Returns
    -------
    grad_x : ndarray of shape (n, q)
    grad_log_params : ndarray of shape (3,)
        Ordered as (log signal, log noise precision, log lengthscale).

    Notes
    -----
    Both go through the matrix derivative
    ``dL/dK = -(D/2) K^{-1} + K^{-1} Y Y.T K^{-1} / 2``; the latent gradient
    then applies the kernel chain rule, picking up a factor of two from the
    symmetric occurrences of each point.
    """
    x, params = gram.x, gram.params
    n, d = y.shape
    k_inv = numerics.inverse_from_chol(gram.chol)
    a = scipy.linalg.cho_solve((gram.chol, True), y, check_finite=False)
    g = -0.5 * d * k_inv + 0.5 * (a @ a.T)

    ell2 = params.lengthscale**2
    k_smooth = gram.k.copy()
    k_smooth[np.diag_indices_from(k_smooth)] -= params.noise_variance

    w = (-2.0 / ell2) * g * k_smooth
    grad_x = w.sum(axis=1)[:, None] * x - w @ x

    d2 = gram.d2
    grad_log_signal = float(np.sum(g * k_smooth))
    grad_log_noise = -params.noise_variance * float(np.trace(g))
    grad_log_ell = float(np.sum(g * k_smooth * d2)) / ell2
    return grad_x, np.array([grad_log_signal, grad_log_noise, grad_log_ell])


def gp_conditional(
    x_star: np.ndarray, y: np.ndarray, gram: GramMatrix
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior predictive of the warp at new latent points.

    Parameters
    ----------
    x_star : ndarray of shape (m, q) or (q,)
        Query positions, treated as fresh indices (no training noise tie).
    y : ndarray of shape (n, d)
        Observed training matrix.
    gram : GramMatrix
        Factorized gram over the training latents.

    Returns
    -------
    mean : ndarray of shape (m, d)
    var : ndarray of shape (m,)
        A single predictive variance per query point, shared across the
        observed dimensions and including the noise floor.
    """
    single = np.asarray(x_star).ndim == 1
    k_star = cross_kernel(x_star, gram.x, gram.params)
    a = scipy.linalg.cho_solve((gram.chol, True), y, check_finite=False)
    mean = k_star @ a
    half = scipy.linalg.solve_triangular(gram.chol, k_star.T, lower=True, check_finite=False)
    var = gram.params.signal + gram.params.noise_variance - np.sum(half * half, axis=0)
    if np.any(var < -1e-8):
        raise numerics.NotPositiveDefiniteError("negative predictive variance")
    np.maximum(var, 1e-300, out=var)
    if single:
        return mean[0], var[0]
    return mean, var
