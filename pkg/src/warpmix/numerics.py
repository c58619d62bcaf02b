"""Dense linear algebra and sampling primitives shared by the model code.

Everything here works on plain numpy arrays.  Cholesky factors are lower
triangular throughout; a factor is just the ndarray returned by
:func:`cholesky`, no wrapper type.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
from scipy.special import gammaln

__all__ = [
    "NotPositiveDefiniteError",
    "DowndateError",
    "cholesky",
    "rank_one_update",
    "chol_logdet",
    "solve_and_logdet",
    "chol_of_inverse",
    "inverse_from_chol",
    "log_gamma_product",
    "log_multigamma",
    "wishart_logpdf",
    "sample_gaussian",
    "sample_wishart",
    "sample_gamma",
    "sample_categorical",
    "as_generator",
    "spawn_generators",
]

# Relative jitter schedule for nearly singular matrices: start at 1e-10 of the
# mean diagonal and escalate by factors of ten up to 1e-6 before giving up.
_JITTER_START = 1e-10
_JITTER_MAX = 1e-6

_SYMMETRY_TOL = 1e-8


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Matrix is not positive definite even after the jitter schedule."""


class DowndateError(np.linalg.LinAlgError):
    """Rank-one removal would make the factored matrix indefinite.

    Callers that maintain incremental factors should catch this and rebuild
    the factor from scratch.
    """


def cholesky(a: np.ndarray, *, validate: bool = True) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Parameters
    ----------
    a : ndarray of shape (d, d)
        Symmetric matrix.  Symmetry is checked to an absolute tolerance of
        1e-8.
    validate : bool
        Skip the shape and symmetry checks when False; for hot paths whose
        input is symmetric by construction.

    Returns
    -------
    ndarray of shape (d, d)
        Lower triangular L with ``L @ L.T == a`` (up to jitter).

    Raises
    ------
    ValueError
        If ``a`` is not square or not symmetric.
    NotPositiveDefiniteError
        If ``a`` stays indefinite after adding relative jitter up to 1e-6
        of the mean diagonal.

    Notes
    -----
    On failure of the plain factorization a multiple of the identity is
    added, scaled by the mean diagonal, escalating by factors of ten.  The
    jittered factor is returned silently; the escalation exists to absorb
    roundoff on nearly singular kernels, not to repair genuinely indefinite
    input.
    """
    if validate:
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        if not np.allclose(a, a.T, atol=_SYMMETRY_TOL, rtol=_SYMMETRY_TOL):
            raise ValueError("matrix is not symmetric to tolerance 1e-8")
    try:
        return scipy.linalg.cholesky(a, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(a)))
    if scale <= 0.0 or not np.isfinite(scale):
        scale = 1.0
    jitter = _JITTER_START
    eye = np.eye(a.shape[0])
    while jitter <= _JITTER_MAX:
        try:
            return scipy.linalg.cholesky(a + jitter * scale * eye, lower=True)
        except scipy.linalg.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefiniteError(
        f"matrix of dim {a.shape[0]} not positive definite "
        f"(jitter escalated to {_JITTER_MAX:g} of mean diagonal)"
    )


def rank_one_update(chol: np.ndarray, v: np.ndarray, *, downdate: bool = False) -> np.ndarray:
    """Cholesky factor of ``A + v v.T`` (or ``A - v v.T``) from the factor of A.

    Parameters
    ----------
    chol : ndarray of shape (d, d)
        Lower Cholesky factor of A.
    v : ndarray of shape (d,)
        Update vector.
    downdate : bool
        If True compute the factor of ``A - v v.T`` instead.

    Returns
    -------
    ndarray of shape (d, d)
        A fresh lower triangular factor; the input is not modified.

    Raises
    ------
    DowndateError
        If the downdated matrix is not positive definite.
    """
    d = chol.shape[0]
    if v.shape != (d,):
        raise ValueError(f"update vector shape {v.shape} does not match factor dim {d}")
    out = np.array(chol, dtype=float)
    w = np.array(v, dtype=float)
    sign = -1.0 if downdate else 1.0
    for k in range(d):
        lkk = out[k, k]
        r2 = lkk * lkk + sign * w[k] * w[k]
        if r2 <= 0.0:
            raise DowndateError(f"rank-one removal lost positive definiteness at pivot {k}")
        r = np.sqrt(r2)
        c = r / lkk
        s = w[k] / lkk
        out[k, k] = r
        if k + 1 < d:
            out[k + 1:, k] = (out[k + 1:, k] + sign * s * w[k + 1:]) / c
            w[k + 1:] = c * w[k + 1:] - s * out[k + 1:, k]
    return out


def chol_logdet(chol: np.ndarray) -> float:
    """Log determinant of A given its lower Cholesky factor."""
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def solve_and_logdet(chol: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve ``A x = b`` and return ``(x, log det A)`` given the factor of A.

    ``b`` may be a vector or a matrix of right hand sides.
    """
    d = chol.shape[0]
    if b.shape[0] != d:
        raise ValueError(f"right hand side has leading dim {b.shape[0]}, factor has {d}")
    x = scipy.linalg.cho_solve((chol, True), b, check_finite=False)
    return x, chol_logdet(chol)


def chol_of_inverse(chol: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``A^{-1}`` given the factor of A."""
    return scipy.linalg.cholesky(inverse_from_chol(chol), lower=True)


def inverse_from_chol(chol: np.ndarray) -> np.ndarray:
    """Full inverse of A given its lower Cholesky factor."""
    inv, info = scipy.linalg.lapack.dpotri(chol, lower=1)
    if info != 0:
        raise NotPositiveDefiniteError(f"dpotri failed with code {info}")
    # dpotri fills one triangle only.
    inv = np.tril(inv)
    return inv + np.tril(inv, -1).T


def log_gamma_product(dim: int, a: float) -> float:
    """Bare multivariate gamma sum ``sum_q log Gamma(a + (1 - q) / 2)``.

    This is the pi-free part of ``log Gamma_dim(a)``; ratios of cluster
    normalizers use it directly so the pi factors cancel explicitly.

    Raises
    ------
    ValueError
        If ``a <= (dim - 1) / 2`` where the gamma arguments leave the
        positive half line.
    """
    if a <= (dim - 1) / 2.0:
        raise ValueError(f"log_gamma_product requires a > (dim - 1) / 2, got a={a}, dim={dim}")
    q = np.arange(1, dim + 1)
    return float(np.sum(gammaln(a + (1.0 - q) / 2.0)))


def log_multigamma(dim: int, a: float) -> float:
    """Full multivariate log gamma ``log Gamma_dim(a)`` including the pi term."""
    return dim * (dim - 1) / 4.0 * np.log(np.pi) + log_gamma_product(dim, a)


def wishart_logpdf(r_mat: np.ndarray, scale_chol: np.ndarray, dof: float) -> float:
    """Log density of a Wishart variate parameterized by inverse scale.

    The density is proportional to ``|R|^((dof - d - 1) / 2) exp(-tr(S R) / 2)``
    where S is the matrix whose Cholesky factor is given, i.e. the Wishart
    scale matrix is ``S^{-1}`` and ``E[R] = dof * S^{-1}``.

    Parameters
    ----------
    r_mat : ndarray of shape (d, d)
        Symmetric positive definite argument.
    scale_chol : ndarray of shape (d, d)
        Lower Cholesky factor of S.
    dof : float
        Degrees of freedom, must exceed ``d - 1``.
    """
    d = scale_chol.shape[0]
    if dof <= d - 1:
        raise ValueError(f"Wishart dof must exceed dim - 1 = {d - 1}, got {dof}")
    r_chol = cholesky(r_mat)
    logdet_r = chol_logdet(r_chol)
    logdet_s = chol_logdet(scale_chol)
    s_mat = scale_chol @ scale_chol.T
    trace = float(np.sum(s_mat * r_mat))
    return (
        0.5 * (dof - d - 1.0) * logdet_r
        - 0.5 * trace
        - 0.5 * dof * d * np.log(2.0)
        + 0.5 * dof * logdet_s
        - log_multigamma(d, dof / 2.0)
    )


def sample_gaussian(mean: np.ndarray, cov_chol: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one multivariate normal variate given the covariance factor."""
    return mean + cov_chol @ rng.standard_normal(mean.shape[0])


def sample_wishart(scale_chol: np.ndarray, dof: float, rng: np.random.Generator) -> np.ndarray:
    """Draw from a Wishart with scale ``V = scale_chol @ scale_chol.T``.

    Uses the Bartlett decomposition: a lower triangular T with chi
    distributed diagonal and standard normal subdiagonal gives
    ``R = (A T)(A T).T`` for ``A`` the factor of V, so ``E[R] = dof * V``.
    """
    d = scale_chol.shape[0]
    if dof <= d - 1:
        raise ValueError(f"Wishart dof must exceed dim - 1 = {d - 1}, got {dof}")
    t = np.zeros((d, d))
    for i in range(d):
        t[i, i] = np.sqrt(rng.chisquare(dof - i))
        if i > 0:
            t[i, :i] = rng.standard_normal(i)
    at = scale_chol @ t
    return at @ at.T


def sample_gamma(shape: float, rate: float, rng: np.random.Generator) -> float:
    """Draw from a Gamma distribution in shape and rate parameterization."""
    if shape <= 0.0 or rate <= 0.0:
        raise ValueError(f"gamma parameters must be positive, got shape={shape}, rate={rate}")
    return float(rng.gamma(shape, 1.0 / rate))


def sample_categorical(weights: np.ndarray, rng: np.random.Generator) -> int:
    """Draw an index proportional to a vector of nonnegative weights."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a nonempty vector")
    cum = np.cumsum(w)
    total = cum[-1]
    # A nan anywhere propagates into the total, so two checks cover it all.
    if not 0.0 < total < np.inf or w.min() < 0.0:
        raise ValueError("weights must be finite, nonnegative, with positive total")
    return int(np.searchsorted(cum, rng.random() * total, side="right").clip(0, w.size - 1))


def as_generator(seed) -> np.random.Generator:
    """Normalize a seed, generator, or None into a numpy Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_generators(seed, n: int) -> list[np.random.Generator]:
    """Split a seed into ``n`` independent generators.

    Built on numpy SeedSequence spawning, so distinct children never share
    streams and the whole family is reproducible from the parent seed.
    """
    if isinstance(seed, np.random.Generator):
        seq = seed.bit_generator.seed_seq
    else:
        seq = np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in seq.spawn(n)]
