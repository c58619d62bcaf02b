"""Monte Carlo predictive density in the observed space.

A new point's density is estimated by drawing latent positions from the
mixture posterior of each retained sample, pushing them through the GP
conditional, and averaging the resulting Gaussian contributions.  Each draw
adds a smooth local bump, so even a modest pool gives a usable density
surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import gp, numerics
from .latent_mixture import ClusterStats, NiwPrior, posterior_stats, sample_component_params
from .sampler import PosteriorSample

__all__ = [
    "LOG_DENSITY_FLOOR",
    "DensityGrid",
    "UnsupportedDimensionError",
    "draw_latent_star",
    "warped_draws",
    "predictive_log_density",
    "density_grid",
    "save_density_grid",
]

# Smallest positive normal double; estimates never report below this.
LOG_DENSITY_FLOOR = float(np.log(np.finfo(float).tiny))

_CHUNK = 2048


class UnsupportedDimensionError(ValueError):
    pass


def _cluster_stats(sample: PosteriorSample, prior: NiwPrior) -> list[ClusterStats]:
    return [
        posterior_stats(prior, sample.x[sample.labels == c])
        for c in range(sample.n_clusters)
    ]


def draw_latent_star(
    sample: PosteriorSample,
    prior: NiwPrior,
    concentration: float,
    rng: np.random.Generator,
    clusters: list[ClusterStats] | None = None,
) -> np.ndarray:
    """Draw one latent position from the posterior mixture of one sample.

    A component is chosen with probability N_c/(N + eta), or a fresh one
    with probability eta/(N + eta); component parameters are drawn from its
    posterior (the bare prior for a fresh component), then the position from
    that Gaussian.
    """
    if clusters is None:
        clusters = _cluster_stats(sample, prior)
    weights = np.empty(len(clusters) + 1)
    weights[:-1] = [s.count for s in clusters]
    weights[-1] = concentration
    pick = numerics.sample_categorical(weights, rng)
    stats = prior.empty_stats if pick == len(clusters) else clusters[pick]
    mean, precision = sample_component_params(stats, rng)
    prec_chol = numerics.cholesky(precision, validate=False)
    z = rng.standard_normal(prior.dim)
    return mean + np.linalg.solve(prec_chol.T, z)


def warped_draws(
    sample: PosteriorSample,
    y_train: np.ndarray,
    prior: NiwPrior,
    concentration: float,
    n_draws: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Warp ``n_draws`` latent posterior draws through the GP conditional.

    Returns the conditional means (n_draws, D) and shared-across-dimensions
    variances (n_draws,).  Draws are sequential on the generator, so a
    longer pool extends a shorter one with the same seed.
    """
    clusters = _cluster_stats(sample, prior)
    xs = np.empty((n_draws, prior.dim))
    for m in range(n_draws):
        xs[m] = draw_latent_star(sample, prior, concentration, rng, clusters)
    gram = gp.gram_matrix(sample.x, sample.params)
    return gp.gp_conditional(xs, y_train, gram)


def _accumulate(points, means, variances, running):
    # Fold one pool of Gaussian bumps into the running per-point logsumexp.
    d = points.shape[1]
    for lo in range(0, means.shape[0], _CHUNK):
        m = means[lo : lo + _CHUNK]
        v = variances[lo : lo + _CHUNK]
        sq = ((points[:, None, :] - m[None, :, :]) ** 2).sum(axis=2)
        logs = -0.5 * sq / v - 0.5 * d * np.log(2.0 * np.pi * v)
        np.logaddexp(running, logsumexp(logs, axis=1), out=running)
    return running


def predictive_log_density(
    y_star: np.ndarray,
    samples,
    y_train: np.ndarray,
    prior: NiwPrior | None = None,
    concentration: float = 1.0,
    m_inner: int = 1000,
    rng=None,
):
    """Estimate log predictive density at one or more observed-space points.

    Parameters
    ----------
    y_star : ndarray
        A single D-vector or a (T, D) batch.
    samples : sequence of PosteriorSample
        Retained chain snapshots; all are used.
    y_train : ndarray
        Training observations the chain was run on, in the same units.
    prior, concentration
        Latent mixture settings, matching the chain config.
    m_inner : int
        Latent draws per posterior sample.
    rng
        Seed or generator; fixes the draw pool.

    Returns
    -------
    float or ndarray
        Log density, floored at the smallest positive normal number.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one posterior sample")
    if m_inner < 1:
        raise ValueError("m_inner must be at least 1")
    rng = numerics.as_generator(rng)
    y_star = np.asarray(y_star, dtype=float)
    single = y_star.ndim == 1
    points = y_star[None, :] if single else y_star
    if prior is None:
        prior = NiwPrior.default(samples[0].x.shape[1])

    running = np.full(points.shape[0], -np.inf)
    for sample in samples:
        means, variances = warped_draws(
            sample, y_train, prior, concentration, m_inner, rng
        )
        _accumulate(points, means, variances, running)
    out = running - np.log(len(samples) * m_inner)
    out = np.maximum(out, LOG_DENSITY_FLOOR)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class DensityGrid:
    """A rectangular grid of log densities over a 2-d observed space.

    ``log_density`` is flattened in row-major order with the first axis
    outermost: index = i * axes[1].count + j.
    """

    axes: tuple[tuple[float, float, int], ...]
    log_density: np.ndarray
    sample_count: tuple[int, int]

    def __post_init__(self):
        size = int(np.prod([c for _, _, c in self.axes]))
        if self.log_density.shape != (size,):
            raise ValueError("grid size does not match axes")
        if not np.all(np.isfinite(self.log_density)):
            raise ValueError("grid contains nonfinite values")

    def nodes(self) -> np.ndarray:
        grids = np.meshgrid(
            *[np.linspace(lo, hi, c) for lo, hi, c in self.axes], indexing="ij"
        )
        return np.column_stack([g.ravel() for g in grids])

    def mass(self) -> float:
        """Riemann estimate of the probability mass inside the box."""
        cell = np.prod([(hi - lo) / (c - 1) for lo, hi, c in self.axes])
        return float(np.exp(self.log_density).sum() * cell)


def density_grid(
    samples,
    y_train: np.ndarray,
    axes_spec,
    prior: NiwPrior | None = None,
    concentration: float = 1.0,
    m_inner: int = 1000,
    rng=None,
) -> DensityGrid:
    """Evaluate the predictive density on a rectangular 2-d grid.

    ``axes_spec`` is ((min, max, count), (min, max, count)).  One shared
    draw pool serves every node.
    """
    axes = tuple((float(lo), float(hi), int(c)) for lo, hi, c in axes_spec)
    if len(axes) != 2:
        raise UnsupportedDimensionError("grid output requires exactly 2 dimensions")
    for lo, hi, c in axes:
        if not (hi > lo and c >= 2):
            raise ValueError("each axis needs hi > lo and at least 2 nodes")
    grids = np.meshgrid(
        *[np.linspace(lo, hi, c) for lo, hi, c in axes], indexing="ij"
    )
    nodes = np.column_stack([g.ravel() for g in grids])
    values = predictive_log_density(
        nodes,
        samples,
        y_train,
        prior=prior,
        concentration=concentration,
        m_inner=m_inner,
        rng=rng,
    )
    return DensityGrid(
        axes=axes,
        log_density=values,
        sample_count=(len(list(samples)), m_inner),
    )


def save_density_grid(grid: DensityGrid, path, meta: dict | None = None) -> None:
    """Write `x,y,log_density` CSV plus a `<path>.meta.json` sidecar."""
    import json

    nodes = grid.nodes()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,y,log_density\n")
        for (x, y), v in zip(nodes, grid.log_density):
            fh.write(f"{float(x)!r},{float(y)!r},{float(v)!r}\n")
    sidecar = {
        "axes": [list(a) for a in grid.axes],
        "posterior_samples": grid.sample_count[0],
        "latent_draws": grid.sample_count[1],
    }
    if meta:
        sidecar.update(meta)
    with open(f"{path}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
