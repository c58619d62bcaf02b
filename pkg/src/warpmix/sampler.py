"""Markov chain over latent positions, assignments, and kernel hyperparameters.

One iteration is a collapsed Gibbs sweep over the assignments, a Hamiltonian
move on all latent positions jointly, and a Hamiltonian move on the log
kernel hyperparameters.  Step sizes are tuned by dual averaging during
burn-in and frozen afterwards so the post burn-in chain is a fixed kernel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import gp, latent_mixture, numerics
from .gp import GramMatrix, KernelParams
from .latent_mixture import MixtureState, NiwPrior

__all__ = [
    "HmcConfig",
    "HmcResult",
    "DualAveraging",
    "ChainConfig",
    "ChainDiagnostics",
    "ChainRun",
    "PosteriorSample",
    "PriorDraw",
    "hmc_step",
    "gibbs_sweep",
    "run_chain",
    "prior_simulate",
    "simulate_observations",
    "initial_latents",
]

logger = logging.getLogger("warpmix")

_LOG_STEP_MIN = np.log(1e-5)
_LOG_STEP_MAX = np.log(10.0)


@dataclass(frozen=True)
class HmcConfig:
    """Leapfrog settings for one Hamiltonian move."""

    step_size: float = 0.1
    leapfrog_steps: int = 10
    target_accept: float = 0.8

    def __post_init__(self):
        if self.step_size <= 0.0 or self.leapfrog_steps < 1:
            raise ValueError("step_size must be positive and leapfrog_steps at least 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")


@dataclass
class HmcResult:
    position: np.ndarray
    accepted: bool
    accept_prob: float
    log_prob: float


def hmc_step(position, logp_and_grad, config: HmcConfig, rng: np.random.Generator) -> HmcResult:
    """One Hamiltonian Monte Carlo transition with identity mass matrix.

    ``logp_and_grad`` maps a flat position to ``(log density, gradient)``.
    Nonfinite values encountered along the trajectory reject the move; a
    nonfinite starting density is an error since the chain cannot recover.
    """
    q0 = np.asarray(position, dtype=float)
    logp0, grad0 = logp_and_grad(q0)
    if not np.isfinite(logp0):
        raise ValueError("HMC started from a state with nonfinite log density")
    p0 = rng.standard_normal(q0.shape[0])
    h0 = -logp0 + 0.5 * float(p0 @ p0)

    eps = config.step_size
    q = q0.copy()
    p = p0 + 0.5 * eps * grad0
    logp = logp0
    for step in range(config.leapfrog_steps):
        q = q + eps * p
        logp, grad = logp_and_grad(q)
        if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
            return HmcResult(q0, False, 0.0, logp0)
        if step < config.leapfrog_steps - 1:
            p = p + eps * grad
    p = p + 0.5 * eps * grad

    h1 = -logp + 0.5 * float(p @ p)
    accept_prob = float(min(1.0, np.exp(min(0.0, h0 - h1)))) if np.isfinite(h1) else 0.0
    if rng.random() < accept_prob:
        return HmcResult(q, True, accept_prob, logp)
    return HmcResult(q0, False, accept_prob, logp0)


class DualAveraging:
    """Nesterov dual averaging of the log step size toward a target acceptance."""

    def __init__(self, initial_step, target=0.8, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * initial_step)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.log_step = np.log(initial_step)
        self.log_step_avg = np.log(initial_step)
        self.h_bar = 0.0
        self.t = 0

    def update(self, accept_prob: float) -> float:
        self.t += 1
        frac = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_prob)
        self.log_step = np.clip(
            self.mu - np.sqrt(self.t) / self.gamma * self.h_bar, _LOG_STEP_MIN, _LOG_STEP_MAX
        )
        eta = self.t ** (-self.kappa)
        self.log_step_avg = eta * self.log_step + (1.0 - eta) * self.log_step_avg
        return float(np.exp(self.log_step))

    @property
    def frozen_step(self) -> float:
        return float(np.exp(np.clip(self.log_step_avg, _LOG_STEP_MIN, _LOG_STEP_MAX)))


def gibbs_sweep(
    state: MixtureState,
    concentration: float,
    rng: np.random.Generator,
    order: np.ndarray | None = None,
) -> None:
    """Resample every assignment once, conditional on the latent positions.

    Each point is detached, scored against the occupied clusters and a fresh
    one, and reattached at a categorical draw.  Occupancy counts therefore
    always sum to the number of points.
    """
    if order is None:
        order = np.arange(state.n_points)
    for n in order:
        state.remove_point(n)
        weights = latent_mixture.gibbs_weights(
            state.x[n], state.clusters, state.prior, concentration
        )
        state.insert_point(n, numerics.sample_categorical(weights, rng))


@dataclass(frozen=True)
class ChainConfig:
    """Model and schedule settings for one chain.

    ``latent_dim`` of ``None`` matches the observed dimension.  The prior
    default is the unit Gaussian-Wishart for the resolved latent dimension.
    ``single_cluster`` pins all points to one component, turning the model
    into a warped single Gaussian; the Gibbs sweep is skipped.
    ``param_prior_std`` gives the widths of the zero-mean Gaussian priors
    on the three log kernel parameters, either shared (scalar) or one per
    parameter in (signal, noise precision, lengthscale) order.
    """

    latent_dim: int | None = 2
    prior: NiwPrior | None = None
    concentration: float = 1.0
    init_params: KernelParams = field(
        default_factory=lambda: KernelParams(0.0, np.log(100.0), 0.0)
    )
    param_prior_std: float | tuple = 1.0
    n_iter: int = 5000
    burn_in: int = 1000
    thin: int = 5
    hmc_x: HmcConfig = field(default_factory=lambda: HmcConfig(step_size=0.05))
    hmc_params: HmcConfig = field(default_factory=lambda: HmcConfig(step_size=0.05))
    single_cluster: bool = False
    scan_order: str = "sequential"
    check_every: int = 0

    def __post_init__(self):
        if self.n_iter < 1 or not 0 <= self.burn_in < self.n_iter:
            raise ValueError("need 0 <= burn_in < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.scan_order not in ("sequential", "random"):
            raise ValueError(f"unknown scan order {self.scan_order!r}")
        if self.concentration <= 0.0:
            raise ValueError("concentration must be positive")
        std = np.asarray(self.param_prior_std, dtype=float)
        if std.shape not in ((), (3,)) or np.any(std <= 0):
            raise ValueError("param_prior_std must be positive, scalar or length 3")
        if std.shape == (3,):
            object.__setattr__(self, "param_prior_std", tuple(float(s) for s in std))


@dataclass(frozen=True)
class PosteriorSample:
    """One retained snapshot of the chain state."""

    iteration: int
    x: np.ndarray
    labels: np.ndarray
    params: KernelParams
    joint_log_prob: float

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1


@dataclass
class ChainDiagnostics:
    accept_rate_x: float
    accept_rate_params: float
    step_size_x: float
    step_size_params: float
    cluster_trace: np.ndarray


@dataclass
class ChainRun:
    samples: list[PosteriorSample]
    diagnostics: ChainDiagnostics


def initial_latents(y: np.ndarray, latent_dim: int) -> np.ndarray:
    """Starting latent positions: the data itself, or leading principal scores.

    When the latent dimension matches the observed one the observations are
    used directly; otherwise the top principal component scores, each
    rescaled to unit variance.
    """
    n, d = y.shape
    if latent_dim > d:
        raise ValueError(f"latent_dim {latent_dim} exceeds observed dim {d}")
    if latent_dim == d:
        return y.copy()
    centered = y - y.mean(axis=0)
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    scores = u[:, :latent_dim] * s[:latent_dim]
    std = scores.std(axis=0)
    std[std == 0.0] = 1.0
    return scores / std


def _latent_logp_and_grad(q_flat, y, labels, clusters_of, prior, params, shape):
    if not np.all(np.isfinite(q_flat)):
        return -np.inf, np.zeros_like(q_flat)
    x = q_flat.reshape(shape)
    try:
        gram = gp.gram_matrix(x, params)
    except numerics.NotPositiveDefiniteError:
        return -np.inf, np.zeros_like(q_flat)
    clusters = clusters_of(x)
    value = gp.gplvm_log_marginal(y, gram) + sum(
        latent_mixture._cluster_log_marginal(s) for s in clusters
    )
    grad_x, _ = gp.gplvm_gradients(y, gram)
    grad_x = grad_x + latent_mixture.grad_logprior_x(x, labels, clusters)
    return value, grad_x.ravel()


def _params_logp_and_grad(theta, y, x, prior_std):
    # Log parameters beyond this range overflow exp well before they matter
    # under any sane prior; treat them as off-support.
    if not np.all(np.isfinite(theta)) or np.any(np.abs(theta) > 30.0):
        return -np.inf, np.zeros(3)
    params = KernelParams.from_array(theta)
    try:
        gram = gp.gram_matrix(x, params)
    except numerics.NotPositiveDefiniteError:
        return -np.inf, np.zeros(3)
    var = np.broadcast_to(np.asarray(prior_std, dtype=float), (3,)) ** 2
    value = gp.gplvm_log_marginal(y, gram) - 0.5 * float(theta @ (theta / var))
    _, grad = gp.gplvm_gradients(y, gram)
    return value, grad - theta / var


def run_chain(y: np.ndarray, config: ChainConfig, seed=None) -> ChainRun:
    """Run one chain on an observation matrix and collect thinned samples.

    The observations should already be centered and scaled; the driver does
    not standardize.  All randomness flows through a single generator seeded
    here, so equal seeds give bitwise equal runs.
    """
    rng = numerics.as_generator(seed)
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("observations must be a nonempty 2-d array")
    n, d = y.shape
    q_dim = d if config.latent_dim is None else config.latent_dim
    prior = config.prior if config.prior is not None else NiwPrior.default(q_dim)
    if prior.dim != q_dim:
        raise ValueError(f"prior dim {prior.dim} does not match latent dim {q_dim}")

    x = initial_latents(y, q_dim)
    state = MixtureState(x, np.zeros(n, dtype=int), prior)
    params = config.init_params

    def clusters_of(x_new):
        return [
            latent_mixture.posterior_stats(prior, x_new[state.labels == c])
            for c in range(state.n_clusters)
        ]

    adapt_x = DualAveraging(config.hmc_x.step_size, target=config.hmc_x.target_accept)
    adapt_p = DualAveraging(config.hmc_params.step_size, target=config.hmc_params.target_accept)
    hmc_x = config.hmc_x
    hmc_p = config.hmc_params

    samples: list[PosteriorSample] = []
    cluster_trace = np.zeros(config.n_iter, dtype=int)
    accepts_x = accepts_p = kept_moves = 0

    for it in range(1, config.n_iter + 1):
        if not config.single_cluster:
            order = (
                rng.permutation(n) if config.scan_order == "random" else np.arange(n)
            )
            gibbs_sweep(state, config.concentration, rng, order)

        res_x = hmc_step(
            state.x.ravel(),
            lambda q: _latent_logp_and_grad(
                q, y, state.labels, clusters_of, prior, params, (n, q_dim)
            ),
            hmc_x,
            rng,
        )
        if res_x.accepted:
            state.refresh(res_x.position.reshape(n, q_dim))

        res_p = hmc_step(
            params.as_array(),
            lambda t: _params_logp_and_grad(t, y, state.x, config.param_prior_std),
            hmc_p,
            rng,
        )
        if res_p.accepted:
            params = KernelParams.from_array(res_p.position)

        if it <= config.burn_in:
            hmc_x = replace(hmc_x, step_size=adapt_x.update(res_x.accept_prob))
            hmc_p = replace(hmc_p, step_size=adapt_p.update(res_p.accept_prob))
            if it == config.burn_in:
                hmc_x = replace(hmc_x, step_size=adapt_x.frozen_step)
                hmc_p = replace(hmc_p, step_size=adapt_p.frozen_step)
        else:
            accepts_x += res_x.accepted
            accepts_p += res_p.accepted
            kept_moves += 1

        cluster_trace[it - 1] = state.n_clusters
        if config.check_every and it % config.check_every == 0:
            state.check_consistency()

        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            gram = gp.gram_matrix(state.x, params)
            joint = gp.gplvm_log_marginal(y, gram) + state.log_marginal()
            if not config.single_cluster:
                joint += latent_mixture.crp_log_prob(state.counts, config.concentration)
            samples.append(
                PosteriorSample(
                    iteration=it,
                    x=state.x.copy(),
                    labels=state.labels.copy(),
                    params=params,
                    joint_log_prob=float(joint),
                )
            )

        if it % 500 == 0:
            logger.info(
                "iter=%d clusters=%d step_x=%.4f step_params=%.4f",
                it,
                state.n_clusters,
                hmc_x.step_size,
                hmc_p.step_size,
            )

    diag = ChainDiagnostics(
        accept_rate_x=accepts_x / max(kept_moves, 1),
        accept_rate_params=accepts_p / max(kept_moves, 1),
        step_size_x=hmc_x.step_size,
        step_size_params=hmc_p.step_size,
        cluster_trace=cluster_trace,
    )
    logger.info(
        "chain done: %d samples, accept_x=%.2f accept_params=%.2f",
        len(samples),
        diag.accept_rate_x,
        diag.accept_rate_params,
    )
    return ChainRun(samples=samples, diagnostics=diag)


@dataclass(frozen=True)
class PriorDraw:
    """One forward draw of the full generative process."""

    x: np.ndarray
    labels: np.ndarray
    y: np.ndarray


def simulate_observations(gram: GramMatrix, n_dims: int, rng: np.random.Generator) -> np.ndarray:
    """Draw an observation matrix from the GP layer at fixed latents.

    Function values and observation noise are folded together through the
    noise-inclusive gram matrix.
    """
    return gram.chol @ rng.standard_normal((gram.k.shape[0], n_dims))


def prior_simulate(
    n: int,
    n_dims: int,
    prior: NiwPrior,
    concentration: float,
    params: KernelParams,
    rng,
) -> PriorDraw:
    """Forward simulate assignments, latents, and observations from the model."""
    rng = numerics.as_generator(rng)
    labels = np.zeros(n, dtype=int)
    counts: list[int] = []
    components: list[tuple[np.ndarray, np.ndarray]] = []
    x = np.zeros((n, prior.dim))
    prior_stats = latent_mixture.ClusterStats(prior)
    for i in range(n):
        weights = np.append(np.asarray(counts, dtype=float), concentration)
        c = numerics.sample_categorical(weights, rng)
        if c == len(counts):
            counts.append(0)
            components.append(latent_mixture.sample_component_params(prior_stats, rng))
        counts[c] += 1
        labels[i] = c
        mean, precision = components[c]
        prec_chol = numerics.cholesky(precision)
        z = rng.standard_normal(prior.dim)
        x[i] = mean + np.linalg.solve(prec_chol.T, z)
    gram = gp.gram_matrix(x, params)
    y = simulate_observations(gram, n_dims, rng)
    return PriorDraw(x=x, labels=labels, y=y)
