"""Clustering scores, density baselines, and the benchmark harness.

Three layers live here.  Scoring: the Rand index and the point-estimate
rule that picks one clustering out of a chain.  Baselines: a kernel
density estimate with a leave-one-out fitted bandwidth, and the
unwarped mixture obtained by running the collapsed Gibbs scan directly
on the observations.  Harness: cross-validated fits of every method on
every dataset, collected into one flat report.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import gammaln, logsumexp

from . import data as data_mod
from . import numerics
from .latent_mixture import (
    ClusterStats,
    MixtureState,
    NiwPrior,
    crp_log_prob,
    posterior_stats,
)
from .predictive import predictive_log_density
from .sampler import ChainConfig, gibbs_sweep, run_chain

LOG_2PI = np.log(2.0 * np.pi)


class LengthMismatchError(ValueError):
    """Predicted and reference assignments disagree in length."""


class EmptyChainError(ValueError):
    """A point estimate was requested from a chain with no samples."""


class DegenerateDataError(ValueError):
    """All training points coincide, so no bandwidth is identifiable."""


# ---------------------------------------------------------------------------
# clustering scores


def rand_index(z_pred, z_true) -> float:
    """Fraction of point pairs on which two partitions agree.

    A pair agrees when both partitions put it in one cluster or both
    split it.  The score is symmetric and ignores how clusters are
    numbered.

    Parameters
    ----------
    z_pred, z_true : array_like
        Integer cluster assignments of equal length, at least two points.

    Returns
    -------
    float
        Agreement fraction in [0, 1].
    """
    zp = np.asarray(z_pred).ravel()
    zt = np.asarray(z_true).ravel()
    if zp.shape != zt.shape:
        raise LengthMismatchError(
            f"assignment lengths differ: {zp.size} vs {zt.size}"
        )
    n = zp.size
    if n < 2:
        raise ValueError("need at least two points")
    _, pi = np.unique(zp, return_inverse=True)
    _, ti = np.unique(zt, return_inverse=True)
    kp = int(pi.max()) + 1
    kt = int(ti.max()) + 1
    table = np.bincount(pi * kt + ti, minlength=kp * kt).reshape(kp, kt)

    def pairs(counts):
        c = counts.astype(float)
        return float(np.sum(c * (c - 1.0)) / 2.0)

    together_both = pairs(table.ravel())
    together_pred = pairs(table.sum(axis=1))
    together_true = pairs(table.sum(axis=0))
    disagree = together_pred + together_true - 2.0 * together_both
    return 1.0 - disagree / (n * (n - 1) / 2.0)


def select_point_estimate(samples) -> np.ndarray:
    """Assignments of the sample with the highest joint log probability.

    Ties keep the earliest sample, so reruns over the same chain are
    stable.  Raises ``EmptyChainError`` on an empty sequence.
    """
    best = None
    for sample in samples:
        if best is None or sample.joint_log_prob > best.joint_log_prob:
            best = sample
    if best is None:
        raise EmptyChainError("no samples to select from")
    return np.array(best.labels, copy=True)


# ---------------------------------------------------------------------------
# kernel density baseline


@dataclass(frozen=True)
class KdeFit:
    """Isotropic Gaussian kernel estimate with one shared bandwidth."""

    y: np.ndarray
    log_bandwidth: float
    loo_objective: float = np.nan

    @property
    def bandwidth(self) -> float:
        return float(np.exp(self.log_bandwidth))


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sa = np.sum(a * a, axis=1)
    sb = np.sum(b * b, axis=1)
    d2 = sa[:, None] + sb[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def kde_loo_objective(y: np.ndarray, log_h: float, sq_dists=None) -> float:
    """Sum over points of the log leave-one-out mixture density."""
    y = np.asarray(y, dtype=float)
    n, d = y.shape
    if sq_dists is None:
        sq_dists = _pairwise_sq_dists(y, y)
    inv_h2 = np.exp(-2.0 * log_h)
    log_k = -0.5 * sq_dists * inv_h2 - d * log_h - 0.5 * d * LOG_2PI
    np.fill_diagonal(log_k, -np.inf)
    per_point = logsumexp(log_k, axis=1) - np.log(n - 1)
    return float(per_point.sum())


def fit_kde(y: np.ndarray) -> KdeFit:
    """Fit the shared bandwidth by maximizing the leave-one-out density.

    A coarse scan over log bandwidth brackets the optimum, then a
    golden-section refinement narrows it.  The objective is unimodal in
    every case that has come up; the scan guards the bracket anyway.

    Raises
    ------
    DegenerateDataError
        If all training points coincide.
    ValueError
        If fewer than two points are given.
    """
    y = np.ascontiguousarray(np.asarray(y, dtype=float))
    if y.ndim == 1:
        y = y[:, None]
    n = y.shape[0]
    if n < 2:
        raise ValueError("bandwidth fitting needs at least two points")
    sq = _pairwise_sq_dists(y, y)
    off = sq[~np.eye(n, dtype=bool)]
    positive = off[off > 0.0]
    if positive.size == 0:
        raise DegenerateDataError("all points coincide")

    lo = 0.5 * np.log(positive.min()) - 4.0
    hi = 0.5 * np.log(positive.max()) + 2.0
    grid = np.linspace(lo, hi, 41)
    values = np.array([kde_loo_objective(y, t, sq) for t in grid])
    # extend downhill ends until the best grid point sits strictly inside
    for _ in range(4):
        i = int(np.argmax(values))
        if 0 < i < grid.size - 1:
            break
        step = grid[1] - grid[0]
        if i == 0:
            grid = np.concatenate([[grid[0] - 4 * step], grid])
            values = np.concatenate([[kde_loo_objective(y, grid[0], sq)], values])
        else:
            grid = np.concatenate([grid, [grid[-1] + 4 * step]])
            values = np.concatenate([values, [kde_loo_objective(y, grid[-1], sq)]])
    i = int(np.argmax(values))
    if not 0 < i < grid.size - 1:
        return KdeFit(y=y, log_bandwidth=float(grid[i]), loo_objective=float(values[i]))

    neg = lambda t: -kde_loo_objective(y, t, sq)
    try:
        res = minimize_scalar(
            neg,
            bracket=(grid[i - 1], grid[i], grid[i + 1]),
            method="golden",
            options={"xtol": 1e-10},
        )
        best_t, best_v = float(res.x), -float(res.fun)
    except ValueError:
        best_t, best_v = float(grid[i]), float(values[i])
    return KdeFit(y=y, log_bandwidth=best_t, loo_objective=best_v)


def kde_log_density(fit: KdeFit, points):
    """Log density of the full-sample kernel mixture at the given points."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    n, d = fit.y.shape
    if pts.shape[1] != d:
        raise ValueError(f"points have dimension {pts.shape[1]}, expected {d}")
    sq = _pairwise_sq_dists(pts, fit.y)
    log_h = fit.log_bandwidth
    log_k = -0.5 * sq * np.exp(-2.0 * log_h) - d * log_h - 0.5 * d * LOG_2PI
    out = logsumexp(log_k, axis=1) - np.log(n)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# unwarped mixture baseline


@dataclass(frozen=True)
class GibbsSample:
    """One retained state of the collapsed assignment scan."""

    iteration: int
    labels: np.ndarray
    joint_log_prob: float

    @property
    def n_clusters(self) -> int:
        return int(np.unique(self.labels).size)


def igmm_fit(
    y: np.ndarray,
    *,
    prior: NiwPrior | None = None,
    concentration: float = 1.0,
    n_iter: int = 5000,
    burn_in: int = 1000,
    thin: int = 5,
    single_cluster: bool = False,
    seed=None,
) -> list[GibbsSample]:
    """Collapsed Gibbs clustering applied directly to the observations.

    This is the fixed-identity-map special case of the warped model: the
    latent coordinates equal the (already standardized) data and never
    move, so only assignments are sampled.  The retained samples follow
    the same burn-in and thinning rule as the full chain.
    """
    y = np.ascontiguousarray(np.asarray(y, dtype=float))
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("y must be a nonempty 2-D array")
    if n_iter < 1 or not 0 <= burn_in < n_iter:
        raise ValueError("need 0 <= burn_in < n_iter")
    if thin < 1:
        raise ValueError("thin must be at least 1")
    rng = numerics.as_generator(seed)
    if prior is None:
        prior = NiwPrior.default(y.shape[1])
    state = MixtureState(y, np.zeros(y.shape[0], dtype=np.intp), prior)
    out = []
    for it in range(1, n_iter + 1):
        if not single_cluster:
            gibbs_sweep(state, concentration, rng)
        if it > burn_in and (it - burn_in) % thin == 0:
            joint = crp_log_prob(state.counts, concentration) + state.log_marginal()
            out.append(GibbsSample(it, state.labels.copy(), float(joint)))
    return out


def _student_t_log_density(points: np.ndarray, stats: ClusterStats) -> np.ndarray:
    """Posterior predictive log density of a summarized cluster, batched.

    Closed form: a multivariate Student-t whose degrees of freedom drop
    by the dimension minus one and whose scale matrix is the posterior
    scatter inflated by (r+1)/r.  With zero-count statistics this is the
    prior predictive.
    """
    q = stats.dim
    dof = stats.dof - q + 1.0
    fac = (stats.precision_scale + 1.0) / (stats.precision_scale * dof)
    diff = (points - stats.mean).T
    sol = stats.inv_chol @ diff
    maha = np.einsum("qm,qm->m", sol, sol) / fac
    logdet = q * np.log(fac) + stats.scale_logdet
    return (
        gammaln((dof + q) / 2.0)
        - gammaln(dof / 2.0)
        - 0.5 * q * np.log(dof * np.pi)
        - 0.5 * logdet
        - 0.5 * (dof + q) * np.log1p(maha / dof)
    )


def igmm_log_density(
    points,
    samples,
    y_train: np.ndarray,
    *,
    prior: NiwPrior | None = None,
    concentration: float = 1.0,
):
    """Predictive log density of the unwarped mixture, averaged over samples.

    Each retained clustering contributes a closed-form mixture: one
    Student-t term per occupied cluster weighted by its count, plus the
    prior predictive weighted by the concentration.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    y_train = np.asarray(y_train, dtype=float)
    n, d = y_train.shape
    if prior is None:
        prior = NiwPrior.default(d)
    samples = list(samples)
    if not samples:
        raise EmptyChainError("no samples to average over")
    total = np.log(n + concentration)
    acc = np.full(pts.shape[0], -np.inf)
    for sample in samples:
        labels = np.asarray(sample.labels)
        ids = np.unique(labels)
        comp = np.empty((ids.size + 1, pts.shape[0]))
        for row, c in enumerate(ids):
            members = y_train[labels == c]
            stats = posterior_stats(prior, members)
            comp[row] = np.log(members.shape[0]) + _student_t_log_density(pts, stats)
        comp[-1] = np.log(concentration) + _student_t_log_density(
            pts, prior.empty_stats
        )
        acc = np.logaddexp(acc, logsumexp(comp, axis=0) - total)
    out = acc - np.log(len(samples))
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# benchmark harness

METHODS = ("iwmm_q2", "iwmm_qd", "iwmm_c1", "igmm", "kde")


@dataclass(frozen=True)
class BenchmarkRow:
    """One fitted fold.  Metric cells hold a float, an ``error:`` tag
    when the job raised, or an empty string where the metric does not
    apply (the kernel baseline produces no clustering)."""

    dataset: str
    method: str
    fold: int
    rand_index: object
    test_log_lik: object
    wall_time_s: float
    seed: int
    config_digest: str


_REPORT_COLUMNS = (
    "dataset",
    "method",
    "fold",
    "rand_index",
    "test_log_lik",
    "wall_time_s",
    "seed",
    "config_digest",
)


@dataclass
class BenchmarkReport:
    """Flat per-fold rows plus aggregation and CSV emission."""

    rows: list = field(default_factory=list)

    def aggregate(self) -> list[dict]:
        """Mean and standard error per (dataset, method), error rows skipped."""
        groups: dict[tuple, dict] = {}
        for row in self.rows:
            g = groups.setdefault(
                (row.dataset, row.method),
                {"rand": [], "loglik": [], "n": 0},
            )
            g["n"] += 1
            if isinstance(row.rand_index, float):
                g["rand"].append(row.rand_index)
            if isinstance(row.test_log_lik, float):
                g["loglik"].append(row.test_log_lik)

        def stats(values):
            if not values:
                return "", ""
            arr = np.asarray(values)
            mean = float(arr.mean())
            if arr.size < 2:
                return mean, ""
            return mean, float(arr.std(ddof=1) / np.sqrt(arr.size))

        out = []
        for (dataset, method), g in sorted(groups.items()):
            rand_mean, rand_se = stats(g["rand"])
            ll_mean, ll_se = stats(g["loglik"])
            out.append(
                {
                    "dataset": dataset,
                    "method": method,
                    "n_rows": g["n"],
                    "rand_index_mean": rand_mean,
                    "rand_index_stderr": rand_se,
                    "test_log_lik_mean": ll_mean,
                    "test_log_lik_stderr": ll_se,
                }
            )
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(_REPORT_COLUMNS) + "\n")
            for row in self.rows:
                cells = [
                    row.dataset,
                    row.method,
                    str(row.fold),
                    _cell(row.rand_index),
                    _cell(row.test_log_lik),
                    _cell(row.wall_time_s),
                    str(row.seed),
                    row.config_digest,
                ]
                fh.write(",".join(cells) + "\n")

    def write_aggregate_csv(self, path) -> None:
        cols = (
            "dataset",
            "method",
            "n_rows",
            "rand_index_mean",
            "rand_index_stderr",
            "test_log_lik_mean",
            "test_log_lik_stderr",
        )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for entry in self.aggregate():
                fh.write(",".join(_cell(entry[c]) for c in cols) + "\n")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_digest(mapping: dict) -> str:
    """Short stable digest of a resolved configuration mapping."""
    text = json.dumps(mapping, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def _method_chain(method: str, chain: ChainConfig) -> ChainConfig:
    if method == "iwmm_q2":
        return replace(chain, latent_dim=2, single_cluster=False)
    if method == "iwmm_qd":
        return replace(chain, latent_dim=None, single_cluster=False)
    if method == "iwmm_c1":
        return replace(chain, single_cluster=True)
    raise ValueError(f"unknown method {method!r}")


def _method_rng(seed: int, fold: int, method: str) -> np.random.Generator:
    salt = int.from_bytes(hashlib.sha256(method.encode()).digest()[:4], "big")
    return np.random.default_rng((seed, fold, salt))


def benchmark(
    datasets: dict,
    methods=METHODS,
    *,
    k_folds: int = 20,
    seeds=(0,),
    chain: ChainConfig | None = None,
    m_inner: int = 1000,
    point_estimate: str = "max_joint",
    progress=None,
) -> BenchmarkReport:
    """Cross-validated comparison of every method on every dataset.

    Each fold standardizes on its training split; all densities are
    mapped back to the original units through the transform Jacobian, so
    methods stay comparable.  The Rand index is scored on the training
    split clustering against the true labels.  Jobs are independent;
    a failing job contributes a tagged row instead of aborting the run.

    Parameters
    ----------
    datasets : dict
        Name to labeled dataset mapping.
    methods : sequence of str
        Subset of ``METHODS``.
    k_folds, seeds : int, sequence of int
        Fold count and split seeds.  Fold ids repeat across seeds; rows
        are unique in (dataset, method, fold, seed).
    chain : ChainConfig, optional
        Shared schedule and model settings; the latent dimension and the
        single-component switch are overridden per method.
    point_estimate : {"max_joint", "last"}
        Which retained sample supplies the clustering that is scored.

    Returns
    -------
    BenchmarkReport
    """
    if chain is None:
        chain = ChainConfig()
    if point_estimate not in ("max_joint", "last"):
        raise ValueError(f"unknown point estimate rule {point_estimate!r}")
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")

    report = BenchmarkReport()
    for name, dataset in datasets.items():
        for seed in seeds:
            folds = data_mod.cv_folds(dataset.n, k_folds, seed=seed)
            for fold in range(k_folds):
                train_idx, test_idx = folds.split(fold)
                for method in methods:
                    row = _run_job(
                        name,
                        dataset,
                        method,
                        fold,
                        train_idx,
                        test_idx,
                        int(seed),
                        chain,
                        k_folds,
                        m_inner,
                        point_estimate,
                    )
                    report.rows.append(row)
                    if progress is not None:
                        progress(row)
    return report


def _point_labels(samples, rule: str) -> np.ndarray:
    if rule == "last":
        samples = list(samples)
        if not samples:
            raise EmptyChainError("no samples to select from")
        return np.array(samples[-1].labels, copy=True)
    if rule != "max_joint":
        raise ValueError(f"unknown point estimate rule {rule!r}")
    return select_point_estimate(samples)


def _run_job(
    name,
    dataset,
    method,
    fold,
    train_idx,
    test_idx,
    seed,
    chain,
    k_folds,
    m_inner,
    point_estimate,
):
    digest_source = {
        "method": method,
        "k_folds": int(k_folds),
        "m_inner": int(m_inner),
        "point_estimate": point_estimate,
        "chain": data_mod._config_to_dict(chain),
    }
    digest = config_digest(digest_source)
    start = time.perf_counter()
    try:
        y_train = dataset.y[train_idx]
        y_test = dataset.y[test_idx]
        labels_true = None if dataset.labels is None else dataset.labels[train_idx]
        std_train, transform = data_mod.standardize(
            data_mod.Dataset(y_train, name=name)
        )
        y_test_std = transform.apply(y_test)
        jac = transform.log_jacobian

        if method == "kde":
            fit = fit_kde(std_train.y)
            rand: object = ""
            loglik: object = float(
                np.mean(kde_log_density(fit, y_test_std)) + jac
            )
        elif method == "igmm":
            prior = chain.prior or NiwPrior.default(y_train.shape[1])
            samples = igmm_fit(
                std_train.y,
                prior=prior,
                concentration=chain.concentration,
                n_iter=chain.n_iter,
                burn_in=chain.burn_in,
                thin=chain.thin,
                seed=np.random.default_rng((seed, fold, 0)),
            )
            z = _point_labels(samples, point_estimate)
            rand = "" if labels_true is None else rand_index(z, labels_true)
            loglik = float(
                np.mean(
                    igmm_log_density(
                        y_test_std,
                        samples,
                        std_train.y,
                        prior=prior,
                        concentration=chain.concentration,
                    )
                )
                + jac
            )
        else:
            cfg = _method_chain(method, chain)
            run = run_chain(std_train.y, cfg, seed=np.random.default_rng((seed, fold, 1)))
            z = _point_labels(run.samples, point_estimate)
            rand = "" if labels_true is None else rand_index(z, labels_true)
            loglik = float(
                np.mean(
                    predictive_log_density(
                        y_test_std,
                        run.samples,
                        std_train.y,
                        prior=cfg.prior,
                        concentration=cfg.concentration,
                        m_inner=m_inner,
                        rng=_method_rng(seed, fold, method),
                    )
                )
                + jac
            )
    except Exception as exc:  # tagged row, run continues
        tag = f"error:{type(exc).__name__}"
        rand, loglik = tag, tag
    wall = time.perf_counter() - start
    return BenchmarkRow(
        dataset=name,
        method=method,
        fold=fold,
        rand_index=rand,
        test_log_lik=loglik,
        wall_time_s=float(wall),
        seed=seed,
        config_digest=digest,
    )
