import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import logsumexp

from warpmix import data, gp, predictive, sampler
from warpmix.gp import KernelParams
from warpmix.latent_mixture import NiwPrior, posterior_stats
from warpmix.predictive import LOG_DENSITY_FLOOR
from warpmix.sampler import PosteriorSample


def make_sample(x, labels, params=None, iteration=1):
    return PosteriorSample(
        iteration=iteration,
        x=np.asarray(x, dtype=float),
        labels=np.asarray(labels, dtype=int),
        params=params or KernelParams(0.0, np.log(25.0), 0.0),
        joint_log_prob=0.0,
    )


def t_predictive_1d(s):
    """Student-t matching a 1-d Gaussian-Wishart marginal predictive."""
    dof = s.dof
    var = s.scale_chol[0, 0] ** 2 * (s.precision_scale + 1.0) / (
        s.precision_scale * dof
    )
    return dof, float(s.mean[0]), float(np.sqrt(var))


class TestDrawLatentStar:
    def test_matches_mixture_of_student_t(self):
        # Marginalizing the drawn component parameters gives a two-branch
        # mixture: the cluster's posterior predictive with weight N/(N+eta)
        # and the prior predictive with weight eta/(N+eta).  A KS test
        # against that CDF verifies both the weights and the shapes.
        rng = np.random.default_rng(1)
        prior = NiwPrior.default(1)
        n = 9
        pts = rng.standard_normal((n, 1)) * 0.5 + 2.0
        sample = make_sample(pts, np.zeros(n, dtype=int))
        stats_c = posterior_stats(prior, pts)
        draws = np.array(
            [
                predictive.draw_latent_star(sample, prior, 1.0, rng)[0]
                for _ in range(100000)
            ]
        )
        dof_c, loc_c, scale_c = t_predictive_1d(stats_c)
        dof_0, loc_0, scale_0 = t_predictive_1d(prior.empty_stats)

        def mixture_cdf(v):
            w = n / (n + 1.0)
            return w * stats.t.cdf(v, dof_c, loc_c, scale_c) + (1.0 - w) * stats.t.cdf(
                v, dof_0, loc_0, scale_0
            )

        ks = stats.kstest(draws, mixture_cdf)
        assert ks.statistic < 0.01
        # a misweighted mixture would be detected
        def wrong_cdf(v):
            return 0.75 * stats.t.cdf(v, dof_c, loc_c, scale_c) + 0.25 * stats.t.cdf(
                v, dof_0, loc_0, scale_0
            )

        assert stats.kstest(draws, wrong_cdf).statistic > 0.05


class TestWarpedDraws:
    def test_stream_prefix(self):
        rng_a = np.random.default_rng(2)
        rng_b = np.random.default_rng(2)
        prior = NiwPrior.default(1)
        x = np.linspace(-1, 1, 7)[:, None]
        y = np.sin(x)
        sample = make_sample(x, np.zeros(7, dtype=int))
        m_a, v_a = predictive.warped_draws(sample, y, prior, 1.0, 10, rng_a)
        m_b, v_b = predictive.warped_draws(sample, y, prior, 1.0, 20, rng_b)
        np.testing.assert_array_equal(m_a, m_b[:10])
        np.testing.assert_array_equal(v_a, v_b[:10])


class TestPredictiveLogDensity:
    def test_single_draw_is_plain_gaussian(self):
        prior = NiwPrior.default(1)
        x = np.array([[-0.5], [0.3], [1.1]])
        y = np.array([[0.2, -0.1], [0.5, 0.0], [0.9, 0.4]])
        sample = make_sample(x, np.zeros(3, dtype=int))
        y_star = np.array([0.4, 0.1])
        got = predictive.predictive_log_density(
            y_star, [sample], y, prior=prior, m_inner=1, rng=7
        )
        rng = np.random.default_rng(7)
        star = predictive.draw_latent_star(sample, prior, 1.0, rng)
        gram = gp.gram_matrix(sample.x, sample.params)
        mean, var = gp.gp_conditional(star, y, gram)
        expected = float(
            -0.5 * np.sum((y_star - mean) ** 2) / var - np.log(2.0 * np.pi * var)
        )
        assert got == pytest.approx(expected, abs=1e-12)

    def test_batch_matches_singles(self):
        prior = NiwPrior.default(1)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 1))
        y = np.column_stack([np.tanh(x[:, 0]), x[:, 0] ** 2])
        sample = make_sample(x, np.array([0, 0, 0, 1, 1, 1]))
        pts = rng.standard_normal((4, 2))
        batch = predictive.predictive_log_density(
            pts, [sample], y, prior=prior, m_inner=50, rng=11
        )
        singles = [
            predictive.predictive_log_density(
                p, [sample], y, prior=prior, m_inner=50, rng=11
            )
            for p in pts
        ]
        np.testing.assert_allclose(batch, singles, atol=1e-12)

    def test_deterministic(self):
        prior = NiwPrior.default(1)
        x = np.linspace(-1, 1, 5)[:, None]
        y = np.cos(x)
        sample = make_sample(x, np.zeros(5, dtype=int))
        a = predictive.predictive_log_density(
            np.array([0.5]), [sample], y, prior=prior, m_inner=40, rng=5
        )
        b = predictive.predictive_log_density(
            np.array([0.5]), [sample], y, prior=prior, m_inner=40, rng=5
        )
        assert a == b

    def test_far_point_hits_floor(self):
        prior = NiwPrior.default(1)
        x = np.zeros((3, 1))
        y = np.zeros((3, 1))
        sample = make_sample(x, np.zeros(3, dtype=int))
        got = predictive.predictive_log_density(
            np.array([1e8]), [sample], y, prior=prior, m_inner=5, rng=0
        )
        assert got == LOG_DENSITY_FLOOR

    def test_validation(self):
        with pytest.raises(ValueError):
            predictive.predictive_log_density(np.zeros(1), [], np.zeros((1, 1)))

    def test_matches_quadrature_oracle(self):
        # Frozen sample, one latent dimension: the Monte Carlo estimate
        # must agree with direct quadrature over the latent mixture.
        prior = NiwPrior.default(1)
        x = np.array([[-1.0], [0.1], [1.2]])
        y = np.array([[0.8], [-0.2], [0.5]])
        labels = np.array([0, 0, 1])
        params = KernelParams(0.0, np.log(9.0), 0.0)
        sample = make_sample(x, labels, params)
        gram = gp.gram_matrix(x, params)
        eta = 1.0

        clusters = [posterior_stats(prior, x[labels == c]) for c in (0, 1)]

        def latent_pdf(v):
            # counts/(N+eta) posterior-t terms plus the eta-weighted prior t
            total = 0.0
            for s in clusters:
                dof_c, loc_c, scale_c = t_predictive_1d(s)
                total += s.count * stats.t.pdf(v, dof_c, loc_c, scale_c)
            dof_0, loc_0, scale_0 = t_predictive_1d(prior.empty_stats)
            total += eta * stats.t.pdf(v, dof_0, loc_0, scale_0)
            return total / (3.0 + eta)

        y_star = np.array([0.3])

        def integrand(v):
            mean, var = gp.gp_conditional(np.array([v]), y, gram)
            dens = np.exp(-0.5 * (y_star[0] - mean[0]) ** 2 / var) / np.sqrt(
                2.0 * np.pi * var
            )
            return float(dens) * latent_pdf(v)

        oracle, err = integrate.quad(integrand, -30, 30, limit=300)
        mc = predictive.predictive_log_density(
            y_star, [sample], y, prior=prior, concentration=eta, m_inner=400000, rng=13
        )
        assert np.exp(mc) == pytest.approx(oracle, rel=0.01)


@pytest.fixture(scope="module")
def short_fit():
    ds = data.generate("two_curve", 40, seed=2)
    std, _ = data.standardize(ds)
    cfg = sampler.ChainConfig(n_iter=220, burn_in=120, thin=5)
    run = sampler.run_chain(std.y, cfg, seed=1)
    return std.y, run.samples


class TestDensityGrid:
    def test_shape_and_order(self):
        prior = NiwPrior.default(1)
        x = np.linspace(-1, 1, 5)[:, None]
        y = np.column_stack([x[:, 0], np.cos(x[:, 0])])
        sample = make_sample(x, np.zeros(5, dtype=int))
        grid = predictive.density_grid(
            [sample], y, ((-2, 2, 10), (-1, 3, 12)), prior=prior, m_inner=20, rng=3
        )
        assert grid.log_density.shape == (120,)
        assert np.all(np.isfinite(grid.log_density))
        nodes = grid.nodes()
        assert nodes.shape == (120, 2)
        # first axis outermost
        np.testing.assert_allclose(nodes[:12, 0], -2.0)
        np.testing.assert_allclose(nodes[12:24, 0], -2.0 + 4.0 / 9.0)

    def test_mass_near_one(self, short_fit):
        y, samples = short_fit
        grid = predictive.density_grid(
            samples[::4],
            y,
            ((-6.0, 6.0, 81), (-6.0, 6.0, 81)),
            m_inner=150,
            rng=4,
        )
        assert 0.9 <= grid.mass() <= 1.05

    def test_rejects_other_dims(self):
        with pytest.raises(predictive.UnsupportedDimensionError):
            predictive.density_grid(
                [make_sample(np.zeros((2, 1)), np.zeros(2, dtype=int))],
                np.zeros((2, 2)),
                ((-1, 1, 4),),
                m_inner=2,
                rng=0,
            )

    def test_save_with_sidecar(self, tmp_path):
        import json

        prior = NiwPrior.default(1)
        x = np.linspace(-1, 1, 4)[:, None]
        y = np.column_stack([x[:, 0], x[:, 0]])
        sample = make_sample(x, np.zeros(4, dtype=int))
        grid = predictive.density_grid(
            [sample], y, ((-1, 1, 4), (-1, 1, 5)), prior=prior, m_inner=10, rng=6
        )
        out = tmp_path / "grid.csv"
        predictive.save_density_grid(grid, out, meta={"seed": 6})
        lines = out.read_text().splitlines()
        assert lines[0] == "x,y,log_density"
        assert len(lines) == 21
        meta = json.loads((tmp_path / "grid.csv.meta.json").read_text())
        assert meta["axes"] == [[-1.0, 1.0, 4], [-1.0, 1.0, 5]]
        assert meta["latent_draws"] == 10
        assert meta["seed"] == 6


class TestSingleComponentBridge:
    def test_density_connects_the_two_arcs(self):
        # With the mixture collapsed to one latent Gaussian the warped
        # density cannot separate the arcs: the corridor between them
        # keeps substantial mass, unlike the outside at the same
        # distance from the nearest arc.
        gap, curvature = 2.0, 0.75
        ds = data.generate("two_curve", 60, seed=5, gap=gap, curvature=curvature)
        std, transform = data.standardize(ds)
        cfg = sampler.ChainConfig(n_iter=1200, burn_in=400, thin=8, single_cluster=True)
        run = sampler.run_chain(std.y, cfg, seed=2)

        t = np.linspace(-0.8, 0.8, 5)
        corridor = np.column_stack([t, curvature * t**2 + 0.5 * gap])
        outside = np.array([[0.0, -0.5 * gap]])
        points = transform.apply(np.vstack([corridor, outside]))
        log_dens = predictive.predictive_log_density(
            points, run.samples[::4], std.y, m_inner=300, rng=7
        )
        assert log_dens[:-1].min() > log_dens[-1] + 2.0
