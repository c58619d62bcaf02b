import numpy as np
import pytest

from warpmix import gp, latent_mixture as lm, sampler
from warpmix.sampler import ChainConfig, DualAveraging, HmcConfig, hmc_step


def std_normal_target(q):
    return -0.5 * float(q @ q), -q


def canonical_partition(labels):
    """Relabel into first-appearance order so partitions compare equal."""
    seen = {}
    out = []
    for v in labels:
        out.append(seen.setdefault(v, len(seen)))
    return tuple(out)


class TestHmcStep:
    def test_flat_target_always_accepts(self):
        # Zero gradient conserves the Hamiltonian exactly, so every
        # proposal must be accepted with probability one.
        rng = np.random.default_rng(0)
        cfg = HmcConfig(step_size=0.7, leapfrog_steps=8)
        q = np.zeros(3)
        for _ in range(50):
            res = hmc_step(q, lambda v: (0.0, np.zeros_like(v)), cfg, rng)
            assert res.accepted
            assert res.accept_prob == 1.0
            q = res.position

    def test_tiny_step_high_acceptance(self):
        rng = np.random.default_rng(1)
        cfg = HmcConfig(step_size=1e-3, leapfrog_steps=5)
        q = np.array([0.3, -0.8])
        for _ in range(200):
            res = hmc_step(q, std_normal_target, cfg, rng)
            assert res.accept_prob > 0.999
            q = res.position

    def test_standard_normal_moments(self):
        rng = np.random.default_rng(2)
        cfg = HmcConfig(step_size=0.8, leapfrog_steps=6)
        q = np.zeros(1)
        draws = np.empty(8000)
        for i in range(8000):
            q = hmc_step(q, std_normal_target, cfg, rng).position
            draws[i] = q[0]
        # Batch means standard errors to absorb autocorrelation.
        batches = draws.reshape(40, 200).mean(axis=1)
        se_mean = batches.std(ddof=1) / np.sqrt(40)
        assert abs(draws.mean()) < 4 * se_mean
        sq_batches = (draws**2).reshape(40, 200).mean(axis=1)
        se_var = sq_batches.std(ddof=1) / np.sqrt(40)
        assert abs((draws**2).mean() - 1.0) < 4 * se_var

    def test_nonfinite_start_raises(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            hmc_step(np.zeros(2), lambda v: (-np.inf, np.zeros_like(v)), HmcConfig(), rng)

    def test_wall_rejection(self):
        # A trajectory that leaves the support is rejected, keeping the
        # current position.
        def walled(q):
            if np.any(np.abs(q) > 0.5):
                return -np.inf, np.zeros_like(q)
            return 0.0, np.zeros_like(q)

        rng = np.random.default_rng(4)
        cfg = HmcConfig(step_size=5.0, leapfrog_steps=3)
        start = np.zeros(2)
        res = hmc_step(start, walled, cfg, rng)
        assert not res.accepted
        np.testing.assert_array_equal(res.position, start)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            HmcConfig(step_size=0.0)
        with pytest.raises(ValueError):
            HmcConfig(leapfrog_steps=0)
        with pytest.raises(ValueError):
            HmcConfig(target_accept=1.0)


class TestDualAveraging:
    def test_reaches_target_band_on_standard_normal(self):
        # In low dimension the acceptance curve is nearly flat at one, so
        # use a 20-dimensional target where it degrades smoothly with step.
        rng = np.random.default_rng(5)
        adapt = DualAveraging(0.05, target=0.8)
        step = 0.05
        q = np.zeros(20)
        for _ in range(1000):
            res = hmc_step(q, std_normal_target, HmcConfig(step_size=step, leapfrog_steps=5), rng)
            q = res.position
            step = adapt.update(res.accept_prob)
        frozen = adapt.frozen_step
        cfg = HmcConfig(step_size=frozen, leapfrog_steps=5)
        accepted = 0
        for _ in range(500):
            res = hmc_step(q, std_normal_target, cfg, rng)
            q = res.position
            accepted += res.accepted
        assert 0.55 <= accepted / 500 <= 0.95

    def test_low_acceptance_shrinks_step(self):
        adapt = DualAveraging(1.0, target=0.8)
        step = 1.0
        for _ in range(50):
            step = adapt.update(0.0)
        assert adapt.frozen_step < 1.0


class TestGibbsSweep:
    def test_occupancy_conserved_and_dense(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((25, 2))
        state = lm.MixtureState(x, np.zeros(25, dtype=int), lm.NiwPrior.default(2))
        for _ in range(30):
            sampler.gibbs_sweep(state, 1.0, rng)
            assert state.counts.sum() == 25
            assert np.all(state.labels >= 0)
            assert state.labels.max() == state.n_clusters - 1
        state.check_consistency(atol=1e-7)

    def test_single_point(self):
        rng = np.random.default_rng(7)
        state = lm.MixtureState(np.zeros((1, 2)), np.zeros(1, dtype=int), lm.NiwPrior.default(2))
        sampler.gibbs_sweep(state, 1.0, rng)
        assert state.n_clusters == 1
        assert state.counts.tolist() == [1]

    def test_matches_exact_posterior_small(self):
        # Three points with frozen latents have five possible partitions;
        # long-run Gibbs frequencies must match the enumerated posterior.
        rng = np.random.default_rng(8)
        prior = lm.NiwPrior.default(1)
        x = np.array([[-1.0], [1.1], [0.2]])
        conc = 1.3

        partitions = {}
        for labels in [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (0, 1, 2)]:
            arr = np.array(labels)
            logp = lm.log_marginal_x(x, arr, prior) + lm.crp_log_prob(
                np.bincount(arr), conc
            )
            partitions[labels] = logp
        logs = np.array(list(partitions.values()))
        probs = np.exp(logs - logs.max())
        probs /= probs.sum()
        exact = dict(zip(partitions.keys(), probs))

        state = lm.MixtureState(x, np.zeros(3, dtype=int), prior)
        counts = {k: 0 for k in partitions}
        n_sweeps = 30000
        for _ in range(n_sweeps):
            sampler.gibbs_sweep(state, conc, rng)
            counts[canonical_partition(state.labels)] += 1
        tv = 0.5 * sum(
            abs(counts[k] / n_sweeps - exact[k]) for k in partitions
        )
        assert tv <= 0.05


@pytest.fixture(scope="module")
def small_data():
    rng = np.random.default_rng(9)
    y = np.vstack(
        [
            rng.standard_normal((12, 2)) * 0.3 + [1.5, 0.0],
            rng.standard_normal((12, 2)) * 0.3 + [-1.5, 0.0],
        ]
    )
    return (y - y.mean(0)) / y.std(0)


class TestRunChain:
    def test_schedule_and_shapes(self, small_data):
        cfg = ChainConfig(n_iter=40, burn_in=10, thin=3)
        run = sampler.run_chain(small_data, cfg, seed=0)
        assert len(run.samples) == 10
        assert [s.iteration for s in run.samples] == list(range(13, 41, 3))
        for s in run.samples:
            assert s.x.shape == small_data.shape
            assert s.labels.shape == (24,)
            assert np.isfinite(s.joint_log_prob)
            dense = np.unique(s.labels)
            assert dense[0] == 0 and dense[-1] == dense.size - 1
        assert run.diagnostics.cluster_trace.shape == (40,)

    def test_bitwise_determinism(self, small_data):
        cfg = ChainConfig(n_iter=25, burn_in=5, thin=2)
        run_a = sampler.run_chain(small_data, cfg, seed=123)
        run_b = sampler.run_chain(small_data, cfg, seed=123)
        for sa, sb in zip(run_a.samples, run_b.samples):
            np.testing.assert_array_equal(sa.x, sb.x)
            np.testing.assert_array_equal(sa.labels, sb.labels)
            assert sa.params == sb.params
            assert sa.joint_log_prob == sb.joint_log_prob

    def test_seed_changes_draws(self, small_data):
        cfg = ChainConfig(n_iter=25, burn_in=5, thin=2)
        run_a = sampler.run_chain(small_data, cfg, seed=1)
        run_b = sampler.run_chain(small_data, cfg, seed=2)
        assert any(
            not np.array_equal(sa.x, sb.x)
            for sa, sb in zip(run_a.samples, run_b.samples)
        )

    def test_single_cluster_variant(self, small_data):
        cfg = ChainConfig(n_iter=20, burn_in=5, thin=2, single_cluster=True)
        run = sampler.run_chain(small_data, cfg, seed=3)
        for s in run.samples:
            assert s.n_clusters == 1
            assert np.all(s.labels == 0)

    def test_incremental_stats_stay_consistent(self, small_data):
        cfg = ChainConfig(n_iter=15, burn_in=5, thin=2, check_every=3)
        sampler.run_chain(small_data, cfg, seed=4)

    def test_joint_log_prob_recomputable(self, small_data):
        cfg = ChainConfig(n_iter=20, burn_in=10, thin=5)
        run = sampler.run_chain(small_data, cfg, seed=5)
        for s in run.samples:
            gram = gp.gram_matrix(s.x, s.params)
            prior = lm.NiwPrior.default(2)
            expected = (
                gp.gplvm_log_marginal(small_data, gram)
                + lm.log_marginal_x(s.x, s.labels, prior)
                + lm.crp_log_prob(np.bincount(s.labels), 1.0)
            )
            assert s.joint_log_prob == pytest.approx(expected, abs=1e-8)

    def test_latent_dim_resolution(self, small_data):
        cfg = ChainConfig(latent_dim=None, n_iter=6, burn_in=2, thin=2)
        run = sampler.run_chain(small_data, cfg, seed=6)
        assert run.samples[0].x.shape == (24, 2)
        cfg_one = ChainConfig(latent_dim=1, n_iter=6, burn_in=2, thin=2)
        run_one = sampler.run_chain(small_data, cfg_one, seed=7)
        assert run_one.samples[0].x.shape == (24, 1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ChainConfig(n_iter=10, burn_in=10)
        with pytest.raises(ValueError):
            ChainConfig(thin=0)
        with pytest.raises(ValueError):
            ChainConfig(scan_order="zigzag")
        with pytest.raises(ValueError):
            ChainConfig(concentration=0.0)


class TestInitialLatents:
    def test_matching_dim_copies_data(self):
        y = np.arange(10.0).reshape(5, 2)
        x = sampler.initial_latents(y, 2)
        np.testing.assert_array_equal(x, y)
        assert x is not y

    def test_projection_unit_variance(self):
        rng = np.random.default_rng(10)
        y = rng.standard_normal((50, 4)) * np.array([5.0, 2.0, 1.0, 0.2])
        x = sampler.initial_latents(y, 2)
        assert x.shape == (50, 2)
        np.testing.assert_allclose(x.std(axis=0), np.ones(2), atol=1e-9)

    def test_too_many_dims_raises(self):
        with pytest.raises(ValueError):
            sampler.initial_latents(np.zeros((5, 2)), 3)


class TestPriorSimulate:
    def test_shapes_and_dense_labels(self):
        prior = lm.NiwPrior.default(2)
        draw = sampler.prior_simulate(30, 3, prior, 1.0, gp.KernelParams(), rng=11)
        assert draw.x.shape == (30, 2)
        assert draw.y.shape == (30, 3)
        assert draw.labels.shape == (30,)
        dense = np.unique(draw.labels)
        assert dense[0] == 0 and dense[-1] == dense.size - 1

    def test_deterministic(self):
        prior = lm.NiwPrior.default(1)
        a = sampler.prior_simulate(10, 2, prior, 0.7, gp.KernelParams(), rng=12)
        b = sampler.prior_simulate(10, 2, prior, 0.7, gp.KernelParams(), rng=12)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_cluster_count_expectation(self):
        # Under the sequential seating process the expected number of
        # occupied clusters is sum_i conc / (conc + i).
        prior = lm.NiwPrior.default(1)
        conc, n = 1.5, 12
        counts = np.empty(2000)
        for i in range(2000):
            draw = sampler.prior_simulate(n, 1, prior, conc, gp.KernelParams(), rng=1000 + i)
            counts[i] = draw.labels.max() + 1
        expected = sum(conc / (conc + i) for i in range(n))
        se = counts.std(ddof=1) / np.sqrt(2000)
        assert abs(counts.mean() - expected) < 4 * se

    def test_noise_only_limit(self):
        # With a vanishing smooth term the observation columns are white
        # noise at the configured precision.
        prior = lm.NiwPrior.default(1)
        params = gp.KernelParams(np.log(1e-12), np.log(4.0), 0.0)
        draw = sampler.prior_simulate(2000, 5, prior, 1.0, params, rng=13)
        col_vars = draw.y.var(axis=0, ddof=1)
        assert abs(col_vars.mean() - 0.25) / 0.25 < 0.05
