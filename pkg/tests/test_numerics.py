import numpy as np
import pytest
import scipy.integrate
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln, multigammaln

from warpmix import numerics


def random_spd(rng, d, scale=1.0):
    m = rng.standard_normal((d, d))
    return scale * (m @ m.T + d * np.eye(d))


class TestCholesky:
    def test_hand_worked_2x2(self):
        chol = numerics.cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
        expected = np.array([[2.0, 0.0], [1.0, np.sqrt(2.0)]])
        np.testing.assert_allclose(chol, expected, atol=1e-12)

    def test_indefinite_raises(self):
        with pytest.raises(numerics.NotPositiveDefiniteError):
            numerics.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_non_square_raises(self):
        with pytest.raises(ValueError):
            numerics.cholesky(np.ones((2, 3)))

    def test_asymmetric_raises(self):
        with pytest.raises(ValueError):
            numerics.cholesky(np.array([[1.0, 0.5], [0.2, 1.0]]))

    def test_near_singular_gets_jitter(self):
        # Rank deficient gram-like matrix; jitter must step in and the
        # factor must still reproduce the input closely.
        v = np.array([1.0, 1.0, 1.0])
        a = np.outer(v, v) + 1e-14 * np.eye(3)
        chol = numerics.cholesky(a)
        np.testing.assert_allclose(chol @ chol.T, a, atol=1e-5)

    @settings(deadline=None, max_examples=50)
    @given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=2**32 - 1))
    def test_recompose_property(self, d, seed):
        a = random_spd(np.random.default_rng(seed), d)
        chol = numerics.cholesky(a)
        assert np.all(np.diag(chol) > 0)
        np.testing.assert_allclose(chol @ chol.T, a, rtol=1e-9, atol=1e-9)


class TestRankOneUpdate:
    def test_unit_axis_update(self):
        chol = numerics.rank_one_update(np.eye(2), np.array([1.0, 0.0]))
        np.testing.assert_allclose(chol, np.diag([np.sqrt(2.0), 1.0]), atol=1e-12)

    def test_matches_refactorization(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            d = rng.integers(1, 7)
            a = random_spd(rng, d)
            v = rng.standard_normal(d)
            direct = numerics.cholesky(a + np.outer(v, v))
            updated = numerics.rank_one_update(numerics.cholesky(a), v)
            np.testing.assert_allclose(updated, direct, rtol=1e-9, atol=1e-9)

    def test_downdate_matches_refactorization(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            d = rng.integers(1, 7)
            a = random_spd(rng, d)
            v = 0.5 * rng.standard_normal(d)
            direct = numerics.cholesky(a)
            grown = numerics.rank_one_update(direct, v)
            back = numerics.rank_one_update(grown, v, downdate=True)
            np.testing.assert_allclose(back, direct, rtol=1e-9, atol=1e-9)

    def test_impossible_downdate_raises(self):
        with pytest.raises(numerics.DowndateError):
            numerics.rank_one_update(np.eye(2), np.array([2.0, 0.0]), downdate=True)

    def test_input_not_mutated(self):
        chol = np.eye(3)
        before = chol.copy()
        numerics.rank_one_update(chol, np.array([0.3, 0.2, 0.1]))
        np.testing.assert_array_equal(chol, before)

    @settings(deadline=None, max_examples=50)
    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2**32 - 1))
    def test_update_downdate_roundtrip(self, d, seed):
        rng = np.random.default_rng(seed)
        chol = numerics.cholesky(random_spd(rng, d))
        v = rng.standard_normal(d)
        roundtrip = numerics.rank_one_update(
            numerics.rank_one_update(chol, v), v, downdate=True
        )
        np.testing.assert_allclose(roundtrip, chol, rtol=1e-9, atol=1e-9)


class TestSolveAndLogdet:
    def test_identity(self):
        b = np.arange(6.0).reshape(3, 2)
        x, logdet = numerics.solve_and_logdet(np.eye(3), b)
        np.testing.assert_array_equal(x, b)
        assert logdet == 0.0

    def test_diagonal_logdet(self):
        chol = numerics.cholesky(np.diag([4.0, 9.0]))
        _, logdet = numerics.solve_and_logdet(chol, np.zeros(2))
        assert logdet == pytest.approx(np.log(36.0), abs=1e-12)

    def test_residual(self):
        rng = np.random.default_rng(21)
        a = random_spd(rng, 6)
        b = rng.standard_normal((6, 3))
        x, logdet = numerics.solve_and_logdet(numerics.cholesky(a), b)
        np.testing.assert_allclose(a @ x, b, atol=1e-10)
        assert logdet == pytest.approx(np.linalg.slogdet(a)[1], abs=1e-9)

    def test_dim_mismatch_raises(self):
        with pytest.raises(ValueError):
            numerics.solve_and_logdet(np.eye(3), np.zeros(4))


class TestCholOfInverse:
    def test_recompose(self):
        rng = np.random.default_rng(3)
        a = random_spd(rng, 5)
        inv_chol = numerics.chol_of_inverse(numerics.cholesky(a))
        np.testing.assert_allclose(inv_chol @ inv_chol.T, np.linalg.inv(a), rtol=1e-8, atol=1e-10)


class TestLogMultigamma:
    def test_dim_one_is_gammaln(self):
        assert numerics.log_gamma_product(1, 2.5) == pytest.approx(gammaln(2.5), abs=1e-14)
        assert numerics.log_multigamma(1, 2.5) == pytest.approx(gammaln(2.5), abs=1e-14)

    def test_matches_scipy(self):
        for dim in (1, 2, 3, 5):
            for a in (dim / 2.0 + 0.3, 4.0, 17.5):
                assert numerics.log_multigamma(dim, a) == pytest.approx(
                    multigammaln(a, dim), abs=1e-10
                )

    def test_cluster_normalizer_ratio(self):
        # Ratio of gamma products that appears when a cluster of m points is
        # integrated out: prod_q Gamma((nu_c + 1 - q) / 2) / Gamma((nu + 1 - q) / 2).
        rng = np.random.default_rng(11)
        for _ in range(20):
            dim = int(rng.integers(1, 5))
            nu = dim + 1 + 3.0 * rng.random()
            m = int(rng.integers(1, 30))
            nu_c = nu + m
            direct = sum(
                gammaln((nu_c + 1 - q) / 2.0) - gammaln((nu + 1 - q) / 2.0)
                for q in range(1, dim + 1)
            )
            via_product = numerics.log_gamma_product(dim, nu_c / 2.0) - numerics.log_gamma_product(
                dim, nu / 2.0
            )
            assert via_product == pytest.approx(direct, abs=1e-10)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            numerics.log_gamma_product(3, 1.0)


class TestWishartLogpdf:
    def test_dim_one_is_gamma(self):
        # In one dimension W(R | S^{-1}, nu) is Gamma(nu / 2, rate = S / 2).
        s = 2.7
        scale_chol = np.array([[np.sqrt(s)]])
        for r_val, dof in [(0.4, 3.0), (2.0, 5.5), (7.3, 2.2)]:
            ours = numerics.wishart_logpdf(np.array([[r_val]]), scale_chol, dof)
            ref = scipy.stats.gamma.logpdf(r_val, a=dof / 2.0, scale=2.0 / s)
            assert ours == pytest.approx(ref, abs=1e-10)

    def test_dim_one_normalizes(self):
        s = 1.8
        dof = 4.0
        scale_chol = np.array([[np.sqrt(s)]])
        total, _ = scipy.integrate.quad(
            lambda r: np.exp(numerics.wishart_logpdf(np.array([[r]]), scale_chol, dof)),
            0.0,
            np.inf,
        )
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_matches_scipy_multivariate(self):
        rng = np.random.default_rng(5)
        for d in (2, 3):
            s = random_spd(rng, d)
            r_mat = random_spd(rng, d)
            dof = d + 2.5
            ours = numerics.wishart_logpdf(r_mat, numerics.cholesky(s), dof)
            ref = scipy.stats.wishart.logpdf(r_mat, df=dof, scale=np.linalg.inv(s))
            assert ours == pytest.approx(ref, abs=1e-8)

    def test_low_dof_raises(self):
        with pytest.raises(ValueError):
            numerics.wishart_logpdf(np.eye(2), np.eye(2), 0.5)


class TestSamplers:
    def test_gaussian_moments(self):
        rng = np.random.default_rng(0)
        cov = np.array([[2.0, 0.6], [0.6, 1.0]])
        chol = numerics.cholesky(cov)
        mean = np.array([1.0, -2.0])
        draws = np.array([numerics.sample_gaussian(mean, chol, rng) for _ in range(20000)])
        np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.05)
        np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.08)

    def test_wishart_mean(self):
        rng = np.random.default_rng(1)
        dof = 5.0
        v = np.array([[1.5, 0.4], [0.4, 0.8]])
        chol = numerics.cholesky(v)
        total = np.zeros((2, 2))
        n = 20000
        for _ in range(n):
            total += numerics.sample_wishart(chol, dof, rng)
        rel_err = np.abs(total / n - dof * v) / np.abs(dof * v)
        assert rel_err.max() < 0.02

    def test_wishart_draw_is_spd(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            r_mat = numerics.sample_wishart(np.eye(3), 4.0, rng)
            assert np.all(np.linalg.eigvalsh(r_mat) > 0)

    def test_gamma_moments(self):
        rng = np.random.default_rng(3)
        shape, rate = 3.0, 2.0
        draws = np.array([numerics.sample_gamma(shape, rate, rng) for _ in range(20000)])
        assert draws.mean() == pytest.approx(shape / rate, abs=0.03)

    def test_categorical_degenerate(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            assert numerics.sample_categorical(np.array([0.0, 0.0, 5.0]), rng) == 2

    def test_categorical_frequencies(self):
        rng = np.random.default_rng(5)
        w = np.array([0.2, 0.5, 0.3])
        counts = np.bincount(
            [numerics.sample_categorical(w, rng) for _ in range(30000)], minlength=3
        )
        np.testing.assert_allclose(counts / 30000.0, w, atol=0.01)

    def test_categorical_rejects_bad_weights(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ValueError):
            numerics.sample_categorical(np.array([0.1, -0.2]), rng)
        with pytest.raises(ValueError):
            numerics.sample_categorical(np.array([0.0, 0.0]), rng)
        with pytest.raises(ValueError):
            numerics.sample_categorical(np.array([np.nan, 1.0]), rng)

    def test_spawn_generators_independent_and_reproducible(self):
        a1, b1 = numerics.spawn_generators(123, 2)
        a2, b2 = numerics.spawn_generators(123, 2)
        x1, x2 = a1.random(5), a2.random(5)
        np.testing.assert_array_equal(x1, x2)
        assert not np.array_equal(x1, b1.random(5))
