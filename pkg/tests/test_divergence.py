"""Tests for Gaussian divergences and diagonal projections."""

import numpy as np
import pytest
import scipy.optimize
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from varfilt.covariance import DenseCov, DiagCov, DiagPlusLowRank, kf_update
from varfilt.divergence import (
    GaussianDist,
    elbo_project,
    ep_project,
    kl_gaussian,
    l2_gradient,
    l2_objective,
    l2_project,
    l2_workspace,
    lr_mc_oracle,
)
from varfilt.errors import ArgumentError

CORRELATED = DenseCov(np.array([[2.0, 1.0], [1.0, 2.0]]))


def _random_rank1(rng, n):
    _, post = kf_update(DiagCov(rng.uniform(0.5, 2.0, n)), rng.standard_normal(n), 0.2)
    return post


def _dense_l2(Sigma, d):
    n = Sigma.shape[0]
    M = Sigma / d[:, None]
    tr = np.trace(M)
    tr2 = np.trace(M @ M)
    _, logdet_M = np.linalg.slogdet(M)
    return n / 2 - tr + tr2 / 2 + 0.25 * (tr - logdet_M - n) ** 2


class TestKL:
    def test_identical(self):
        p = GaussianDist(np.array([1.0, -1.0]), CORRELATED)
        assert kl_gaussian(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_scalar(self):
        p = GaussianDist(np.zeros(1), DiagCov(np.array([1.0])))
        q = GaussianDist(np.zeros(1), DiagCov(np.array([2.0])))
        assert kl_gaussian(p, q) == pytest.approx(0.5 * (0.5 - 1 + np.log(2)), abs=1e-12)
        assert kl_gaussian(p, q) == pytest.approx(0.09657, abs=1e-5)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_monte_carlo(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 9))
        A = rng.standard_normal((n, n))
        p = GaussianDist(rng.standard_normal(n), DenseCov(A @ A.T + n * np.eye(n)))
        q = GaussianDist(rng.standard_normal(n), DiagCov(rng.uniform(0.5, 3.0, n)))
        dist_p = scipy.stats.multivariate_normal(p.mean, p.cov.to_dense())
        dist_q = scipy.stats.multivariate_normal(q.mean, q.cov.to_dense())
        samples = np.atleast_2d(dist_p.rvs(size=100_000, random_state=seed))
        if n == 1:
            samples = samples.reshape(-1, 1)
        log_ratio = dist_p.logpdf(samples) - dist_q.logpdf(samples)
        se = log_ratio.std(ddof=1) / np.sqrt(log_ratio.size)
        assert abs(kl_gaussian(p, q) - log_ratio.mean()) < 4 * se

    def test_dense_q_matches_diag_q(self):
        rng = np.random.default_rng(5)
        p = GaussianDist(rng.standard_normal(3), _random_rank1(rng, 3))
        d = rng.uniform(0.5, 2.0, 3)
        q_diag = GaussianDist(np.zeros(3), DiagCov(d))
        q_dense = GaussianDist(np.zeros(3), DenseCov(np.diag(d)))
        assert kl_gaussian(p, q_diag) == pytest.approx(kl_gaussian(p, q_dense), rel=1e-10)

    def test_dimension_mismatch(self):
        p = GaussianDist(np.zeros(2), DiagCov(np.ones(2)))
        q = GaussianDist(np.zeros(3), DiagCov(np.ones(3)))
        with pytest.raises(ArgumentError):
            kl_gaussian(p, q)


class TestProjections:
    def test_ep_closed_form(self):
        np.testing.assert_allclose(ep_project(CORRELATED).d, [2.0, 2.0])

    def test_elbo_closed_form(self):
        np.testing.assert_allclose(elbo_project(CORRELATED).d, [1.5, 1.5])

    def test_diagonal_is_exact(self):
        P = DiagCov(np.array([0.5, 3.0]))
        np.testing.assert_array_equal(ep_project(P).d, P.d)
        np.testing.assert_allclose(elbo_project(P).d, P.d)
        p = GaussianDist(np.zeros(2), P)
        assert kl_gaussian(p, GaussianDist(np.zeros(2), ep_project(P))) == pytest.approx(0.0, abs=1e-14)

    def test_elbo_underestimates(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = rng.uniform(0.5, 2.0, 2)
            rho = rng.uniform(0.05, 0.95)
            cov = rho * np.sqrt(a * b)
            P = DenseCov(np.array([[a, cov], [cov, b]]))
            assert np.all(elbo_project(P).d <= ep_project(P).d + 1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_ep_minimizes_forward_kl(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        P = _random_rank1(rng, n)
        p = GaussianDist(np.zeros(n), P)

        def forward(log_d):
            return kl_gaussian(p, GaussianDist(np.zeros(n), DiagCov(np.exp(log_d))))

        result = scipy.optimize.minimize(forward, np.zeros(n), method="BFGS", options={"gtol": 1e-10})
        np.testing.assert_allclose(ep_project(P).d, np.exp(result.x), rtol=1e-5)

    @pytest.mark.parametrize("seed", range(20))
    def test_elbo_minimizes_reverse_kl(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        P = _random_rank1(rng, n)
        p = GaussianDist(np.zeros(n), P)

        def reverse(log_d):
            return kl_gaussian(GaussianDist(np.zeros(n), DiagCov(np.exp(log_d))), p)

        result = scipy.optimize.minimize(reverse, np.zeros(n), method="BFGS", options={"gtol": 1e-10})
        np.testing.assert_allclose(elbo_project(P).d, np.exp(result.x), rtol=1e-5)


class TestL2Objective:
    def test_exact_fit_is_zero(self):
        P = DiagCov(np.array([0.3, 1.0, 2.0]))
        assert l2_objective(P, P.d) == pytest.approx(0.0, abs=1e-14)

    def test_scalar(self):
        expected = 0.125 + 0.25 * (0.5 - np.log(0.5) - 1) ** 2
        value = l2_objective(DiagCov(np.array([1.0])), np.array([2.0]))
        assert value == pytest.approx(expected, abs=1e-14)
        assert value == pytest.approx(0.13433, abs=1e-5)

    def test_workspace(self):
        ws = l2_workspace(DiagCov(np.array([1.0])), np.array([2.0]))
        assert ws.trace_M == pytest.approx(0.5)
        assert ws.trace_M2 == pytest.approx(0.25)
        assert ws.logdet_M == pytest.approx(np.log(0.5))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 32))
    def test_matches_dense(self, seed, n):
        rng = np.random.default_rng(seed)
        P = _random_rank1(rng, n)
        d = rng.uniform(0.2, 2.0, n)
        expected = _dense_l2(P.to_dense(), d)
        assert l2_objective(P, d) == pytest.approx(expected, rel=1e-9, abs=1e-10)
        assert l2_objective(DenseCov(P.to_dense()), d) == pytest.approx(expected, rel=1e-9, abs=1e-10)

    def test_non_negative(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            P = _random_rank1(rng, 5)
            assert l2_objective(P, rng.uniform(0.1, 3.0, 5)) >= 0.0

    def test_rejects_non_positive(self):
        with pytest.raises(ArgumentError):
            l2_objective(DiagCov(np.ones(2)), np.array([1.0, 0.0]))


class TestL2Gradient:
    def test_zero_at_exact_fit(self):
        P = DiagCov(np.array([0.3, 1.0, 2.0]))
        np.testing.assert_allclose(l2_gradient(P, P.d), 0.0, atol=1e-14)

    def test_scalar_finite_difference(self):
        P = DiagCov(np.array([1.0]))
        h = 1e-5
        fd = (l2_objective(P, [2.0 + h]) - l2_objective(P, [2.0 - h])) / (2 * h)
        assert l2_gradient(P, [2.0])[0] == pytest.approx(fd, rel=1e-6)

    @pytest.mark.parametrize("seed", range(100))
    def test_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 33))
        P = _random_rank1(rng, n)
        d = rng.uniform(0.3, 2.0, n)
        grad = l2_gradient(P, d)
        fd = np.empty(n)
        for i in range(n):
            h = 1e-5 * d[i]
            up, down = d.copy(), d.copy()
            up[i] += h
            down[i] -= h
            fd[i] = (l2_objective(P, up) - l2_objective(P, down)) / (2 * h)
        assert np.max(np.abs(grad - fd)) < 1e-5 * max(1.0, np.max(np.abs(grad)))


class TestL2Project:
    def test_diagonal_target(self):
        P = DiagCov(np.array([0.5, 2.0]))
        result = l2_project(P)
        np.testing.assert_allclose(result.cov.d, P.d)
        assert result.objective == pytest.approx(0.0, abs=1e-14)
        assert result.converged

    def test_improves_on_ep(self):
        result = l2_project(CORRELATED, ep_project(CORRELATED))
        assert result.converged
        assert result.objective <= l2_objective(CORRELATED, np.array([2.0, 2.0]))
        assert not np.allclose(result.cov.d, [2.0, 2.0])

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        P = _random_rank1(rng, n)
        result = l2_project(P, ep_project(P))

        def objective(log_d):
            return l2_objective(P, np.exp(log_d))

        start = np.log(ep_project(P).d)
        oracle = scipy.optimize.minimize(
            objective, start, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20_000}
        )
        assert result.objective <= oracle.fun + 1e-4

    def test_iteration_cap(self):
        result = l2_project(CORRELATED, np.array([20.0, 0.05]), max_iter=1)
        assert result.iterations == 1
        assert not result.converged
        assert result.objective < l2_objective(CORRELATED, np.array([20.0, 0.05]))

    @pytest.mark.parametrize("target", ["correlated", "rank1"])
    def test_stops_when_objective_stops_moving(self, target):
        P = CORRELATED if target == "correlated" else _random_rank1(np.random.default_rng(8), 12)
        result = l2_project(P, tol=0.0, max_iter=100_000)
        assert result.iterations < 100_000
        assert result.stalled
        assert not result.converged
        assert result.objective == pytest.approx(l2_project(P).objective, rel=1e-6, abs=1e-12)

    def test_structured_target(self):
        rng = np.random.default_rng(12)
        P = _random_rank1(rng, 16)
        assert isinstance(P, DiagPlusLowRank)
        result = l2_project(P)
        assert np.all(result.cov.d > 0)
        assert result.objective <= l2_objective(P, ep_project(P).d) + 1e-12


class TestMonteCarloOracle:
    def test_identical_distributions(self):
        p = GaussianDist(np.zeros(2), CORRELATED)
        estimate, _ = lr_mc_oracle(p, p, 2.0, 1000, seed=0)
        assert estimate < 1e-12

    def test_matches_closed_form(self):
        p = GaussianDist(np.zeros(1), DiagCov(np.array([1.0])))
        q = GaussianDist(np.zeros(1), DiagCov(np.array([2.0])))
        estimate, se = lr_mc_oracle(p, q, 2.0, 100_000, seed=1)
        assert abs(estimate - l2_objective(p.cov, q.cov.d)) < 4 * se

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_l2_objective(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 9))
        P = _random_rank1(rng, n)
        d = P.diagonal() * rng.uniform(0.7, 1.4, n)
        p = GaussianDist(np.zeros(n), P)
        q = GaussianDist(np.zeros(n), DiagCov(d))
        estimate, se = lr_mc_oracle(p, q, 2.0, 100_000, seed=seed)
        assert abs(estimate - l2_objective(P, d)) < 3 * se

    def test_moment_inequality(self):
        p = GaussianDist(np.zeros(2), CORRELATED)
        q = GaussianDist(np.zeros(2), ep_project(CORRELATED))
        first, _ = lr_mc_oracle(p, q, 1.0, 20_000, seed=2)
        second, _ = lr_mc_oracle(p, q, 2.0, 20_000, seed=2)
        assert first != second
        assert second >= first**2

    def test_bad_arguments(self):
        p = GaussianDist(np.zeros(1), DiagCov(np.ones(1)))
        with pytest.raises(ArgumentError):
            lr_mc_oracle(p, p, 0.5, 100, seed=0)
        with pytest.raises(ArgumentError):
            lr_mc_oracle(p, p, 2.0, 1, seed=0)
