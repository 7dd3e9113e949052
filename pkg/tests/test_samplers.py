import math

import numpy as np
import pytest
from scipy import stats

from transit_od.evaluation import batch_means_se
from transit_od.gibbs import update_Phi, update_Psi
from transit_od.model import (
    DatasetLikelihood,
    KernelSpec,
    LatentState,
    PriorSpec,
    compute_G,
    kernel_cholesky,
    kernel_matrix,
    log_prior_rho,
)
from transit_od.route import TripObservation
from transit_od.samplers import SamplerError, ess_step, slice_step_rho


def constant(_):
    return 0.0


class TestESS:
    def test_prior_moments_constant_likelihood(self):
        rng = np.random.default_rng(1)
        times = np.array([0.0, 1200.0, 4000.0])
        K = kernel_matrix(times, KernelSpec())
        L = np.linalg.cholesky(K)
        x = np.zeros(3)
        draws = np.empty((20000, 3))
        for k in range(draws.shape[0]):
            x = ess_step(x, L, constant, rng)
            draws[k] = x
        for a in range(3):
            assert abs(draws[:, a].mean()) < 3 * batch_means_se(draws[:, a]) + 1e-12
            for b in range(3):
                prod = draws[:, a] * draws[:, b]
                assert abs(prod.mean() - K[a, b]) < 5 * batch_means_se(prod)

    def test_conjugate_gaussian(self):
        rng = np.random.default_rng(2)
        ll = lambda f: -0.5 * (1.0 - f[0]) ** 2
        x = np.zeros(1)
        draws = np.empty(50000)
        for k in range(draws.size):
            x = ess_step(x, 1.0, ll, rng)
            draws[k] = x[0]
        assert abs(draws.mean() - 0.5) < 3 * batch_means_se(draws)
        sq = (draws - 0.5) ** 2
        assert abs(sq.mean() - 0.5) < 3 * batch_means_se(sq)

    def test_threshold_holds(self, rng):
        ll = lambda f: -np.sum((f - 2.0) ** 2) * 3.0
        x = np.zeros(4)
        for _ in range(500):
            x, val, log_c, evals = ess_step(x, 1.0, ll, rng, return_info=True)
            assert val > log_c and val == ll(x) and evals >= 1

    def test_nan_raises(self, rng):
        calls = iter([0.0, float("nan")])
        with pytest.raises(SamplerError):
            ess_step(np.zeros(2), 1.0, lambda f: next(calls), rng)

    def test_deterministic(self):
        ll = lambda f: -np.abs(f).sum()
        a = ess_step(np.ones(3), 1.0, ll, np.random.default_rng(9))
        b = ess_step(np.ones(3), 1.0, ll, np.random.default_rng(9))
        assert np.array_equal(a, b)


class TestSliceRho:
    def test_prior_recovered(self):
        rng = np.random.default_rng(4)
        prior = PriorSpec()
        rho = 0.1
        logs = np.empty(50000)
        for k in range(logs.size):
            rho = slice_step_rho(rho, constant, prior, 0.5, rng)
            logs[k] = math.log(rho)
        assert abs(logs.mean() - math.log(0.1)) < 3 * batch_means_se(logs)

    def test_threshold_and_positivity(self, rng):
        prior = PriorSpec()
        ll = lambda r: -5.0 * (r - 0.8) ** 2
        rho = 0.3
        for _ in range(1000):
            rho, val, log_c = slice_step_rho(rho, ll, prior, 0.5, rng, return_info=True)
            assert rho > 0 and val + log_prior_rho(rho, prior) > log_c

    def test_gaussian_target_histogram(self):
        # likelihood Gaussian in log rho, so the posterior of log rho is Gaussian too
        rng = np.random.default_rng(6)
        prior = PriorSpec(mu_rho=0.0, sigma2_rho=0.25)
        a, b2 = 0.6, 0.09
        ll = lambda r: -0.5 * (math.log(r) - a) ** 2 / b2
        prec = 1 / 0.25 + 1 / b2
        m, s = (a / b2) / prec, math.sqrt(1 / prec)
        rho, logs = 1.0, np.empty(50000)
        for k in range(logs.size):
            rho = slice_step_rho(rho, ll, prior, 0.5, rng)
            logs[k] = math.log(rho)
        edges = np.linspace(m - 4 * s, m + 4 * s, 51)
        hist = np.histogram(logs, edges)[0] / logs.size
        probs = np.diff(stats.norm.cdf(edges, m, s))
        assert 0.5 * np.abs(hist - probs).sum() < 0.05

    def test_rejects_bad_rho(self, rng):
        with pytest.raises(ValueError):
            slice_step_rho(0.0, constant, PriorSpec(), 0.5, rng)

    def test_nan_raises(self, rng):
        calls = iter([0.0, float("nan"), float("nan")])
        with pytest.raises(SamplerError):
            slice_step_rho(1.0, lambda r: next(calls), PriorSpec(mu_rho=0.0), 0.5, rng)


class TestBlockUpdates:
    def test_psi_scalar_against_grid(self):
        # N = 1, D = 1: psi is a scalar with a N(0, 1 + jitter) prior
        rng = np.random.default_rng(8)
        trip = TripObservation("a", [6, 0, 0], [0, 5, 1])
        Y = np.array([[5, 1, 0]])
        state = LatentState(np.array([[1.0]]), np.array([[0.0]]), 1.0)
        L = kernel_cholesky(np.zeros(1), KernelSpec())
        ev = DatasetLikelihood(Y, [trip])
        grid = np.linspace(-6, 8, 20001)
        logp = np.array([ev(np.array([[g]]), 1.0) for g in grid]) - 0.5 * grid**2 / L[0, 0] ** 2
        w = np.exp(logp - logp.max())
        w /= w.sum()
        mean = (w * grid).sum()
        draws = np.empty(20000)
        for k in range(draws.size):
            state = update_Psi(state, Y, [trip], L, rng)
            draws[k] = state.Psi[0, 0]
        assert abs(draws.mean() - mean) < 4 * batch_means_se(draws)
        assert mean > 0.5  # the observed split favours stop 2

    def test_psi_prior_when_no_passengers(self):
        rng = np.random.default_rng(10)
        trips = [TripObservation(f"e{n}", [0, 0, 0], [0, 0, 0], 1000.0 * n) for n in range(2)]
        Y = np.zeros((2, 3), dtype=int)
        L = kernel_cholesky(np.array([0.0, 1000.0]), KernelSpec())
        K = L @ L.T
        state = LatentState(np.ones((1, 1)), np.zeros((2, 1)), 1.0)
        draws = np.empty((8000, 2))
        for k in range(draws.shape[0]):
            state = update_Psi(state, Y, trips, L, rng)
            draws[k] = state.Psi[:, 0]
        prod = draws[:, 0] * draws[:, 1]
        assert abs(prod.mean() - K[0, 1]) < 5 * batch_means_se(prod)

    def test_phi_prior_when_no_passengers(self):
        rng = np.random.default_rng(12)
        trips = [TripObservation("e", [0, 0, 0, 0], [0, 0, 0, 0])]
        Y = np.zeros((1, 6), dtype=int)
        prior = PriorSpec(sigma2_phi=2.0)
        state = LatentState(np.zeros((3, 1)), np.ones((1, 1)), 1.0)
        draws = np.empty((8000, 3))
        for k in range(draws.shape[0]):
            state = update_Phi(state, Y, trips, rng, prior)
            draws[k] = state.Phi[:, 0]
        sq = draws[:, 0] ** 2
        assert abs(sq.mean() - 2.0) < 5 * batch_means_se(sq)
        assert abs(draws[:, 2].mean()) < 4 * batch_means_se(draws[:, 2])

    def test_phi_three_stops_single_entry(self, rng):
        trips = [TripObservation("a", [2, 0, 0], [0, 1, 1])]
        state = LatentState(np.array([[0.3, -0.2]]), np.array([[1.0, 0.5]]), 1.0)
        new = update_Phi(state, np.array([[1, 1, 0]]), trips, rng)
        assert new.Phi.shape == (1, 2) and not np.array_equal(new.Phi, state.Phi)
        assert np.array_equal(new.Psi, state.Psi)

    def test_updates_keep_other_blocks(self, rng):
        trips = [TripObservation("a", [2, 1, 0, 0], [0, 1, 1, 1], 0.0)]
        Y = np.array([[1, 0, 1, 0, 1, 0]])
        state = LatentState(rng.standard_normal((3, 2)), rng.standard_normal((1, 2)), 0.5)
        new = update_Psi(state, Y, trips, np.eye(1), rng)
        assert np.array_equal(new.Phi, state.Phi) and new.rho == state.rho
        assert np.all(np.isfinite(compute_G(new)))
