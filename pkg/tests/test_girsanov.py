"""Log likelihood ratio recursion and its exactness for the Euler chain."""

import numpy as np
import pytest
from scipy.stats import norm

from sdepf import (DiffusionSpec, ImportanceSpec, SdeModel, SplitSdeModel,
                   TimeGrid, estimate_kl, integrate_sde, prior_proposal,
                   propagate_coupled, propagate_coupled_split,
                   sample_brownian_increments, step_llr, step_llr_singular)
from sdepf.sde import BrownianIncrements


def _ou_model(rate=1.0, q=1.0):
    return SdeModel(1, 1, lambda x, t: -rate * x, 1.0, q)


class TestStepLlr:
    def test_hand_value(self):
        # [DERIVED] d = f - g = -1, q = 0.01, L = B = 1:
        # increment = d*(1/q)*dbeta - 0.5*d^2*(1/q)*dt
        #           = (-1)(100)(0.01) - 0.5(100)(0.1) = -6.
        out = step_llr(np.zeros(1), np.array([[-1.0]]), np.array([[0.0]]),
                       np.array([[1.0]]), np.array([[1.0]]),
                       np.array([[0.01]]), 0.0, 0.1, np.array([[0.01]]))
        np.testing.assert_allclose(out, [-6.0], rtol=0, atol=1e-12)

    def test_singular_variant_matches_plain(self):
        rng = np.random.default_rng(3)
        f = rng.normal(size=(8, 2))
        g = rng.normal(size=(8, 2))
        db = rng.normal(size=(8, 2)) * 0.1
        l_mat = np.array([[1.0, 0.0], [0.3, 1.0]])
        q_mat = np.array([[0.5, 0.1], [0.1, 0.8]])
        prev = rng.normal(size=8)
        out_a = step_llr(prev, f, g, l_mat, l_mat, q_mat, 0.0, 0.05, db)
        out_b = step_llr_singular(prev, f, g, l_mat, l_mat, q_mat, 0.0,
                                  0.05, db)
        np.testing.assert_array_equal(out_a, out_b)

    def test_accumulates_from_previous_value(self):
        base = step_llr(np.zeros(1), np.array([[-1.0]]), np.array([[0.0]]),
                        np.array([[1.0]]), np.array([[1.0]]),
                        np.array([[0.01]]), 0.0, 0.1, np.array([[0.01]]))
        again = step_llr(base, np.array([[-1.0]]), np.array([[0.0]]),
                         np.array([[1.0]]), np.array([[1.0]]),
                         np.array([[0.01]]), 0.1, 0.1, np.array([[0.01]]))
        np.testing.assert_allclose(again, 2.0 * base, rtol=1e-14)


class TestConstantDriftClosedForm:
    def test_exact_at_any_step_size(self):
        # [DERIVED] For constant drifts a and b the integrands are
        # constant, so the discrete sum telescopes to the closed form
        # Lambda = (a - b)/q * beta(T) - (a - b)^2 T / (2 q) exactly.
        a, b, q, t_end = 0.7, -0.4, 0.5, 1.0
        model = SdeModel(1, 1, lambda x, t: np.full(x.shape, a), 1.0, q)
        imp = ImportanceSpec(drift=lambda x, t: np.full(x.shape, b))
        grid = TimeGrid(0.0, t_end, 37)
        rng = np.random.default_rng(12)
        incs = sample_brownian_increments(grid, model.diffusion, rng,
                                          n_paths=300)
        x0 = np.zeros((300, 1))
        res = propagate_coupled(model, imp, x0, grid, incs)
        beta_total = incs.values.sum(axis=(1, 2))
        expected = (a - b) / q * beta_total - (a - b) ** 2 * t_end / (2 * q)
        np.testing.assert_allclose(res.llr, expected, rtol=0, atol=1e-12)


class TestBootstrapReduction:
    def test_plain_model_llr_is_bitwise_zero(self):
        model = _ou_model()
        imp = prior_proposal(model)
        grid = TimeGrid(0.0, 1.0, 50)
        rng = np.random.default_rng(0)
        incs = sample_brownian_increments(grid, model.diffusion, rng,
                                          n_paths=64)
        res = propagate_coupled(model, imp, np.ones((64, 1)), grid, incs)
        assert np.all(res.llr == 0.0)
        np.testing.assert_array_equal(res.state, res.proposal_state)

    def test_split_model_llr_is_bitwise_zero(self):
        model = SplitSdeModel(
            1, 1, 1,
            lambda x1, x2, t: x2,
            lambda x1, x2, t: -np.sin(x1),
            1.0, 0.01)
        imp = prior_proposal(model)
        assert imp.dispersion is None
        grid = TimeGrid(0.0, 1.0, 10)
        rng = np.random.default_rng(1)
        incs = sample_brownian_increments(grid, model.diffusion, rng,
                                          n_paths=32)
        res = propagate_coupled_split(model, imp, np.full((32, 1), 1.5),
                                      np.zeros((32, 1)), grid, incs)
        assert np.all(res.llr == 0.0)
        np.testing.assert_array_equal(res.state_stoch, res.proposal_stoch)


class TestChainDensityRatio:
    def test_llr_equals_log_transition_density_ratio(self):
        # With B = L the accumulated ratio must equal the exact log
        # Radon-Nikodym derivative between the two Euler chains,
        # step by step along the realized path.
        q = 0.6
        model = SdeModel(1, 1, lambda x, t: np.sin(x) - 0.5 * x, 1.0, q)
        g = lambda x, t: np.cos(x)
        imp = ImportanceSpec(drift=g)
        grid = TimeGrid(0.0, 1.0, 25)
        rng = np.random.default_rng(21)
        incs = sample_brownian_increments(grid, model.diffusion, rng,
                                          n_paths=40)
        x0 = rng.normal(size=(40, 1))
        res = propagate_coupled(model, imp, x0, grid, incs)

        proposal_model = SdeModel(1, 1, g, 1.0, q)
        path = integrate_sde(proposal_model, x0, grid, incs)
        dt = grid.dt
        sd = np.sqrt(q * dt)
        manual = np.zeros(40)
        for j in range(grid.n_steps):
            x = path[j, :, 0]
            step = path[j + 1, :, 0] - x
            t = grid.t0 + j * dt
            log_p = norm.logpdf(step, loc=model.drift(x, t) * dt, scale=sd)
            log_q = norm.logpdf(step, loc=g(x, t) * dt, scale=sd)
            manual += log_p - log_q
        np.testing.assert_allclose(res.llr, manual, rtol=0, atol=1e-10)
        np.testing.assert_allclose(res.proposal_state[:, 0], path[-1, :, 0],
                                   rtol=0, atol=1e-12)


class TestMartingale:
    def test_scalar_weight_mean_is_one(self):
        model = SdeModel(1, 1, lambda x, t: np.sin(x), 1.0, 1.0)
        imp = ImportanceSpec(drift=lambda x, t: np.zeros_like(x),
                             dispersion=1.0)
        grid = TimeGrid(0.0, 1.0, 100)
        rng = np.random.default_rng(2026)
        n = 20000
        incs = sample_brownian_increments(grid, model.diffusion, rng,
                                          n_paths=n)
        res = propagate_coupled(model, imp, np.zeros((n, 1)), grid, incs)
        z = np.exp(res.llr)
        se = z.std(ddof=1) / np.sqrt(n)
        assert abs(z.mean() - 1.0) < 3.0 * se

    def test_two_dimensional_weight_mean_is_one(self):
        q = np.array([[0.5, 0.0], [0.0, 1.2]])

        def drift(x, t):
            return np.stack([-x[..., 1], np.tanh(x[..., 0])], axis=-1)

        model = SdeModel(2, 2, drift, np.eye(2), q)
        imp = ImportanceSpec(drift=lambda x, t: np.zeros_like(x),
                             dispersion=np.eye(2))
        grid = TimeGrid(0.0, 1.0, 50)
        rng = np.random.default_rng(77)
        n = 20000
        incs = sample_brownian_increments(grid, model.diffusion, rng,
                                          n_paths=n)
        res = propagate_coupled(model, imp, np.zeros((n, 2)), grid, incs)
        z = np.exp(res.llr)
        se = z.std(ddof=1) / np.sqrt(n)
        assert abs(z.mean() - 1.0) < 3.0 * se


class TestScaledProposal:
    def test_weighted_moments_match_target_chain(self):
        # Proposal with dispersion B = 2 while the model has L = 1; the
        # weighted scaled endpoint must reproduce the target Euler
        # chain's mean and variance, which recurse in closed form.
        q, rate, x0, t_end, n_steps = 1.0, 1.0, 1.0, 1.0, 20
        model = SdeModel(1, 1, lambda x, t: -rate * x, 1.0, q)
        imp = ImportanceSpec(drift=lambda x, t: np.zeros_like(x),
                             dispersion=2.0)
        grid = TimeGrid(0.0, t_end, n_steps)
        rng = np.random.default_rng(5)
        n = 200000
        incs = sample_brownian_increments(grid, model.diffusion, rng,
                                          n_paths=n)
        res = propagate_coupled(model, imp, np.full((n, 1), x0), grid, incs)
        z = np.exp(res.llr)
        s_star = res.state[:, 0]

        mean_chain, var_chain = x0, 0.0
        dt = grid.dt
        for _ in range(n_steps):
            mean_chain *= 1.0 - rate * dt
            var_chain = (1.0 - rate * dt) ** 2 * var_chain + q * dt

        w_mean = np.mean(z * s_star)
        se_mean = np.std(z * s_star, ddof=1) / np.sqrt(n)
        assert abs(w_mean - mean_chain) < 4.0 * se_mean
        second = np.mean(z * s_star ** 2)
        se_second = np.std(z * s_star ** 2, ddof=1) / np.sqrt(n)
        assert abs(second - (var_chain + mean_chain ** 2)) < 4.0 * se_second
        # The raw proposal endpoint has variance B^2 q T, far from the
        # target; the scaled one differs from it pathwise.
        assert not np.allclose(res.state, res.proposal_state)

    def test_scaled_endpoint_shares_increments(self):
        # With g = 0 the scaled process is x0 + L sum(dbeta) regardless
        # of B.
        model = _ou_model(rate=0.7)
        imp = ImportanceSpec(drift=lambda x, t: np.zeros_like(x),
                             dispersion=2.0)
        grid = TimeGrid(0.0, 1.0, 10)
        rng = np.random.default_rng(8)
        incs = sample_brownian_increments(grid, model.diffusion, rng,
                                          n_paths=16)
        res = propagate_coupled(model, imp, np.zeros((16, 1)), grid, incs)
        np.testing.assert_allclose(res.state[:, 0],
                                   incs.values.sum(axis=(1, 2)),
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(res.proposal_state[:, 0],
                                   2.0 * incs.values.sum(axis=(1, 2)),
                                   rtol=0, atol=1e-12)


class TestDiscretizationError:
    def test_llr_error_halves_with_step(self):
        # f = -x against g = 0: aggregate one fine Brownian path onto
        # coarser grids; the Lambda error behaves like O(dt).
        q, t_end = 1.0, 1.0
        model = _ou_model(rate=1.0, q=q)
        imp = ImportanceSpec(drift=lambda x, t: np.zeros_like(x))
        rng = np.random.default_rng(14)
        n = 500
        fine_steps = 400
        fine = sample_brownian_increments(TimeGrid(0.0, t_end, fine_steps),
                                          model.diffusion, rng, n_paths=n)

        def lam_at(factor):
            steps = fine_steps // factor
            vals = fine.values.reshape(n, steps, factor, 1).sum(axis=2)
            grid = TimeGrid(0.0, t_end, steps)
            res = propagate_coupled(model, imp, np.ones((n, 1)), grid,
                                    BrownianIncrements(vals))
            return res.llr

        lam_ref = lam_at(1)
        err_coarse = lam_at(8) - lam_ref
        err_half = lam_at(4) - lam_ref
        ratio = np.sqrt(np.mean(err_coarse ** 2) / np.mean(err_half ** 2))
        assert 1.3 < ratio < 2.8


class TestEstimateKl:
    def test_constant_drift_closed_form_exact(self):
        # [DERIVED] KL = 0.5 (a - b)^2 T / sigma^2 = 0.5 * 1 * 2 / 1 = 1,
        # and the left Riemann sum of a constant integrand is exact.
        grid = TimeGrid(0.0, 2.0, 100)
        paths = np.zeros((8, 101, 1))
        val = estimate_kl(lambda x, t: np.ones_like(x),
                          lambda x, t: np.zeros_like(x),
                          1.0, paths, grid)
        assert val == pytest.approx(1.0, abs=1e-12)

    def test_matrix_sigma(self):
        # [DERIVED] delta = (1, 2), sigma = diag(1, 4):
        # KL = 0.5 (1 + 1) T = T = 0.5.
        grid = TimeGrid(0.0, 0.5, 10)
        paths = np.zeros((3, 11, 2))
        val = estimate_kl(
            lambda x, t: np.broadcast_to([1.0, 2.0], x.shape),
            lambda x, t: np.zeros_like(x),
            np.diag([1.0, 4.0]), paths, grid)
        assert val == pytest.approx(0.5, abs=1e-12)

    def test_rejects_mismatched_grid(self):
        grid = TimeGrid(0.0, 1.0, 10)
        with pytest.raises(ValueError):
            estimate_kl(lambda x, t: x, lambda x, t: x, 1.0,
                        np.zeros((2, 5, 1)), grid)


class TestPriorProposal:
    def test_plain_model_uses_drift(self):
        model = _ou_model()
        imp = prior_proposal(model)
        assert imp.dispersion is None
        x = np.array([[2.0]])
        np.testing.assert_array_equal(imp.drift(x, 0.0), model.drift(x, 0.0))

    def test_split_model_uses_stochastic_drift(self):
        model = SplitSdeModel(1, 1, 1,
                              lambda x1, x2, t: x2,
                              lambda x1, x2, t: -x1,
                              1.0, 1.0)
        imp = prior_proposal(model)
        assert imp.drift is model.drift_stoch
