import itertools
import math

import numpy as np
import pytest

from stochlm.oracles import (AccuracyConstants, BernoulliOracle, ExactOracle,
                             GaussianOracle, SubsampleOracle,
                             bernoulli_oracle, exact_oracle, gaussian_oracle,
                             subsample_oracle)
from stochlm.problems import (block_linear_problem, identity_problem,
                              random_linear_problem)

CONSTS = AccuracyConstants(kappa_ef=0.05, kappa_eg=0.4, eps_f=0.05,
                           p=0.9, q=0.9)


class TestExactOracle:
    def test_identity_residual(self):
        prob = identity_problem(2)
        out = exact_oracle(prob, np.array([1.0, 1.0]), 1.0)
        assert out.f0 == pytest.approx(1.0)
        np.testing.assert_allclose(out.g, [1.0, 1.0])
        assert out.m_at_center == out.f0

    def test_gradient_vanishes_at_solution(self):
        prob = random_linear_problem(10, 5, seed=0)
        out = exact_oracle(prob, prob.solution(), 1.0)
        assert np.linalg.norm(out.g) <= 1e-12

    def test_flags_always_true(self):
        prob = identity_problem(3)
        rng = np.random.default_rng(0)
        for _ in range(20):
            out = exact_oracle(prob, rng.standard_normal(3), 2.0)
            assert out.was_accurate_model and out.was_accurate_estimates


class TestGaussianOracle:
    def test_noise_scales_vanish_with_mu(self):
        oracle = GaussianOracle(CONSTS)
        assert oracle.sigma_f(10.0) == pytest.approx(
            oracle.sigma_f(1.0) / 100.0)
        assert oracle.sigma_g(10.0) == pytest.approx(
            oracle.sigma_g(1.0) / 10.0)
        assert oracle.sigma_f(1e8) < 1e-15

    def test_certainty_rejected(self):
        with pytest.raises(ValueError):
            GaussianOracle(AccuracyConstants(p=1.0, q=0.9))
        with pytest.raises(ValueError):
            GaussianOracle(AccuracyConstants(p=0.9, q=1.0))

    def test_marginal_calibration_quantile(self):
        # P(|sigma Z| <= bound) must equal sqrt(q) by construction.
        from scipy.stats import norm
        oracle = GaussianOracle(CONSTS)
        mu = 3.0
        bound = CONSTS.eps_f / mu ** 2
        prob_inside = 2.0 * norm.cdf(bound / oracle.sigma_f(mu)) - 1.0
        assert prob_inside == pytest.approx(math.sqrt(CONSTS.q), abs=1e-12)

    def test_event_frequencies(self):
        # Smaller-scale version of the acceptance calibration.
        prob = random_linear_problem(6, 3, seed=1)
        oracle = GaussianOracle(CONSTS, jac_sigma=0.1,
                                kappa_jm=prob.jacobian_bound() + 1.0)
        rng = np.random.default_rng(2)
        x = prob.x0
        x1 = x + 0.1
        n = 20_000
        hits_U = hits_V = 0
        for _ in range(n):
            hits_U += oracle.model_at(prob, x, 2.0, rng).accurate
            hits_V += oracle.estimate_pair(prob, x, x1, 2.0, rng).accurate
        se = math.sqrt(0.9 * 0.1 / n)
        assert abs(hits_U / n - 0.9) <= 4 * se
        assert abs(hits_V / n - 0.9) <= 4 * se

    def test_jacobian_clipped_at_bound(self):
        prob = random_linear_problem(6, 3, seed=3)
        kappa = prob.jacobian_bound() * 1.01
        oracle = GaussianOracle(CONSTS, jac_sigma=5.0, kappa_jm=kappa)
        rng = np.random.default_rng(4)
        for _ in range(50):
            model = oracle.model_at(prob, prob.x0, 0.5, rng)
            assert np.linalg.norm(model.J, 2) <= kappa * (1 + 1e-12)

    def test_flags_recomputable(self):
        prob = random_linear_problem(6, 3, seed=5)
        rng = np.random.default_rng(6)
        mu = 1.5
        x = prob.x0
        for _ in range(200):
            out = gaussian_oracle(prob, x, mu, CONSTS, rng,
                                  x_trial=x + 0.05)
            grad = prob.grad(x)
            expect_U = (np.linalg.norm(out.g - grad)
                        <= CONSTS.kappa_eg / mu) and \
                (abs(out.m_at_center - prob.f(x)) <= CONSTS.kappa_ef / mu**2)
            bound = CONSTS.eps_f / mu ** 2
            expect_V = abs(out.f0 - prob.f(x)) <= bound and \
                abs(out.f1 - prob.f(x + 0.05)) <= bound
            assert out.was_accurate_model == expect_U
            assert out.was_accurate_estimates == expect_V


class TestBernoulliOracle:
    def test_full_probability_is_exact(self):
        prob = random_linear_problem(6, 3, seed=7)
        consts = AccuracyConstants(p=1.0, q=1.0)
        rng = np.random.default_rng(8)
        out = bernoulli_oracle(prob, prob.x0, 1.0, consts, 1e6, rng)
        ref = exact_oracle(prob, prob.x0, 1.0)
        np.testing.assert_array_equal(out.g, ref.g)
        assert out.f0 == ref.f0

    def test_corruption_frequency(self):
        prob = random_linear_problem(6, 3, seed=9)
        consts = AccuracyConstants(p=0.9, q=0.9)
        oracle = BernoulliOracle(consts, corruption=1e4)
        rng = np.random.default_rng(10)
        n = 10_000
        hits = sum(oracle.model_at(prob, prob.x0, 1.0, rng).accurate
                   for _ in range(n))
        assert abs(hits / n - 0.9) <= 0.01

    def test_zero_corruption_gives_zero_gradient(self):
        prob = random_linear_problem(6, 3, seed=11)
        consts = AccuracyConstants(p=0.5, q=1.0)
        oracle = BernoulliOracle(consts, corruption=0.0)
        rng = np.random.default_rng(12)
        corrupted = [oracle.model_at(prob, prob.x0, 1.0, rng)
                     for _ in range(100)]
        zeros = [m for m in corrupted if np.linalg.norm(m.g) == 0.0]
        assert zeros  # some draws must take the corruption branch
        prob_norm = np.linalg.norm(prob.grad(prob.x0))
        assert prob_norm > 0  # so the zero draws really were corrupted


class TestSubsampleOracle:
    def test_full_batch_is_exact(self):
        prob = block_linear_problem(n_blocks=6, seed=13)
        rng = np.random.default_rng(14)
        out = subsample_oracle(prob, prob.x0, 1.0, 1.0, rng)
        assert out.f0 == pytest.approx(prob.f(prob.x0), rel=1e-12)
        np.testing.assert_allclose(out.g, prob.grad(prob.x0), rtol=1e-12)

    def test_singleton_subsets_unbiased(self):
        # Average of the rescaled estimate over all B singleton subsets
        # reproduces f and the gradient exactly.
        prob = block_linear_problem(n_blocks=6, seed=15)
        x = prob.x0
        oracle = SubsampleOracle(1.0 / 6.0)
        fs, gs = [], []
        for i in range(prob.n_blocks):
            r, J = oracle._stacked(prob, x, [i], 6.0)
            fs.append(0.5 * float(r @ r))
            gs.append(J.T @ r)
        assert np.mean(fs) == pytest.approx(prob.f(x), rel=1e-12)
        np.testing.assert_allclose(np.mean(gs, axis=0), prob.grad(x),
                                   rtol=1e-12)

    def test_variance_decreases_with_batch_size(self):
        prob = block_linear_problem(n_blocks=6, seed=16)
        x = prob.x0 + 0.3
        B = prob.n_blocks
        variances = []
        for k in range(1, B + 1):
            vals = []
            for subset in itertools.combinations(range(B), k):
                r, _ = SubsampleOracle(k / B)._stacked(prob, x, subset, B / k)
                vals.append(0.5 * float(r @ r))
            variances.append(np.var(vals))
        assert variances[-1] == pytest.approx(0.0, abs=1e-20)
        assert all(a >= b for a, b in zip(variances, variances[1:]))

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            SubsampleOracle(0.0)


class TestAccuracyConstants:
    def test_validation(self):
        with pytest.raises(ValueError):
            AccuracyConstants(kappa_ef=0.0)
        with pytest.raises(ValueError):
            AccuracyConstants(p=0.0)
        with pytest.raises(ValueError):
            AccuracyConstants(q=1.5)
