import math

import numpy as np
import pytest

from stochlm.core import (DegenerateSubproblemError, ModelSnapshot,
                          SolverConfig, SolverState, apply_update,
                          build_model, compute_rho, model_value, run)
from stochlm.oracles import (AccuracyConstants, BernoulliOracle, ExactOracle)
from stochlm.problems import (LinearLeastSquares, identity_problem,
                              random_linear_problem)
from stochlm.subproblem import solve_exact


def snapshot(g, J, mu, m_at_center=0.0, center=None):
    g = np.asarray(g, float)
    return ModelSnapshot(
        center=np.zeros(g.shape[0]) if center is None else center,
        m_at_center=m_at_center, g=g, J=np.asarray(J, float),
        gamma=mu * float(np.linalg.norm(g)), mu=mu)


class TestBuildModel:
    def test_gamma_is_mu_times_gradient_norm(self):
        prob = identity_problem(2)
        snap = build_model(ExactOracle(), np.array([1.0, 0.0]), 2.0,
                           problem=prob)
        assert snap.gamma == 2.0

    def test_zero_gradient(self):
        prob = identity_problem(2)
        snap = build_model(ExactOracle(), np.zeros(2), 5.0, problem=prob)
        assert snap.gamma == 0.0

    def test_identity_residual(self):
        prob = identity_problem(2)
        snap = build_model(ExactOracle(), np.array([3.0, 4.0]), 1.0,
                           problem=prob)
        np.testing.assert_allclose(snap.g, [3.0, 4.0])
        assert snap.gamma == pytest.approx(5.0)
        assert snap.m_at_center == pytest.approx(12.5)


class TestModelValue:
    def test_zero_step(self):
        snap = snapshot([1.0, 0.0], np.eye(2), 1.0, m_at_center=5.0)
        assert model_value(snap, np.zeros(2)) == 5.0

    def test_quadratic_arithmetic(self):
        snap = ModelSnapshot(center=np.zeros(2), m_at_center=5.0,
                             g=np.array([1.0, 0.0]), J=np.eye(2),
                             gamma=1.0, mu=1.0)
        assert model_value(snap, np.array([-0.5, 0.0])) \
            == pytest.approx(4.75)

    def test_solver_steps_decrease_the_model(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 6))
            snap = snapshot(rng.standard_normal(n),
                            rng.standard_normal((n + 1, n)),
                            mu=10.0 ** rng.uniform(-2, 2),
                            m_at_center=float(rng.uniform(0, 10)))
            s = solve_exact(snap)
            assert model_value(snap, s) <= snap.m_at_center

    def test_dimension_mismatch(self):
        snap = snapshot([1.0, 0.0], np.eye(2), 1.0)
        with pytest.raises(ValueError):
            model_value(snap, np.zeros(3))


class TestComputeRho:
    def test_basic_ratio(self):
        assert compute_rho(10.0, 9.0, 2.0) == 0.5

    def test_no_estimated_decrease(self):
        assert compute_rho(7.0, 7.0, 1.5) == 0.0

    def test_estimated_increase_is_negative(self):
        assert compute_rho(1.0, 3.0, 1.0) == -2.0

    def test_nonpositive_decrease_rejected(self):
        with pytest.raises(DegenerateSubproblemError):
            compute_rho(1.0, 0.0, 0.0)


class TestApplyUpdate:
    CFG = SolverConfig(eta1=0.1, eta2=1.0, mu_min=1e-16, mu0=2.0, lam=2.0)

    def test_successful_iteration(self):
        snap = snapshot([1.0, 0.0], np.eye(2), 2.0)
        state = SolverState(x=np.zeros(2), mu=2.0)
        new, rec = apply_update(state, snap, np.array([0.5, 0.0]), 0.5,
                                self.CFG)
        assert rec.success
        assert new.mu == 1.0
        np.testing.assert_allclose(new.x, [0.5, 0.0])

    def test_low_rho_fails(self):
        snap = snapshot([1.0, 0.0], np.eye(2), 2.0)
        state = SolverState(x=np.zeros(2), mu=2.0)
        new, rec = apply_update(state, snap, np.array([0.5, 0.0]), 0.05,
                                self.CFG)
        assert not rec.success
        assert new.mu == 4.0
        np.testing.assert_allclose(new.x, 0.0)

    def test_small_gradient_fails_despite_high_rho(self):
        snap = snapshot([0.4, 0.0], np.eye(2), 2.0)
        state = SolverState(x=np.zeros(2), mu=2.0)
        new, rec = apply_update(state, snap, np.array([0.1, 0.0]), 0.9,
                                self.CFG)
        assert not rec.success
        assert new.mu == 4.0


class TestRun:
    def test_linear_least_squares_exact(self):
        prob = random_linear_problem(10, 5, seed=0)
        cfg = SolverConfig(eta2=1e-12, grad_tol=1e-10, max_iters=50,
                           record_grad=True)
        trace = run(prob, ExactOracle(), ExactOracle(), cfg=cfg, seed=0)
        assert trace.termination == "grad_tol"
        assert trace.n_iters <= 50
        assert trace.final_grad_norm <= 1e-10
        assert np.linalg.norm(trace.x_final - prob.solution()) <= 1e-8

    def test_identity_from_origin_grows_mu(self):
        prob = identity_problem(2)
        trace = run(prob, ExactOracle(), ExactOracle(),
                    cfg=SolverConfig(max_iters=200), seed=0)
        assert trace.termination == "mu_max"
        np.testing.assert_allclose(trace.x_final, 0.0)
        assert all(not r.success for r in trace.records)

    def test_identity_with_grad_stop_terminates_immediately(self):
        prob = identity_problem(2)
        trace = run(prob, ExactOracle(), ExactOracle(),
                    cfg=SolverConfig(grad_tol=1e-8), seed=0)
        assert trace.n_iters == 0
        assert trace.termination == "grad_tol"

    def test_zero_gradient_skips_subsolver(self):
        prob = identity_problem(2)
        calls = []

        def counting_subsolver(snap, tol, max_iters):
            calls.append(snap)
            raise AssertionError("subsolver must not run for g = 0")

        trace = run(prob, ExactOracle(), ExactOracle(),
                    subsolver=counting_subsolver,
                    cfg=SolverConfig(max_iters=5), seed=0)
        assert not calls
        assert all(math.isnan(r.rho) for r in trace.records)

    def test_bernoulli_with_certainty_matches_exact(self):
        prob = random_linear_problem(8, 4, seed=1)
        cfg = SolverConfig(eta2=1e-10, max_iters=40)
        consts = AccuracyConstants(p=1.0, q=1.0)
        oracle = BernoulliOracle(consts, corruption=100.0)
        t_exact = run(prob, ExactOracle(), ExactOracle(), cfg=cfg, seed=3)
        t_bern = run(prob, oracle, oracle, cfg=cfg, seed=3)
        assert len(t_exact.records) == len(t_bern.records)
        for a, b in zip(t_exact.records, t_bern.records):
            assert a.success == b.success
            assert a.mu_after == b.mu_after
            assert a.f0 == b.f0 and a.f1 == b.f1
        np.testing.assert_array_equal(t_exact.x_final, t_bern.x_final)

    def test_determinism(self):
        prob = random_linear_problem(10, 5, seed=2)
        consts = AccuracyConstants(p=0.8, q=0.8)
        cfg = SolverConfig(max_iters=60)
        traces = [run(prob, BernoulliOracle(consts, 50.0),
                      BernoulliOracle(consts, 50.0), cfg=cfg, seed=11)
                  for _ in range(2)]
        a, b = traces
        assert len(a.records) == len(b.records)
        for ra, rb in zip(a.records, b.records):
            assert ra == rb
        np.testing.assert_array_equal(a.x_final, b.x_final)

    def test_mu_monotonicity_invariant(self):
        prob = random_linear_problem(10, 5, seed=4)
        cfg = SolverConfig(mu_min=0.25, max_iters=80)
        consts = AccuracyConstants(p=0.7, q=0.7)
        oracle = BernoulliOracle(consts, 10.0)
        trace = run(prob, oracle, oracle, cfg=cfg, seed=5)
        for rec in trace.records:
            ratio = rec.mu_after / rec.mu_before
            assert ratio in (0.5, 2.0) or rec.mu_after == cfg.mu_min

    def test_acceptance_recomputable_from_record(self):
        prob = random_linear_problem(10, 5, seed=6)
        cfg = SolverConfig(mu_min=0.25, max_iters=80)
        consts = AccuracyConstants(p=0.7, q=0.7)
        oracle = BernoulliOracle(consts, 10.0)
        trace = run(prob, oracle, oracle, cfg=cfg, seed=7)
        for rec in trace.records:
            expected = (rec.rho >= cfg.eta1) and \
                (rec.g_norm >= cfg.eta2 / rec.mu_before)
            assert rec.success == expected

    def test_zero_residual_linear_always_successful(self):
        # With exact oracles and the exact subsolver, every iteration
        # passing the gradient-scale test must be successful.
        rng = np.random.default_rng(8)
        A = rng.standard_normal((8, 4))
        x_star = rng.standard_normal(4)
        prob = LinearLeastSquares(A, A @ x_star, x0=np.zeros(4))
        cfg = SolverConfig(eta2=1.0, max_iters=120)

        def exact_subsolver(snap, tol, max_iters):
            return solve_exact(snap)

        trace = run(prob, ExactOracle(), ExactOracle(),
                    subsolver=exact_subsolver, cfg=cfg, seed=9)
        eventually_successful = False
        for rec in trace.records:
            if rec.g_norm >= cfg.eta2 / rec.mu_before:
                assert rec.success
                eventually_successful = True
        assert eventually_successful


class TestSolverConfigValidation:
    @pytest.mark.parametrize("kwargs", [
        {"eta1": 0.0}, {"eta1": 1.0}, {"eta2": 0.0}, {"lam": 1.0},
        {"mu_min": 0.0}, {"mu0": 1e-20, "mu_min": 1e-16},
        {"mu0": 1e20, "mu_max": 1e16},
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            SolverConfig(**kwargs)
