import math

import numpy as np
import pytest

from stochlm.core import SolverConfig, run
from stochlm.diagnostics import (TheoryConstants,
                                 check_probability_conditions,
                                 estimate_T_epsilon, fit_loglog_slope,
                                 lattice_exponent, lattice_zeta, phi,
                                 phi_decrease_check, phi_increments,
                                 renewal_count, renewal_times,
                                 stopping_time_bound, track_events)
from stochlm.oracles import AccuracyConstants, BernoulliOracle, ExactOracle
from stochlm.problems import quadratic2_problem, random_linear_problem


def make_constants(**overrides):
    kwargs = dict(nu=0.81, kappa_Jm=1.0, theta_fcd=1.0, theta_in=2.0,
                  kappa_ef=0.01, kappa_eg=0.5, eps_f=0.01,
                  eta1=0.1, eta2=1.0, lam=2.0)
    kwargs.update(overrides)
    return TheoryConstants.from_primitives(**kwargs)


class TestPhi:
    def test_arithmetic(self):
        assert phi(2.0, 2.0, 0.5) == pytest.approx(1.125)

    def test_large_mu_limit(self):
        assert phi(0.0, 1e12, 0.5) == pytest.approx(0.0, abs=1e-20)

    def test_tau_boundary_rejected(self):
        with pytest.raises(ValueError):
            phi(1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            phi(1.0, 0.0, 0.5)


class TestTheoryConstants:
    def test_derived_chain_recomputes(self):
        tc = make_constants()
        rc = tc.recompute()
        for name in ("kappa_efs", "alpha", "kappa_mu_g", "C1", "C2", "C3",
                     "zeta", "tau", "sigma"):
            assert getattr(tc, name) == pytest.approx(getattr(rc, name),
                                                      rel=1e-12)

    def test_formulas_direct(self):
        tc = make_constants()
        assert tc.kappa_efs == pytest.approx(
            (tc.kappa_ef + 2 * tc.kappa_eg + tc.nu + 4 * tc.kappa_Jm**2) / 2)
        assert tc.alpha == pytest.approx(
            tc.eps_f + tc.kappa_eg + tc.nu + 5 * tc.kappa_Jm**2
            + 2 * tc.theta_in)
        assert tc.C2 == pytest.approx(
            tc.eta1 * tc.eta2 * tc.theta_fcd / 4 - 2 * tc.eps_f)
        assert tc.sigma == pytest.approx(
            0.25 * (1 - tc.tau) * (1 - 1 / tc.lam**2))
        assert tc.C3 == pytest.approx(2 * (1 + tc.nu / tc.zeta))

    def test_eta2_bound_rejected(self):
        # eta2 below kappa_Jm^2
        with pytest.raises(ValueError):
            make_constants(eta2=0.5, kappa_Jm=1.0)
        # eta2 below 8 eps_f / (eta1 theta_fcd), so C2 <= 0
        with pytest.raises(ValueError):
            make_constants(eps_f=0.05, eta2=1.0)

    def test_zeta_below_floor_rejected(self):
        tc = make_constants()
        with pytest.raises(ValueError):
            make_constants(zeta=tc.zeta_min() * 0.5)


class TestLatticeZeta:
    def test_smallest_admissible_exponent(self):
        tc = make_constants()
        mu0, lam, eps = 1.0, 2.0, 1e-1
        zeta, s = lattice_zeta(mu0, lam, eps, tc.zeta_min())
        assert zeta >= tc.zeta_min()
        assert zeta == mu0 * lam**s * eps
        assert s >= 1
        assert mu0 * lam ** (s - 1) * eps < tc.zeta_min() or s == 1


class TestProbabilityConditions:
    def test_high_probability_passes(self):
        tc = make_constants()
        rep = check_probability_conditions(tc, 1 - 1e-9, 1 - 1e-9)
        assert rep.cond1_ok and rep.cond2_ok

    def test_coin_flip_fails_condition_one(self):
        tc = make_constants()
        rep = check_probability_conditions(tc, 0.5, 0.5)
        assert not rep.cond1_ok
        assert rep.cond1_margin < 0

    def test_boundary_margin_by_bisection(self):
        # Solve (v^2 - 1/2)/((1-v)^2) = C3/C1 for p = q = v, then the
        # reported margin must vanish at the solver's precision.
        tc = make_constants()
        target = tc.C3 / tc.C1

        def excess(v):
            return (v * v - 0.5) / ((1.0 - v) ** 2) - target

        lo, hi = math.sqrt(0.5) + 1e-9, 1.0 - 1e-9
        assert excess(lo) < 0 < excess(hi)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid in (lo, hi):
                break
            if excess(mid) < 0:
                lo = mid
            else:
                hi = mid
        rep = check_probability_conditions(tc, hi, hi)
        assert rep.cond1_ok
        assert abs(rep.cond1_margin) <= 1e-12 * max(1.0, target)

    def test_domain_validation(self):
        tc = make_constants()
        with pytest.raises(ValueError):
            check_probability_conditions(tc, 1.0, 0.9)


class TestTrackEvents:
    def test_exact_runs_are_always_accurate(self):
        prob = random_linear_problem(8, 4, seed=0)
        trace = run(prob, ExactOracle(), ExactOracle(),
                    cfg=SolverConfig(max_iters=40), seed=0)
        tc = make_constants()
        summary = track_events(trace, tc)
        assert summary.freq_U == 1.0
        assert summary.freq_V == 1.0
        assert not summary.guarantee_violations

    def test_missing_flags_raise(self):
        prob = random_linear_problem(8, 4, seed=1)

        class NoFlagOracle(ExactOracle):
            def model_at(self, problem, x, mu, rng):
                out = super().model_at(problem, x, mu, rng)
                out.accurate = None
                return out

        trace = run(prob, NoFlagOracle(), ExactOracle(),
                    cfg=SolverConfig(max_iters=5), seed=0)
        with pytest.raises(ValueError):
            track_events(trace, make_constants())


class TestPhiDecrease:
    def test_unsuccessful_increment_closed_form(self):
        # An unsuccessful iteration moves phi by exactly
        # (1 - tau)(1/lambda^2 - 1)/mu^2.
        prob = random_linear_problem(8, 4, seed=2)
        consts = AccuracyConstants(p=0.6, q=0.6)
        oracle = BernoulliOracle(consts, corruption=100.0)
        trace = run(prob, oracle, oracle,
                    cfg=SolverConfig(mu_min=0.5, max_iters=60), seed=3)
        tc = make_constants()
        values = phi_increments(trace, tc.tau)
        expected_fail = (1.0 - tc.tau) * (1.0 / tc.lam**2 - 1.0)
        saw_failure = False
        for rec, val in zip(trace.records, values):
            if not rec.success:
                saw_failure = True
                assert val == pytest.approx(expected_fail, rel=1e-9)
        assert saw_failure

    def test_successful_increment_closed_form(self):
        prob = random_linear_problem(8, 4, seed=4)
        trace = run(prob, ExactOracle(), ExactOracle(),
                    cfg=SolverConfig(mu_min=0.25, max_iters=40), seed=5)
        tc = make_constants()
        values = phi_increments(trace, tc.tau)
        for rec, val in zip(trace.records, values):
            if rec.success and rec.mu_after != rec.mu_before:
                expected = tc.tau * (rec.true_f_after - rec.true_f_before) \
                    * rec.mu_before**2 + (1 - tc.tau) * (tc.lam**2 - 1)
                assert val == pytest.approx(expected, rel=1e-9)

    def test_pooled_statistic_reports_interval(self):
        prob = quadratic2_problem()
        tc = make_constants()
        traces = [run(prob, ExactOracle(), ExactOracle(),
                      cfg=SolverConfig(mu_min=0.25, max_iters=50), seed=s)
                  for s in range(5)]
        stat = phi_decrease_check(traces, tc)
        assert stat.ci_low <= stat.mean <= stat.ci_high
        assert stat.n == sum(len(t.records) for t in traces)
        assert stat.phi_max_observed >= 0.0


class TestEstimateTEpsilon:
    def test_deterministic_oracle_identical_replications(self):
        cfg = SolverConfig(eta2=1e-10, mu_min=0.25, max_iters=200,
                           record_truth=False)

        def oracle_factory():
            oracle = ExactOracle()
            return oracle, oracle

        est = estimate_T_epsilon(quadratic2_problem, oracle_factory, cfg,
                                 [0.5, 0.05], 3, 42)
        for Ts in est.T_values:
            assert len(set(Ts)) == 1
        assert est.n_capped == [0, 0]
        assert est.mean_T[1] >= est.mean_T[0]

    def test_stopping_time_bound_arithmetic(self):
        tc = make_constants()
        p = q = 0.9
        bound, kappa_s, used = stopping_time_bound(tc, 2.0, 1.0, 0.1, p, q,
                                                    use_lattice=False)
        expected_ks = (used.tau * 2.0 + (1 - used.tau)) / used.sigma \
            * used.zeta**2
        assert kappa_s == pytest.approx(expected_ks, rel=1e-12)
        assert bound == pytest.approx(
            p * q / (2 * p * q - 1) * (expected_ks * 100.0 + 1.0) - 1.0,
            rel=1e-12)

    def test_bound_requires_pq_above_half(self):
        tc = make_constants()
        with pytest.raises(ValueError):
            stopping_time_bound(tc, 1.0, 1.0, 0.1, 0.6, 0.6)

    def test_slope_fit_excludes_capped(self):
        slope = fit_loglog_slope([0.1, 0.01], [10.0, 1000.0], [0.0, 0.0])
        assert slope == pytest.approx(2.0)
        assert math.isnan(
            fit_loglog_slope([0.1, 0.01], [10.0, 1000.0], [0.0, 0.5]))


class TestRenewalBookkeeping:
    def test_reconstruction_idempotent(self):
        mus = [4.0, 8.0, 4.0, 2.0, 4.0, 2.0, 1.0, 2.0]
        A1 = renewal_times(mus, 2.0)
        A2 = renewal_times(mus, 2.0)
        assert A1 == A2 == [0, 3, 5, 6, 7]

    def test_count_bounded_by_time(self):
        rng = np.random.default_rng(6)
        mus = np.exp(rng.standard_normal(60).cumsum() * 0.3)
        A = renewal_times(mus, float(np.median(mus)))
        for j in range(len(mus)):
            assert renewal_count(A, j) <= j + 1

    def test_trace_mu_sequence(self):
        prob = random_linear_problem(8, 4, seed=7)
        consts = AccuracyConstants(p=0.7, q=0.7)
        oracle = BernoulliOracle(consts, corruption=10.0)
        trace = run(prob, oracle, oracle,
                    cfg=SolverConfig(mu_min=0.25, max_iters=80), seed=8)
        mus = [r.mu_before for r in trace.records]
        A = renewal_times(mus, 1.0)
        assert A[0] == 0
        assert all(b > a for a, b in zip(A, A[1:]))
        assert renewal_count(A, len(mus) - 1) == len(A) - 1


class TestMuLattice:
    def test_every_mu_on_geometric_lattice(self):
        # lambda = 2 keeps the lattice exact in binary floating point.
        prob = random_linear_problem(8, 4, seed=9)
        consts = AccuracyConstants(p=0.7, q=0.7)
        oracle = BernoulliOracle(consts, corruption=10.0)
        cfg = SolverConfig(mu_min=0.25, mu0=1.0, lam=2.0, max_iters=100)
        trace = run(prob, oracle, oracle, cfg=cfg, seed=10)
        for rec in trace.records:
            for mu in (rec.mu_before, rec.mu_after):
                k, exact = lattice_exponent(mu, cfg.mu0, cfg.lam)
                assert exact
                assert mu >= cfg.mu_min
