"""Theory-facing quantities and the Monte Carlo complexity harness.

Collects the constants chain used by the convergence analysis, tracks the
per-iteration accuracy events, estimates the expected stopping time
T_eps = inf{j : ||grad f(X_j)|| <= eps} over replications, and measures
the expected decrease of the Lyapunov function

    Phi_j = tau * f(X_j) + (1 - tau) / mu_j^2.

Derived constants (from the stored primitives):

    kappa_efs = (kappa_ef + 2 kappa_eg + nu + 4 kappa_Jm^2) / 2
    alpha     = eps_f + kappa_eg + nu + 5 kappa_Jm^2 + 2 theta_in
    kappa_mug = max{(alpha + sqrt(alpha^2 + 4 alpha kappa_Jm^2 (1-eta1)))
                    / (2 (1-eta1)), eta2}
    K         = max{kappa_Jm^2, 8 (kappa_ef + kappa_efs)/(eta1 theta_fcd)}
    C1        = (eta1 theta_fcd / 8) * K / (kappa_eg + K)
    C2        = eta1 eta2 theta_fcd / 4 - 2 eps_f            (must be > 0)
    C3        = 2 (1 + nu / zeta)
    sigma     = (1 - tau) (1 - 1/lambda^2) / 4
    kappa_s   = (tau f(x0) + (1-tau)/mu0^2) / sigma * zeta^2

zeta must dominate kappa_eg + max{kappa_mug, 8(kappa_ef+kappa_efs)/
(eta1 theta_fcd), kappa_Jm^2, eta2}; tau/(1-tau) must exceed
(lambda^2 - 1/lambda^2) / min{C1 zeta, C2, (kappa_ef+kappa_efs)/2}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import RunTrace, SolverConfig, run


@dataclass(frozen=True)
class TheoryConstants:
    """Primitive and derived constants of the convergence analysis."""

    # algorithm constants
    eta1: float
    eta2: float
    lam: float
    # problem / oracle / subsolver primitives
    nu: float
    kappa_Jm: float
    theta_fcd: float
    theta_in: float
    kappa_ef: float
    kappa_eg: float
    eps_f: float
    # derived
    kappa_efs: float
    alpha: float
    kappa_mu_g: float
    C1: float
    C2: float
    C3: float
    zeta: float
    tau: float
    sigma: float
    phi_max: Optional[float] = None  # Assumption-level; reported, not derived

    @staticmethod
    def from_primitives(nu, kappa_Jm, theta_fcd, theta_in, kappa_ef,
                        kappa_eg, eps_f, eta1, eta2, lam,
                        zeta=None, tau=None, phi_max=None):
        """Derive the constants chain; rejects eta2 below its lower bound.

        zeta defaults to its smallest admissible value, tau to the midpoint
        between its threshold and 1.
        """
        eta2_floor = max(kappa_Jm ** 2, 8.0 * eps_f / (eta1 * theta_fcd))
        C2 = eta1 * eta2 * theta_fcd / 4.0 - 2.0 * eps_f
        if eta2 < eta2_floor or C2 <= 0.0:
            raise ValueError(
                f"eta2={eta2} violates its lower bound {eta2_floor} "
                "(C2 must be positive)")
        kappa_efs = (kappa_ef + 2.0 * kappa_eg + nu
                     + 4.0 * kappa_Jm ** 2) / 2.0
        alpha = eps_f + kappa_eg + nu + 5.0 * kappa_Jm ** 2 + 2.0 * theta_in
        kappa_mu_g = max(
            (alpha + math.sqrt(alpha ** 2
                               + 4.0 * alpha * kappa_Jm ** 2 * (1.0 - eta1)))
            / (2.0 * (1.0 - eta1)),
            eta2,
        )
        K = max(kappa_Jm ** 2,
                8.0 * (kappa_ef + kappa_efs) / (eta1 * theta_fcd))
        C1 = (eta1 * theta_fcd / 8.0) * K / (kappa_eg + K)
        zeta_min = kappa_eg + max(
            kappa_mu_g,
            8.0 * (kappa_ef + kappa_efs) / (eta1 * theta_fcd),
            kappa_Jm ** 2,
            eta2,
        )
        if zeta is None:
            zeta = zeta_min
        elif zeta < zeta_min:
            raise ValueError(f"zeta={zeta} below its lower bound {zeta_min}")
        C3 = 2.0 * (1.0 + nu / zeta)
        spread = lam ** 2 - 1.0 / lam ** 2
        ratio = max(spread / (C1 * zeta), spread / C2,
                    spread / ((kappa_ef + kappa_efs) / 2.0))
        tau_threshold = ratio / (1.0 + ratio)
        if tau is None:
            tau = 0.5 * (tau_threshold + 1.0)
        elif not (tau_threshold < tau < 1.0):
            raise ValueError(
                f"tau={tau} outside ({tau_threshold}, 1)")
        sigma = 0.25 * (1.0 - tau) * (1.0 - 1.0 / lam ** 2)
        return TheoryConstants(
            eta1=eta1, eta2=eta2, lam=lam, nu=nu, kappa_Jm=kappa_Jm,
            theta_fcd=theta_fcd, theta_in=theta_in, kappa_ef=kappa_ef,
            kappa_eg=kappa_eg, eps_f=eps_f, kappa_efs=kappa_efs, alpha=alpha,
            kappa_mu_g=kappa_mu_g, C1=C1, C2=C2, C3=C3, zeta=zeta, tau=tau,
            sigma=sigma, phi_max=phi_max,
        )

    def zeta_min(self):
        return self.kappa_eg + max(
            self.kappa_mu_g,
            8.0 * (self.kappa_ef + self.kappa_efs)
            / (self.eta1 * self.theta_fcd),
            self.kappa_Jm ** 2,
            self.eta2,
        )

    def recompute(self):
        """Re-derive every constant from the primitives (invariant test)."""
        return TheoryConstants.from_primitives(
            self.nu, self.kappa_Jm, self.theta_fcd, self.theta_in,
            self.kappa_ef, self.kappa_eg, self.eps_f, self.eta1, self.eta2,
            self.lam, zeta=self.zeta, tau=self.tau, phi_max=self.phi_max,
        )

    def with_zeta(self, zeta):
        """Rebuild tau/sigma/C3 for a different admissible zeta."""
        return TheoryConstants.from_primitives(
            self.nu, self.kappa_Jm, self.theta_fcd, self.theta_in,
            self.kappa_ef, self.kappa_eg, self.eps_f, self.eta1, self.eta2,
            self.lam, zeta=zeta, phi_max=self.phi_max,
        )


def phi(f_value: float, mu: float, tau: float) -> float:
    """Lyapunov value tau*f + (1-tau)/mu^2; needs mu > 0 and tau in (0,1)."""
    if mu <= 0.0:
        raise ValueError("mu must be positive")
    if not (0.0 < tau < 1.0):
        raise ValueError("tau must lie strictly inside (0, 1)")
    return tau * f_value + (1.0 - tau) / mu ** 2


def lattice_zeta(mu0: float, lam: float, epsilon: float, zeta_min: float):
    """Smallest lattice-compatible zeta = mu0 * lam**s * epsilon >= zeta_min.

    Returns (zeta, s) with integer s >= 1.
    """
    s = max(1, math.ceil(math.log(zeta_min / (mu0 * epsilon))
                         / math.log(lam)))
    while mu0 * lam ** s * epsilon < zeta_min:
        s += 1
    while s > 1 and mu0 * lam ** (s - 1) * epsilon >= zeta_min:
        s -= 1
    return mu0 * lam ** s * epsilon, s


@dataclass
class ProbabilityReport:
    cond1_ok: bool
    cond1_margin: float
    cond2_ok: bool
    cond2_margin: float
    required_ratio: float
    max_joint_failure: float


def check_probability_conditions(constants: TheoryConstants, p: float,
                                 q: float) -> ProbabilityReport:
    """Margins of the two probability conditions for given (p, q).

    Condition 1: (pq - 1/2)/((1-p)(1-q)) >= C3/C1.
    Condition 2: (1-p)(1-q) <= (1-tau)(1 - 1/lambda^2) /
                 (2 (tau C3 zeta + (1-tau)(lambda^2 - 1))).
    """
    if not (0.0 < p < 1.0 and 0.0 < q < 1.0):
        raise ValueError("p and q must lie strictly inside (0, 1)")
    fail = (1.0 - p) * (1.0 - q)
    ratio = (p * q - 0.5) / fail
    required = constants.C3 / constants.C1
    margin1 = ratio - required
    lam = constants.lam
    rhs2 = (1.0 - constants.tau) * (1.0 - 1.0 / lam ** 2) / (
        2.0 * (constants.tau * constants.C3 * constants.zeta
               + (1.0 - constants.tau) * (lam ** 2 - 1.0)))
    margin2 = rhs2 - fail
    return ProbabilityReport(
        cond1_ok=margin1 >= 0.0, cond1_margin=margin1,
        cond2_ok=margin2 >= 0.0, cond2_margin=margin2,
        required_ratio=required, max_joint_failure=rhs2,
    )


@dataclass
class EventSummary:
    n_scored: int
    freq_U: float
    freq_V: float
    guarded_iterations: int
    guarantee_violations: list


def track_events(traces, constants: TheoryConstants) -> EventSummary:
    """Event frequencies plus the success guarantee check.

    Every scored iteration with an accurate model, accurate estimates, and
    mu * ||g_m|| >= kappa_mu_g must have been successful; violations are
    returned (an empty list is the healthy outcome).  Degenerate
    iterations (zero model gradient, no oracle consulted) are skipped.
    Raises if accuracy flags are missing.
    """
    if isinstance(traces, RunTrace):
        traces = [traces]
    n = 0
    n_U = 0
    n_V = 0
    checked = 0
    violations = []
    for t_index, trace in enumerate(traces):
        for rec in trace.records:
            if math.isnan(rec.rho) and rec.g_norm == 0.0:
                continue
            if rec.event_U is None or rec.event_V is None:
                raise ValueError(
                    "trace lacks ground-truth accuracy flags; run with an "
                    "oracle that scores its draws")
            n += 1
            n_U += rec.event_U
            n_V += rec.event_V
            if rec.event_U and rec.event_V and \
                    rec.mu_before * rec.g_norm >= constants.kappa_mu_g:
                checked += 1
                if not rec.success:
                    violations.append((t_index, rec.iter))
    freq_U = n_U / n if n else math.nan
    freq_V = n_V / n if n else math.nan
    return EventSummary(n_scored=n, freq_U=freq_U, freq_V=freq_V,
                        guarded_iterations=checked,
                        guarantee_violations=violations)


def stopping_time_bound(constants: TheoryConstants, f_x0: float, mu0: float,
                        epsilon: float, p: float, q: float,
                        use_lattice: bool = True):
    """Expected-stopping-time bound pq/(2pq-1) * (kappa_s eps^-2 + 1) - 1.

    With use_lattice, zeta is re-chosen per epsilon as the smallest lattice
    value mu0 * lam**s * epsilon above its floor (and tau re-derived), the
    convention the stopping-time analysis uses.
    """
    if p * q <= 0.5:
        raise ValueError("the bound requires pq > 1/2")
    consts = constants
    if use_lattice:
        zeta, _ = lattice_zeta(mu0, constants.lam, epsilon,
                               constants.zeta_min())
        consts = constants.with_zeta(zeta)
    kappa_s = (consts.tau * f_x0 + (1.0 - consts.tau) / mu0 ** 2) \
        / consts.sigma * consts.zeta ** 2
    bound = p * q / (2.0 * p * q - 1.0) * (kappa_s / epsilon ** 2 + 1.0) - 1.0
    return bound, kappa_s, consts


@dataclass
class ComplexityEstimate:
    """Monte Carlo estimate of E[T_eps] over an epsilon grid."""

    epsilons: list
    mean_T: list
    stderr_T: list
    replications: int
    n_capped: list
    fitted_slope: float
    bounds: Optional[list] = None
    T_values: list = field(default_factory=list)      # per eps: list of T
    capped_flags: list = field(default_factory=list)  # per eps: list of bool


def fit_loglog_slope(epsilons, mean_T, capped_frac, cap_threshold=0.05):
    """Slope magnitude of log mean_T against log eps.

    Positive values mean T grows as eps shrinks (the reference rate is 2).
    Epsilon values with more than cap_threshold capped replications are
    excluded to avoid silent bias; returns nan with fewer than two usable
    points.
    """
    pts = [(e, t) for e, t, c in zip(epsilons, mean_T, capped_frac)
           if c <= cap_threshold and t > 0.0]
    if len(pts) < 2:
        return math.nan
    log_e = np.log([p[0] for p in pts])
    log_t = np.log([p[1] for p in pts])
    coeff = np.polyfit(log_e, log_t, 1)
    return float(-coeff[0])


def estimate_T_epsilon(problem_factory, oracle_factory, cfg: SolverConfig,
                       epsilon_grid: Sequence[float], replications: int,
                       master_seed: int, constants: TheoryConstants = None,
                       p: float = None, q: float = None,
                       subsolver=None,
                       eps_indices=None) -> ComplexityEstimate:
    """Estimate E[T_eps] for each eps on the grid.

    Each replication runs to the true-gradient stopping rule with its own
    seed stream; replications that hit the iteration cap contribute the cap
    as a lower bound and are flagged.  When constants and (p, q) are given,
    the expected-stopping-time bound is evaluated per epsilon.

    eps_indices pins each epsilon's position in the seed scheme, so a grid
    split across workers reproduces the sequential results.
    """
    epsilons = [float(e) for e in epsilon_grid]
    if eps_indices is None:
        eps_indices = list(range(len(epsilons)))
    mean_T, stderr_T, n_capped, bounds = [], [], [], []
    all_T, all_flags = [], []
    for i_eps, eps in zip(eps_indices, epsilons):
        Ts = np.empty(replications)
        flags = np.zeros(replications, dtype=bool)
        for rep in range(replications):
            seed = np.random.SeedSequence([master_seed, i_eps, rep])
            problem = problem_factory()
            model_oracle, estimate_oracle = oracle_factory()
            trace = run(problem, model_oracle, estimate_oracle,
                        subsolver=subsolver,
                        cfg=replace(cfg, grad_tol=eps), seed=seed)
            Ts[rep] = trace.n_iters
            flags[rep] = trace.termination != "grad_tol"
        mean_T.append(float(Ts.mean()))
        stderr_T.append(float(Ts.std(ddof=1) / math.sqrt(replications))
                        if replications > 1 else 0.0)
        n_capped.append(int(flags.sum()))
        all_T.append(Ts.tolist())
        all_flags.append(flags.tolist())
        if constants is not None and p is not None and q is not None:
            problem = problem_factory()
            b, _, _ = stopping_time_bound(constants, problem.f(problem.x0),
                                          cfg.mu0, eps, p, q)
            bounds.append(b)
    capped_frac = [c / replications for c in n_capped]
    slope = fit_loglog_slope(epsilons, mean_T, capped_frac)
    return ComplexityEstimate(
        epsilons=epsilons, mean_T=mean_T, stderr_T=stderr_T,
        replications=replications, n_capped=n_capped, fitted_slope=slope,
        bounds=bounds if bounds else None,
        T_values=all_T, capped_flags=all_flags,
    )


@dataclass
class PhiDecreaseStat:
    mean: float
    stderr: float
    ci_low: float
    ci_high: float
    n: int
    sigma_ref: float
    phi_max_observed: float


def phi_increments(trace: RunTrace, tau: float):
    """Per-iteration values of (Phi_{j+1} - Phi_j) * mu_j^2.

    Needs ground-truth f values on the records.  Closed forms: an
    unsuccessful iteration contributes exactly (1-tau)(1/lambda^2 - 1); a
    successful one tau*(f_{j+1}-f_j)*mu_j^2 + (1-tau)(mu_j^2/mu_{j+1}^2-1).
    """
    out = []
    for rec in trace.records:
        if rec.true_f_before is None or rec.true_f_after is None:
            raise ValueError("phi increments need ground-truth f on records")
        dphi = tau * (rec.true_f_after - rec.true_f_before) \
            + (1.0 - tau) * (1.0 / rec.mu_after ** 2
                             - 1.0 / rec.mu_before ** 2)
        out.append(dphi * rec.mu_before ** 2)
    return out


def phi_decrease_check(traces, constants: TheoryConstants) -> PhiDecreaseStat:
    """Pooled estimate of E[(Phi_{j+1} - Phi_j) mu_j^2] with a 95% CI.

    The analysis predicts the mean is at most -sigma; the substantive
    empirical check is that the interval sits below zero.  Also reports
    the largest observed Phi_j (the boundedness assumption is not
    constructive, so it is measured, not asserted).
    """
    if isinstance(traces, RunTrace):
        traces = [traces]
    values = []
    phi_max = -math.inf
    for trace in traces:
        values.extend(phi_increments(trace, constants.tau))
        for rec in trace.records:
            phi_max = max(phi_max, phi(rec.true_f_before, rec.mu_before,
                                       constants.tau))
    arr = np.asarray(values)
    mean = float(arr.mean())
    stderr = float(arr.std(ddof=1) / math.sqrt(arr.size)) \
        if arr.size > 1 else math.inf
    return PhiDecreaseStat(
        mean=mean, stderr=stderr,
        ci_low=mean - 1.96 * stderr, ci_high=mean + 1.96 * stderr,
        n=int(arr.size), sigma_ref=constants.sigma,
        phi_max_observed=phi_max,
    )


def renewal_times(mu_sequence, mu_eps: float):
    """Renewal indices A_0 = 0, A_i = min{k > A_{i-1} : mu_k <= mu_eps}."""
    A = [0]
    for k, mu in enumerate(mu_sequence):
        if k > A[-1] and mu <= mu_eps:
            A.append(k)
    return A


def renewal_count(A, j: int) -> int:
    """N(j) = max{i : A_i <= j} for renewal indices A."""
    return max(i for i, a in enumerate(A) if a <= j)


def lattice_exponent(mu: float, mu0: float, lam: float):
    """(k, exact) with mu ?= mu0 * lam**k; exact equality is achievable
    for lam = 2 since every update multiplies by a power of two."""
    k = round(math.log(mu / mu0) / math.log(lam))
    return k, mu == mu0 * lam ** k
