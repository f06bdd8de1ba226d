"""Levenberg-Marquardt outer loop driven by noisy estimates and random models.

Notation
--------
x_j ....... iterate
mu_j ...... regularization scale (acts like an inverse trust-region radius)
g, J ...... model gradient and model Jacobian at x_j
gamma_j ... mu_j * ||g||, the ridge added to J^T J
m_j ....... quadratic model  m(x_j) + g^T s + 0.5 s^T (J^T J + gamma I) s
f0, f1 .... estimates of f(x_j) and f(x_j + s_j)
rho_j ..... (f0 - f1) / (m_j(x_j) - m_j(x_j + s_j))

One iteration
-------------
1.  Draw the model (g, J, m(x_j)) from the model oracle.
2.  Set gamma = mu * ||g|| and minimize the model approximately (truncated
    CG from a zero start by default).
3.  Draw the estimate pair (f0, f1) from the estimate oracle.
4.  Accept the step iff rho >= eta1 AND ||g|| >= eta2 / mu; on acceptance
    mu <- max(mu / lambda, mu_min), otherwise mu <- lambda * mu.

The loop stops when mu exceeds mu_max, when the iteration cap is hit, or
(optionally) when the true gradient norm falls below grad_tol — the latter
is what the stopping-time experiments use.

A run is bitwise deterministic for a fixed seed: all randomness flows
through one numpy Generator consumed in a fixed order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)


class NonFiniteModelError(RuntimeError):
    """Oracle produced non-finite model or estimate values."""


class DegenerateSubproblemError(RuntimeError):
    """Model decrease is not positive; signals a zero model gradient."""


@dataclass
class SolverConfig:
    """Constants of the outer loop plus subproblem controls.

    Requires 0 < eta1 < 1, eta2 > 0, lambda > 1 and
    0 < mu_min <= mu0 < mu_max.
    """

    eta1: float = 0.1
    eta2: float = 1.0
    mu_min: float = 1e-16
    mu0: float = 1.0
    lam: float = 2.0
    mu_max: float = 1e16
    max_iters: int = 500
    cg_tol: float = 1e-10
    cg_max_iters: Optional[int] = None  # None -> problem dimension
    grad_tol: Optional[float] = None    # optional true-gradient stop
    record_truth: bool = True
    record_grad: bool = False

    def __post_init__(self):
        if not (0.0 < self.eta1 < 1.0):
            raise ValueError("eta1 must lie in (0, 1)")
        if self.eta2 <= 0.0:
            raise ValueError("eta2 must be positive")
        if self.lam <= 1.0:
            raise ValueError("lambda must exceed 1")
        if not (0.0 < self.mu_min <= self.mu0 < self.mu_max):
            raise ValueError("need 0 < mu_min <= mu0 < mu_max")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")


@dataclass
class SolverState:
    x: np.ndarray
    mu: float
    iter: int = 0


@dataclass
class ModelSnapshot:
    """One iteration's random model, frozen for the subproblem solver."""

    center: np.ndarray
    m_at_center: float
    g: np.ndarray
    J: np.ndarray
    gamma: float
    mu: float


@dataclass
class IterationRecord:
    iter: int
    rho: float
    model_decrease: float
    step_norm: float
    success: bool
    mu_before: float
    mu_after: float
    g_norm: float
    gamma: float
    f0: float = math.nan
    f1: float = math.nan
    true_f_before: Optional[float] = None
    true_f_after: Optional[float] = None
    true_grad_norm: Optional[float] = None
    event_U: Optional[bool] = None
    event_V: Optional[bool] = None


@dataclass
class RunTrace:
    """Full history of one run plus the final iterate."""

    records: list[IterationRecord] = field(default_factory=list)
    x_final: Optional[np.ndarray] = None
    mu_final: float = math.nan
    n_iters: int = 0
    termination: str = ""
    seed: Optional[int] = None
    final_true_f: Optional[float] = None
    final_grad_norm: Optional[float] = None
    # declared step-contract constants (theta_fcd, theta_in) of the subsolver
    step_contract: Optional[tuple] = None

    def successful(self):
        return [r for r in self.records if r.success]


def build_model(oracle, x, mu, problem=None, rng=None) -> ModelSnapshot:
    """Draw a model from the oracle and freeze it as a ModelSnapshot.

    Returns a snapshot with gamma = mu * ||g|| exactly; raises
    NonFiniteModelError if the oracle produced non-finite values.
    """
    est = oracle.model_at(problem, np.asarray(x, float), float(mu), rng)
    g = np.asarray(est.g, float)
    J = np.asarray(est.J, float)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(J))
            and math.isfinite(est.m_at_center)):
        raise NonFiniteModelError("model oracle returned non-finite values")
    gamma = float(mu) * float(np.linalg.norm(g))
    return ModelSnapshot(center=np.asarray(x, float),
                         m_at_center=float(est.m_at_center),
                         g=g, J=J, gamma=gamma, mu=float(mu))


def model_value(snap: ModelSnapshot, s) -> float:
    """Evaluate m(x + s) = m(x) + g^T s + 0.5 s^T (J^T J + gamma I) s."""
    s = np.asarray(s, float)
    if s.shape != snap.g.shape:
        raise ValueError(f"step has shape {s.shape}, expected {snap.g.shape}")
    Js = snap.J @ s
    return snap.m_at_center + float(snap.g @ s) \
        + 0.5 * (float(Js @ Js) + snap.gamma * float(s @ s))


def model_decrease(snap: ModelSnapshot, s) -> float:
    """m(x) - m(x+s), computed without the (cancelling) center value."""
    s = np.asarray(s, float)
    Js = snap.J @ s
    return -(float(snap.g @ s) + 0.5 * (float(Js @ Js)
                                        + snap.gamma * float(s @ s)))


def compute_rho(f0: float, f1: float, decrease: float) -> float:
    """Ratio of estimated decrease to model decrease.

    The denominator must be positive: the subproblem contract guarantees
    that whenever g != 0.
    """
    if decrease <= 0.0:
        raise DegenerateSubproblemError(
            f"model decrease {decrease} is not positive (zero model gradient?)"
        )
    return (f0 - f1) / decrease


def apply_update(state: SolverState, snap: ModelSnapshot, s, rho: float,
                 cfg: SolverConfig):
    """Acceptance test and mu update; returns (new_state, record).

    Success requires both rho >= eta1 and ||g|| >= eta2 / mu; then
    mu <- max(mu/lambda, mu_min), otherwise mu <- lambda*mu.
    """
    g_norm = float(np.linalg.norm(snap.g))
    mu = state.mu
    success = bool(rho >= cfg.eta1) and bool(g_norm >= cfg.eta2 / mu)
    if success:
        new_x = state.x + np.asarray(s, float)
        new_mu = max(mu / cfg.lam, cfg.mu_min)
    else:
        new_x = state.x
        new_mu = cfg.lam * mu
    dec = model_decrease(snap, s)
    record = IterationRecord(
        iter=state.iter, rho=float(rho), model_decrease=float(dec),
        step_norm=float(np.linalg.norm(s)), success=success,
        mu_before=mu, mu_after=new_mu, g_norm=g_norm, gamma=snap.gamma,
    )
    return SolverState(x=new_x, mu=new_mu, iter=state.iter + 1), record


def _skip_record(state, g_norm, cfg, gamma=0.0):
    """Record for an iteration declared unsuccessful without a subsolve."""
    return IterationRecord(
        iter=state.iter, rho=math.nan, model_decrease=0.0, step_norm=0.0,
        success=False, mu_before=state.mu, mu_after=cfg.lam * state.mu,
        g_norm=g_norm, gamma=gamma,
    )


def run(problem, model_oracle, estimate_oracle, subsolver=None,
        cfg: Optional[SolverConfig] = None, seed: int = 0) -> RunTrace:
    """Run the solver until mu > mu_max, the iteration cap, or grad_tol.

    Parameters
    ----------
    problem : ResidualProblem
        Also supplies the starting point problem.x0.
    model_oracle, estimate_oracle :
        Objects with model_at(problem, x, mu, rng) and
        estimate_pair(problem, x, x_trial, mu, rng); one object may serve
        as both.
    subsolver : callable, optional
        (snapshot, tol, max_iters) -> step; truncated CG by default.
    """
    if cfg is None:
        cfg = SolverConfig()
    if subsolver is None:
        from .subproblem import solve_cg
        subsolver = solve_cg

    from .subproblem import DEFAULT_CONTRACT
    rng = np.random.default_rng(seed)
    state = SolverState(x=np.asarray(problem.x0, float), mu=float(cfg.mu0))
    cg_iters = cfg.cg_max_iters if cfg.cg_max_iters is not None else problem.n
    trace = RunTrace(seed=seed,
                     step_contract=(DEFAULT_CONTRACT.theta_fcd,
                                    DEFAULT_CONTRACT.theta_in))
    termination = "max_iters"

    want_truth = cfg.record_truth
    want_grad = cfg.record_grad or cfg.grad_tol is not None

    for _ in range(cfg.max_iters):
        true_f = problem.f(state.x) if want_truth else None
        true_gn = float(np.linalg.norm(problem.grad(state.x))) \
            if want_grad else None
        if cfg.grad_tol is not None and true_gn <= cfg.grad_tol:
            termination = "grad_tol"
            break
        if state.mu > cfg.mu_max:
            termination = "mu_max"
            break

        try:
            model = model_oracle.model_at(problem, state.x, state.mu, rng)
        except Exception as exc:
            raise type(exc)(f"model oracle failed at iteration "
                            f"{state.iter}: {exc}") from exc
        g = np.asarray(model.g, float)
        if not (np.all(np.isfinite(g)) and math.isfinite(model.m_at_center)
                and np.all(np.isfinite(model.J))):
            raise NonFiniteModelError(
                f"non-finite model at iteration {state.iter}")
        g_norm = float(np.linalg.norm(g))

        if g_norm == 0.0:
            # Zero model gradient: the eta2 test already fails, so declare
            # the iteration unsuccessful without touching the subsolver.
            record = _skip_record(state, g_norm, cfg)
            state = SolverState(state.x, cfg.lam * state.mu, state.iter + 1)
        else:
            snap = ModelSnapshot(
                center=state.x, m_at_center=float(model.m_at_center),
                g=g, J=np.asarray(model.J, float),
                gamma=state.mu * g_norm, mu=state.mu,
            )
            s = subsolver(snap, cfg.cg_tol, cg_iters)
            dec = model_decrease(snap, s)
            est = estimate_oracle.estimate_pair(
                problem, state.x, state.x + s, state.mu, rng)
            if dec <= 0.0:
                logger.warning(
                    "nonpositive model decrease %.3e with ||g||=%.3e at "
                    "iteration %d; treating as unsuccessful",
                    dec, g_norm, state.iter)
                record = _skip_record(state, g_norm, cfg, gamma=snap.gamma)
                state = SolverState(state.x, cfg.lam * state.mu,
                                    state.iter + 1)
            else:
                rho = compute_rho(est.f0, est.f1, dec)
                state, record = apply_update(state, snap, s, rho, cfg)
            record.f0 = float(est.f0)
            record.f1 = float(est.f1)
            record.event_V = est.accurate
            record.event_U = model.accurate

        if want_truth:
            record.true_f_before = true_f
            record.true_f_after = true_f if not record.success \
                else problem.f(state.x)
        if want_grad:
            record.true_grad_norm = true_gn
        trace.records.append(record)
    else:
        # Cap reached; evaluate the stopping tests once more so callers can
        # distinguish "capped" from "converged on the last iteration".
        if cfg.grad_tol is not None and \
                float(np.linalg.norm(problem.grad(state.x))) <= cfg.grad_tol:
            termination = "grad_tol"
        elif state.mu > cfg.mu_max:
            termination = "mu_max"

    trace.x_final = state.x
    trace.mu_final = state.mu
    trace.n_iters = state.iter
    trace.termination = termination
    if want_truth:
        trace.final_true_f = problem.f(state.x)
    if want_grad or want_truth:
        trace.final_grad_norm = float(np.linalg.norm(problem.grad(state.x)))
    return trace
