"""Model minimization: truncated CG plus a dense solver used as test oracle.

The model Hessian is J^T J + gamma I with gamma > 0, so the system is
strictly convex and CG from a zero start carries three guarantees that the
outer-loop theory consumes:

* fraction of Cauchy decrease with constant 1:
      m(x) - m(x+s) >= 0.5 * ||g||^2 / (||J||_2^2 + gamma)
* step size bound:   ||s|| <= 2 ||g|| / gamma = 2 / mu
* inner-product bound:
      |s^T (gamma s + g)| <= (4 ||J||_2^2 + 2 theta_in) / mu^2

The first holds because one CG iteration reproduces the Cauchy point and
later iterations only improve the model; the second because CG iterate
norms grow monotonically toward ||A^{-1} g|| <= ||g||/gamma; the third
because the CG residual is orthogonal to the iterate, leaving
s^T(gamma s + g) = -s^T J^T J s.  theta_in = 2 is the declared contract
constant, enforced empirically by the sweep suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ModelSnapshot, model_decrease


class SubproblemNumericalError(RuntimeError):
    """Non-SPD system detected; impossible for gamma > 0, so input is corrupt."""


@dataclass(frozen=True)
class StepContract:
    """Constants certified by this module's solver."""

    theta_fcd: float = 1.0
    theta_in: float = 2.0


DEFAULT_CONTRACT = StepContract()


def spectral_norm(J, iters: int = 50, tol: float = 1e-10) -> float:
    """Largest singular value of J by power iteration on J^T J.

    Used only by contract checks; the solver itself never needs it.
    """
    J = np.asarray(J, float)
    n = J.shape[1]
    v = np.ones(n) / np.sqrt(n)
    lam = 0.0
    for _ in range(iters):
        w = J.T @ (J @ v)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        w = J.T @ (J @ v)
        lam = float(v @ w)
        # Backward-error stop: ||(J^T J) v - lam v|| small relative to lam.
        if np.linalg.norm(w - lam * v) <= tol * max(lam, 1e-300):
            break
    return float(np.sqrt(max(lam, 0.0)))


def solve_cg(snap: ModelSnapshot, tol: float = 1e-10,
             max_iters: int | None = None) -> np.ndarray:
    """Truncated CG from a zero start on (J^T J + gamma I) s = -g.

    Stops when the residual drops below tol*||g|| or after max_iters
    iterations (defaulting to the problem dimension).  Model decrease is
    monotone across iterations, so any truncation satisfies the step
    contracts.
    """
    g = snap.g
    gamma = snap.gamma
    if gamma <= 0.0:
        raise ValueError("solve_cg requires gamma > 0")
    g_norm = np.linalg.norm(g)
    if g_norm == 0.0:
        raise ValueError("solve_cg requires a nonzero model gradient")
    n = g.shape[0]
    # At least one iteration: the Cauchy-decrease contract needs it.
    max_iters = n if max_iters is None else max(1, max_iters)

    s = np.zeros(n)
    r = -g.copy()            # residual of A s = -g at s = 0
    p = r.copy()
    rr = float(r @ r)
    threshold = (tol * g_norm) ** 2
    for _ in range(max_iters):
        Jp = snap.J @ p
        pAp = float(Jp @ Jp) + gamma * float(p @ p)
        if pAp <= 0.0:
            raise SubproblemNumericalError(
                "non-SPD curvature encountered with gamma > 0")
        alpha = rr / pAp
        s = s + alpha * p
        r = r - alpha * (snap.J.T @ Jp + gamma * p)
        rr_new = float(r @ r)
        if rr_new <= threshold:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return s


def solve_exact(snap: ModelSnapshot) -> np.ndarray:
    """Dense solve of (J^T J + gamma I) s = -g with one refinement step."""
    g = snap.g
    if g.shape[0] != snap.J.shape[1]:
        raise ValueError("gradient / Jacobian dimension mismatch")
    if snap.gamma <= 0.0:
        raise ValueError("solve_exact requires gamma > 0")
    A = snap.J.T @ snap.J + snap.gamma * np.eye(g.shape[0])
    s = np.linalg.solve(A, -g)
    s = s - np.linalg.solve(A, A @ s + g)
    return s


def cauchy_point(snap: ModelSnapshot) -> np.ndarray:
    """Exact minimizer of the model along -g: s = -t g with
    t = ||g||^2 / (g^T (J^T J + gamma I) g)."""
    g = snap.g
    gg = float(g @ g)
    if gg == 0.0:
        raise ValueError("Cauchy point undefined for g = 0")
    Jg = snap.J @ g
    curvature = float(Jg @ Jg) + snap.gamma * gg
    return -(gg / curvature) * g


def contract_report(snap: ModelSnapshot, s,
                    contract: StepContract = DEFAULT_CONTRACT) -> dict:
    """Measure the three step contracts for one (snapshot, step) pair.

    Returns lhs/rhs pairs; a contract holds when lhs <= rhs (the sweep
    suite allows 1e-12 slack on the step-size bound).
    """
    s = np.asarray(s, float)
    g = snap.g
    mu = snap.mu
    J_norm = spectral_norm(snap.J)
    dec = model_decrease(snap, s)
    g_norm = float(np.linalg.norm(g))
    return {
        "decrease_lhs": dec,
        "decrease_rhs": 0.5 * contract.theta_fcd * g_norm ** 2
        / (J_norm ** 2 + snap.gamma),
        "step_lhs": float(np.linalg.norm(s)) * mu,
        "step_rhs": 2.0,
        "product_lhs": abs(float(s @ (snap.gamma * s + g))) * mu ** 2,
        "product_rhs": 4.0 * J_norm ** 2 + 2.0 * contract.theta_in,
        "J_norm": J_norm,
    }


def contract_holds(report: dict, step_slack: float = 1e-12) -> bool:
    return (report["decrease_lhs"] >= report["decrease_rhs"]
            and report["step_lhs"] <= report["step_rhs"] + step_slack
            and report["product_lhs"] <= report["product_rhs"])
