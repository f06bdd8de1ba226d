"""Strong-constraint 4DVAR on Lorenz-63 with ensemble-induced noisy models.

State z in R^3 evolves under the Lorenz-63 equations (RK4-discretized);
the composed observation operator stacks the per-time observations of the
trajectory launched from the initial state:

    H(z) = (H_p z(t_0); H_p z(t_1); ...)        for obs times t_i.

The estimation problem over the initial state is

    f(x)  = 0.5 ||x - z_b||^2_{Binf^{-1}} + 0.5 ||y - H(x)||^2_{R^{-1}}

with background z_b and exact background covariance Binf.  When only an
N-member ensemble is available, Binf is replaced by the empirical
covariance B_N, which induces noisy values, gradients, and Gauss-Newton
models: exactly the randomness the outer solver is built for.  The gamma-
regularized linearized subproblem coincides for gamma = 0 with the
ensemble Kalman mean update with gain

    K = B_N H'^T (H' B_N H'^T + R)^{-1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .core import RunTrace, SolverConfig, run
from .oracles import (EstimatePair, ModelEstimate, OracleOutput,
                      _estimate_flag, _model_flag)
from .problems import ResidualProblem


@dataclass(frozen=True)
class Lorenz63Params:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.01
    steps_per_window: int = 10


def lorenz_rk4_step(state, params: Lorenz63Params):
    """One RK4 step of the Lorenz-63 vector field."""
    if params.dt <= 0.0:
        raise ValueError("dt must be positive")
    state = np.asarray(state, float)
    out = kernels.lorenz_trajectory(state, params.sigma, params.rho,
                                    params.beta, params.dt, 1)[1]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite state after RK4 step")
    return out


def _stack_observations(traj, obs_times, H_point):
    return np.concatenate([H_point @ traj[t] for t in obs_times])


def _matrix_inv_sqrt(M, floor=1e-12):
    # Symmetric eigendecomposition with an eigenvalue floor; n is tiny here
    # so dense decompositions are cheap and robust.
    vals, vecs = np.linalg.eigh(np.asarray(M, float))
    vals = np.maximum(vals, floor)
    return (vecs / np.sqrt(vals)) @ vecs.T


def _matrix_inv(M, floor=1e-12):
    vals, vecs = np.linalg.eigh(np.asarray(M, float))
    vals = np.maximum(vals, floor)
    return (vecs / vals) @ vecs.T


class DAProblem(ResidualProblem):
    """The true (exact-covariance) assimilation problem.

    Doubles as a ResidualProblem through the stacked residual

        r(x) = [ R^{-1/2} (H(x) - y) ;  Binf^{-1/2} (x - z_b) ]

    so 0.5||r||^2 reproduces f exactly and generic oracles apply.
    """

    def __init__(self, z_b, B_inf, y, R, obs_times, H_point,
                 params: Lorenz63Params):
        self.z_b = np.asarray(z_b, float)
        self.B_inf = np.asarray(B_inf, float)
        self.y = np.asarray(y, float)
        self.R = np.asarray(R, float)
        self.obs_times = list(obs_times)
        self.H_point = np.asarray(H_point, float)
        self.params = params
        k = self.H_point.shape[0]
        if self.y.shape[0] != k * len(self.obs_times):
            raise ValueError("y length does not match the observation plan")
        if max(self.obs_times) > params.steps_per_window:
            raise ValueError("observation time beyond the window")
        self.R_inv = _matrix_inv(self.R)
        self.R_inv_sqrt = _matrix_inv_sqrt(self.R)
        self.B_inf_inv = _matrix_inv(self.B_inf)
        self.B_inf_inv_sqrt = _matrix_inv_sqrt(self.B_inf)
        self.n = 3
        self.m = self.y.shape[0] + 3
        self.x0 = self.z_b.copy()
        self.name = "lorenz63-4dvar"

    def forward(self, z0):
        return forward_H(z0, self)

    def residual(self, x):
        x = np.asarray(x, float)
        return np.concatenate([
            self.R_inv_sqrt @ (self.forward(x) - self.y),
            self.B_inf_inv_sqrt @ (x - self.z_b),
        ])

    def jac(self, x):
        return np.vstack([
            self.R_inv_sqrt @ jacobian_H(x, self),
            self.B_inf_inv_sqrt,
        ])


def forward_H(z0, problem) -> np.ndarray:
    """Propagate z0 through the window and stack the observed states."""
    p = problem.params
    traj = kernels.lorenz_trajectory(np.asarray(z0, float), p.sigma, p.rho,
                                     p.beta, p.dt, p.steps_per_window)
    if not np.all(np.isfinite(traj)):
        raise FloatingPointError("non-finite trajectory in forward_H")
    return _stack_observations(traj, problem.obs_times, problem.H_point)


def jacobian_H(z0, problem) -> np.ndarray:
    """Jacobian of forward_H by central differences on the discrete map.

    Column i uses step max(1e-6, 1e-6*|z0_i|); the perturbed states are
    propagated in one batch.
    """
    z0 = np.asarray(z0, float)
    p = problem.params
    h = np.maximum(1e-6, 1e-6 * np.abs(z0))
    states = np.empty((6, 3))
    for i in range(3):
        states[2 * i] = z0
        states[2 * i, i] += h[i]
        states[2 * i + 1] = z0
        states[2 * i + 1, i] -= h[i]
    trajs = kernels.lorenz_trajectory_batch(states, p.sigma, p.rho, p.beta,
                                            p.dt, p.steps_per_window)
    if not np.all(np.isfinite(trajs)):
        raise FloatingPointError("non-finite trajectory in jacobian_H")
    cols = []
    for i in range(3):
        plus = _stack_observations(trajs[2 * i], problem.obs_times,
                                   problem.H_point)
        minus = _stack_observations(trajs[2 * i + 1], problem.obs_times,
                                    problem.H_point)
        cols.append((plus - minus) / (2.0 * h[i]))
    return np.column_stack(cols)


@dataclass
class Ensemble:
    """Background ensemble with its empirical covariance.

    B_N equals anomalies @ anomalies.T exactly, where the anomalies are
    the member deviations from z_b scaled by 1/sqrt(N-1).
    """

    members: np.ndarray   # (N, n)
    z_b: np.ndarray
    anomalies: np.ndarray  # (n, N)
    B_N: np.ndarray

    @property
    def size(self):
        return self.members.shape[0]

    @staticmethod
    def from_members(members, z_b):
        members = np.asarray(members, float)
        z_b = np.asarray(z_b, float)
        anomalies = (members - z_b).T / math.sqrt(members.shape[0] - 1)
        return Ensemble(members=members, z_b=z_b, anomalies=anomalies,
                        B_N=anomalies @ anomalies.T)


def sample_ensemble(z_b, B_inf, N, rng) -> Ensemble:
    """Draw N members from N(z_b, B_inf) and recenter them on z_b.

    Needs N >= n+1: after recentering the anomalies have rank
    min(N-1, n), so the empirical covariance is almost surely
    nonsingular from N = n+1 on.
    """
    z_b = np.asarray(z_b, float)
    n = z_b.shape[0]
    if N < n + 1:
        raise ValueError(f"ensemble size {N} too small; need at least {n + 1}")
    L = np.linalg.cholesky(np.asarray(B_inf, float))
    members = z_b + rng.standard_normal((N, n)) @ L.T
    members = members + (z_b - members.mean(axis=0))
    return Ensemble.from_members(members, z_b)


@dataclass
class WishartReport:
    factor: float
    rel_error: float
    mean_inv: np.ndarray
    expected: np.ndarray
    replications: int
    skipped: int


def wishart_inverse_mean_check(B_inf, N, n, replications, rng,
                               chunk=20000) -> WishartReport:
    """Monte Carlo check of E[(B^N)^{-1}] = (N-1)/(N-1-n) * Binf^{-1}.

    Uses raw deviations from the known mean (no recentering), the
    construction whose inverse mean carries that factor.  Singular samples
    are skipped and counted (a probability-zero event for N > n+1).
    """
    B_inf = np.asarray(B_inf, float)
    if B_inf.shape != (n, n):
        raise ValueError("B_inf shape does not match n")
    if N <= n + 1:
        raise ValueError("need N > n+1 for a finite inverse mean")
    L = np.linalg.cholesky(B_inf)
    total = np.zeros((n, n))
    done = 0
    skipped = 0
    while done < replications:
        c = min(chunk, replications - done)
        draws = rng.standard_normal((c, N, n)) @ L.T
        B = np.einsum("rki,rkj->rij", draws, draws) / (N - 1)
        try:
            inv = np.linalg.inv(B)
            total += inv.sum(axis=0)
        except np.linalg.LinAlgError:
            for Bi in B:
                try:
                    total += np.linalg.inv(Bi)
                except np.linalg.LinAlgError:
                    skipped += 1
        done += c
    used = replications - skipped
    mean_inv = total / used
    factor = (N - 1) / (N - 1 - n)
    expected = factor * np.linalg.inv(B_inf)
    rel = np.linalg.norm(mean_inv - expected) / np.linalg.norm(expected)
    return WishartReport(factor=factor, rel_error=float(rel),
                         mean_inv=mean_inv, expected=expected,
                         replications=used, skipped=skipped)


def da_objective(x, problem, covariance) -> float:
    """0.5||x - z_b||^2_{C^{-1}} + 0.5||y - H(x)||^2_{R^{-1}} for a given
    background covariance C (B_inf for the truth, B_N for estimates)."""
    x = np.asarray(x, float)
    dx = x - problem.z_b
    try:
        back = float(dx @ np.linalg.solve(np.asarray(covariance, float), dx))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"singular background covariance: {exc}") from exc
    dy = problem.y - forward_H(x, problem)
    return 0.5 * back + 0.5 * float(dy @ (problem.R_inv @ dy))


class DAOracle:
    """Model and estimate oracle induced by an ensemble covariance.

    f0, f1 and the model center value are the B_N objective; the model
    Jacobian stacks R^{-1/2} H'(x) on top of B_N^{-1/2} so the model
    gradient is exactly B_N^{-1}(x - z_b) + H'^T R^{-1}(H(x) - y).
    Passing the exact covariance instead of an ensemble reproduces the
    exact oracle of the true problem.

    The ensemble is fixed for the run by default; with resample_size set,
    a fresh ensemble is drawn at every model evaluation (the estimates of
    the same iteration reuse it).
    """

    def __init__(self, problem: DAProblem, ensemble=None, covariance=None,
                 constants=None, resample_size: Optional[int] = None):
        if (ensemble is None) == (covariance is None):
            raise ValueError("pass exactly one of ensemble / covariance")
        self.problem = problem
        self.constants = constants
        self.resample_size = resample_size
        self._set_covariance(ensemble.B_N if ensemble is not None
                             else covariance)

    def _set_covariance(self, B):
        self.B = np.asarray(B, float)
        self.B_inv_sqrt = _matrix_inv_sqrt(self.B)

    def _objective(self, x):
        dx = self.B_inv_sqrt @ (np.asarray(x, float) - self.problem.z_b)
        dy = self.problem.R_inv_sqrt @ (forward_H(x, self.problem)
                                        - self.problem.y)
        return 0.5 * (float(dx @ dx) + float(dy @ dy))

    def model_at(self, problem, x, mu, rng):
        if self.resample_size is not None:
            fresh = sample_ensemble(self.problem.z_b, self.problem.B_inf,
                                    self.resample_size, rng)
            self._set_covariance(fresh.B_N)
        x = np.asarray(x, float)
        r_m = np.concatenate([
            self.problem.R_inv_sqrt @ (forward_H(x, self.problem)
                                       - self.problem.y),
            self.B_inv_sqrt @ (x - self.problem.z_b),
        ])
        J_m = np.vstack([
            self.problem.R_inv_sqrt @ jacobian_H(x, self.problem),
            self.B_inv_sqrt,
        ])
        g = J_m.T @ r_m
        m_at_center = 0.5 * float(r_m @ r_m)
        return ModelEstimate(
            g=g, J=J_m, m_at_center=m_at_center,
            accurate=_model_flag(self.problem, x, mu, g, m_at_center,
                                 self.constants),
        )

    def estimate_pair(self, problem, x, x1, mu, rng):
        f0 = self._objective(x)
        f1 = self._objective(x1)
        return EstimatePair(
            f0=f0, f1=f1,
            accurate=_estimate_flag(self.problem, x, x1, mu, f0, f1,
                                    self.constants),
        )


def da_oracle(x, problem, ensemble, x_trial=None, constants=None,
              mu=1.0) -> OracleOutput:
    """One combined draw of the ensemble-induced oracle at x."""
    oracle = DAOracle(problem, ensemble=ensemble, constants=constants)
    x = np.asarray(x, float)
    x1 = x if x_trial is None else np.asarray(x_trial, float)
    model = oracle.model_at(problem, x, mu, None)
    pair = oracle.estimate_pair(problem, x, x1, mu, None)
    return OracleOutput(
        f0=pair.f0, f1=pair.f1, g=model.g, J=model.J,
        m_at_center=model.m_at_center,
        was_accurate_model=model.accurate,
        was_accurate_estimates=pair.accurate,
    )


def _covariance_of(ensemble_or_matrix):
    if isinstance(ensemble_or_matrix, Ensemble):
        return ensemble_or_matrix.B_N
    return np.asarray(ensemble_or_matrix, float)


def enkf_gain(ensemble, J_H, R) -> np.ndarray:
    """Kalman gain K = B H^T (H B H^T + R)^{-1} by dense factorization."""
    B = _covariance_of(ensemble)
    J_H = np.asarray(J_H, float)
    R = np.asarray(R, float)
    innov = J_H @ B @ J_H.T + R
    BHt = B @ J_H.T
    try:
        return np.linalg.solve(innov, BHt.T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"singular innovation covariance (corrupt input): {exc}"
        ) from exc


def enkf_mean_update(x, ensemble, problem, J_H=None) -> np.ndarray:
    """Mean update s = z_b - x + K (y - H(x) - H'(z_b - x)).

    Equals the gamma = 0 regularized subproblem solution.
    """
    x = np.asarray(x, float)
    if J_H is None:
        J_H = jacobian_H(x, problem)
    K = enkf_gain(ensemble, J_H, problem.R)
    d = problem.y - forward_H(x, problem)
    back = problem.z_b - x
    return back + K @ (d - J_H @ back)


def enkf_member_updates(x, ensemble, problem, rng=None) -> np.ndarray:
    """Per-member analysis increments (exposed for completeness; the solver
    path only uses the mean / regularized subproblem).

    With an rng the observation perturbations are drawn from N(0, R) and
    centered, so their mean is zero as assumed everywhere else.
    """
    x = np.asarray(x, float)
    J_H = jacobian_H(x, problem)
    K = enkf_gain(ensemble, J_H, problem.R)
    d = problem.y - forward_H(x, problem)
    if rng is not None:
        v = rng.standard_normal((ensemble.size, problem.y.shape[0]))
        v = v @ np.linalg.cholesky(problem.R).T
        v = v - v.mean(axis=0)
    else:
        v = np.zeros((ensemble.size, problem.y.shape[0]))
    out = np.empty_like(ensemble.members)
    for k, member in enumerate(ensemble.members):
        out[k] = member - x + K @ (d - J_H @ (member - x) - v[k])
    return out


def solve_da_subproblem(x, ensemble, problem, gamma) -> np.ndarray:
    """Exact minimizer of the regularized linearized subproblem via the
    normal equations (B^{-1} + H'^T R^{-1} H' + gamma I) s = -g."""
    if gamma < 0.0:
        raise ValueError("gamma must be nonnegative")
    x = np.asarray(x, float)
    B = _covariance_of(ensemble)
    B_inv = np.linalg.inv(B)
    J_H = jacobian_H(x, problem)
    HtRinv = J_H.T @ problem.R_inv
    A = B_inv + HtRinv @ J_H + gamma * np.eye(3)
    g = B_inv @ (x - problem.z_b) + HtRinv @ (forward_H(x, problem)
                                              - problem.y)
    return np.linalg.solve(A, -g)


@dataclass
class ChebyshevBounds:
    p_lower: float
    q_lower: float
    p_vacuous: bool
    q_vacuous: bool
    theta: float
    theta_tilde: float
    upsilon: float
    upsilon_tilde: float
    var_center: float
    var_trial: float
    lambda_max: float


def chebyshev_accuracy_bounds(x, s, iteration, problem, N, eps_f, kappa_ef,
                              kappa_eg, mu0, lam, mu_max, M=200,
                              rng=None) -> ChebyshevBounds:
    """Lower bounds on the per-iteration accuracy probabilities p*_j, q*_j.

    Variance terms and the gradient-noise covariance are estimated from M
    freshly resampled size-N ensembles at fixed x; the mu cap is
    min(lam**iteration * mu0, mu_max).  Non-positive denominators are
    reported as vacuous bounds (bound set to -inf).
    """
    if M < 2:
        raise ValueError("need at least 2 resampled ensembles")
    if N <= problem.n + 1:
        raise ValueError("need N > n+1 for the bias factor")
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.asarray(x, float)
    x1 = x + np.asarray(s, float)
    n = problem.n
    dx0 = x - problem.z_b
    dx1 = x1 - problem.z_b

    v0 = np.empty(M)
    v1 = np.empty(M)
    w = np.empty((M, n))
    for i in range(M):
        B = sample_ensemble(problem.z_b, problem.B_inf, N, rng).B_N
        B_inv = np.linalg.inv(B)
        v0[i] = dx0 @ (B_inv @ dx0)
        v1[i] = dx1 @ (B_inv @ dx1)
        w[i] = B_inv @ dx0
    var0 = float(v0.var(ddof=1))
    var1 = float(v1.var(ddof=1))
    lam_max = float(np.linalg.eigvalsh(np.cov(w.T)).max())

    cap = min(lam ** iteration * mu0, mu_max)
    bias = n / (N - 1 - n)
    back0 = float(dx0 @ (problem.B_inf_inv @ dx0))
    back1 = float(dx1 @ (problem.B_inf_inv @ dx1))
    theta = 2.0 * eps_f / cap ** 2 - bias * back0
    theta_t = 2.0 * eps_f / cap ** 2 - bias * back1
    upsilon = 2.0 * kappa_ef / cap ** 2 - bias * back0
    upsilon_t = kappa_eg / cap - bias * float(
        np.linalg.norm(problem.B_inf_inv @ dx0))

    q_vac = theta <= 0.0 or theta_t <= 0.0
    p_vac = upsilon <= 0.0 or upsilon_t <= 0.0
    q_lower = -math.inf if q_vac else 1.0 - var0 / theta ** 2 \
        - var1 / theta_t ** 2
    p_lower = -math.inf if p_vac else 1.0 - var0 / upsilon ** 2 \
        - n * lam_max / upsilon_t ** 2
    return ChebyshevBounds(
        p_lower=p_lower, q_lower=q_lower, p_vacuous=p_vac, q_vacuous=q_vac,
        theta=theta, theta_tilde=theta_t, upsilon=upsilon,
        upsilon_tilde=upsilon_t, var_center=var0, var_trial=var1,
        lambda_max=lam_max,
    )


@dataclass
class TwinConfig:
    """Twin-experiment defaults: 10-step window, dt = 0.01, all three
    coordinates observed at every step, R = 0.1 I, sigma_b = 1."""

    lorenz: Lorenz63Params = field(default_factory=Lorenz63Params)
    sigma_b: float = 1.0
    r_scale: float = 0.1
    obs_every: int = 1
    h_point: str = "identity"
    ensemble_sizes: tuple = (4, 100, 1000, None)  # None -> exact B_inf
    y_mode: str = "noise_only"
    resample_each_iteration: bool = False
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(
        eta1=0.1, eta2=1.0, mu_min=1e-16, mu0=1.0, lam=2.0, mu_max=1e16,
        max_iters=400, record_truth=True))


def make_da_problem(config: TwinConfig, rng) -> DAProblem:
    """Twin-experiment instance: z_b ~ N(0, B_inf) and, by default, pure
    noise observations y ~ N(0, R); y_mode='truth_plus_noise' instead
    observes a perturbed truth trajectory."""
    p = config.lorenz
    n = 3
    B_inf = config.sigma_b ** 2 * np.eye(n)
    z_b = config.sigma_b * rng.standard_normal(n)
    obs_times = list(range(0, p.steps_per_window + 1, config.obs_every))
    if config.h_point == "identity":
        H_point = np.eye(n)
    elif config.h_point == "first":
        H_point = np.array([[1.0, 0.0, 0.0]])
    else:
        raise ValueError(f"unknown h_point {config.h_point!r}")
    m_obs = H_point.shape[0] * len(obs_times)
    R = config.r_scale * np.eye(m_obs)
    noise = math.sqrt(config.r_scale) * rng.standard_normal(m_obs)
    problem = DAProblem(z_b=z_b, B_inf=B_inf, y=np.zeros(m_obs), R=R,
                        obs_times=obs_times, H_point=H_point, params=p)
    if config.y_mode == "noise_only":
        problem.y = noise
    elif config.y_mode == "truth_plus_noise":
        z_true = z_b + config.sigma_b * rng.standard_normal(n)
        problem.y = forward_H(z_true, problem) + noise
    else:
        raise ValueError(f"unknown y_mode {config.y_mode!r}")
    return problem


@dataclass
class TwinCell:
    N: Optional[int]
    seed: int
    trace: RunTrace
    final_x: np.ndarray
    final_f0: float
    final_true_f: float
    final_grad_norm: float


@dataclass
class TwinReport:
    cells: dict           # (N or None, seed) -> TwinCell
    distances: dict       # (N, seed) -> ||x_N - x_inf|| for finite N
    config: TwinConfig
    seeds: list


def run_twin_cell(config: TwinConfig, master_seed: int, seed: int,
                  N: Optional[int]) -> TwinCell:
    """One (N, seed) cell; the problem depends on the seed only, so all N
    share the same instance and differ in the ensemble draw."""
    problem = make_da_problem(
        config, np.random.default_rng([master_seed, seed, 0]))
    if N is None:
        oracle = DAOracle(problem, covariance=problem.B_inf)
    else:
        ens_rng = np.random.default_rng([master_seed, seed, 1, N])
        if config.resample_each_iteration:
            oracle = DAOracle(problem,
                              ensemble=sample_ensemble(problem.z_b,
                                                       problem.B_inf, N,
                                                       ens_rng),
                              resample_size=N)
        else:
            oracle = DAOracle(problem,
                              ensemble=sample_ensemble(problem.z_b,
                                                       problem.B_inf, N,
                                                       ens_rng))
    trace = run(problem, oracle, oracle, cfg=config.solver,
                seed=np.random.SeedSequence([master_seed, seed, 2,
                                             0 if N is None else N]))
    f0_final = oracle._objective(trace.x_final)
    return TwinCell(N=N, seed=seed, trace=trace, final_x=trace.x_final,
                    final_f0=f0_final, final_true_f=trace.final_true_f,
                    final_grad_norm=trace.final_grad_norm)


def twin_experiment(config: TwinConfig, seeds, master_seed: int = 0,
                    workers: int = 1) -> TwinReport:
    """Run the full (N, seed) grid and collect distances to the exact-
    covariance final iterate per seed."""
    tasks = [(seed, N) for seed in seeds for N in config.ensemble_sizes]
    cells = {}
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                (N, seed): pool.submit(run_twin_cell, config, master_seed,
                                       seed, N)
                for seed, N in tasks
            }
            for key, fut in futures.items():
                cells[key] = fut.result()
    else:
        for seed, N in tasks:
            cells[(N, seed)] = run_twin_cell(config, master_seed, seed, N)

    distances = {}
    if None in config.ensemble_sizes:
        for seed in seeds:
            x_inf = cells[(None, seed)].final_x
            for N in config.ensemble_sizes:
                if N is not None:
                    distances[(N, seed)] = float(
                        np.linalg.norm(cells[(N, seed)].final_x - x_inf))
    return TwinReport(cells=cells, distances=distances, config=config,
                      seeds=list(seeds))
