"""Estimate and model oracles, from exact to probabilistically accurate.

An oracle serves two calls per iteration:

* model_at(problem, x, mu, rng)          -> g, J, m(x) and an accuracy flag
* estimate_pair(problem, x, x1, mu, rng) -> f0, f1 and an accuracy flag

The flags are ground truth: they are recomputed from the actual draws
against the stored true values, never assumed.  The model flag reports
whether both ||g - grad f(x)|| <= kappa_eg/mu and |m(x) - f(x)| <=
kappa_ef/mu^2 held; the estimate flag whether both |f0 - f(x)| and
|f1 - f(x1)| stayed below eps_f/mu^2.

The Gaussian oracle calibrates each marginal event to sqrt(p) (resp.
sqrt(q)) so the independent joint event has probability exactly p (resp.
q).  The Bernoulli oracle realizes "arbitrarily bad with small
probability": with probability 1-p the gradient is replaced by a random
vector of a prescribed norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtri


@dataclass(frozen=True)
class AccuracyConstants:
    """Accuracy scales and probabilities shared by the noisy oracles."""

    kappa_ef: float = 0.01
    kappa_eg: float = 0.5
    eps_f: float = 0.01
    p: float = 0.9
    q: float = 0.9

    def __post_init__(self):
        if min(self.kappa_ef, self.kappa_eg, self.eps_f) <= 0.0:
            raise ValueError("accuracy constants must be positive")
        if not (0.0 < self.p <= 1.0 and 0.0 < self.q <= 1.0):
            raise ValueError("p and q must lie in (0, 1]")


@dataclass
class ModelEstimate:
    g: np.ndarray
    J: np.ndarray
    m_at_center: float
    accurate: Optional[bool] = None


@dataclass
class EstimatePair:
    f0: float
    f1: float
    accurate: Optional[bool] = None


@dataclass
class OracleOutput:
    """One combined draw: estimates, model, and their event flags."""

    f0: float
    f1: float
    g: np.ndarray
    J: np.ndarray
    m_at_center: float
    was_accurate_model: Optional[bool]
    was_accurate_estimates: Optional[bool]


def _model_flag(problem, x, mu, g, m_at_center, constants):
    if constants is None:
        return None
    grad = problem.grad(x)
    ok_g = np.linalg.norm(g - grad) <= constants.kappa_eg / mu
    ok_m = abs(m_at_center - problem.f(x)) <= constants.kappa_ef / mu ** 2
    return bool(ok_g and ok_m)


def _estimate_flag(problem, x, x1, mu, f0, f1, constants):
    if constants is None:
        return None
    bound = constants.eps_f / mu ** 2
    return bool(abs(f0 - problem.f(x)) <= bound
                and abs(f1 - problem.f(x1)) <= bound)


class ExactOracle:
    """Deterministic baseline: true gradient, Jacobian, and values."""

    def model_at(self, problem, x, mu, rng):
        r = problem.residual(x)
        if not np.all(np.isfinite(r)):
            raise ValueError("non-finite residual")
        J = problem.jac(x)
        return ModelEstimate(g=J.T @ r, J=J, m_at_center=0.5 * float(r @ r),
                             accurate=True)

    def estimate_pair(self, problem, x, x1, mu, rng):
        return EstimatePair(f0=problem.f(x), f1=problem.f(x1), accurate=True)


def _half_width_quantile(prob):
    # z such that a centered Gaussian lands within [-z, z]*sigma w.p. prob.
    return float(ndtri((1.0 + prob) / 2.0))


class GaussianOracle:
    """Gaussian perturbations scaled by 1/mu (gradient) and 1/mu^2 (values).

    Noise magnitudes are chosen so each accuracy event has probability
    exactly sqrt(p) or sqrt(q); requires p, q < 1 (the calibration needs a
    finite Gaussian quantile).  The model Jacobian is perturbed entrywise
    with standard deviation jac_sigma/mu and clipped in spectral norm at
    kappa_jm when jac_sigma > 0.
    """

    def __init__(self, constants: AccuracyConstants, jac_sigma: float = 0.0,
                 kappa_jm: Optional[float] = None):
        if constants.p >= 1.0 or constants.q >= 1.0:
            raise ValueError(
                "GaussianOracle needs p, q < 1 (finite quantile)")
        self.constants = constants
        self.z_p = _half_width_quantile(math.sqrt(constants.p))
        self.z_q = _half_width_quantile(math.sqrt(constants.q))
        if jac_sigma > 0.0 and kappa_jm is None:
            raise ValueError("kappa_jm is required when jac_sigma > 0")
        self.jac_sigma = float(jac_sigma)
        self.kappa_jm = kappa_jm

    def sigma_f(self, mu):
        return (self.constants.eps_f / mu ** 2) / self.z_q

    def sigma_g(self, mu):
        return (self.constants.kappa_eg / mu) / self.z_p

    def sigma_m(self, mu):
        return (self.constants.kappa_ef / mu ** 2) / self.z_p

    def model_at(self, problem, x, mu, rng):
        grad = problem.grad(x)
        J = problem.jac(x)
        direction = rng.standard_normal(x.shape[0])
        norm = np.linalg.norm(direction)
        direction = direction / norm if norm > 0 else direction
        radius = abs(self.sigma_g(mu) * rng.standard_normal())
        g = grad + radius * direction
        m_at_center = problem.f(x) + self.sigma_m(mu) * rng.standard_normal()
        if self.jac_sigma > 0.0:
            J = J + (self.jac_sigma / mu) * rng.standard_normal(J.shape)
            J_norm = np.linalg.norm(J, 2)
            if J_norm > self.kappa_jm:
                J = J * (self.kappa_jm / J_norm)
        return ModelEstimate(
            g=g, J=J, m_at_center=float(m_at_center),
            accurate=_model_flag(problem, x, mu, g, m_at_center,
                                 self.constants),
        )

    def estimate_pair(self, problem, x, x1, mu, rng):
        sigma = self.sigma_f(mu)
        f0 = problem.f(x) + sigma * rng.standard_normal()
        f1 = problem.f(x1) + sigma * rng.standard_normal()
        return EstimatePair(
            f0=float(f0), f1=float(f1),
            accurate=_estimate_flag(problem, x, x1, mu, f0, f1,
                                    self.constants),
        )


class BernoulliOracle:
    """Exact outputs with probability p (model) / q (estimates), arbitrarily
    corrupted otherwise.

    A corrupted gradient is a uniformly-directed vector of norm
    `corruption`; corrupted estimates are offset by +-corruption.  Model
    and estimate coins are independent, and the Jacobian is always exact.
    """

    def __init__(self, constants: AccuracyConstants, corruption: float = 1e3):
        if corruption < 0.0:
            raise ValueError("corruption must be nonnegative")
        self.constants = constants
        self.corruption = float(corruption)

    def model_at(self, problem, x, mu, rng):
        r = problem.residual(x)
        J = problem.jac(x)
        g = J.T @ r
        m_at_center = 0.5 * float(r @ r)
        if rng.random() >= self.constants.p:
            direction = rng.standard_normal(x.shape[0])
            norm = np.linalg.norm(direction)
            direction = direction / norm if norm > 0 else direction
            g = self.corruption * direction
        return ModelEstimate(
            g=g, J=J, m_at_center=m_at_center,
            accurate=_model_flag(problem, x, mu, g, m_at_center,
                                 self.constants),
        )

    def estimate_pair(self, problem, x, x1, mu, rng):
        f0 = problem.f(x)
        f1 = problem.f(x1)
        if rng.random() >= self.constants.q:
            f0 = f0 + self.corruption * (1.0 if rng.random() < 0.5 else -1.0)
            f1 = f1 + self.corruption * (1.0 if rng.random() < 0.5 else -1.0)
        return EstimatePair(
            f0=f0, f1=f1,
            accurate=_estimate_flag(problem, x, x1, mu, f0, f1,
                                    self.constants),
        )


class SubsampleOracle:
    """Uniform block subsampling of a block-structured residual.

    Sampled blocks are stacked and rescaled by sqrt(B/k) so that the
    subsampled f, gradient, and Gauss-Newton matrix are unbiased for the
    full-data quantities.  The model and the estimate pair use independent
    subset draws; f0 and f1 share one subset.
    """

    def __init__(self, batch_fraction: float,
                 constants: Optional[AccuracyConstants] = None):
        if batch_fraction <= 0.0 or batch_fraction > 1.0:
            raise ValueError("batch_fraction must lie in (0, 1]")
        self.batch_fraction = float(batch_fraction)
        self.constants = constants

    def _draw_subset(self, problem, rng):
        B = problem.n_blocks
        k = max(1, int(round(self.batch_fraction * B)))
        if rng is None or k == B:
            return np.arange(B), 1.0
        subset = np.sort(rng.choice(B, size=k, replace=False))
        return subset, B / k

    @staticmethod
    def _stacked(problem, x, subset, scale):
        root = math.sqrt(scale)
        r = np.concatenate([problem.block_residual(x, i) for i in subset])
        J = np.vstack([problem.block_jac(x, i) for i in subset])
        return root * r, root * J

    def model_at(self, problem, x, mu, rng):
        subset, scale = self._draw_subset(problem, rng)
        r, J = self._stacked(problem, x, subset, scale)
        g = J.T @ r
        m_at_center = 0.5 * float(r @ r)
        return ModelEstimate(
            g=g, J=J, m_at_center=m_at_center,
            accurate=_model_flag(problem, x, mu, g, m_at_center,
                                 self.constants),
        )

    def estimate_pair(self, problem, x, x1, mu, rng):
        subset, scale = self._draw_subset(problem, rng)
        r0, _ = self._stacked(problem, x, subset, scale)
        r1, _ = self._stacked(problem, x1, subset, scale)
        f0 = 0.5 * float(r0 @ r0)
        f1 = 0.5 * float(r1 @ r1)
        return EstimatePair(
            f0=f0, f1=f1,
            accurate=_estimate_flag(problem, x, x1, mu, f0, f1,
                                    self.constants),
        )


def _combined(oracle, problem, x, mu, rng, x_trial):
    x = np.asarray(x, float)
    x1 = x if x_trial is None else np.asarray(x_trial, float)
    model = oracle.model_at(problem, x, mu, rng)
    pair = oracle.estimate_pair(problem, x, x1, mu, rng)
    return OracleOutput(
        f0=pair.f0, f1=pair.f1, g=model.g, J=model.J,
        m_at_center=model.m_at_center,
        was_accurate_model=model.accurate,
        was_accurate_estimates=pair.accurate,
    )


def exact_oracle(problem, x, mu, x_trial=None) -> OracleOutput:
    return _combined(ExactOracle(), problem, x, mu, None, x_trial)


def gaussian_oracle(problem, x, mu, constants, rng,
                    x_trial=None, **kwargs) -> OracleOutput:
    return _combined(GaussianOracle(constants, **kwargs),
                     problem, x, mu, rng, x_trial)


def bernoulli_oracle(problem, x, mu, constants, corruption, rng,
                     x_trial=None) -> OracleOutput:
    return _combined(BernoulliOracle(constants, corruption),
                     problem, x, mu, rng, x_trial)


def subsample_oracle(problem, x, mu, batch_fraction, rng,
                     x_trial=None, constants=None) -> OracleOutput:
    return _combined(SubsampleOracle(batch_fraction, constants),
                     problem, x, mu, rng, x_trial)
