"""Nonlinear least-squares problem bundles.

A problem exposes the residual r(x) and its Jacobian J(x); the objective is
f(x) = 0.5*||r(x)||^2 and its gradient J(x)^T r(x).  Ground-truth access to
f and grad is what lets the diagnostics layer score accuracy events and run
stopping-time experiments.
"""

from __future__ import annotations

import numpy as np


class ResidualProblem:
    """Callback bundle around a residual map r: R^n -> R^m.

    Parameters
    ----------
    n, m : int
        Input and output dimensions of the residual.
    residual, jac : callables
        r(x) -> (m,) array and J(x) -> (m, n) array.
    x0 : array, optional
        Default starting point (zeros if omitted).
    name : str
        Label used in traces and CSV output.
    """

    def __init__(self, n, m, residual, jac, x0=None, name=""):
        self.n = int(n)
        self.m = int(m)
        self._residual = residual
        self._jac = jac
        self.x0 = np.zeros(self.n) if x0 is None else np.asarray(x0, float)
        self.name = name

    def residual(self, x):
        return np.asarray(self._residual(np.asarray(x, float)), float)

    def jac(self, x):
        return np.asarray(self._jac(np.asarray(x, float)), float)

    def f(self, x):
        r = self.residual(x)
        return 0.5 * float(r @ r)

    def grad(self, x):
        return self.jac(x).T @ self.residual(x)


class LinearLeastSquares(ResidualProblem):
    """r(x) = A x - b.  The minimizer solves the normal equations."""

    def __init__(self, A, b, x0=None, name="linear"):
        A = np.asarray(A, float)
        b = np.asarray(b, float)
        self.A = A
        self.b = b
        super().__init__(
            A.shape[1], A.shape[0],
            residual=lambda x: A @ x - b,
            jac=lambda x: A,
            x0=x0, name=name,
        )

    def solution(self):
        """Normal-equations solution by dense factorization (test oracle)."""
        return np.linalg.solve(self.A.T @ self.A, self.A.T @ self.b)

    # Analytic constants for the theory layer: grad f = A^T(Ax - b).
    def lipschitz_grad(self):
        return float(np.linalg.norm(self.A, 2) ** 2)

    def jacobian_bound(self):
        return float(np.linalg.norm(self.A, 2))


class BlockLinearLeastSquares(LinearLeastSquares):
    """Linear least squares whose rows split into B independent blocks.

    Block structure is what the subsampling oracle draws from: block i is
    the row slice blocks[i] of (A, b).
    """

    def __init__(self, A, b, block_slices, x0=None, name="block-linear"):
        super().__init__(A, b, x0=x0, name=name)
        self.block_slices = list(block_slices)
        self.n_blocks = len(self.block_slices)

    def block_residual(self, x, i):
        sl = self.block_slices[i]
        return self.A[sl] @ np.asarray(x, float) - self.b[sl]

    def block_jac(self, x, i):
        return self.A[self.block_slices[i]]


def identity_problem(n=2):
    """r(x) = x, so f = 0.5*||x||^2 with global minimum at the origin."""
    eye = np.eye(n)
    return ResidualProblem(n, n, lambda x: np.array(x, float),
                           lambda x: eye, x0=np.zeros(n), name="identity")


def random_linear_problem(m=10, n=5, cond=4.0, seed=0, x0_scale=2.0):
    """Well-conditioned random linear least-squares instance.

    Singular values are log-spaced in [1/cond, 1], so the normal-equations
    matrix has condition number cond**2.
    """
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((m, n)))
    V, _ = np.linalg.qr(rng.standard_normal((n, n)))
    svals = np.logspace(0.0, -np.log10(cond), n)
    A = U @ np.diag(svals) @ V.T
    b = rng.standard_normal(m)
    x0 = x0_scale * rng.standard_normal(n)
    return LinearLeastSquares(A, b, x0=x0, name="random-linear")


def quadratic2_problem():
    """Fixed 2-variable least-squares used by the complexity experiments.

    ||A||_2 = 0.9 so a Jacobian bound of 1 is valid with margin, and the
    gradient Lipschitz constant is 0.81.
    """
    A = np.array([[0.9, 0.0], [0.0, 0.45]])
    x_star = np.array([1.5, -2.0])
    b = A @ x_star
    return LinearLeastSquares(A, b, x0=np.zeros(2), name="quadratic2")


def block_linear_problem(n_blocks=6, rows_per_block=2, n=3, seed=0):
    """Random block-structured linear problem for the subsampling oracle."""
    rng = np.random.default_rng(seed)
    m = n_blocks * rows_per_block
    A = rng.standard_normal((m, n))
    b = rng.standard_normal(m)
    slices = [slice(i * rows_per_block, (i + 1) * rows_per_block)
              for i in range(n_blocks)]
    return BlockLinearLeastSquares(A, b, slices, x0=rng.standard_normal(n))


def rosenbrock_problem():
    """Rosenbrock in residual form: r(x) = (10(x2 - x1^2), 1 - x1)."""

    def residual(x):
        return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

    def jac(x):
        return np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])

    return ResidualProblem(2, 2, residual, jac, x0=np.array([-1.2, 1.0]),
                           name="rosenbrock")


BUILTIN_PROBLEMS = {
    "linear": random_linear_problem,
    "identity": identity_problem,
    "quadratic2": quadratic2_problem,
    "block-linear": block_linear_problem,
    "rosenbrock": rosenbrock_problem,
}


def make_problem(name, **kwargs):
    try:
        factory = BUILTIN_PROBLEMS[name]
    except KeyError:
        raise ValueError(
            f"unknown problem {name!r}; choose from {sorted(BUILTIN_PROBLEMS)}"
        ) from None
    return factory(**kwargs)
