# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Lorenz-63 propagation kernels.

Same operation order as the pure-numpy fallback in _lorenz_py so results
agree to the last few ulps; no fast-math so IEEE semantics are preserved.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline void _rk4_step(double* z, double sigma, double rho, double beta,
                           double dt) noexcept nogil:
    cdef double x = z[0], y = z[1], w = z[2]
    cdef double k1x, k1y, k1w, k2x, k2y, k2w, k3x, k3y, k3w, k4x, k4y, k4w
    cdef double ax, ay, aw, h2 = 0.5 * dt

    k1x = -sigma * (x - y)
    k1y = rho * x - y - x * w
    k1w = x * y - beta * w

    ax = x + h2 * k1x; ay = y + h2 * k1y; aw = w + h2 * k1w
    k2x = -sigma * (ax - ay)
    k2y = rho * ax - ay - ax * aw
    k2w = ax * ay - beta * aw

    ax = x + h2 * k2x; ay = y + h2 * k2y; aw = w + h2 * k2w
    k3x = -sigma * (ax - ay)
    k3y = rho * ax - ay - ax * aw
    k3w = ax * ay - beta * aw

    ax = x + dt * k3x; ay = y + dt * k3y; aw = w + dt * k3w
    k4x = -sigma * (ax - ay)
    k4y = rho * ax - ay - ax * aw
    k4w = ax * ay - beta * aw

    z[0] = x + (dt / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    z[1] = y + (dt / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
    z[2] = w + (dt / 6.0) * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)


def lorenz_trajectory(z0, double sigma, double rho, double beta, double dt,
                      int steps):
    """Propagate one state; returns array of shape (steps+1, 3)."""
    cdef cnp.ndarray[double, ndim=2] traj = np.empty((steps + 1, 3))
    cdef double z[3]
    cdef double[::1] z0v = np.ascontiguousarray(z0, dtype=np.float64)
    cdef int t, i
    for i in range(3):
        z[i] = z0v[i]
        traj[0, i] = z[i]
    for t in range(steps):
        _rk4_step(z, sigma, rho, beta, dt)
        for i in range(3):
            traj[t + 1, i] = z[i]
    return traj


def lorenz_trajectory_batch(Z0, double sigma, double rho, double beta,
                            double dt, int steps):
    """Propagate a batch of states; Z0 is (k, 3), result is (k, steps+1, 3)."""
    cdef double[:, ::1] Z = np.ascontiguousarray(Z0, dtype=np.float64)
    cdef int k = Z.shape[0]
    cdef cnp.ndarray[double, ndim=3] traj = np.empty((k, steps + 1, 3))
    cdef double z[3]
    cdef int b, t, i
    for b in range(k):
        for i in range(3):
            z[i] = Z[b, i]
            traj[b, 0, i] = z[i]
        for t in range(steps):
            _rk4_step(z, sigma, rho, beta, dt)
            for i in range(3):
                traj[b, t + 1, i] = z[i]
    return traj
