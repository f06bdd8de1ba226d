"""Pure-numpy Lorenz-63 propagation kernels (fallback for the compiled core).

The expressions mirror the compiled kernel operation-for-operation so both
backends agree to the last few ulps.
"""

import numpy as np


def _field(z, sigma, rho, beta):
    # z has shape (..., 3); returns dz/dt with the same shape.
    x = z[..., 0]
    y = z[..., 1]
    w = z[..., 2]
    out = np.empty_like(z)
    out[..., 0] = -sigma * (x - y)
    out[..., 1] = rho * x - y - x * w
    out[..., 2] = x * y - beta * w
    return out


def _rk4_step(z, sigma, rho, beta, dt):
    k1 = _field(z, sigma, rho, beta)
    k2 = _field(z + (0.5 * dt) * k1, sigma, rho, beta)
    k3 = _field(z + (0.5 * dt) * k2, sigma, rho, beta)
    k4 = _field(z + dt * k3, sigma, rho, beta)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz_trajectory(z0, sigma, rho, beta, dt, steps):
    """Propagate one state; returns array of shape (steps+1, 3)."""
    z0 = np.asarray(z0, dtype=np.float64)
    traj = np.empty((steps + 1, 3))
    traj[0] = z0
    z = z0.copy()
    for t in range(steps):
        z = _rk4_step(z, sigma, rho, beta, dt)
        traj[t + 1] = z
    return traj


def lorenz_trajectory_batch(Z0, sigma, rho, beta, dt, steps):
    """Propagate a batch of states; Z0 is (k, 3), result is (k, steps+1, 3)."""
    Z0 = np.asarray(Z0, dtype=np.float64)
    traj = np.empty((Z0.shape[0], steps + 1, 3))
    traj[:, 0] = Z0
    z = Z0.copy()
    for t in range(steps):
        z = _rk4_step(z, sigma, rho, beta, dt)
        traj[:, t + 1] = z
    return traj
