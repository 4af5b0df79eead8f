"""Pure-numpy simulation kernels.

Mirrors the compiled extension in unravelopt._kernel: the covariance
Runge-Kutta sweep and the per-step trajectory update block.  The
trajectory block is vectorized across trajectories, so this fallback
stays usable even for the full 2000-trajectory acceptance runs.

Semantics shared by both backends, per step k at global index
g = step0 + k, with x the state at the start of the step:

    y_bin = C x + dw/dt                    (bin-averaged current)
    u_bin = 0 | -K x | F y_bin             (by feedback mode)
    accumulate outer(x, x), outer(u, u)    (if g >= burn_start)
    x_next = x + dt * Aeff x + ncoef[k] dw
    record x_next, y_bin, u_bin            (if (g+1) % stride == 0)
"""

import numpy as np

BACKEND_NAME = "python"

MODE_NONE = 0
MODE_OPTIMAL = 1
MODE_MARKOVIAN = 2


def propagate_covariance(V0, A, D, C, Gamma, dt, n_steps):
    """RK4 sweep of dV/dt = A V + V A^T + D - (C V + Gamma)^T (C V + Gamma).

    Returns the full path, shape (n_steps+1, d, d), symmetrized at
    every step.
    """
    d = V0.shape[0]
    out = np.empty((n_steps + 1, d, d))
    V = np.array(V0, dtype=float)
    out[0] = V

    def f(V):
        K = C @ V + Gamma
        return A @ V + V @ A.T + D - K.T @ K

    for k in range(n_steps):
        k1 = f(V)
        k2 = f(V + 0.5 * dt * k1)
        k3 = f(V + 0.5 * dt * k2)
        k4 = f(V + dt * k3)
        V = V + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        V = 0.5 * (V + V.T)
        out[k + 1] = V
    return out


def run_trajectory_block(
    X,
    dW,
    Aeff,
    ncoef,
    C,
    KF,
    mode,
    dt,
    step0,
    burn_start,
    acc_xx,
    acc_uu,
    stride,
    rec_mean,
    rec_y,
    rec_u,
):
    """Advance every trajectory through one block of Euler steps in place."""
    blk = dW.shape[1]
    inv_dt = 1.0 / dt
    for k in range(blk):
        g = step0 + k
        dw = dW[:, k, :]
        y_bin = X @ C.T + dw * inv_dt
        if mode == MODE_OPTIMAL:
            u_bin = -(X @ KF.T)
        elif mode == MODE_MARKOVIAN:
            u_bin = y_bin @ KF.T
        else:
            u_bin = np.zeros((X.shape[0], acc_uu.shape[1]))
        if g >= burn_start:
            acc_xx += np.einsum("ti,tj->tij", X, X)
            acc_uu += np.einsum("ti,tj->tij", u_bin, u_bin)
        X += dt * (X @ Aeff.T) + dw @ ncoef[k].T
        if (g + 1) % stride == 0:
            r = (g + 1) // stride - 1
            rec_mean[:, r, :] = X
            rec_y[:, r, :] = y_bin
            rec_u[:, r, :] = u_bin
