# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled simulation kernels.

Same contract as unravelopt._kernel_py (which holds the reference
semantics); this version runs the per-trajectory loops in C.  Matrix
dimensions are small (a handful of quadratures), so the matrix
products are written out as scalar loops over preallocated scratch.
"""

import numpy as np

BACKEND_NAME = "cython"

MODE_NONE = 0
MODE_OPTIMAL = 1
MODE_MARKOVIAN = 2

# C-level copies usable inside nogil blocks
cdef int _OPTIMAL = 1
cdef int _MARKOVIAN = 2


def propagate_covariance(V0, A, D, C, Gamma, double dt, long n_steps):
    """RK4 sweep of dV/dt = A V + V A^T + D - (C V + Gamma)^T (C V + Gamma)."""
    cdef long d = V0.shape[0]
    cdef long m = C.shape[0]
    out_arr = np.empty((n_steps + 1, d, d))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] Av = np.ascontiguousarray(A, dtype=float)
    cdef double[:, ::1] Dv = np.ascontiguousarray(D, dtype=float)
    cdef double[:, ::1] Cv = np.ascontiguousarray(C, dtype=float)
    cdef double[:, ::1] Gv = np.ascontiguousarray(Gamma, dtype=float)
    cdef double[:, ::1] V = np.ascontiguousarray(V0, dtype=float).copy()
    scratch = np.zeros((6, d, d))
    cdef double[:, ::1] k1 = scratch[0]
    cdef double[:, ::1] k2 = scratch[1]
    cdef double[:, ::1] k3 = scratch[2]
    cdef double[:, ::1] k4 = scratch[3]
    cdef double[:, ::1] Vt = scratch[4]
    cdef double[:, ::1] KV = np.zeros((m, d))
    cdef long step, i, j, l, q
    cdef double acc, sym

    for i in range(d):
        for j in range(d):
            out[0, i, j] = V[i, j]

    for step in range(n_steps):
        _rhs(Av, Dv, Cv, Gv, V, KV, k1, d, m)
        _axpy_into(Vt, V, k1, 0.5 * dt, d)
        _rhs(Av, Dv, Cv, Gv, Vt, KV, k2, d, m)
        _axpy_into(Vt, V, k2, 0.5 * dt, d)
        _rhs(Av, Dv, Cv, Gv, Vt, KV, k3, d, m)
        _axpy_into(Vt, V, k3, dt, d)
        _rhs(Av, Dv, Cv, Gv, Vt, KV, k4, d, m)
        for i in range(d):
            for j in range(d):
                V[i, j] = V[i, j] + (dt / 6.0) * (
                    k1[i, j] + 2.0 * k2[i, j] + 2.0 * k3[i, j] + k4[i, j]
                )
        for i in range(d):
            for j in range(i + 1, d):
                sym = 0.5 * (V[i, j] + V[j, i])
                V[i, j] = sym
                V[j, i] = sym
        for i in range(d):
            for j in range(d):
                out[step + 1, i, j] = V[i, j]
    return out_arr


cdef void _rhs(
    double[:, ::1] A,
    double[:, ::1] D,
    double[:, ::1] C,
    double[:, ::1] G,
    double[:, ::1] V,
    double[:, ::1] KV,
    double[:, ::1] out,
    long d,
    long m,
) noexcept nogil:
    # KV = C V + Gamma; out = A V + V A^T + D - KV^T KV
    cdef long i, j, l, q
    cdef double acc
    for q in range(m):
        for j in range(d):
            acc = G[q, j]
            for l in range(d):
                acc += C[q, l] * V[l, j]
            KV[q, j] = acc
    for i in range(d):
        for j in range(d):
            acc = D[i, j]
            for l in range(d):
                acc += A[i, l] * V[l, j] + V[i, l] * A[j, l]
            for q in range(m):
                acc -= KV[q, i] * KV[q, j]
            out[i, j] = acc


cdef void _axpy_into(
    double[:, ::1] out, double[:, ::1] V, double[:, ::1] K, double h, long d
) noexcept nogil:
    cdef long i, j
    for i in range(d):
        for j in range(d):
            out[i, j] = V[i, j] + h * K[i, j]


def run_trajectory_block(
    double[:, ::1] X,
    double[:, :, ::1] dW,
    double[:, ::1] Aeff,
    double[:, :, ::1] ncoef,
    double[:, ::1] C,
    double[:, ::1] KF,
    int mode,
    double dt,
    long step0,
    long burn_start,
    double[:, :, ::1] acc_xx,
    double[:, :, ::1] acc_uu,
    long stride,
    double[:, :, ::1] rec_mean,
    double[:, :, ::1] rec_y,
    double[:, :, ::1] rec_u,
):
    """Advance every trajectory through one block of Euler steps in place."""
    cdef long n_traj = X.shape[0]
    cdef long d = X.shape[1]
    cdef long m = dW.shape[2]
    cdef long p = acc_uu.shape[1]
    cdef long blk = dW.shape[1]
    cdef double inv_dt = 1.0 / dt
    cdef long i, k, g, r, a, b, q, j
    cdef double acc
    scratch = np.zeros((3, max(d, max(m, p))))
    cdef double[::1] y = scratch[0]
    cdef double[::1] u = scratch[1]
    cdef double[::1] xn = scratch[2]

    with nogil:
        for i in range(n_traj):
            for k in range(blk):
                g = step0 + k
                for q in range(m):
                    acc = dW[i, k, q] * inv_dt
                    for j in range(d):
                        acc += C[q, j] * X[i, j]
                    y[q] = acc
                if mode == _OPTIMAL:
                    for a in range(p):
                        acc = 0.0
                        for j in range(d):
                            acc -= KF[a, j] * X[i, j]
                        u[a] = acc
                elif mode == _MARKOVIAN:
                    for a in range(p):
                        acc = 0.0
                        for q in range(m):
                            acc += KF[a, q] * y[q]
                        u[a] = acc
                else:
                    for a in range(p):
                        u[a] = 0.0
                if g >= burn_start:
                    for a in range(d):
                        for b in range(d):
                            acc_xx[i, a, b] += X[i, a] * X[i, b]
                    for a in range(p):
                        for b in range(p):
                            acc_uu[i, a, b] += u[a] * u[b]
                for j in range(d):
                    acc = X[i, j]
                    for b in range(d):
                        acc += dt * Aeff[j, b] * X[i, b]
                    for q in range(m):
                        acc += ncoef[k, j, q] * dW[i, k, q]
                    xn[j] = acc
                for j in range(d):
                    X[i, j] = xn[j]
                if (g + 1) % stride == 0:
                    r = (g + 1) // stride - 1
                    for j in range(d):
                        rec_mean[i, r, j] = X[i, j]
                    for q in range(m):
                        rec_y[i, r, q] = y[q]
                    for a in range(p):
                        rec_u[i, r, a] = u[a]
