"""Measurement unravellings and the conditional filter they induce.

A continuous Markovian measurement strategy on L output channels is
summarized by a real 2L x 2L matrix U built from per-channel
efficiencies theta_l in [0, 1] and a symmetric complex correlation
matrix Upsilon:

    U = 1/2 [[diag(theta) + Re Y, Im Y], [Im Y, diag(theta) - Re Y]]

subject to U >= 0.  Heterodyne detection is U = I/2; efficient
homodyne at phase phi is the rank-one U with theta = 1 and
Upsilon = exp(2i phi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .linalg import (
    DEFAULT_TOL,
    ToleranceConfig,
    as_matrix,
    check_symmetric,
    hermitian_embed,
    involution,
    is_psd,
    psd_sqrt,
)
from .system import MomentModel

__all__ = [
    "UnravellingMatrix",
    "compose_U",
    "decompose_U",
    "heterodyne",
    "homodyne",
    "FilterModel",
    "filter_model",
    "RecoveredUnravelling",
    "recover_U",
]

# How far a diagonal-efficiency entry may drift outside [0, 1], or an
# off-diagonal entry away from its required structure, before
# decomposition rejects the matrix.
_STRUCTURE_TOL = 1e-8


@dataclass(frozen=True)
class UnravellingMatrix:
    """Validated unravelling with both representations kept in sync.

    U is the real 2L x 2L form used by the filter equations; theta and
    upsilon are the per-channel efficiencies and the symmetric complex
    correlation matrix it was composed from.
    """

    U: np.ndarray
    theta: np.ndarray
    upsilon: np.ndarray

    @property
    def n_channels(self) -> int:
        return len(self.theta)


def compose_U(theta, upsilon, tol: ToleranceConfig = DEFAULT_TOL) -> UnravellingMatrix:
    """Build U from efficiencies and correlations, enforcing admissibility.

    Raises ValidationError when theta leaves [0, 1], when upsilon is
    not symmetric, or when the assembled U fails to be PSD.
    """
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    if th.ndim != 1 or len(th) < 1:
        raise ValidationError("theta must be a 1-d array of efficiencies")
    if not np.all(np.isfinite(th)):
        raise ValidationError("theta contains non-finite entries")
    if np.any(th < -_STRUCTURE_TOL) or np.any(th > 1.0 + _STRUCTURE_TOL):
        raise ValidationError(
            "efficiencies must lie in [0, 1], got range [%.6g, %.6g]" % (th.min(), th.max())
        )
    th = np.clip(th, 0.0, 1.0)
    L = len(th)
    Y = np.atleast_2d(np.asarray(upsilon, dtype=complex))
    if Y.shape != (L, L):
        raise ValidationError("upsilon must be %d x %d, got %r" % (L, L, Y.shape))
    if not np.all(np.isfinite(Y)):
        raise ValidationError("upsilon contains non-finite entries")
    if np.linalg.norm(Y - Y.T) > _STRUCTURE_TOL * (1.0 + np.linalg.norm(Y)):
        raise ValidationError("upsilon must be symmetric (not Hermitian): Y != Y^T")
    Y = 0.5 * (Y + Y.T)
    theta_mat = np.diag(th)
    U = 0.5 * np.block(
        [[theta_mat + Y.real, Y.imag], [Y.imag, theta_mat - Y.real]]
    )
    U = 0.5 * (U + U.T)
    check = is_psd(U, tol)
    if not check:
        raise ValidationError(
            "inadmissible unravelling: U has eigenvalue %.3e < 0 "
            "(correlations too strong for the given efficiencies)" % check.min_eigenvalue
        )
    return UnravellingMatrix(U=U, theta=th, upsilon=Y)


def decompose_U(U, tol: ToleranceConfig = DEFAULT_TOL) -> UnravellingMatrix:
    """Recover (theta, upsilon) from a raw U matrix, validating structure.

    The failure modes are reported distinctly: wrong shape or asymmetry,
    a non-diagonal efficiency block, efficiencies outside [0, 1], an
    asymmetric correlation block, and loss of positive semidefiniteness.
    """
    M = as_matrix(U, "U")
    if np.iscomplexobj(M):
        if np.linalg.norm(M.imag) > _STRUCTURE_TOL * (1.0 + np.linalg.norm(M)):
            raise ValidationError("U must be real")
        M = M.real
    if M.shape[0] != M.shape[1] or M.shape[0] % 2 or M.shape[0] < 2:
        raise ValidationError("U must be 2L x 2L with L >= 1, got shape %r" % (M.shape,))
    scale = 1.0 + np.linalg.norm(M)
    if np.linalg.norm(M - M.T) > _STRUCTURE_TOL * scale:
        raise ValidationError("U must be symmetric")
    M = 0.5 * (M + M.T)
    L = M.shape[0] // 2
    u11, u12 = M[:L, :L], M[:L, L:]
    u21, u22 = M[L:, :L], M[L:, L:]
    theta_mat = u11 + u22
    off = theta_mat - np.diag(np.diag(theta_mat))
    if np.linalg.norm(off) > _STRUCTURE_TOL * scale:
        raise ValidationError(
            "efficiency block diag(theta) = U11 + U22 is not diagonal "
            "(off-diagonal norm %.3e)" % np.linalg.norm(off)
        )
    th = np.diag(theta_mat)
    if np.any(th < -_STRUCTURE_TOL) or np.any(th > 1.0 + _STRUCTURE_TOL):
        raise ValidationError(
            "efficiencies must lie in [0, 1], got range [%.6g, %.6g]" % (th.min(), th.max())
        )
    im_y = 0.5 * (u12 + u21)
    if np.linalg.norm(u12 - u12.T) > _STRUCTURE_TOL * scale:
        raise ValidationError("correlation block Im(Upsilon) is not symmetric")
    upsilon = (u11 - u22) + 1j * (im_y + im_y.T)
    return compose_U(np.clip(th, 0.0, 1.0), 0.5 * (upsilon + upsilon.T), tol)


def heterodyne(n_channels: int) -> UnravellingMatrix:
    """Efficient heterodyne on every channel: U = I/2."""
    L = int(n_channels)
    return compose_U(np.ones(L), np.zeros((L, L), dtype=complex))


def homodyne(phases) -> UnravellingMatrix:
    """Efficient homodyne at the given phase on each channel.

    Accepts a scalar phase (one channel) or a 1-d array of per-channel
    phases; channels are uncorrelated, Upsilon = diag(exp(2i phi)).
    """
    phi = np.atleast_1d(np.asarray(phases, dtype=float))
    if phi.ndim != 1:
        raise ValidationError("phases must be a scalar or 1-d array")
    L = len(phi)
    return compose_U(np.ones(L), np.diag(np.exp(2j * phi)))


@dataclass(frozen=True)
class FilterModel:
    """Conditional-dynamics matrices for one (system, unravelling) pair.

    The conditional covariance obeys the Riccati equation
    dV/dt = A V + V A^T + D - (V C^T + Gamma^T)(C V + Gamma), whose
    algebraic form is written on Omega_eff = A - Gamma^T C and
    Noise_eff = D - Gamma^T Gamma.
    """

    model: MomentModel
    unravelling: UnravellingMatrix
    C: np.ndarray
    Gamma: np.ndarray
    Omega_eff: np.ndarray
    Noise_eff: np.ndarray

    @property
    def hbar(self) -> float:
        return self.model.hbar


def filter_model(
    model: MomentModel, unravelling, tol: ToleranceConfig = DEFAULT_TOL
) -> FilterModel:
    """Assemble the conditional filter matrices for an unravelling.

    Parameters
    ----------
    model : MomentModel
    unravelling : UnravellingMatrix or array_like
        A raw 2L x 2L matrix is decomposed (and therefore validated)
        first.

    Returns
    -------
    FilterModel
        With Noise_eff certified PSD; a failure there indicates an
        inadmissible unravelling slipped past validation.
    """
    if not isinstance(unravelling, UnravellingMatrix):
        unravelling = decompose_U(unravelling, tol)
    L = model.n_channels
    if unravelling.n_channels != L:
        raise ValidationError(
            "unravelling has %d channels, system has %d" % (unravelling.n_channels, L)
        )
    hbar = model.hbar
    S = involution(L)
    u_sqrt = psd_sqrt(unravelling.U, tol)
    C = (2.0 / np.sqrt(hbar)) * u_sqrt @ model.C_bar
    Gamma = -np.sqrt(hbar) * u_sqrt @ S @ model.C_bar @ model.sigma.T
    Omega_eff = model.A - Gamma.T @ C
    Noise_eff = model.D - Gamma.T @ Gamma
    Noise_eff = 0.5 * (Noise_eff + Noise_eff.T)
    check = is_psd(Noise_eff, tol)
    if not check:
        raise NumericalError(
            "effective noise matrix lost positive semidefiniteness "
            "(min eigenvalue %.3e)" % check.min_eigenvalue
        )
    return FilterModel(
        model=model,
        unravelling=unravelling,
        C=C,
        Gamma=Gamma,
        Omega_eff=Omega_eff,
        Noise_eff=Noise_eff,
    )


@dataclass(frozen=True)
class RecoveredUnravelling:
    """Result of inverting a steady-state covariance back to a strategy.

    residual is the achieved Frobenius mismatch in the defining linear
    equation, relative to 1 + the right-hand-side norm; flagged is set
    when it exceeds residual_tol, meaning no admissible unravelling
    reproduces this covariance exactly.
    """

    unravelling: UnravellingMatrix
    residual: float
    flagged: bool


def _structure_basis(L):
    """Basis of admissible-direction matrices and their parameter names."""
    basis = []
    kinds = []
    for l in range(L):
        M = np.zeros((2 * L, 2 * L))
        M[l, l] = 0.5
        M[L + l, L + l] = 0.5
        basis.append(M)
        kinds.append(("theta", l, l))
    for i in range(L):
        for j in range(i, L):
            E = np.zeros((L, L))
            E[i, j] = E[j, i] = 1.0
            M = np.zeros((2 * L, 2 * L))
            M[:L, :L] = 0.5 * E
            M[L:, L:] = -0.5 * E
            basis.append(M)
            kinds.append(("re", i, j))
            M = np.zeros((2 * L, 2 * L))
            M[:L, L:] = 0.5 * E
            M[L:, :L] = 0.5 * E
            basis.append(M)
            kinds.append(("im", i, j))
    return basis, kinds


def _params_from_U(M, L):
    """Project an arbitrary symmetric matrix onto the (theta, upsilon) structure."""
    u11, u12 = M[:L, :L], M[:L, L:]
    u21, u22 = M[L:, :L], M[L:, L:]
    theta = np.clip(np.diag(u11 + u22), 0.0, 1.0)
    re_y = u11 - u22
    re_y = 0.5 * (re_y + re_y.T)
    # off-diagonal blocks each hold Im(Y)/2
    im_y = 0.5 * (u12 + u12.T + u21 + u21.T)
    return theta, re_y + 1j * im_y


def _compose_raw(theta, upsilon):
    theta_mat = np.diag(theta)
    U = 0.5 * np.block(
        [[theta_mat + upsilon.real, upsilon.imag], [upsilon.imag, theta_mat - upsilon.real]]
    )
    return 0.5 * (U + U.T)


def _params_from_U_noclip(M, L):
    """Orthogonal projection onto the (theta, upsilon) structure subspace."""
    u11, u12 = M[:L, :L], M[:L, L:]
    u21, u22 = M[L:, :L], M[L:, L:]
    theta = np.diag(u11 + u22).copy()
    re_y = u11 - u22
    re_y = 0.5 * (re_y + re_y.T)
    im_y = 0.5 * (u12 + u12.T + u21 + u21.T)
    return theta, re_y + 1j * im_y


def _admissible_refit(design, R, rhs, hbar, L, U_start, eps):
    """Search the solution set of the defining equation for an admissible U.

    When there are more channels than modes the equation pins down only
    part of the (theta, upsilon) vector; the minimum-norm fit can then
    land outside the admissible set even though admissible solutions
    exist.  All four constraint sets are closed and convex (the
    equation's affine set, the structure subspace, the efficiency box,
    and the PSD cone), so cyclic projections converge to a point of
    their intersection whenever it is nonempty.  Returns a structured
    symmetric U meeting the equation within eps, or None.
    """
    svals = np.linalg.svd(design, compute_uv=False)
    rank = int(np.sum(svals > svals[0] * 1e-12)) if svals.size else 0
    if rank >= design.shape[1]:
        return None

    G_pinv = np.linalg.pinv(R.T @ R)
    scale = 1.0 + np.linalg.norm(rhs)
    U = 0.5 * (U_start + U_start.T)
    for cycle in range(20000):
        # affine set of the defining equation
        gap = hbar * R.T @ U @ R - rhs
        U = U - (1.0 / hbar) * R @ G_pinv @ gap @ G_pinv @ R.T
        # structure subspace
        theta, upsilon = _params_from_U_noclip(U, L)
        # efficiency box (per-channel, disjoint coordinates)
        np.clip(theta, 0.0, 1.0, out=theta)
        U = _compose_raw(theta, upsilon)
        # PSD cone
        vals, vecs = np.linalg.eigh(U)
        if vals[0] < 0.0:
            U = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
        if cycle % 25 == 24:
            theta, upsilon = _params_from_U_noclip(U, L)
            np.clip(theta, 0.0, 1.0, out=theta)
            cand = _compose_raw(theta, upsilon)
            if (
                np.linalg.eigvalsh(cand)[0] >= -1e-2 * eps
                and np.linalg.norm(hbar * R.T @ cand @ R - rhs) / scale <= 0.5 * eps
            ):
                return cand
    return None


def recover_U(
    W, model: MomentModel, tol: ToleranceConfig = DEFAULT_TOL
) -> RecoveredUnravelling:
    """Invert a candidate steady-state covariance to an unravelling.

    Solves hbar R^T U R = D + A W + W A^T for U over the admissible
    parametrization, where R = 2 C_bar W / hbar + S C_bar Sigma.  When
    R is square and invertible the exact inverse is taken first and
    projected onto the structure; otherwise (or when that projection
    does not reproduce the equation) a least-squares fit over
    (theta, upsilon) is used.  The result is pushed back into the
    admissible set and the final residual reported.  When the fit is
    underdetermined and the pushed-back result misses the equation, the
    free directions are searched for an admissible exact solution.

    Raises ValidationError if W fails either of the two feasibility
    conditions (the uncertainty LMI and D + A W + W A^T >= 0).
    """
    Ws = check_symmetric(W, tol, name="W")
    hbar = model.hbar
    uncert = is_psd(hermitian_embed(Ws, hbar, tol), tol)
    if not uncert:
        raise ValidationError(
            "W violates the uncertainty condition (min eigenvalue %.3e)"
            % uncert.min_eigenvalue
        )
    rhs = model.D + model.A @ Ws + Ws @ model.A.T
    rhs = 0.5 * (rhs + rhs.T)
    gain_check = is_psd(rhs, tol)
    if not gain_check:
        raise ValidationError(
            "W is infeasible: D + A W + W A^T has eigenvalue %.3e < 0"
            % gain_check.min_eigenvalue
        )
    L = model.n_channels
    S = involution(L)
    R = (2.0 / hbar) * model.C_bar @ Ws + S @ model.C_bar @ model.sigma
    scale = 1.0 + np.linalg.norm(rhs)

    def residual_of(U_raw):
        return np.linalg.norm(hbar * R.T @ U_raw @ R - rhs) / scale

    def push_admissible(theta, upsilon):
        # Alternate between the eigenvalue clip to the PSD cone and the
        # (theta, upsilon) structure until the iterate stops moving.
        U_raw = _compose_raw(theta, upsilon)
        for _ in range(200):
            vals, vecs = np.linalg.eigh(U_raw)
            if vals[0] >= -tol.psd_tol * (1.0 + abs(vals[-1])):
                break
            clipped = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
            theta, upsilon = _params_from_U(0.5 * (clipped + clipped.T), L)
            U_next = _compose_raw(theta, upsilon)
            if np.linalg.norm(U_next - U_raw) < 1e-14:
                U_raw = U_next
                break
            U_raw = U_next

        # Shrinking upsilon toward zero interpolates with
        # diag(theta)/2 >= 0, so a bisection on the shrink factor
        # always reaches the PSD cone.
        lo, hi = 0.0, 1.0
        for _ in range(80):
            if np.linalg.eigvalsh(_compose_raw(theta, hi * upsilon))[0] >= 0.0:
                lo = hi
                break
            mid = 0.5 * (lo + hi)
            if np.linalg.eigvalsh(_compose_raw(theta, mid * upsilon))[0] >= 0.0:
                lo = mid
            else:
                hi = mid
        if lo < 1.0:
            upsilon = lo * upsilon
        return theta, upsilon

    theta = upsilon = None
    design = coeff = basis = None
    if R.shape[0] == R.shape[1]:
        svals = np.linalg.svd(R, compute_uv=False)
        if svals[-1] > 1e-10 * max(1.0, svals[0]):
            Rinv = np.linalg.inv(R)
            U_exact = Rinv.T @ rhs @ Rinv / hbar
            U_exact = 0.5 * (U_exact + U_exact.T)
            th0, y0 = _params_from_U(U_exact, L)
            if residual_of(_compose_raw(th0, y0)) <= tol.residual_tol:
                theta, upsilon = th0, y0
    if theta is None:
        basis, _ = _structure_basis(L)
        columns = [(hbar * R.T @ M @ R).reshape(-1) for M in basis]
        design = np.stack(columns, axis=1)
        coeff, *_ = np.linalg.lstsq(design, rhs.reshape(-1), rcond=None)
        U_fit = sum(c * M for c, M in zip(coeff, basis))
        theta, upsilon = _params_from_U(U_fit, L)

    theta, upsilon = push_admissible(theta, upsilon)
    unr = compose_U(theta, upsilon, tol)
    res = residual_of(unr.U)
    if res > tol.residual_tol and design is not None:
        refit = _admissible_refit(design, R, rhs, hbar, L, unr.U, tol.residual_tol)
        if refit is not None:
            th2, y2 = push_admissible(*_params_from_U(refit, L))
            unr2 = compose_U(th2, y2, tol)
            res2 = residual_of(unr2.U)
            if res2 < res:
                unr, res = unr2, res2
    return RecoveredUnravelling(
        unravelling=unr, residual=float(res), flagged=bool(res > tol.residual_tol)
    )
