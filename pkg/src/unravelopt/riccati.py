"""Continuous algebraic Riccati solvers for the filter and the regulator.

Both equations are reduced to the common form

    Ah^T X + X Ah - X Gh X + Qh = 0,   Gh >= 0, Qh >= 0,

solved by extracting the stable invariant subspace of the associated
Hamiltonian matrix and refined by Kleinman-Newton iteration (each step
is one Lyapunov solve).  A Newton-only fallback from a caller-supplied
stabilizing seed covers cases where the eigenvector basis of the
Hamiltonian is too ill-conditioned, which happens when Gh has low rank
and the closed loop sits near the stability boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .linalg import DEFAULT_TOL, ToleranceConfig, check_symmetric, solve_lyapunov
from .unravelling import FilterModel, filter_model, heterodyne

__all__ = [
    "RiccatiSolution",
    "solve_filter_care",
    "solve_control_care",
    "certify_stabilizing",
]

_MAX_NEWTON = 60


@dataclass(frozen=True)
class RiccatiSolution:
    """Stabilizing CARE solution with its certificates.

    residual is the Frobenius norm of the equation evaluated at X;
    closed_loop_eigs is the spectrum of the closed-loop matrix
    (Ah - Gh X, transposed form for the filter); stabilizing records
    whether every real part clears -stability_margin.
    """

    X: np.ndarray
    residual: float
    closed_loop_eigs: np.ndarray
    stabilizing: bool


def certify_stabilizing(closed_loop_eigs, tol: ToleranceConfig = DEFAULT_TOL) -> bool:
    """True when every eigenvalue real part is below -stability_margin."""
    eigs = np.atleast_1d(np.asarray(closed_loop_eigs))
    return bool(np.max(eigs.real) < -tol.stability_margin)


def _care_residual(X, Ah, Gh, Qh):
    return np.linalg.norm(Ah.T @ X + X @ Ah - X @ Gh @ X + Qh)


def _newton_refine(X, Ah, Gh, Qh, tol, bound, max_iter=_MAX_NEWTON):
    """Kleinman iteration from a stabilizing iterate; returns the best X seen."""
    best = X
    best_res = _care_residual(X, Ah, Gh, Qh)
    for _ in range(max_iter):
        if best_res <= bound:
            break
        M = Ah - Gh @ X
        # X Gh X is symmetric in exact arithmetic; rounding breaks that
        # at large scales, so restore it before the solve
        rhs = Qh + X @ Gh @ X
        rhs = 0.5 * (rhs + rhs.T)
        try:
            X_next = solve_lyapunov(M.T, rhs, tol)
        except NumericalError:
            break
        X_next = 0.5 * (X_next + X_next.T)
        res = _care_residual(X_next, Ah, Gh, Qh)
        if not np.isfinite(res):
            break
        X = X_next
        if res < best_res:
            best, best_res = X_next, res
        elif res > 10.0 * best_res:
            break
    return best, best_res


def _stable_subspace_solution(Ah, Gh, Qh, tol):
    """Candidate X from the stable invariant subspace of the Hamiltonian."""
    n = Ah.shape[0]
    Z = np.block([[Ah, -Gh], [-Qh, -Ah.T]])
    vals, vecs = np.linalg.eig(Z)
    stable = vals.real < 0.0
    if int(stable.sum()) != n:
        raise NumericalError(
            "Hamiltonian matrix has %d stable eigenvalues, expected %d "
            "(eigenvalues on the imaginary axis)" % (int(stable.sum()), n)
        )
    V = vecs[:, stable]
    # The subspace is conjugation-closed, so real and imaginary parts
    # of the complex basis span its real form; an SVD picks n
    # orthonormal real directions robustly.
    span = np.hstack([V.real, V.imag])
    left, svals, _ = np.linalg.svd(span, full_matrices=False)
    basis = left[:, :n]
    if svals[n - 1] <= 1e-12 * svals[0]:
        raise NumericalError("stable invariant subspace is numerically rank deficient")
    X1 = basis[:n, :]
    X2 = basis[n:, :]
    s = np.linalg.svd(X1, compute_uv=False)
    if s[-1] <= 1e-12 * max(1.0, s[0]):
        raise NumericalError("invariant-subspace projection X1 is singular")
    X = np.linalg.solve(X1.T, X2.T).T
    return 0.5 * (X + X.T)


def _solve_care_core(Ah, Gh, Qh, tol, seed_factories=()):
    """Solve Ah^T X + X Ah - X Gh X + Qh = 0 for the stabilizing X.

    seed_factories are callables producing starting points for the
    Newton-only fallback; they run only if the Hamiltonian route fails,
    so the happy path pays nothing for them.
    """
    n = Ah.shape[0]
    bound = tol.residual_tol * (1.0 + np.linalg.norm(Qh))
    failures = []

    def candidates():
        try:
            yield _stable_subspace_solution(Ah, Gh, Qh, tol)
        except NumericalError as exc:
            failures.append(str(exc))
        if np.max(np.linalg.eigvals(Ah).real) < -tol.stability_margin:
            yield np.zeros((n, n))
        for factory in seed_factories:
            try:
                seed = factory()
            except NumericalError as exc:
                failures.append("seed unavailable: %s" % exc)
                continue
            if seed is None:
                continue
            seed = 0.5 * (seed + seed.T)
            yield seed
            # A PSD inflation can recover a stabilizing start when the
            # raw seed closes the loop too weakly.
            for c in (1e-2, 1.0, 1e2):
                yield seed + c * (1.0 + np.linalg.norm(seed)) * np.eye(n)

    for X0 in candidates():
        eigs = np.linalg.eigvals(Ah - Gh @ X0)
        if np.max(eigs.real) >= 0.0 and _care_residual(X0, Ah, Gh, Qh) > bound:
            continue
        X, res = _newton_refine(X0, Ah, Gh, Qh, tol, bound)
        closed = np.linalg.eigvals(Ah - Gh @ X)
        if res <= bound:
            return X, res, closed
        failures.append("refinement stalled at residual %.3e" % res)

    raise NumericalError(
        "no stabilizing Riccati solution found: " + "; ".join(failures or ["no usable start"])
    )


def solve_filter_care(fm: FilterModel, tol: ToleranceConfig = DEFAULT_TOL) -> RiccatiSolution:
    """Steady-state conditional covariance for a filter model.

    Solves Omega W + W Omega^T - W C^T C W + Noise_eff = 0 for the
    stabilizing W, requiring (C, Omega_eff) detectable first; an
    undetectable pair admits no stabilizing solution and raises
    NumericalError naming a witness eigenvalue.
    """
    from .system import pbh_detectable

    det = pbh_detectable(fm.C, fm.Omega_eff, tol)
    if not det:
        bad = ", ".join("%.6g%+.6gj" % (w[0].real, w[0].imag) for w in det.witnesses)
        raise NumericalError(
            "no stabilizing solution: (C, Omega) undetectable at eigenvalue(s) %s" % bad
        )
    Ah = fm.Omega_eff.T
    Gh = fm.C.T @ fm.C
    Qh = check_symmetric(fm.Noise_eff, tol, name="Noise_eff")

    def heterodyne_seed():
        het = heterodyne(fm.model.n_channels)
        if np.linalg.norm(het.U - fm.unravelling.U) <= 1e-12:
            return None
        fm_het = filter_model(fm.model, het, tol)
        return _stable_subspace_solution(
            fm_het.Omega_eff.T, fm_het.C.T @ fm_het.C, fm_het.Noise_eff, tol
        )

    W, res, closed = _solve_care_core(Ah, Gh, Qh, tol, seed_factories=(heterodyne_seed,))
    return RiccatiSolution(
        X=W,
        residual=float(res),
        closed_loop_eigs=closed,
        stabilizing=certify_stabilizing(closed, tol),
    )


def solve_control_care(A, B, P, Q, tol: ToleranceConfig = DEFAULT_TOL) -> RiccatiSolution:
    """Stabilizing solution of P + A^T Y + Y A = Y B Q^-1 B^T Y.

    Requires Q symmetric positive definite (the singular-Q regulator
    goes through the cheap-control pathway instead), (A, B)
    stabilizable and (P, A) detectable, both by PBH tests.
    """
    from .errors import ValidationError
    from .linalg import as_matrix, is_psd
    from .system import pbh_detectable

    Am = as_matrix(A, "A")
    Bm = as_matrix(B, "B")
    Pm = check_symmetric(P, tol, name="P")
    Qm = check_symmetric(Q, tol, name="Q")
    q_eigs = np.linalg.eigvalsh(Qm)
    if q_eigs[0] <= tol.psd_tol * (1.0 + q_eigs[-1]):
        raise ValidationError(
            "Q must be positive definite (min eigenvalue %.3e); a singular "
            "control cost is handled by the cheap-control pathway" % q_eigs[0]
        )
    if not is_psd(Pm, tol):
        raise ValidationError("P must be positive semidefinite")
    stab = pbh_detectable(Bm.T, Am.T, tol)
    if not stab:
        bad = ", ".join("%.6g%+.6gj" % (w[0].real, w[0].imag) for w in stab.witnesses)
        raise NumericalError("(A, B) not stabilizable at eigenvalue(s) %s" % bad)
    det = pbh_detectable(Pm, Am, tol)
    if not det:
        bad = ", ".join("%.6g%+.6gj" % (w[0].real, w[0].imag) for w in det.witnesses)
        raise NumericalError("(P, A) not detectable at eigenvalue(s) %s" % bad)

    Gh = Bm @ np.linalg.solve(Qm, Bm.T)
    Gh = 0.5 * (Gh + Gh.T)
    Y, res, closed = _solve_care_core(Am, Gh, Pm, tol)
    return RiccatiSolution(
        X=Y,
        residual=float(res),
        closed_loop_eigs=closed,
        stabilizing=certify_stabilizing(closed, tol),
    )
