"""Shared linear-algebra primitives.

Everything here works on real ndarrays in the quadrature ordering
x = (q1, p1, ..., qN, pN), where the symplectic form is the block
diagonal of [[0, 1], [-1, 0]].  Complex structure only ever enters
through the 2x2 rotation blocks, so all checks stay in real arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

__all__ = [
    "ToleranceConfig",
    "DEFAULT_TOL",
    "PsdResult",
    "symplectic_form",
    "involution",
    "is_psd",
    "hermitian_embed",
    "psd_sqrt",
    "solve_lyapunov",
]


@dataclass(frozen=True)
class ToleranceConfig:
    """Numerical tolerances shared across the package.

    psd_tol bounds how far below zero an eigenvalue may sit before a
    matrix stops counting as positive semidefinite, residual_tol bounds
    accepted equation residuals (both relative to 1 + matrix scale),
    and stability_margin is the spectral-abscissa slack used when
    certifying strict stability.
    """

    psd_tol: float = 1e-9
    residual_tol: float = 1e-9
    stability_margin: float = 1e-8

    def __post_init__(self):
        for name in ("psd_tol", "residual_tol", "stability_margin"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and value > 0):
                raise ValidationError("%s must be a positive number, got %r" % (name, value))


DEFAULT_TOL = ToleranceConfig()


@dataclass(frozen=True)
class PsdResult:
    """Outcome of a semidefiniteness check, truthy iff it passed.

    When the check fails, ``witness`` is a unit vector achieving the
    most negative Rayleigh quotient ``min_eigenvalue``.
    """

    ok: bool
    min_eigenvalue: float
    witness: np.ndarray

    def __bool__(self) -> bool:
        return self.ok


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-d float or complex ndarray, rejecting non-finite entries."""
    A = np.asarray(M)
    if A.ndim != 2:
        raise ValidationError("%s must be 2-dimensional, got shape %r" % (name, A.shape))
    if not np.issubdtype(A.dtype, np.number):
        raise ValidationError("%s must be numeric" % name)
    A = A.astype(complex if np.iscomplexobj(A) else float)
    if not np.all(np.isfinite(A)):
        raise ValidationError("%s contains non-finite entries" % name)
    return A


def check_symmetric(M, tol: ToleranceConfig = DEFAULT_TOL, name: str = "matrix") -> np.ndarray:
    """Validate symmetry within residual_tol and return the symmetrized matrix."""
    A = as_matrix(M, name)
    if A.shape[0] != A.shape[1]:
        raise ValidationError("%s must be square, got shape %r" % (name, A.shape))
    scale = 1.0 + np.linalg.norm(A)
    skew = np.linalg.norm(A - A.T)
    if skew > tol.residual_tol * scale:
        raise ValidationError(
            "%s is not symmetric: asymmetry %.3e exceeds %.3e"
            % (name, skew, tol.residual_tol * scale)
        )
    return 0.5 * (A + A.T)


def symplectic_form(n_modes: int) -> np.ndarray:
    """Return the 2N x 2N symplectic form for the (q1, p1, ...) ordering.

    The result is the direct sum of N copies of [[0, 1], [-1, 0]],
    stored with exact integer entries.
    """
    if not isinstance(n_modes, (int, np.integer)) or n_modes < 1:
        raise ValidationError("n_modes must be a positive integer, got %r" % (n_modes,))
    sigma = np.zeros((2 * n_modes, 2 * n_modes))
    for k in range(n_modes):
        sigma[2 * k, 2 * k + 1] = 1.0
        sigma[2 * k + 1, 2 * k] = -1.0
    return sigma


def involution(n_channels: int) -> np.ndarray:
    """Return the 2L x 2L block matrix [[0, I], [-I, 0]].

    It exchanges the stacked real and imaginary measurement blocks and
    squares to minus the identity.
    """
    if not isinstance(n_channels, (int, np.integer)) or n_channels < 1:
        raise ValidationError("n_channels must be a positive integer, got %r" % (n_channels,))
    eye = np.eye(n_channels)
    zero = np.zeros((n_channels, n_channels))
    return np.block([[zero, eye], [-eye, zero]])


def is_psd(M, tol: ToleranceConfig = DEFAULT_TOL) -> PsdResult:
    """Check whether a symmetric matrix is PSD within tolerance.

    Parameters
    ----------
    M : array_like
        Square symmetric (or Hermitian) matrix.
    tol : ToleranceConfig
        The matrix passes when its minimum eigenvalue is at least
        ``-psd_tol * (1 + ||M||)``.

    Returns
    -------
    PsdResult
        Truthy on success; carries the minimum eigenvalue and the
        corresponding eigenvector as a witness either way.
    """
    A = check_symmetric(M, tol, name="matrix") if not np.iscomplexobj(M) else _check_hermitian(M, tol)
    vals, vecs = np.linalg.eigh(A)
    scale = 1.0 + np.linalg.norm(A, 2)
    ok = bool(vals[0] >= -tol.psd_tol * scale)
    return PsdResult(ok, float(vals[0]), vecs[:, 0])


def _check_hermitian(M, tol):
    A = as_matrix(M, "matrix")
    scale = 1.0 + np.linalg.norm(A)
    if np.linalg.norm(A - A.conj().T) > tol.residual_tol * scale:
        raise ValidationError("matrix is not Hermitian")
    return 0.5 * (A + A.conj().T)


def hermitian_embed(W, hbar: float, tol: ToleranceConfig = DEFAULT_TOL) -> np.ndarray:
    """Embed the complex condition W + i(hbar/2)Sigma >= 0 as a real matrix.

    Returns the 4N x 4N symmetric matrix
    ``[[W, -hbar/2 Sigma], [hbar/2 Sigma, W]]`` whose positive
    semidefiniteness is equivalent to that of the Hermitian matrix
    W + i(hbar/2)Sigma.
    """
    Ws = check_symmetric(W, tol, name="W")
    if hbar <= 0:
        raise ValidationError("hbar must be positive, got %r" % (hbar,))
    if Ws.shape[0] % 2:
        raise ValidationError("W must act on an even number of quadratures")
    sigma = symplectic_form(Ws.shape[0] // 2)
    half = 0.5 * hbar * sigma
    return np.block([[Ws, -half], [half, Ws]])


def psd_sqrt(M, tol: ToleranceConfig = DEFAULT_TOL) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in ``[-psd_tol * (1 + ||M||), 0)`` are clamped to zero;
    anything more negative raises NumericalError.
    """
    A = check_symmetric(M, tol, name="matrix")
    vals, vecs = np.linalg.eigh(A)
    floor = -tol.psd_tol * (1.0 + np.linalg.norm(A, 2))
    if vals[0] < floor:
        raise NumericalError(
            "matrix is not PSD: minimum eigenvalue %.3e is below %.3e" % (vals[0], floor)
        )
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return 0.5 * (root + root.T)


def solve_lyapunov(A, Q, tol: ToleranceConfig = DEFAULT_TOL) -> np.ndarray:
    """Solve A X + X A^T + Q = 0 for symmetric X.

    Parameters
    ----------
    A : array_like
        Strictly stable square matrix (every eigenvalue real part
        below ``-stability_margin``).
    Q : array_like
        Symmetric right-hand side.

    Returns
    -------
    ndarray
        The unique symmetric solution, with equation residual verified
        against ``residual_tol * (1 + ||Q||)``.

    Raises
    ------
    NumericalError
        If A is not strictly stable, in which case no stationary
        unconditional covariance exists.
    """
    An = as_matrix(A, "A")
    Qs = check_symmetric(Q, tol, name="Q")
    n = An.shape[0]
    if An.shape[0] != An.shape[1] or Qs.shape[0] != n:
        raise ValidationError("A and Q must be square with matching shape")
    abscissa = np.max(np.linalg.eigvals(An).real)
    if abscissa >= -tol.stability_margin:
        raise NumericalError(
            "drift matrix has spectral abscissa %.3e >= -%.1e: "
            "no stationary unconditional covariance exists" % (abscissa, tol.stability_margin)
        )
    # Row-major vec: vec(AX) = (A (x) I) vec(X), vec(X A^T) = (I (x) A) vec(X).
    eye = np.eye(n)
    K = np.kron(An, eye) + np.kron(eye, An)
    X = np.linalg.solve(K, -Qs.reshape(-1)).reshape(n, n)
    X = 0.5 * (X + X.T)
    residual = np.linalg.norm(An @ X + X @ An.T + Qs)
    bound = tol.residual_tol * (1.0 + np.linalg.norm(Qs))
    if residual > bound:
        raise NumericalError(
            "Lyapunov residual %.3e exceeds %.3e; system is too ill-conditioned"
            % (residual, bound)
        )
    return X
