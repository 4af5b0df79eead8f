"""System description and unconditional moment dynamics.

A system is specified by a quadratic Hamiltonian matrix G, a complex
coupling matrix giving the Lindblad operators as linear forms in the
quadratures, and an actuation matrix B.  From these the drift A and
diffusion D of the first and second moments follow; the conditional
(measurement-dependent) terms live in the unravelling module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .linalg import (
    DEFAULT_TOL,
    ToleranceConfig,
    as_matrix,
    check_symmetric,
    hermitian_embed,
    is_psd,
    symplectic_form,
)

__all__ = [
    "SystemSpec",
    "MomentModel",
    "validate_spec",
    "derive_moment_model",
    "DetectabilityResult",
    "pbh_detectable",
    "unconditional_evolution",
]


@dataclass(frozen=True)
class SystemSpec:
    """Linear open quantum system in quadrature form.

    Parameters
    ----------
    hbar : float
        Unit of action; every second moment scales with it.
    G : ndarray, shape (2N, 2N)
        Symmetric Hamiltonian matrix, H = x^T G x / 2.
    C_re, C_im : ndarray, shape (L, 2N)
        Real and imaginary parts of the coupling matrix c = C x
        defining the L Lindblad operators.
    B : ndarray, shape (2N, M)
        Actuation matrix multiplying the control input.
    """

    hbar: float
    G: np.ndarray
    C_re: np.ndarray
    C_im: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "G", np.array(self.G, dtype=float))
        object.__setattr__(self, "C_re", np.atleast_2d(np.array(self.C_re, dtype=float)))
        object.__setattr__(self, "C_im", np.atleast_2d(np.array(self.C_im, dtype=float)))
        object.__setattr__(self, "B", np.atleast_2d(np.array(self.B, dtype=float)))

    @classmethod
    def from_complex(cls, hbar, G, C, B) -> "SystemSpec":
        """Build a spec from the complex coupling matrix directly."""
        C = np.atleast_2d(np.asarray(C, dtype=complex))
        return cls(hbar=hbar, G=G, C_re=C.real.copy(), C_im=C.imag.copy(), B=B)

    @property
    def n_modes(self) -> int:
        return self.G.shape[0] // 2

    @property
    def n_channels(self) -> int:
        return self.C_re.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def C(self) -> np.ndarray:
        """Complex coupling matrix, shape (L, 2N)."""
        return self.C_re + 1j * self.C_im


def validate_spec(spec: SystemSpec, tol: ToleranceConfig = DEFAULT_TOL) -> None:
    """Check shapes, symmetry and finiteness, raising with every finding.

    All problems are collected into a single ValidationError so a bad
    input file is diagnosed in one pass.
    """
    findings = []
    if not (isinstance(spec.hbar, (int, float)) and np.isfinite(spec.hbar) and spec.hbar > 0):
        findings.append("hbar must be a positive finite number, got %r" % (spec.hbar,))
    G = spec.G
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        findings.append("G must be square, got shape %r" % (G.shape,))
    elif G.shape[0] == 0 or G.shape[0] % 2:
        findings.append("G must act on 2N quadratures with N >= 1, got shape %r" % (G.shape,))
    else:
        if not np.all(np.isfinite(G)):
            findings.append("G contains non-finite entries")
        elif np.linalg.norm(G - G.T) > tol.residual_tol * (1.0 + np.linalg.norm(G)):
            findings.append("G must be symmetric")
        dim = G.shape[0]
        for name in ("C_re", "C_im"):
            M = getattr(spec, name)
            if M.ndim != 2 or M.shape[1] != dim or M.shape[0] < 1:
                findings.append(
                    "%s must have shape (L, %d) with L >= 1, got %r" % (name, dim, M.shape)
                )
            elif not np.all(np.isfinite(M)):
                findings.append("%s contains non-finite entries" % name)
        if spec.C_re.shape != spec.C_im.shape:
            findings.append(
                "C_re and C_im must have the same shape, got %r and %r"
                % (spec.C_re.shape, spec.C_im.shape)
            )
        if spec.B.ndim != 2 or spec.B.shape[0] != dim or spec.B.shape[1] < 1:
            findings.append("B must have shape (%d, M) with M >= 1, got %r" % (dim, spec.B.shape))
        elif not np.all(np.isfinite(spec.B)):
            findings.append("B contains non-finite entries")
    if findings:
        raise ValidationError("invalid system: " + "; ".join(findings))


@dataclass(frozen=True)
class MomentModel:
    """Unconditional moment dynamics derived from a SystemSpec.

    d<x>/dt = A <x> + B u and dV/dt = A V + V A^T + D, with
    A = Sigma (G + Im[C^dag C]) and D = hbar Sigma Re[C^dag C] Sigma^T.
    C_bar stacks the real over the imaginary coupling rows, which is
    the real form the conditional equations are written in.
    """

    hbar: float
    A: np.ndarray
    D: np.ndarray
    C_bar: np.ndarray
    sigma: np.ndarray = field(repr=False)

    @property
    def n_modes(self) -> int:
        return self.A.shape[0] // 2

    @property
    def n_channels(self) -> int:
        return self.C_bar.shape[0] // 2


def derive_moment_model(spec: SystemSpec, tol: ToleranceConfig = DEFAULT_TOL) -> MomentModel:
    """Form the drift A, diffusion D and stacked coupling C_bar.

    D is symmetrized exactly and certified PSD before returning; a
    diffusion matrix failing that check means the coupling inputs were
    inconsistent.
    """
    validate_spec(spec, tol)
    sigma = symplectic_form(spec.n_modes)
    re_cc = spec.C_re.T @ spec.C_re + spec.C_im.T @ spec.C_im
    im_cc = spec.C_re.T @ spec.C_im - spec.C_im.T @ spec.C_re
    A = sigma @ (spec.G + im_cc)
    D = spec.hbar * sigma @ re_cc @ sigma.T
    D = 0.5 * (D + D.T)
    check = is_psd(D, tol)
    if not check:
        raise NumericalError(
            "diffusion matrix is not PSD (min eigenvalue %.3e)" % check.min_eigenvalue
        )
    C_bar = np.vstack([spec.C_re, spec.C_im])
    return MomentModel(hbar=float(spec.hbar), A=A, D=D, C_bar=C_bar, sigma=sigma)


@dataclass(frozen=True)
class DetectabilityResult:
    """Outcome of a PBH test, truthy iff every unstable mode is observed.

    witnesses lists (eigenvalue, eigenvector) pairs of modes with
    Re(lambda) >= -stability_margin that the output matrix cannot see.
    """

    ok: bool
    witnesses: tuple

    def __bool__(self) -> bool:
        return self.ok


def pbh_detectable(C, A, tol: ToleranceConfig = DEFAULT_TOL) -> DetectabilityResult:
    """Eigenvector form of the Popov-Belevitch-Hautus detectability test.

    The pair (C, A) is detectable when C v != 0 for every eigenvector v
    of A whose eigenvalue has real part >= -stability_margin.
    """
    Cm = as_matrix(C, "C")
    Am = as_matrix(A, "A")
    if Am.shape[0] != Am.shape[1] or Cm.shape[1] != Am.shape[0]:
        raise ValidationError(
            "incompatible shapes for PBH test: C %r, A %r" % (Cm.shape, Am.shape)
        )
    vals, vecs = np.linalg.eig(Am)
    scale = 1.0 + np.linalg.norm(Cm, 2)
    witnesses = []
    for k in range(len(vals)):
        if vals[k].real < -tol.stability_margin:
            continue
        v = vecs[:, k]
        v = v / np.linalg.norm(v)
        if np.linalg.norm(Cm @ v) <= tol.residual_tol * scale:
            witnesses.append((complex(vals[k]), v.copy()))
    return DetectabilityResult(not witnesses, tuple(witnesses))


def _piecewise_input(u, n_intervals, n_inputs):
    if u is None:
        return np.zeros((n_intervals, n_inputs))
    arr = np.asarray(u, dtype=float)
    if arr.ndim == 1 and arr.shape == (n_inputs,):
        return np.tile(arr, (n_intervals, 1))
    if arr.shape == (n_intervals, n_inputs):
        return arr
    raise ValidationError(
        "u must be None, shape (%d,), or shape (%d, %d); got %r"
        % (n_inputs, n_intervals, n_inputs, arr.shape)
    )


def unconditional_evolution(
    model: MomentModel,
    B,
    u,
    x0,
    V0,
    t_grid,
    tol: ToleranceConfig = DEFAULT_TOL,
):
    """Integrate the unconditional moments over a time grid.

    Parameters
    ----------
    model : MomentModel
    B : ndarray, shape (2N, M)
        Actuation matrix.
    u : None, (M,) or (T-1, M) array
        Piecewise-constant input on the grid intervals.
    x0 : ndarray, shape (2N,)
        Initial mean.
    V0 : ndarray, shape (2N, 2N)
        Initial covariance; must be symmetric and satisfy the physical
        uncertainty condition V0 + i(hbar/2)Sigma >= 0.
    t_grid : increasing 1-d array of times, t_grid[0] = 0.

    Returns
    -------
    means : ndarray, shape (T, 2N)
    covs : ndarray, shape (T, 2N, 2N)
        Covariances are symmetrized at every internal step, and the
        uncertainty condition is re-checked at every grid point.

    Notes
    -----
    Classic fourth-order Runge-Kutta with internal step bounded by
    min(grid spacing, 1e-3 / ||A||), which keeps the local truncation
    error far below the package tolerances for the scales in play.
    """
    dim = model.A.shape[0]
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or len(t) < 2 or np.any(np.diff(t) <= 0):
        raise ValidationError("t_grid must be an increasing 1-d array with at least 2 points")
    Bm = as_matrix(B, "B")
    if Bm.shape[0] != dim:
        raise ValidationError("B must have %d rows, got %r" % (dim, Bm.shape))
    x = np.asarray(x0, dtype=float).reshape(dim)
    V = check_symmetric(V0, tol, name="V0")
    if V.shape[0] != dim:
        raise ValidationError("V0 must be %d x %d" % (dim, dim))
    check = is_psd(hermitian_embed(V, model.hbar, tol), tol)
    if not check:
        raise ValidationError(
            "V0 violates the uncertainty condition (min eigenvalue %.3e)" % check.min_eigenvalue
        )
    U = _piecewise_input(u, len(t) - 1, Bm.shape[1])

    A = model.A
    D = model.D
    a_norm = np.linalg.norm(A, 2)
    h_cap = np.inf if a_norm == 0 else 1e-3 / a_norm

    means = np.empty((len(t), dim))
    covs = np.empty((len(t), dim, dim))
    means[0] = x
    covs[0] = V

    def f_mean(x, bu):
        return A @ x + bu

    def f_cov(V):
        return A @ V + V @ A.T + D

    for k in range(len(t) - 1):
        dt = t[k + 1] - t[k]
        n_sub = max(1, int(np.ceil(dt / min(dt, h_cap))))
        h = dt / n_sub
        bu = Bm @ U[k]
        for _ in range(n_sub):
            k1x = f_mean(x, bu)
            k1v = f_cov(V)
            k2x = f_mean(x + 0.5 * h * k1x, bu)
            k2v = f_cov(V + 0.5 * h * k1v)
            k3x = f_mean(x + 0.5 * h * k2x, bu)
            k3v = f_cov(V + 0.5 * h * k2v)
            k4x = f_mean(x + h * k3x, bu)
            k4v = f_cov(V + h * k3v)
            x = x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
            V = V + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
            V = 0.5 * (V + V.T)
        check = is_psd(hermitian_embed(V, model.hbar, tol), tol)
        if not check:
            raise NumericalError(
                "uncertainty condition violated at t=%.6g (min eigenvalue %.3e)"
                % (t[k + 1], check.min_eigenvalue)
            )
        means[k + 1] = x
        covs[k + 1] = V
    return means, covs
