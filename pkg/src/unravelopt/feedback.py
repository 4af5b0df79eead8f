"""Feedback-law synthesis from a steady-state filter.

Two designs are supported.  The optimal (certainty-equivalence) law
feeds the conditional mean back through the regulator gain
K = Q^-1 B^T Y.  The Markovian law feeds the raw measurement current
back through a static gain F chosen so that B F = -(W C^T + Gamma^T),
which cancels the conditioning noise out of the mean dynamics and
leaves d<x>_c = M <x>_c dt with M = A + B F C.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .linalg import DEFAULT_TOL, ToleranceConfig, as_matrix, check_symmetric, is_psd, solve_lyapunov
from .riccati import RiccatiSolution, certify_stabilizing
from .unravelling import FilterModel

__all__ = [
    "ControlProblem",
    "ControllerDesign",
    "optimal_gain",
    "optimal_cost",
    "markovian_gain",
    "closed_loop_matrix",
    "design_optimal",
    "design_markovian",
]

# Threshold on singular-value ratio below which a matrix is treated as
# rank deficient when classifying B.
_RANK_RTOL = 1e-10


@dataclass(frozen=True)
class ControlProblem:
    """Quadratic cost structure h = <x^T P x>_c + u^T Q u.

    Q=None selects the cheap-control limit (the cost keeps only the
    state term and the regulator becomes exact mean zeroing), which
    requires B to have full row rank.
    """

    P: np.ndarray
    Q: np.ndarray | None
    B: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "P", check_symmetric(self.P, name="P"))
        object.__setattr__(self, "B", as_matrix(self.B, "B"))
        if self.B.ndim != 2 or self.B.shape[1] < 1:
            raise ValidationError("B must be a 2N x M matrix with M >= 1")
        if self.P.shape[0] != self.B.shape[0]:
            raise ValidationError(
                "P is %r but B has %d rows" % (self.P.shape, self.B.shape[0])
            )
        check = is_psd(self.P)
        if not check:
            raise ValidationError(
                "P must be PSD (min eigenvalue %.3e)" % check.min_eigenvalue
            )
        if self.Q is None:
            s = np.linalg.svd(self.B, compute_uv=False)
            if len(s) < self.B.shape[0] or s[self.B.shape[0] - 1] <= _RANK_RTOL * s[0]:
                raise ValidationError(
                    "the cheap-control (Q -> 0) pathway requires B with full row rank"
                )
        else:
            Q = check_symmetric(self.Q, name="Q")
            object.__setattr__(self, "Q", Q)
            if Q.shape[0] != self.B.shape[1]:
                raise ValidationError(
                    "Q is %r but B has %d columns" % (Q.shape, self.B.shape[1])
                )
            qcheck = is_psd(Q)
            if not qcheck:
                raise ValidationError(
                    "Q must be PSD (min eigenvalue %.3e)" % qcheck.min_eigenvalue
                )

    @property
    def q_zero_limit(self) -> bool:
        return self.Q is None


@dataclass(frozen=True)
class ControllerDesign:
    """A synthesized feedback law together with its certificates.

    Exactly one of K (optimal kind, acting on the conditional mean) and
    F (Markovian kind, acting on the current) is set.  M_closed is the
    conditional-mean drift under the law; W is the filter covariance
    the synthesis used; cancellation_residual is ||B F + W C^T +
    Gamma^T|| for Markovian designs (0.0 for optimal ones).
    """

    kind: str
    K: np.ndarray | None
    F: np.ndarray | None
    M_closed: np.ndarray
    predicted_cost: float
    W: np.ndarray
    cancellation_residual: float


def optimal_gain(Y: RiccatiSolution, B, Q, tol: ToleranceConfig = DEFAULT_TOL) -> np.ndarray:
    """Certainty-equivalence regulator gain K = Q^-1 B^T Y."""
    Bm = as_matrix(B, "B")
    Qm = check_symmetric(Q, tol, name="Q")
    q_eigs = np.linalg.eigvalsh(Qm)
    if q_eigs[0] <= tol.psd_tol * (1.0 + abs(q_eigs[-1])):
        raise ValidationError(
            "Q is singular; cheap-control problems use the Markovian pathway"
        )
    return np.linalg.solve(Qm, Bm.T @ Y.X)


def optimal_cost(
    Y: RiccatiSolution | None,
    B,
    Q,
    D,
    W,
    P=None,
    tol: ToleranceConfig = DEFAULT_TOL,
) -> float:
    """Steady-state cost tr[Y B Q^-1 B^T Y W] + tr[Y D].

    With Q=None (cheap control) the cost collapses to tr[P W], in which
    case P must be supplied and Y is unused.
    """
    Wm = check_symmetric(W, tol, name="W")
    if Q is None:
        if P is None:
            raise ValidationError("the cheap-control cost tr[P W] needs P")
        Pm = check_symmetric(P, tol, name="P")
        return float(np.trace(Pm @ Wm))
    Bm = as_matrix(B, "B")
    Qm = check_symmetric(Q, tol, name="Q")
    Dm = check_symmetric(D, tol, name="D")
    YBQBY = Y.X @ Bm @ np.linalg.solve(Qm, Bm.T @ Y.X)
    return float(np.trace(YBQBY @ Wm) + np.trace(Y.X @ Dm))


def markovian_gain(W, fm: FilterModel, B, tol: ToleranceConfig = DEFAULT_TOL) -> np.ndarray:
    """Current-feedback gain solving B F = -(W C^T + Gamma^T).

    For square B the linear solve is exact; for rectangular B with full
    row rank the right pseudo-inverse gives the least-squares gain and
    the caller should inspect the cancellation residual.  A rank
    deficient B admits no cancelling gain and raises.
    """
    Bm = as_matrix(B, "B")
    Wm = check_symmetric(W, tol, name="W")
    target = -(Wm @ fm.C.T + fm.Gamma.T)
    s = np.linalg.svd(Bm, compute_uv=False)
    if len(s) < Bm.shape[0] or s[Bm.shape[0] - 1] <= _RANK_RTOL * max(1.0, s[0]):
        raise ValidationError(
            "B does not have full row rank, so the conditioning noise "
            "cannot be cancelled by current feedback"
        )
    if Bm.shape[0] == Bm.shape[1]:
        return np.linalg.solve(Bm, target)
    return Bm.T @ np.linalg.solve(Bm @ Bm.T, target)


def closed_loop_matrix(design: ControllerDesign, fm: FilterModel, A, B):
    """Conditional-mean drift under the design.

    Markovian kind returns M = A + B F C.  Optimal kind returns the
    pair (A - B K, A - (W C^T + Gamma^T) C): the regulated mean
    dynamics and the filter error dynamics whose spectra together make
    up the closed loop.
    """
    Am = as_matrix(A, "A")
    Bm = as_matrix(B, "B")
    if design.kind == "markovian":
        return Am + Bm @ design.F @ fm.C
    if design.kind == "optimal":
        mean = Am - Bm @ design.K
        error = Am - (design.W @ fm.C.T + fm.Gamma.T) @ fm.C
        return mean, error
    raise ValidationError("unknown design kind %r" % (design.kind,))


def design_optimal(
    Y: RiccatiSolution,
    control: ControlProblem,
    fm: FilterModel,
    W,
    tol: ToleranceConfig = DEFAULT_TOL,
) -> ControllerDesign:
    """Assemble the certainty-equivalence design for an invertible-Q cost."""
    if control.q_zero_limit:
        raise ValidationError(
            "the cheap-control limit has no finite regulator gain; "
            "use the Markovian design"
        )
    K = optimal_gain(Y, control.B, control.Q, tol)
    M_closed = fm.model.A - control.B @ K
    if not certify_stabilizing(np.linalg.eigvals(M_closed), tol):
        raise NumericalError("regulated mean dynamics A - B K is not strictly stable")
    cost = optimal_cost(Y, control.B, control.Q, fm.model.D, W, tol=tol)
    return ControllerDesign(
        kind="optimal",
        K=K,
        F=None,
        M_closed=M_closed,
        predicted_cost=float(cost),
        W=check_symmetric(W, tol, name="W"),
        cancellation_residual=0.0,
    )


def design_markovian(
    W,
    fm: FilterModel,
    control: ControlProblem,
    tol: ToleranceConfig = DEFAULT_TOL,
) -> ControllerDesign:
    """Assemble the current-feedback design that cancels conditioning noise.

    The predicted cost is tr[P W] under exact cancellation; when the
    cancellation residual is nonzero (rectangular B), the leftover
    mean-process covariance is obtained from a Lyapunov solve and its
    P-weighted trace added.
    """
    Wm = check_symmetric(W, tol, name="W")
    F = markovian_gain(Wm, fm, control.B, tol)
    M = fm.model.A + control.B @ F @ fm.C
    if not certify_stabilizing(np.linalg.eigvals(M), tol):
        raise NumericalError(
            "Markovian closed loop A + B F C is not strictly stable; "
            "the filter covariance used for synthesis must be stabilizing"
        )
    leftover = control.B @ F + Wm @ fm.C.T + fm.Gamma.T
    residual = float(np.linalg.norm(leftover))
    cost = float(np.trace(control.P @ Wm))
    if residual > 1e-12 * (1.0 + np.linalg.norm(Wm)):
        spread = solve_lyapunov(M, leftover @ leftover.T, tol)
        cost += float(np.trace(control.P @ spread))
    return ControllerDesign(
        kind="markovian",
        K=None,
        F=F,
        M_closed=M,
        predicted_cost=cost,
        W=Wm,
        cancellation_residual=residual,
    )
