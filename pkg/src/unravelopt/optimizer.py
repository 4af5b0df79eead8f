"""Cost minimization over achievable conditional covariances.

The steady-state control cost depends on the measurement strategy only
through the conditional covariance W, and the achievable W are exactly
the symmetric matrices satisfying two linear matrix inequalities:

    (i)   W + i(hbar/2) Sigma >= 0          (physicality)
    (ii)  D + A W + W A^T >= 0              (realizability)

Minimizing tr[Lambda W] over that set is a small dense semidefinite
program, solved here by a log-det barrier path-following method over
the upper-triangle entries of W.  The optimizing strategy is then
pulled back out of W, and everything is cross-checkable against a
brute-force scan for single-mode single-channel problems.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .feedback import ControlProblem
from .linalg import (
    DEFAULT_TOL,
    ToleranceConfig,
    check_symmetric,
    hermitian_embed,
    is_psd,
    solve_lyapunov,
    symplectic_form,
)
from .riccati import RiccatiSolution, solve_control_care, solve_filter_care
from .system import MomentModel, SystemSpec, pbh_detectable
from .unravelling import (
    UnravellingMatrix,
    compose_U,
    filter_model,
    heterodyne,
    recover_U,
)

__all__ = [
    "CostWeight",
    "OptimizationResult",
    "OracleResult",
    "cost_weight",
    "solve_sdp",
    "grid_oracle",
    "optimize_unravelling",
]

logger = logging.getLogger(__name__)

_MU_SHRINK = 0.1
_MAX_NEWTON_INNER = 80
_MAX_MU_STAGES = 60


@dataclass(frozen=True)
class CostWeight:
    """Weight of W in the steady-state cost m = tr[Lambda W] + constant.

    For an invertible input cost Q the weight is Lambda = Y B Q^-1 B^T Y
    with constant tr[Y D]; in the cheap-control limit it is the state
    weight P itself with zero constant.
    """

    Lambda: np.ndarray
    constant_term: float

    def __post_init__(self):
        object.__setattr__(self, "Lambda", check_symmetric(self.Lambda, name="Lambda"))
        check = is_psd(self.Lambda)
        if not check:
            raise ValidationError(
                "Lambda must be PSD (min eigenvalue %.3e)" % check.min_eigenvalue
            )


@dataclass(frozen=True)
class OptimizationResult:
    """Certified outcome of the covariance optimization.

    lmi_residuals holds the minimum eigenvalues of the two LMI blocks
    at W_star (both must clear -psd_tol); barrier_mu_final is the last
    barrier parameter, which bounds the duality gap by
    mu * (total LMI dimension).  U_star and recover_residual are
    filled by the full pipeline, not by solve_sdp alone.
    """

    W_star: np.ndarray
    m_star: float
    lmi_residuals: tuple
    barrier_mu_final: float
    U_star: UnravellingMatrix | None = None
    recover_residual: float | None = None
    recover_flagged: bool = False
    W_resolved: np.ndarray | None = None
    control_solution: RiccatiSolution | None = None
    newton_iterations: int = 0


def cost_weight(
    Y: RiccatiSolution | None,
    B,
    Q,
    D,
    P=None,
    tol: ToleranceConfig = DEFAULT_TOL,
) -> CostWeight:
    """Reduce a control problem to its W-weight.

    Q=None selects the cheap-control pathway Lambda = P, constant 0
    (P required); otherwise Lambda = Y B Q^-1 B^T Y and the constant is
    tr[Y D].  A singular Q without the pathway flag is rejected.
    """
    if Q is None:
        if P is None:
            raise ValidationError("the cheap-control pathway requires P")
        return CostWeight(Lambda=check_symmetric(P, tol, name="P"), constant_term=0.0)
    Qm = check_symmetric(Q, tol, name="Q")
    q_eigs = np.linalg.eigvalsh(Qm)
    if q_eigs[0] <= tol.psd_tol * (1.0 + abs(q_eigs[-1])):
        raise ValidationError(
            "Q is singular (min eigenvalue %.3e); pass Q=None to use the "
            "cheap-control pathway" % q_eigs[0]
        )
    if Y is None:
        raise ValidationError("an invertible Q requires the regulator solution Y")
    Bm = np.asarray(B, dtype=float)
    Dm = check_symmetric(D, tol, name="D")
    Lam = Y.X @ Bm @ np.linalg.solve(Qm, Bm.T @ Y.X)
    Lam = 0.5 * (Lam + Lam.T)
    return CostWeight(Lambda=Lam, constant_term=float(np.trace(Y.X @ Dm)))


def _sym_basis(d):
    """Orthogonal basis E_k of symmetric d x d matrices (upper triangle order)."""
    basis = []
    for i in range(d):
        for j in range(i, d):
            E = np.zeros((d, d))
            if i == j:
                E[i, i] = 1.0
            else:
                E[i, j] = E[j, i] = 1.0
            basis.append(E)
    return basis


def _mat_of(w, basis, d):
    W = np.zeros((d, d))
    for c, E in zip(w, basis):
        W += c * E
    return W


def _vec_of(W, d):
    return np.array([W[i, j] for i in range(d) for j in range(i, d)])


def _chol_or_none(F):
    try:
        return np.linalg.cholesky(F)
    except np.linalg.LinAlgError:
        return None


def _feasible_start(weight, model, tol):
    """Strictly feasible W for the barrier, from the heterodyne filter.

    The heterodyne steady state saturates the physicality LMI whenever
    the state is pure, so it is nudged by delta*I; if the second LMI is
    rank deficient there (possible with fewer channels than modes) a
    Lyapunov interior point and blends toward it are tried as well.
    """
    hbar = model.hbar
    candidates = []
    try:
        het = filter_model(model, heterodyne(model.n_channels), tol)
        W_het = solve_filter_care(het, tol).X
        for delta in (1e-6, 1e-5, 1e-4, 1e-3):
            candidates.append(W_het + delta * hbar * np.eye(W_het.shape[0]))
    except NumericalError as exc:
        logger.debug("heterodyne start unavailable: %s", exc)
        W_het = None
    if np.max(np.linalg.eigvals(model.A).real) < -tol.stability_margin:
        try:
            eps = 1e-3 * (1.0 + np.linalg.norm(model.D))
            W_lyap = solve_lyapunov(model.A, model.D - eps * np.eye(model.D.shape[0]), tol)
            candidates.append(W_lyap)
            if W_het is not None:
                for t in (0.5, 0.9):
                    candidates.append(t * W_lyap + (1 - t) * W_het)
        except NumericalError:
            pass
    for W0 in candidates:
        f1 = np.linalg.eigvalsh(hermitian_embed(W0, hbar, tol))[0]
        F2 = model.D + model.A @ W0 + W0 @ model.A.T
        f2 = np.linalg.eigvalsh(0.5 * (F2 + F2.T))[0]
        if f1 > 0.0 and f2 > 0.0:
            return W0
    raise NumericalError(
        "could not construct a strictly feasible starting covariance; "
        "the problem appears degenerate despite passing detectability"
    )


def solve_sdp(
    weight: CostWeight,
    model: MomentModel,
    hbar: float | None = None,
    tol: ToleranceConfig = DEFAULT_TOL,
) -> OptimizationResult:
    """Minimize tr[Lambda W] over the two-LMI feasible set.

    Barrier path following: at each stage the strictly convex surrogate
    tr[Lambda W]/mu - log det F1(W) - log det F2(W) is Newton-minimized
    over the symmetric entries of W, then mu shrinks by 10x, starting
    from mu=1 and stopping once mu <= 1e-9 * (1 + |tr[Lambda W]|).  The
    final mu certifies the duality gap: gap <= mu * (total LMI dim).
    """
    if hbar is None:
        hbar = model.hbar
    if abs(hbar - model.hbar) > 1e-12 * (1.0 + abs(hbar)):
        raise ValidationError("hbar disagrees with the moment model")
    det = pbh_detectable(model.C_bar, model.A, tol)
    if not det:
        bad = ", ".join("%.6g%+.6gj" % (w[0].real, w[0].imag) for w in det.witnesses)
        raise NumericalError(
            "optimization undefined: (C_bar, A) undetectable at eigenvalue(s) %s" % bad
        )
    d = model.A.shape[0]
    basis = _sym_basis(d)
    n_p = len(basis)
    sigma = symplectic_form(d // 2)
    half = 0.5 * hbar * sigma
    F1_0 = np.block([[np.zeros((d, d)), -half], [half, np.zeros((d, d))]])
    F1_dirs = [np.block([[E, np.zeros((d, d))], [np.zeros((d, d)), E]]) for E in basis]
    F2_0 = model.D
    F2_dirs = [model.A @ E + E @ model.A.T for E in basis]
    c = np.array([np.trace(weight.Lambda @ E) for E in basis])

    W0 = _feasible_start(weight, model, tol)
    w = _vec_of(W0, d)

    if np.linalg.norm(weight.Lambda) == 0.0:
        # Flat objective: any strictly feasible point is optimal and the
        # analytic center may not exist (the feasible set is unbounded).
        W = _mat_of(w, basis, d)
        f1 = float(np.linalg.eigvalsh(hermitian_embed(W, hbar, tol))[0])
        F2 = F2_0 + model.A @ W + W @ model.A.T
        f2 = float(np.linalg.eigvalsh(0.5 * (F2 + F2.T))[0])
        return OptimizationResult(
            W_star=W,
            m_star=float(weight.constant_term),
            lmi_residuals=(f1, f2),
            barrier_mu_final=0.0,
        )

    def blocks(wv):
        F1 = F1_0.copy()
        F2 = F2_0.copy()
        for coeff, D1, D2 in zip(wv, F1_dirs, F2_dirs):
            F1 += coeff * D1
            F2 += coeff * D2
        return 0.5 * (F1 + F1.T), 0.5 * (F2 + F2.T)

    def barrier_value(wv):
        F1, F2 = blocks(wv)
        L1 = _chol_or_none(F1)
        L2 = _chol_or_none(F2)
        if L1 is None or L2 is None:
            return None
        logdet = 2.0 * (np.sum(np.log(np.diag(L1))) + np.sum(np.log(np.diag(L2))))
        return -logdet

    mu = 1.0
    total_newton = 0
    for _stage in range(_MAX_MU_STAGES):
        for _it in range(_MAX_NEWTON_INNER):
            F1, F2 = blocks(w)
            T1 = np.stack([np.linalg.solve(F1, Dk) for Dk in F1_dirs])
            T2 = np.stack([np.linalg.solve(F2, Dk) for Dk in F2_dirs])
            grad = c / mu - np.array([np.trace(t) for t in T1]) - np.array(
                [np.trace(t) for t in T2]
            )
            H = np.einsum("aij,bji->ab", T1, T1) + np.einsum("aij,bji->ab", T2, T2)
            H = 0.5 * (H + H.T)
            try:
                step = np.linalg.solve(H, -grad)
            except np.linalg.LinAlgError:
                step = np.linalg.solve(H + 1e-12 * np.trace(H) / n_p * np.eye(n_p), -grad)
            descent = float(grad @ step)
            if descent > 0.0:
                step = -grad
                descent = -float(grad @ grad)
            decrement = -descent
            if decrement * 0.5 <= 1e-12:
                break
            f_now = float(c @ w) / mu + barrier_value(w)
            t = 1.0
            accepted = False
            while t > 1e-14:
                w_try = w + t * step
                phi = barrier_value(w_try)
                if phi is not None:
                    f_try = float(c @ w_try) / mu + phi
                    if f_try <= f_now + 0.25 * t * descent:
                        w = w_try
                        accepted = True
                        break
                t *= 0.5
            total_newton += 1
            if not accepted:
                break
        objective = float(c @ w)
        if mu <= 1e-9 * (1.0 + abs(objective)):
            break
        mu *= _MU_SHRINK

    W = _mat_of(w, basis, d)
    W = 0.5 * (W + W.T)
    f1 = float(np.linalg.eigvalsh(hermitian_embed(W, hbar, tol))[0])
    F2 = F2_0 + model.A @ W + W @ model.A.T
    f2 = float(np.linalg.eigvalsh(0.5 * (F2 + F2.T))[0])
    scale = 1.0 + np.linalg.norm(W, 2)
    if f1 < -tol.psd_tol * scale or f2 < -tol.psd_tol * scale:
        raise NumericalError(
            "barrier terminated outside the feasible set (LMI margins %.3e, %.3e)"
            % (f1, f2)
        )
    return OptimizationResult(
        W_star=W,
        m_star=float(c @ w + weight.constant_term),
        lmi_residuals=(f1, f2),
        barrier_mu_final=mu,
        newton_iterations=total_newton,
    )


@dataclass(frozen=True)
class OracleResult:
    """Best strategy found by the brute-force scan.

    table rows are (theta, phi, cost, stabilizing) for every grid
    point, with cost = nan where the filter equation had no
    stabilizing solution.
    """

    m_best: float
    U_best: UnravellingMatrix
    phi_best: float
    theta_best: float
    table: np.ndarray


def grid_oracle(
    model: MomentModel,
    hbar: float | None,
    weight: CostWeight,
    resolution: float = 1e-3 * np.pi,
    tol: ToleranceConfig = DEFAULT_TOL,
) -> OracleResult:
    """Brute-force scan over the single-channel strategy family.

    Sweeps the homodyne phase phi over [0, pi) at the given resolution
    for efficiencies theta in {0.25, 0.5, 0.75, 1.0} with
    Upsilon = theta * exp(2i phi), solving the filter equation at each
    point and evaluating tr[Lambda W] + constant.  Grid points whose
    Riccati solve fails are skipped and logged.  Only defined for
    N = L = 1.
    """
    if hbar is None:
        hbar = model.hbar
    if abs(hbar - model.hbar) > 1e-12 * (1.0 + abs(hbar)):
        raise ValidationError("hbar disagrees with the moment model")
    if model.n_modes != 1 or model.n_channels != 1:
        raise ValidationError("the brute-force scan is only defined for N = L = 1")
    if not (0.0 < resolution < np.pi):
        raise ValidationError("resolution must be in (0, pi), got %r" % (resolution,))
    phis = np.arange(0.0, np.pi, resolution)
    thetas = (0.25, 0.5, 0.75, 1.0)
    rows = []
    best = None
    for theta in thetas:
        for phi in phis:
            U = compose_U([theta], [[theta * np.exp(2j * phi)]], tol)
            try:
                fm = filter_model(model, U, tol)
                sol = solve_filter_care(fm, tol)
            except NumericalError as exc:
                logger.debug("grid point theta=%g phi=%g skipped: %s", theta, phi, exc)
                rows.append((theta, phi, np.nan, False))
                continue
            cost = float(np.trace(weight.Lambda @ sol.X) + weight.constant_term)
            rows.append((theta, phi, cost, sol.stabilizing))
            key = (cost, phi, theta)
            if sol.stabilizing and (best is None or key < best[0]):
                best = (key, U, phi, theta)
    if best is None:
        raise NumericalError("every grid point failed to produce a stabilizing filter")
    (cost, phi, theta), U, phi_b, theta_b = best
    return OracleResult(
        m_best=float(cost),
        U_best=U,
        phi_best=float(phi_b),
        theta_best=float(theta_b),
        table=np.array(rows, dtype=float),
    )


def optimize_unravelling(
    spec: SystemSpec,
    model: MomentModel,
    control: ControlProblem,
    tol: ToleranceConfig = DEFAULT_TOL,
) -> OptimizationResult:
    """Full pipeline: regulator -> weight -> SDP -> strategy recovery.

    After the SDP, the recovered strategy is pushed back through the
    filter equation and the re-solved covariance must match W_star
    within 1e-6 * (1 + ||W_star||); a mismatch raises with both
    matrices, since it means the recovered strategy does not actually
    achieve the optimum.
    """
    if control.B.shape[0] != model.A.shape[0]:
        raise ValidationError("control problem and system dimensions disagree")
    Y = None
    if control.q_zero_limit:
        weight = cost_weight(None, control.B, None, model.D, P=control.P, tol=tol)
    else:
        Y = solve_control_care(model.A, control.B, control.P, control.Q, tol)
        weight = cost_weight(Y, control.B, control.Q, model.D, tol=tol)
    sdp = solve_sdp(weight, model, model.hbar, tol)
    recovered = recover_U(sdp.W_star, model, tol)
    if recovered.flagged:
        logger.warning(
            "recovered strategy reproduces the optimum only to residual %.3e",
            recovered.residual,
        )
    fm_star = filter_model(model, recovered.unravelling, tol)
    resolved = solve_filter_care(fm_star, tol)
    mismatch = np.linalg.norm(resolved.X - sdp.W_star)
    bound = 1e-6 * (1.0 + np.linalg.norm(sdp.W_star))
    if mismatch > bound:
        raise NumericalError(
            "re-solved covariance does not match the SDP optimum "
            "(mismatch %.3e > %.3e)\nW_star=%r\nW_resolved=%r"
            % (mismatch, bound, sdp.W_star, resolved.X)
        )
    return OptimizationResult(
        W_star=sdp.W_star,
        m_star=sdp.m_star,
        lmi_residuals=sdp.lmi_residuals,
        barrier_mu_final=sdp.barrier_mu_final,
        U_star=recovered.unravelling,
        recover_residual=recovered.residual,
        recover_flagged=recovered.flagged,
        W_resolved=resolved.X,
        control_solution=Y,
        newton_iterations=sdp.newton_iterations,
    )
