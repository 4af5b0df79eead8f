"""Seeded Monte-Carlo integration of the conditional moment equations.

The conditional covariance V_c evolves by a deterministic Riccati ODE
shared by every trajectory (fourth-order Runge-Kutta); the conditional
mean is an Euler-Maruyama chain driven by per-trajectory Wiener
increments and, optionally, one of the two feedback laws.

Noise streams are counter-based: trajectory i of a run with seed s
draws from Philox keyed by (s, i), consumed in step order, so results
are independent of scheduling and identical across repeated runs.

The inner loops live in a compiled extension (unravelopt._kernel) when
it built successfully, with a numpy fallback (unravelopt._kernel_py)
selected at import time; set UNRAVELOPT_BACKEND=python|cython to force
one.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .feedback import ControllerDesign
from .linalg import DEFAULT_TOL, ToleranceConfig, check_symmetric, hermitian_embed, is_psd
from .system import MomentModel, SystemSpec, unconditional_evolution
from .unravelling import FilterModel, UnravellingMatrix, decompose_U
from . import _kernel_py

__all__ = [
    "BACKEND_NAME",
    "available_backends",
    "SimConfig",
    "TrajectoryRecord",
    "CostAccumulator",
    "SimulationResult",
    "simulate_conditional",
    "CostEstimate",
    "estimate_steady_cost",
    "ConsistencyReport",
    "ensemble_consistency_check",
    "ReconstructedCurrent",
    "reconstruct_complex_current",
]


def _select_backend():
    forced = os.environ.get("UNRAVELOPT_BACKEND", "").strip().lower()
    compiled = None
    try:
        from . import _kernel as compiled  # noqa: F401
    except ImportError:
        compiled = None
    if forced in ("python", "py", "fallback"):
        return _kernel_py
    if forced in ("cython", "compiled", "c"):
        if compiled is None:
            raise ImportError(
                "UNRAVELOPT_BACKEND=%s but the compiled kernel is not available" % forced
            )
        return compiled
    if forced:
        raise ImportError("unknown UNRAVELOPT_BACKEND value %r" % forced)
    return compiled if compiled is not None else _kernel_py


_backend = _select_backend()
BACKEND_NAME = _backend.BACKEND_NAME


def available_backends():
    """Mapping of backend name to kernel module, for benchmarks and tests."""
    out = {_kernel_py.BACKEND_NAME: _kernel_py}
    try:
        from . import _kernel as compiled

        out[compiled.BACKEND_NAME] = compiled
    except ImportError:
        pass
    return out


@dataclass(frozen=True)
class SimConfig:
    """Monte-Carlo run configuration.

    record_stride selects how many Euler steps separate recorded
    samples (None picks roughly 500 records over the horizon); all
    statistics still use every step.
    """

    dt: float = 1e-3
    t_final: float = 50.0
    n_traj: int = 2000
    seed: int = 0
    burn_in_fraction: float = 0.5
    record_stride: int | None = None

    def __post_init__(self):
        if not (isinstance(self.dt, (int, float)) and self.dt > 0):
            raise ValidationError("dt must be positive, got %r" % (self.dt,))
        if not (isinstance(self.t_final, (int, float)) and self.t_final >= 100 * self.dt):
            raise ValidationError(
                "t_final must be at least 100*dt, got t_final=%r dt=%r"
                % (self.t_final, self.dt)
            )
        if not (isinstance(self.n_traj, (int, np.integer)) and self.n_traj >= 1):
            raise ValidationError("n_traj must be a positive integer, got %r" % (self.n_traj,))
        if not (isinstance(self.seed, (int, np.integer)) and 0 <= self.seed < 2**64):
            raise ValidationError("seed must be a 64-bit unsigned integer, got %r" % (self.seed,))
        if not (0.1 <= self.burn_in_fraction <= 0.9):
            raise ValidationError(
                "burn_in_fraction must lie in [0.1, 0.9], got %r" % (self.burn_in_fraction,)
            )
        if self.record_stride is not None and not (
            isinstance(self.record_stride, (int, np.integer)) and self.record_stride >= 1
        ):
            raise ValidationError("record_stride must be a positive integer or None")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    def stride(self) -> int:
        if self.record_stride is not None:
            return min(int(self.record_stride), self.n_steps)
        return max(1, self.n_steps // 500)


@dataclass(frozen=True)
class CostAccumulator:
    """Post-burn-in time averages sufficient to score any quadratic cost.

    xx_avg, uu_avg are per-trajectory averages of outer(x, x) and
    outer(u, u) over the averaging window; vc_avg is the shared average
    of V_c over the same window.
    """

    xx_avg: np.ndarray
    uu_avg: np.ndarray
    vc_avg: np.ndarray
    burn_in_fraction: float
    n_steps_averaged: int

    def cost(self, P, Q=None) -> float:
        """Time-averaged h = tr[P V_c] + x^T P x + u^T Q u."""
        value = float(np.trace(P @ (self.vc_avg + self.xx_avg)))
        if Q is not None:
            value += float(np.trace(Q @ self.uu_avg))
        return value


@dataclass(frozen=True)
class TrajectoryRecord:
    """One trajectory's recorded path (views into the shared run arrays).

    mean_path[0] is the initial mean at times[0] = 0; y_path[r] and
    u_path[r] are the bin values for the interval ending at
    times[r + 1].  Vc_path is shared by construction: the covariance
    equation does not see the measurement record.
    """

    times: np.ndarray
    mean_path: np.ndarray
    Vc_path: np.ndarray
    y_path: np.ndarray
    u_path: np.ndarray
    cost_accumulator: CostAccumulator


@dataclass(frozen=True)
class SimulationResult:
    """Stacked records of a full Monte-Carlo run."""

    config: SimConfig
    backend: str
    design_kind: str
    fm: FilterModel
    times: np.ndarray
    mean_paths: np.ndarray
    y_paths: np.ndarray
    u_paths: np.ndarray
    Vc_path: np.ndarray
    Vc_final: np.ndarray
    vc_window_avg: np.ndarray
    xx_avg: np.ndarray
    uu_avg: np.ndarray
    n_steps_averaged: int
    records: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.records:
            return
        recs = []
        for i in range(self.config.n_traj):
            acc = CostAccumulator(
                xx_avg=self.xx_avg[i],
                uu_avg=self.uu_avg[i],
                vc_avg=self.vc_window_avg,
                burn_in_fraction=self.config.burn_in_fraction,
                n_steps_averaged=self.n_steps_averaged,
            )
            recs.append(
                TrajectoryRecord(
                    times=self.times,
                    mean_path=self.mean_paths[i],
                    Vc_path=self.Vc_path,
                    y_path=self.y_paths[i],
                    u_path=self.u_paths[i],
                    cost_accumulator=acc,
                )
            )
        object.__setattr__(self, "records", tuple(recs))


_NOISE_BLOCK = 1024


def _check_vc_path(vc, hbar, tol):
    """Uncertainty-LMI sweep over the whole covariance path, batched."""
    n = vc.shape[0]
    d = vc.shape[1]
    half = 0.5 * hbar
    sigma = np.zeros((d, d))
    for k in range(d // 2):
        sigma[2 * k, 2 * k + 1] = half
        sigma[2 * k + 1, 2 * k] = -half
    embeds = np.empty((n, 2 * d, 2 * d))
    embeds[:, :d, :d] = vc
    embeds[:, d:, d:] = vc
    embeds[:, :d, d:] = -sigma
    embeds[:, d:, :d] = sigma
    min_eigs = np.linalg.eigvalsh(embeds)[:, 0]
    scales = 1.0 + np.linalg.norm(vc, axis=(1, 2))
    bad = min_eigs < -10.0 * tol.psd_tol * scales
    if np.any(bad):
        k = int(np.argmax(bad))
        raise NumericalError(
            "conditional covariance broke the uncertainty condition at step %d "
            "(min eigenvalue %.3e); the time step is too coarse or a sign is wrong"
            % (k, min_eigs[k])
        )


def simulate_conditional(
    spec: SystemSpec,
    fm: FilterModel,
    design: ControllerDesign | None,
    cfg: SimConfig,
    x0=None,
    V0=None,
    tol: ToleranceConfig = DEFAULT_TOL,
) -> SimulationResult:
    """Run the conditional moment equations for every trajectory.

    With design=None the input is identically zero.  The optimal design
    applies u = -K <x>_c; the Markovian design applies the current
    feedback in integrated form, u dt = F (C <x>_c dt + dw), which is
    the only well-defined reading of u = F y.

    Defaults: x0 = 0 and V0 = hbar * I (a comfortably mixed state).

    Raises NumericalError if the covariance path breaks the uncertainty
    condition by more than 10x the PSD tolerance at any step.
    """
    model = fm.model
    d = model.A.shape[0]
    m = 2 * model.n_channels
    n_steps = cfg.n_steps
    stride = cfg.stride()
    n_rec = n_steps // stride

    if x0 is None:
        x0 = np.zeros(d)
    x0 = np.asarray(x0, dtype=float).reshape(d)
    if V0 is None:
        V0 = model.hbar * np.eye(d)
    V0 = check_symmetric(V0, tol, name="V0")
    start_ok = is_psd(hermitian_embed(V0, model.hbar, tol), tol)
    if not start_ok:
        raise ValidationError(
            "V0 violates the uncertainty condition (min eigenvalue %.3e)"
            % start_ok.min_eigenvalue
        )

    if design is None:
        mode = _backend.MODE_NONE
        Aeff = model.A
        KF = np.zeros((spec.B.shape[1], d))
        p = spec.B.shape[1]
        extra_noise = None
        kind = "none"
    elif design.kind == "optimal":
        mode = _backend.MODE_OPTIMAL
        KF = np.ascontiguousarray(design.K, dtype=float)
        p = KF.shape[0]
        if spec.B.shape[1] != p or KF.shape[1] != d:
            raise ValidationError("gain K has shape %r, expected (%d, %d)" % (KF.shape, spec.B.shape[1], d))
        Aeff = model.A - spec.B @ KF
        extra_noise = None
        kind = "optimal"
    elif design.kind == "markovian":
        mode = _backend.MODE_MARKOVIAN
        KF = np.ascontiguousarray(design.F, dtype=float)
        p = KF.shape[0]
        if spec.B.shape[1] != p or KF.shape[1] != m:
            raise ValidationError("gain F has shape %r, expected (%d, %d)" % (KF.shape, spec.B.shape[1], m))
        Aeff = model.A + spec.B @ KF @ fm.C
        extra_noise = spec.B @ KF
        kind = "markovian"
    else:
        raise ValidationError("unknown design kind %r" % (design.kind,))

    vc = _backend.propagate_covariance(
        np.ascontiguousarray(V0),
        np.ascontiguousarray(model.A),
        np.ascontiguousarray(model.D),
        np.ascontiguousarray(fm.C),
        np.ascontiguousarray(fm.Gamma),
        float(cfg.dt),
        n_steps,
    )
    _check_vc_path(vc, model.hbar, tol)

    # Conditioning gain at the start of each step; the Markovian input
    # folds its own dw response on top.
    gains = vc[:-1] @ fm.C.T + fm.Gamma.T
    if extra_noise is not None:
        gains = gains + extra_noise
    gains = np.ascontiguousarray(gains)

    burn_start = int(np.floor(cfg.burn_in_fraction * n_steps))
    n_avg = n_steps - burn_start

    X = np.tile(x0, (cfg.n_traj, 1))
    X = np.ascontiguousarray(X, dtype=float)
    acc_xx = np.zeros((cfg.n_traj, d, d))
    acc_uu = np.zeros((cfg.n_traj, p, p))
    rec_mean = np.zeros((cfg.n_traj, n_rec, d))
    rec_y = np.zeros((cfg.n_traj, n_rec, m))
    rec_u = np.zeros((cfg.n_traj, n_rec, p))

    gens = [
        np.random.Generator(np.random.Philox(key=np.array([cfg.seed, i], dtype=np.uint64)))
        for i in range(cfg.n_traj)
    ]
    sqrt_dt = np.sqrt(cfg.dt)
    dW = np.empty((cfg.n_traj, _NOISE_BLOCK, m))
    step0 = 0
    while step0 < n_steps:
        blk = min(_NOISE_BLOCK, n_steps - step0)
        block = dW[:, :blk, :]
        for i, gen in enumerate(gens):
            block[i] = gen.standard_normal((blk, m))
        block *= sqrt_dt
        _backend.run_trajectory_block(
            X,
            np.ascontiguousarray(block),
            np.ascontiguousarray(Aeff),
            gains[step0 : step0 + blk],
            np.ascontiguousarray(fm.C),
            KF,
            mode,
            float(cfg.dt),
            step0,
            burn_start,
            acc_xx,
            acc_uu,
            stride,
            rec_mean,
            rec_y,
            rec_u,
        )
        step0 += blk

    acc_xx /= n_avg
    acc_uu /= n_avg
    vc_window_avg = vc[burn_start:n_steps].mean(axis=0)

    times = np.concatenate([[0.0], (np.arange(1, n_rec + 1) * stride) * cfg.dt])
    mean_paths = np.concatenate([np.tile(x0, (cfg.n_traj, 1, 1)), rec_mean], axis=1)
    vc_rec = np.concatenate([vc[:1], vc[stride::stride][:n_rec]], axis=0)
    vc_final = vc[-1]

    return SimulationResult(
        config=cfg,
        backend=_backend.BACKEND_NAME,
        design_kind=kind,
        fm=fm,
        times=times,
        mean_paths=mean_paths,
        y_paths=rec_y,
        u_paths=rec_u,
        Vc_path=vc_rec,
        Vc_final=vc_final,
        vc_window_avg=vc_window_avg,
        xx_avg=acc_xx,
        uu_avg=acc_uu,
        n_steps_averaged=n_avg,
    )


@dataclass(frozen=True)
class CostEstimate:
    """Monte-Carlo steady-state cost with its sampling error.

    standard_error is None (and flagged True) when fewer than two
    trajectories were available.
    """

    m_hat: float
    standard_error: float | None
    flagged: bool


def estimate_steady_cost(records, P, Q=None, burn_in=None) -> CostEstimate:
    """Score the post-burn-in window against a quadratic cost.

    records may be a SimulationResult or its list of TrajectoryRecord.
    The averages were accumulated online during simulation, so burn_in,
    when given, must equal the simulated burn-in fraction.
    """
    if isinstance(records, SimulationResult):
        recs = records.records
    else:
        recs = list(records)
    if not recs:
        raise ValidationError("no trajectories to score")
    frac = recs[0].cost_accumulator.burn_in_fraction
    if burn_in is not None and abs(burn_in - frac) > 1e-12:
        raise ValidationError(
            "burn_in=%r does not match the simulated burn-in fraction %r; "
            "cost statistics are accumulated during the run" % (burn_in, frac)
        )
    P = check_symmetric(P, name="P")
    if Q is not None:
        Q = check_symmetric(Q, name="Q")
    costs = np.array([r.cost_accumulator.cost(P, Q) for r in recs])
    m_hat = float(np.mean(costs))
    if len(costs) < 2:
        return CostEstimate(m_hat=m_hat, standard_error=None, flagged=True)
    se = float(np.std(costs, ddof=1) / np.sqrt(len(costs)))
    return CostEstimate(m_hat=m_hat, standard_error=se, flagged=False)


@dataclass(frozen=True)
class ConsistencyRow:
    time: float
    deviation: np.ndarray
    bound: np.ndarray
    ok: bool


@dataclass(frozen=True)
class ConsistencyReport:
    """Ensemble-average check E[x x^T] + V_c against the unconditional V(t).

    Each row carries the per-entry deviation and the allowed bound
    max(3 standard errors, tolerance floor).
    """

    ok: bool
    rows: tuple

    def __bool__(self) -> bool:
        return self.ok


def ensemble_consistency_check(
    result: SimulationResult,
    model: MomentModel,
    tol: ToleranceConfig = DEFAULT_TOL,
    times=None,
) -> ConsistencyReport:
    """Verify that conditioning averages out of the ensemble.

    Requires an uncontrolled run (u = 0) with at least 500
    trajectories.  At each sampled time the ensemble second moment of
    the conditional mean plus the shared V_c must reproduce the
    unconditional covariance within max(3 standard errors, floor),
    entry by entry.
    """
    if result.design_kind != "none":
        raise ValidationError("the consistency check needs an uncontrolled run (u = 0)")
    n_traj = result.mean_paths.shape[0]
    if n_traj < 500:
        raise ValidationError("the consistency check needs at least 500 trajectories")
    rec_times = result.times
    if times is None:
        idx = np.unique(np.linspace(1, len(rec_times) - 1, 8).astype(int))
    else:
        idx = []
        for t in np.atleast_1d(times):
            k = int(np.argmin(np.abs(rec_times - t)))
            if abs(rec_times[k] - t) > 1e-9 * (1.0 + abs(t)):
                raise ValidationError("time %r is not on the record grid" % (t,))
            idx.append(k)
        idx = np.array(sorted(set(idx)), dtype=int)

    x0 = result.mean_paths[0, 0]
    V0 = result.Vc_path[0]
    grid = np.concatenate([[0.0], rec_times[idx]]) if rec_times[idx][0] > 0 else rec_times[idx]
    zero_b = np.zeros((model.A.shape[0], 1))
    m_uncond, v_uncond = unconditional_evolution(model, zero_b, None, x0, V0, grid, tol)
    maps = {float(t): (mu, v) for t, mu, v in zip(grid, m_uncond, v_uncond)}

    rows = []
    all_ok = True
    for k in idx:
        # Center on the deterministic unconditional mean so the second
        # moment compares against the covariance (identically zero
        # centering for the default x0 = 0 start).
        mu, target = maps[float(rec_times[k])]
        xs = result.mean_paths[:, k, :] - mu
        prods = np.einsum("ti,tj->tij", xs, xs)
        e_hat = prods.mean(axis=0)
        se = prods.std(axis=0, ddof=1) / np.sqrt(n_traj)
        total = e_hat + result.Vc_path[k]
        deviation = total - target
        floor = tol.residual_tol * (1.0 + np.linalg.norm(target))
        bound = np.maximum(3.0 * se, floor)
        ok = bool(np.all(np.abs(deviation) <= bound))
        all_ok = all_ok and ok
        rows.append(
            ConsistencyRow(
                time=float(rec_times[k]), deviation=deviation, bound=bound, ok=ok
            )
        )
    return ConsistencyReport(ok=all_ok, rows=tuple(rows))


@dataclass(frozen=True)
class ReconstructedCurrent:
    """Complex measurement record rebuilt from the real current.

    lossy marks a singular U: some quadrature of the complex record is
    simply not measured (pure homodyne keeps one real quadrature), so
    the reconstruction lives on the measured support only.
    """

    J: np.ndarray
    lossy: bool


def reconstruct_complex_current(
    y_path, U, hbar: float, tol: ToleranceConfig = DEFAULT_TOL
) -> ReconstructedCurrent:
    """Map the simulated real current back to the complex record.

    The real current was defined by y = (hbar U)^{-1/2} (Re J; Im J),
    so the inverse map is (Re J; Im J) = (hbar U)^{1/2} y applied row
    by row.
    """
    from .linalg import psd_sqrt

    if isinstance(U, UnravellingMatrix):
        U = U.U
    else:
        U = decompose_U(U, tol).U
    path = np.atleast_2d(np.asarray(y_path, dtype=float))
    L = U.shape[0] // 2
    if path.shape[1] != 2 * L:
        raise ValidationError(
            "y_path has %d columns, expected %d" % (path.shape[1], 2 * L)
        )
    root = psd_sqrt(hbar * U, tol)
    stacked = path @ root.T
    J = stacked[:, :L] + 1j * stacked[:, L:]
    eigs = np.linalg.eigvalsh(U)
    lossy = bool(eigs[0] <= tol.psd_tol * (1.0 + eigs[-1]))
    return ReconstructedCurrent(J=J, lossy=lossy)
