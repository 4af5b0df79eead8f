"""File-driven workbench: load problem files, run commands, emit reports.

Problem definitions are plain json documents, one per artifact kind
(system / control / unravelling), with complex matrices split into
explicit "re"/"im" arrays.  Every report embeds the run manifest
verbatim, labels each matrix with its conventional symbol and units,
and is byte-stable across runs with identical manifests.

Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 I/O or parse error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

from . import __version__
from .errors import NumericalError, UnravelOptError, ValidationError
from .feedback import ControlProblem, design_markovian, design_optimal
from .linalg import DEFAULT_TOL, hermitian_embed, is_psd
from .optimizer import cost_weight, grid_oracle, optimize_unravelling
from .riccati import solve_control_care, solve_filter_care
from .simulator import (
    SimConfig,
    ensemble_consistency_check,
    estimate_steady_cost,
    simulate_conditional,
)
from .system import derive_moment_model, pbh_detectable, unconditional_evolution, validate_spec
from .system import SystemSpec
from .unravelling import UnravellingMatrix, decompose_U, filter_model, heterodyne

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


class ParseError(UnravelOptError):
    """A problem file is not well-formed json."""


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to reproduce a run, embedded in every report."""

    command: str
    input_paths: list
    seed: int
    output_format: str
    tool_version: str
    options: dict


# ---------------------------------------------------------------------------
# input files


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            "%s: line %d column %d: %s" % (path, exc.lineno, exc.colno, exc.msg)
        ) from exc


def _require(doc, key, where):
    if not isinstance(doc, dict) or key not in doc:
        raise ValidationError("%s: missing required field %r" % (where, key))
    return doc[key]


def _array_field(doc, key, where):
    value = _require(doc, key, where)
    try:
        return np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError("%s: field %r is not a numeric array" % (where, key)) from exc


def _complex_field(doc, key, where):
    value = _require(doc, key, where)
    if not isinstance(value, dict):
        raise ValidationError(
            '%s: field %r must be an object with "re" and "im" arrays' % (where, key)
        )
    re = _array_field(value, "re", "%s.%s" % (where, key))
    im = _array_field(value, "im", "%s.%s" % (where, key))
    if re.shape != im.shape:
        raise ValidationError(
            "%s: field %r has re shape %r but im shape %r"
            % (where, key, re.shape, im.shape)
        )
    return re, im


def load_system(path) -> SystemSpec:
    doc = _load_json(path)
    where = "system file %s" % path
    hbar = _require(doc, "hbar", where)
    if not isinstance(hbar, (int, float)):
        raise ValidationError("%s: hbar must be a number" % where)
    G = _array_field(doc, "G", where)
    C_re, C_im = _complex_field(doc, "C", where)
    B = _array_field(doc, "B", where)
    spec = SystemSpec(hbar=float(hbar), G=G, C_re=C_re, C_im=C_im, B=B)
    validate_spec(spec)
    return spec


def load_control(path, spec: SystemSpec) -> ControlProblem:
    doc = _load_json(path)
    where = "control file %s" % path
    P = _array_field(doc, "P", where)
    Q = None
    if doc.get("Q") is not None:
        Q = _array_field(doc, "Q", where)
    B = _array_field(doc, "B", where) if "B" in doc else spec.B
    return ControlProblem(P=P, Q=Q, B=B)


def load_unravelling(path) -> UnravellingMatrix:
    doc = _load_json(path)
    where = "unravelling file %s" % path
    if isinstance(doc, dict) and "U" in doc:
        return decompose_U(_array_field(doc, "U", where))
    theta = _array_field(doc, "theta", where)
    ups_re, ups_im = _complex_field(doc, "upsilon", where)
    from .unravelling import compose_U

    return compose_U(theta, ups_re + 1j * ups_im)


def load_problem(system_path, control_path=None, unravelling_path=None):
    """Load and validate the problem files named on the command line."""
    spec = load_system(system_path)
    control = load_control(control_path, spec) if control_path else None
    unravelling = load_unravelling(unravelling_path) if unravelling_path else None
    if control is not None and control.B.shape[0] != 2 * spec.n_modes:
        raise ValidationError(
            "control file B has %d rows but the system has %d quadratures"
            % (control.B.shape[0], 2 * spec.n_modes)
        )
    if unravelling is not None and unravelling.n_channels != spec.n_channels:
        raise ValidationError(
            "unravelling is for %d channels but the system has %d"
            % (unravelling.n_channels, spec.n_channels)
        )
    return spec, control, unravelling


# ---------------------------------------------------------------------------
# report assembly


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        if np.iscomplexobj(obj):
            return {"re": obj.real.tolist(), "im": obj.imag.tolist()}
        return obj.tolist()
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


def _mat(value, units):
    return {"units": units, "value": np.asarray(value)}


def _cost(value, hbar):
    return {"units": "absolute and hbar ratio", "value": float(value), "per_hbar": float(value) / hbar}


def _eigs(values):
    values = np.atleast_1d(np.asarray(values, dtype=complex))
    return {"re": values.real, "im": values.imag}


def _eig_table(values):
    values = np.atleast_1d(np.asarray(values, dtype=complex))
    order = np.lexsort((values.imag, values.real))
    return {
        "columns": ["re", "im"],
        "rows": [[float(v.real), float(v.imag)] for v in values[order]],
    }


def _entry_table(W, hbar=None):
    W = np.asarray(W, dtype=float)
    cols = ["row", "col", "value"] + (["per_hbar"] if hbar else [])
    rows = []
    for i in range(W.shape[0]):
        for j in range(W.shape[1]):
            row = [i, j, float(W[i, j])]
            if hbar:
                row.append(float(W[i, j]) / hbar)
            rows.append(row)
    return {"columns": cols, "rows": rows}


def _summary_table(pairs):
    return {"columns": ["quantity", "value"], "rows": [[k, v] for k, v in pairs]}


def _report(manifest: RunManifest, results, certificates, tables):
    return {
        "manifest": asdict(manifest),
        "results": results,
        "certificates": certificates,
        "tables": tables,
    }


def _strategy_block(unr: UnravellingMatrix, hbar):
    block = {
        "U": _mat(unr.U, "dimensionless"),
        "Theta": _mat(np.diag(unr.theta), "dimensionless"),
        "Upsilon": _mat(unr.upsilon, "dimensionless"),
    }
    if unr.n_channels == 1:
        ups = complex(unr.upsilon[0, 0])
        if abs(ups) > 1e-12:
            phi = float(np.angle(ups) / 2.0 % np.pi)
            block["phi"] = {"units": "radians", "value": phi, "per_pi": phi / np.pi}
    return block


# ---------------------------------------------------------------------------
# commands


def _cmd_validate(manifest: RunManifest):
    opts = manifest.options
    spec, _, _ = load_problem(opts["system"])
    model = derive_moment_model(spec)
    det = pbh_detectable(model.C_bar, model.A)
    drift_eigs = np.linalg.eigvals(model.A)
    results = {
        "hbar": spec.hbar,
        "n_modes": spec.n_modes,
        "n_channels": spec.n_channels,
        "n_inputs": spec.n_inputs,
        "A": _mat(model.A, "1/time"),
        "D": _mat(model.D, "hbar/time"),
        "C_bar": _mat(model.C_bar, "1/sqrt(time)"),
        "drift_eigenvalues": _eigs(drift_eigs),
        "detectable": bool(det),
        "undetectable_eigenvalues": (
            _eigs([lam for lam, _ in det.witnesses]) if det.witnesses else None
        ),
    }
    certificates = {"system_valid": True, "detectable": bool(det)}
    tables = {
        "summary": _summary_table(
            [
                ("hbar", spec.hbar),
                ("n_modes", spec.n_modes),
                ("n_channels", spec.n_channels),
                ("detectable", bool(det)),
            ]
        ),
        "drift_eigenvalues": _eig_table(drift_eigs),
    }
    return _report(manifest, results, certificates, tables)


def _cmd_moments(manifest: RunManifest):
    opts = manifest.options
    spec, _, _ = load_problem(opts["system"])
    model = derive_moment_model(spec)
    t_final = opts["t_final"] if opts["t_final"] is not None else 10.0
    if t_final <= 0:
        raise ValidationError("t_final must be positive, got %r" % (t_final,))
    if opts["dt"] is not None:
        n_grid = int(round(t_final / opts["dt"]))
        if n_grid < 1:
            raise ValidationError("dt larger than t_final leaves no grid points")
    else:
        n_grid = 100
    t_grid = np.linspace(0.0, t_final, n_grid + 1)
    x0 = np.zeros(2 * spec.n_modes)
    V0 = 0.5 * spec.hbar * np.eye(2 * spec.n_modes)
    means, covs = unconditional_evolution(model, spec.B, None, x0, V0, t_grid)
    n = 2 * spec.n_modes
    cols = ["t"] + ["V_%d%d" % (i, j) for i in range(n) for j in range(i, n)]
    rows = []
    for k, t in enumerate(t_grid):
        rows.append(
            [float(t)] + [float(covs[k, i, j]) for i in range(n) for j in range(i, n)]
        )
    results = {
        "A": _mat(model.A, "1/time"),
        "D": _mat(model.D, "hbar/time"),
        "C_bar": _mat(model.C_bar, "1/sqrt(time)"),
        "drift_eigenvalues": _eigs(np.linalg.eigvals(model.A)),
        "V_initial": _mat(V0, "hbar"),
        "V_final": _mat(covs[-1], "hbar"),
        "t_final": float(t_final),
    }
    certificates = {"system_valid": True, "uncertainty_ok_along_path": True}
    tables = {
        "summary": _summary_table(
            [("t_final", float(t_final)), ("grid_points", len(t_grid))]
        ),
        "drift_eigenvalues": _eig_table(np.linalg.eigvals(model.A)),
        "covariance_evolution": {"columns": cols, "rows": rows},
    }
    return _report(manifest, results, certificates, tables)


def _cmd_filter(manifest: RunManifest):
    opts = manifest.options
    if not opts["unravelling"]:
        raise ValidationError("the filter command needs --unravelling")
    spec, _, unr = load_problem(opts["system"], None, opts["unravelling"])
    model = derive_moment_model(spec)
    fm = filter_model(model, unr)
    sol = solve_filter_care(fm)
    W = sol.X
    hbar = spec.hbar
    purity = float(np.linalg.det(2.0 * W / hbar))
    embed_eigs = np.linalg.eigvalsh(hermitian_embed(W, hbar))
    evolution_lmi = model.D + model.A @ W + W @ model.A.T
    evo_min = float(np.linalg.eigvalsh(0.5 * (evolution_lmi + evolution_lmi.T))[0])
    scale = 1.0 + float(np.linalg.norm(fm.Noise_eff))
    results = {
        **_strategy_block(unr, hbar),
        "C": _mat(fm.C, "1/sqrt(time)"),
        "Gamma": _mat(fm.Gamma, "sqrt(hbar)/sqrt(time)"),
        "Omega_eff": _mat(fm.Omega_eff, "1/time"),
        "Noise_eff": _mat(fm.Noise_eff, "hbar/time"),
        "W": _mat(W, "hbar"),
        "W_per_hbar": _mat(W / hbar, "dimensionless"),
        "residual": float(sol.residual),
        "closed_loop_eigenvalues": _eigs(sol.closed_loop_eigs),
        "purity_det_2W_per_hbar": purity,
        "uncertainty_lmi_min_eigenvalue": float(embed_eigs[0]),
        "evolution_lmi_min_eigenvalue": evo_min,
    }
    certificates = {
        "stabilizing": bool(sol.stabilizing),
        "residual_ok": bool(sol.residual <= DEFAULT_TOL.residual_tol * scale),
        "uncertainty_ok": bool(is_psd(hermitian_embed(W, hbar))),
    }
    tables = {
        "summary": _summary_table(
            [
                ("purity_det_2W_per_hbar", purity),
                ("residual", float(sol.residual)),
                ("stabilizing", bool(sol.stabilizing)),
                ("uncertainty_lmi_min_eigenvalue", float(embed_eigs[0])),
            ]
        ),
        "W_entries": _entry_table(W, hbar),
        "closed_loop_eigenvalues": _eig_table(sol.closed_loop_eigs),
    }
    return _report(manifest, results, certificates, tables)


def _cmd_optimize(manifest: RunManifest):
    opts = manifest.options
    if not opts["control"]:
        raise ValidationError("the optimize command needs --control")
    spec, control, _ = load_problem(opts["system"], opts["control"])
    model = derive_moment_model(spec)
    res = optimize_unravelling(spec, model, control)
    hbar = spec.hbar
    W = res.W_resolved if res.W_resolved is not None else res.W_star
    fm_star = filter_model(model, res.U_star)
    if control.q_zero_limit:
        design = design_markovian(W, fm_star, control)
    else:
        design = design_optimal(res.control_solution, control, fm_star, W)
    gain_key = "K" if design.kind == "optimal" else "F"
    gain = design.K if design.kind == "optimal" else design.F
    closed_eigs = np.linalg.eigvals(design.M_closed)
    purity = float(np.linalg.det(2.0 * res.W_star / hbar))
    results = {
        "W_star": _mat(res.W_star, "hbar"),
        "W_star_per_hbar": _mat(res.W_star / hbar, "dimensionless"),
        "m_star": _cost(res.m_star, hbar),
        **_strategy_block(res.U_star, hbar),
        "recover_residual": float(res.recover_residual),
        "recover_flagged": bool(res.recover_flagged),
        "lmi_min_eigenvalues": [float(v) for v in res.lmi_residuals],
        "barrier_mu_final": float(res.barrier_mu_final),
        "newton_iterations": int(res.newton_iterations),
        "purity_det_2W_per_hbar": purity,
        "design_kind": design.kind,
        gain_key: _mat(gain, "1/time"),
        "M": _mat(design.M_closed, "1/time"),
        "closed_loop_eigenvalues": _eigs(closed_eigs),
        "predicted_cost": _cost(design.predicted_cost, hbar),
    }
    certificates = {
        "system_valid": True,
        "sdp_feasible": True,
        "strategy_recovered": not bool(res.recover_flagged),
        "closed_loop_stable": True,
    }
    tables = {
        "summary": _summary_table(
            [
                ("m_star", float(res.m_star)),
                ("m_star_per_hbar", float(res.m_star) / hbar),
                ("purity_det_2W_per_hbar", purity),
                ("recover_residual", float(res.recover_residual)),
                ("design_kind", design.kind),
                ("predicted_cost_per_hbar", float(design.predicted_cost) / hbar),
            ]
        ),
        "W_entries": _entry_table(res.W_star, hbar),
        "closed_loop_eigenvalues": _eig_table(closed_eigs),
    }
    if opts["phi_resolution"] is not None:
        if spec.n_modes != 1 or spec.n_channels != 1:
            raise ValidationError(
                "the phi sweep applies to single-mode single-channel systems"
            )
        if control.q_zero_limit:
            weight = cost_weight(None, control.B, None, model.D, P=control.P)
        else:
            weight = cost_weight(res.control_solution, control.B, control.Q, model.D)
        oracle = grid_oracle(model, hbar, weight, resolution=opts["phi_resolution"])
        agreement = abs(float(res.m_star) - float(oracle.m_best))
        results["oracle"] = {
            "m_best": _cost(oracle.m_best, hbar),
            "phi_best": {
                "units": "radians",
                "value": float(oracle.phi_best),
                "per_pi": float(oracle.phi_best) / np.pi,
            },
            "theta_best": float(oracle.theta_best),
            "agreement": agreement,
        }
        certificates["oracle_agreement"] = bool(agreement <= 1e-3 * hbar)
        sweep_rows = [
            [float(r[1]), float(r[2]), bool(r[3])]
            for r in oracle.table
            if r[0] == 1.0
        ]
        tables["cost_vs_phi"] = {"columns": ["phi", "cost", "stable"], "rows": sweep_rows}
    return _report(manifest, results, certificates, tables)


def _cmd_markovian(manifest: RunManifest):
    opts = manifest.options
    if not opts["control"] or not opts["unravelling"]:
        raise ValidationError("the markovian command needs --control and --unravelling")
    spec, control, unr = load_problem(opts["system"], opts["control"], opts["unravelling"])
    model = derive_moment_model(spec)
    fm = filter_model(model, unr)
    sol = solve_filter_care(fm)
    design = design_markovian(sol.X, fm, control)
    hbar = spec.hbar
    closed_eigs = np.linalg.eigvals(design.M_closed)
    results = {
        **_strategy_block(unr, hbar),
        "W": _mat(sol.X, "hbar"),
        "F": _mat(design.F, "1/time"),
        "M": _mat(design.M_closed, "1/time"),
        "closed_loop_eigenvalues": _eigs(closed_eigs),
        "predicted_cost": _cost(design.predicted_cost, hbar),
        "cancellation_residual": float(design.cancellation_residual),
    }
    certificates = {
        "filter_stabilizing": bool(sol.stabilizing),
        "closed_loop_stable": True,
    }
    tables = {
        "summary": _summary_table(
            [
                ("predicted_cost_per_hbar", float(design.predicted_cost) / hbar),
                ("cancellation_residual", float(design.cancellation_residual)),
            ]
        ),
        "W_entries": _entry_table(sol.X, hbar),
        "closed_loop_eigenvalues": _eig_table(closed_eigs),
    }
    return _report(manifest, results, certificates, tables)


def _cmd_simulate(manifest: RunManifest):
    opts = manifest.options
    if not opts["unravelling"]:
        raise ValidationError("the simulate command needs --unravelling")
    design_kind = opts["design"]
    if design_kind != "none" and not opts["control"]:
        raise ValidationError("--design %s needs --control" % design_kind)
    spec, control, unr = load_problem(opts["system"], opts["control"], opts["unravelling"])
    model = derive_moment_model(spec)
    fm = filter_model(model, unr)
    sol = solve_filter_care(fm)
    design = None
    if design_kind == "markovian":
        design = design_markovian(sol.X, fm, control)
    elif design_kind == "optimal":
        if control.q_zero_limit:
            raise ValidationError(
                "the cheap-control limit has no finite regulator gain; "
                "use --design markovian"
            )
        Y = solve_control_care(model.A, control.B, control.P, control.Q)
        design = design_optimal(Y, control, fm, sol.X)
    cfg = SimConfig(
        dt=opts["dt"] if opts["dt"] is not None else 1e-3,
        t_final=opts["t_final"] if opts["t_final"] is not None else 50.0,
        n_traj=opts["trajectories"] if opts["trajectories"] is not None else 2000,
        seed=manifest.seed,
    )
    result = simulate_conditional(spec, fm, design, cfg)
    hbar = spec.hbar
    conv = float(np.linalg.norm(result.Vc_final - sol.X))
    results = {
        "backend": result.backend,
        "design_kind": result.design_kind,
        "dt": cfg.dt,
        "t_final": cfg.t_final,
        "n_trajectories": cfg.n_traj,
        "burn_in_fraction": cfg.burn_in_fraction,
        "W": _mat(sol.X, "hbar"),
        "Vc_final": _mat(result.Vc_final, "hbar"),
        "filter_convergence": conv,
    }
    certificates = {"uncertainty_ok_along_path": True}
    tables = {}
    if control is not None:
        est = estimate_steady_cost(
            result, control.P, None if control.q_zero_limit else control.Q
        )
        results["cost_estimate"] = {
            "m_hat": _cost(est.m_hat, hbar),
            "standard_error": (
                None if est.standard_error is None else float(est.standard_error)
            ),
            "flagged": bool(est.flagged),
        }
        certificates["cost_estimate_ok"] = not bool(est.flagged)
    if design_kind == "none" and cfg.n_traj >= 500:
        report = ensemble_consistency_check(result, model)
        rows = []
        n = 2 * spec.n_modes
        for row in report.rows:
            for i in range(n):
                for j in range(i, n):
                    rows.append(
                        [
                            float(row.time),
                            i,
                            j,
                            float(row.deviation[i, j]),
                            float(row.bound[i, j]),
                            bool(abs(row.deviation[i, j]) <= row.bound[i, j]),
                        ]
                    )
        results["ensemble_consistent"] = bool(report.ok)
        certificates["ensemble_consistent"] = bool(report.ok)
        tables["ensemble_consistency"] = {
            "columns": ["t", "row", "col", "deviation", "bound", "ok"],
            "rows": rows,
        }
    n = 2 * spec.n_modes
    cov_cols = ["t"] + ["Vc_%d%d" % (i, j) for i in range(n) for j in range(i, n)]
    cov_rows = []
    rec = result.records[0]
    for k, t in enumerate(rec.times):
        cov_rows.append(
            [float(t)]
            + [float(rec.Vc_path[k, i, j]) for i in range(n) for j in range(i, n)]
        )
    tables["conditional_covariance_path"] = {"columns": cov_cols, "rows": cov_rows}
    summary_pairs = [
        ("backend", result.backend),
        ("design_kind", result.design_kind),
        ("n_trajectories", cfg.n_traj),
        ("filter_convergence", conv),
    ]
    if "cost_estimate" in results:
        summary_pairs.append(("m_hat_per_hbar", results["cost_estimate"]["m_hat"]["per_hbar"]))
        se = results["cost_estimate"]["standard_error"]
        summary_pairs.append(("standard_error", se if se is not None else "n/a"))
    tables["summary"] = _summary_table(summary_pairs)
    return _report(manifest, results, certificates, tables)


def _fixture_path(name):
    return resources.files("unravelopt").joinpath("fixtures", name)


def _cmd_example(manifest: RunManifest):
    with resources.as_file(_fixture_path("example_opo.json")) as p_sys, resources.as_file(
        _fixture_path("example_control.json")
    ) as p_ctl:
        spec, control, _ = load_problem(str(p_sys), str(p_ctl))
    expected = json.loads(_fixture_path("example_expected.json").read_text(encoding="utf-8"))
    model = derive_moment_model(spec)
    hbar = spec.hbar
    res = optimize_unravelling(spec, model, control)
    W = res.W_resolved if res.W_resolved is not None else res.W_star
    fm_star = filter_model(model, res.U_star)
    design = design_markovian(W, fm_star, control)
    ups = complex(res.U_star.upsilon[0, 0])
    phi = float(np.angle(ups) / 2.0 % np.pi) if abs(ups) > 1e-12 else 0.0
    fm_het = filter_model(model, heterodyne(spec.n_channels))
    sol_het = solve_filter_care(fm_het)

    checks = []

    def add(name, expected_value, actual, tol):
        checks.append(
            {
                "name": name,
                "expected": float(expected_value),
                "actual": float(actual),
                "tol": float(tol),
                "ok": bool(abs(float(actual) - float(expected_value)) <= float(tol)),
            }
        )

    opt = expected["optimize"]
    add("m_star_per_hbar", opt["m_star_per_hbar"]["value"], res.m_star / hbar, opt["m_star_per_hbar"]["tol"])
    add("beta_star", opt["beta_star"]["value"], 2.0 * res.W_star[0, 1] / hbar, opt["beta_star"]["tol"])
    add("phi_star_per_pi", opt["phi_star_per_pi"]["value"], phi / np.pi, opt["phi_star_per_pi"]["tol"])
    for l, th in enumerate(opt["theta_star"]["value"]):
        add("theta_star[%d]" % l, th, res.U_star.theta[l], opt["theta_star"]["tol"])
    add(
        "purity_det_2W_per_hbar",
        opt["purity_det_2W_per_hbar"]["value"],
        np.linalg.det(2.0 * res.W_star / hbar),
        opt["purity_det_2W_per_hbar"]["tol"],
    )
    m_exp = expected["markovian_closed_loop"]["M"]
    for i in range(2):
        for j in range(2):
            add(
                "M[%d][%d]" % (i, j),
                m_exp["value"][i][j],
                design.M_closed[i, j],
                m_exp["tol"],
            )
    het = expected["heterodyne_filter"]
    for i in range(2):
        for j in range(2):
            add(
                "W_het_per_hbar[%d][%d]" % (i, j),
                het["W_per_hbar"]["value"][i][j],
                sol_het.X[i, j] / hbar,
                het["W_per_hbar"]["tol"],
            )
    add(
        "trace_PW_het_per_hbar",
        het["trace_PW_per_hbar"]["value"],
        np.trace(control.P @ sol_het.X) / hbar,
        het["trace_PW_per_hbar"]["tol"],
    )

    all_ok = all(c["ok"] for c in checks)
    results = {
        "m_star": _cost(res.m_star, hbar),
        "W_star": _mat(res.W_star, "hbar"),
        **_strategy_block(res.U_star, hbar),
        "M": _mat(design.M_closed, "1/time"),
        "W_heterodyne": _mat(sol_het.X, "hbar"),
        "checks": checks,
        "n_checks": len(checks),
        "n_failures": sum(1 for c in checks if not c["ok"]),
    }
    certificates = {"example_matches": all_ok}
    tables = {
        "summary": _summary_table(
            [("n_checks", len(checks)), ("n_failures", results["n_failures"])]
        ),
        "diffs": {
            "columns": ["name", "expected", "actual", "tol", "ok"],
            "rows": [
                [c["name"], c["expected"], c["actual"], c["tol"], c["ok"]]
                for c in checks
            ],
        },
        "W_entries": _entry_table(res.W_star, hbar),
    }
    return _report(manifest, results, certificates, tables)


_COMMANDS = {
    "validate": _cmd_validate,
    "moments": _cmd_moments,
    "filter": _cmd_filter,
    "optimize": _cmd_optimize,
    "markovian": _cmd_markovian,
    "simulate": _cmd_simulate,
    "example": _cmd_example,
}


def run_command(manifest: RunManifest) -> dict:
    """Dispatch a manifest to its command handler and return the report."""
    if manifest.command not in _COMMANDS:
        raise ValidationError("unknown command %r" % (manifest.command,))
    if manifest.command != "example" and not manifest.options.get("system"):
        raise ValidationError("the %s command needs --system" % manifest.command)
    report = _COMMANDS[manifest.command](manifest)
    return _jsonable(report)


# ---------------------------------------------------------------------------
# output


def _csv_cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(report: dict, output_format: str, path=None) -> None:
    """Serialize a report; json to one file (or stdout), csv one file per table."""
    if output_format == "json":
        text = json.dumps(report, indent=2, sort_keys=True) + "\n"
        if path is None:
            sys.stdout.write(text)
        else:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return
    if output_format != "csv":
        raise ValidationError("unknown output format %r" % (output_format,))
    if path is None:
        raise ValidationError("csv output needs --out PATH")
    base = str(path)
    if base.endswith(".csv"):
        base = base[:-4]
    manifest_line = "# manifest: " + json.dumps(
        report["manifest"], sort_keys=True, separators=(",", ":")
    )
    for name, table in sorted(report["tables"].items()):
        out_path = "%s.%s.csv" % (base, name)
        lines = [manifest_line, ",".join(table["columns"])]
        for row in table["rows"]:
            lines.append(",".join(_csv_cell(v) for v in row))
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which collides with the numerical
    # failure code; usage problems are validation errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write("%s: error: %s\n" % (self.prog, message))
        raise SystemExit(EXIT_VALIDATION)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="unravelopt",
        description=(
            "Workbench for measurement-strategy optimization of linear "
            "quantum stochastic control problems."
        ),
    )
    parser.add_argument("--version", action="version", version="unravelopt " + __version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    descriptions = {
        "validate": "check a system file and report detectability",
        "moments": "derive drift and diffusion, integrate the unconditional moments",
        "filter": "solve the conditional steady state for a given strategy",
        "optimize": "find the cost-minimizing strategy and synthesize feedback",
        "markovian": "synthesize current feedback for a given strategy",
        "simulate": "Monte-Carlo the conditional dynamics and score the cost",
        "example": "run the bundled example end-to-end against stored expectations",
    }
    for name, desc in descriptions.items():
        cmd = sub.add_parser(name, help=desc, description=desc)
        if name != "example":
            cmd.add_argument("--system", required=True, help="system definition json")
        cmd.add_argument("--control", default=None, help="control cost json")
        cmd.add_argument("--unravelling", default=None, help="measurement strategy json")
        cmd.add_argument("--out", default=None, help="output path (default: stdout for json)")
        cmd.add_argument("--format", choices=("json", "csv"), default="json")
        cmd.add_argument("--seed", type=int, default=0)
        cmd.add_argument("--dt", type=float, default=None)
        cmd.add_argument("--t-final", type=float, default=None)
        cmd.add_argument("--trajectories", type=int, default=None)
        cmd.add_argument("--phi-resolution", type=float, default=None)
        if name == "simulate":
            cmd.add_argument(
                "--design",
                choices=("none", "optimal", "markovian"),
                default="none",
                help="feedback law applied during the run",
            )

    return parser


def _manifest_from_args(args) -> RunManifest:
    options = {
        "system": getattr(args, "system", None),
        "control": args.control,
        "unravelling": args.unravelling,
        "dt": args.dt,
        "t_final": args.t_final,
        "trajectories": args.trajectories,
        "phi_resolution": args.phi_resolution,
        "design": getattr(args, "design", None),
    }
    input_paths = [
        p
        for p in (options["system"], options["control"], options["unravelling"])
        if p is not None
    ]
    return RunManifest(
        command=args.command,
        input_paths=input_paths,
        seed=args.seed,
        output_format=args.format,
        tool_version=__version__,
        options=options,
    )


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    manifest = _manifest_from_args(args)
    try:
        report = run_command(manifest)
        write_report(report, manifest.output_format, args.out)
    except ValidationError as exc:
        sys.stderr.write("validation error: %s\n" % exc)
        return EXIT_VALIDATION
    except NumericalError as exc:
        sys.stderr.write("numerical failure: %s\n" % exc)
        return EXIT_NUMERICAL
    except ParseError as exc:
        sys.stderr.write("parse error: %s\n" % exc)
        return EXIT_IO
    except OSError as exc:
        sys.stderr.write("i/o error: %s\n" % exc)
        return EXIT_IO
    if not all(report["certificates"].values()):
        failed = [k for k, v in report["certificates"].items() if not v]
        sys.stderr.write("certificates failed: %s\n" % ", ".join(sorted(failed)))
        return EXIT_VALIDATION if manifest.command == "validate" else EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
