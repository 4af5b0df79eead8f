import json

import numpy as np
import pytest

from unravelopt.cli import main

SYSTEM = {
    "hbar": 1.0,
    "G": [[0.0, 1.0], [1.0, 0.0]],
    "C": {"re": [[1.0, 0.0]], "im": [[0.0, 1.0]]},
    "B": [[1.0, 0.0], [0.0, 1.0]],
}
CLOSED_SYSTEM = {
    "hbar": 1.0,
    "G": [[0.0, 1.0], [1.0, 0.0]],
    "C": {"re": [[0.0, 0.0]], "im": [[0.0, 0.0]]},
    "B": [[1.0, 0.0], [0.0, 1.0]],
}
CONTROL = {"P": [[1.0, -1.0], [-1.0, 1.0]], "Q": None}
HETERODYNE = {"theta": [1.0], "upsilon": {"re": [[0.0]], "im": [[0.0]]}}
HOMODYNE = {"theta": [1.0], "upsilon": {"re": [[1.0]], "im": [[0.0]]}}


@pytest.fixture
def inputs(tmp_path):
    paths = {}
    for name, obj in [
        ("system", SYSTEM),
        ("closed", CLOSED_SYSTEM),
        ("control", CONTROL),
        ("heterodyne", HETERODYNE),
        ("homodyne", HOMODYNE),
    ]:
        p = tmp_path / ("%s.json" % name)
        p.write_text(json.dumps(obj))
        paths[name] = str(p)
    return paths


def run_json(capsys, args):
    rc = main(args)
    out = capsys.readouterr().out
    return rc, json.loads(out)


def test_validate_reports_moment_model(capsys, inputs):
    rc, rep = run_json(capsys, ["validate", "--system", inputs["system"]])
    assert rc == 0
    assert rep["certificates"] == {"detectable": True, "system_valid": True}
    np.testing.assert_allclose(rep["results"]["A"]["value"], [[0.0, 0.0], [0.0, -2.0]])
    np.testing.assert_allclose(rep["results"]["D"]["value"], np.eye(2).tolist())
    assert rep["results"]["n_modes"] == 1
    assert rep["manifest"]["command"] == "validate"
    assert rep["manifest"]["tool_version"]


def test_validate_flags_undetectable_system(capsys, inputs, tmp_path):
    out_path = tmp_path / "report.json"
    rc = main(["validate", "--system", inputs["closed"], "--out", str(out_path)])
    assert rc == 1
    assert "certificates failed" in capsys.readouterr().err
    rep = json.loads(out_path.read_text())
    assert rep["certificates"]["detectable"] is False
    assert rep["results"]["undetectable_eigenvalues"]


def test_moments_csv_output(inputs, tmp_path):
    out = tmp_path / "moments.csv"
    rc = main(
        [
            "moments",
            "--system",
            inputs["system"],
            "--t-final",
            "5.0",
            "--format",
            "csv",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    cov = tmp_path / "moments.covariance_evolution.csv"
    assert cov.exists()
    assert (tmp_path / "moments.summary.csv").exists()
    lines = cov.read_text().splitlines()
    assert lines[0].startswith("# manifest: ")
    manifest = json.loads(lines[0][len("# manifest: ") :])
    assert manifest["command"] == "moments"
    assert lines[1] == "t,V_00,V_01,V_11"
    last = [float(v) for v in lines[-1].split(",")]
    np.testing.assert_allclose(last[0], 5.0, atol=1e-12)
    np.testing.assert_allclose(last[1], 5.5, atol=1e-6)
    np.testing.assert_allclose(last[3], 0.25, atol=1e-6)


def test_filter_heterodyne_values(capsys, inputs):
    rc, rep = run_json(
        capsys,
        ["filter", "--system", inputs["system"], "--unravelling", inputs["heterodyne"]],
    )
    assert rc == 0
    assert rep["certificates"]["stabilizing"] is True
    assert rep["certificates"]["uncertainty_ok"] is True
    W = np.array(rep["results"]["W"]["value"])
    expected = np.diag([0.5 + 1.0 / np.sqrt(2.0), 0.5 * (np.sqrt(2.0) - 1.0)])
    np.testing.assert_allclose(W, expected, atol=1e-9)
    np.testing.assert_allclose(
        rep["results"]["purity_det_2W_per_hbar"], 1.0, atol=1e-9
    )


def test_optimize_finds_known_strategy(capsys, inputs):
    rc, rep = run_json(
        capsys,
        ["optimize", "--system", inputs["system"], "--control", inputs["control"]],
    )
    assert rc == 0
    assert all(rep["certificates"].values())
    np.testing.assert_allclose(
        rep["results"]["m_star"]["value"], 1.1176927877989538, atol=1e-6
    )
    np.testing.assert_allclose(
        rep["results"]["phi"]["per_pi"], 0.2778964085903737, atol=1e-6
    )
    np.testing.assert_allclose(
        np.ravel(rep["results"]["Theta"]["value"]), [1.0], atol=1e-9
    )
    assert rep["results"]["design_kind"] == "markovian"


def test_optimize_with_grid_cross_check(capsys, inputs):
    rc, rep = run_json(
        capsys,
        [
            "optimize",
            "--system",
            inputs["system"],
            "--control",
            inputs["control"],
            "--phi-resolution",
            "0.02",
        ],
    )
    assert rc == 0
    assert rep["certificates"]["oracle_agreement"] is True
    table = rep["tables"]["cost_vs_phi"]
    assert table["columns"] == ["phi", "cost", "stable"]
    costs = {row[0]: row[1] for row in table["rows"]}
    np.testing.assert_allclose(costs[0.0], 1.25, atol=1e-9)


def test_markovian_design_values(capsys, inputs):
    rc, rep = run_json(
        capsys,
        [
            "markovian",
            "--system",
            inputs["system"],
            "--control",
            inputs["control"],
            "--unravelling",
            inputs["heterodyne"],
        ],
    )
    assert rc == 0
    np.testing.assert_allclose(
        rep["results"]["F"]["value"],
        np.diag([-1.0, np.sqrt(2.0) - 1.0]),
        atol=1e-9,
    )
    np.testing.assert_allclose(
        rep["results"]["M"]["value"], (-np.sqrt(2.0) * np.eye(2)).tolist(), atol=1e-9
    )
    np.testing.assert_allclose(
        rep["results"]["predicted_cost"]["value"], np.sqrt(2.0), atol=1e-9
    )
    assert rep["results"]["cancellation_residual"] <= 1e-12


def test_simulate_reports_are_reproducible(inputs, tmp_path):
    args = [
        "simulate",
        "--system",
        inputs["system"],
        "--unravelling",
        inputs["heterodyne"],
        "--dt",
        "0.01",
        "--t-final",
        "1.0",
        "--trajectories",
        "50",
        "--seed",
        "7",
    ]
    out_a = tmp_path / "a.json"
    out_b = tmp_path / "b.json"
    assert main(args + ["--out", str(out_a)]) == 0
    assert main(args + ["--out", str(out_b)]) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    rep = json.loads(out_a.read_text())
    assert rep["results"]["backend"] in ("python", "cython")
    assert rep["certificates"]["uncertainty_ok_along_path"] is True


def test_simulate_with_markovian_design(capsys, inputs):
    rc, rep = run_json(
        capsys,
        [
            "simulate",
            "--system",
            inputs["system"],
            "--unravelling",
            inputs["heterodyne"],
            "--control",
            inputs["control"],
            "--design",
            "markovian",
            "--dt",
            "0.01",
            "--t-final",
            "2.0",
            "--trajectories",
            "100",
            "--seed",
            "1",
        ],
    )
    assert rc == 0
    assert rep["results"]["design_kind"] == "markovian"
    assert "cost_estimate" in rep["results"]


def test_simulate_rejects_optimal_design_for_cheap_control(inputs, capsys):
    rc = main(
        [
            "simulate",
            "--system",
            inputs["system"],
            "--unravelling",
            inputs["heterodyne"],
            "--control",
            inputs["control"],
            "--design",
            "optimal",
            "--dt",
            "0.01",
            "--t-final",
            "1.0",
            "--trajectories",
            "10",
        ]
    )
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_example_command_self_checks(capsys):
    rc, rep = run_json(capsys, ["example"])
    assert rc == 0
    assert rep["certificates"]["example_matches"] is True
    names = [row[0] for row in rep["tables"]["diffs"]["rows"]]
    assert "m_star_per_hbar" in names
    for row in rep["tables"]["diffs"]["rows"]:
        assert row[-1] is True


def test_exit_codes(inputs, tmp_path, capsys):
    # missing input file
    assert main(["validate", "--system", str(tmp_path / "absent.json")]) == 3
    # malformed json
    bad = tmp_path / "bad.json"
    bad.write_text("{broken")
    assert main(["validate", "--system", str(bad)]) == 3
    # inadmissible strategy
    theta_bad = tmp_path / "theta.json"
    theta_bad.write_text(
        json.dumps({"theta": [1.5], "upsilon": {"re": [[0.0]], "im": [[0.0]]}})
    )
    assert (
        main(
            [
                "filter",
                "--system",
                inputs["system"],
                "--unravelling",
                str(theta_bad),
            ]
        )
        == 1
    )
    # csv needs a target path
    assert main(["validate", "--system", inputs["system"], "--format", "csv"]) == 1
    # missing required flag (argparse remapped to validation exit)
    assert main(["validate"]) == 1
    # unknown subcommand
    assert main(["frobnicate"]) == 1
    capsys.readouterr()


def test_missing_key_is_validation_error(tmp_path, capsys):
    incomplete = tmp_path / "incomplete.json"
    incomplete.write_text(json.dumps({"hbar": 1.0, "G": [[0.0]]}))
    assert main(["validate", "--system", str(incomplete)]) == 1
    assert "error" in capsys.readouterr().err
