import numpy as np
import pytest

from unravelopt import (
    ControllerDesign,
    ControlProblem,
    SystemSpec,
    closed_loop_matrix,
    compose_U,
    derive_moment_model,
    design_markovian,
    design_optimal,
    filter_model,
    heterodyne,
    homodyne,
    markovian_gain,
    optimal_gain,
    optimize_unravelling,
    solve_control_care,
    solve_filter_care,
)
from unravelopt.errors import NumericalError, ValidationError

from conftest import EXAMPLE_M_STAR, random_filter_instance


def test_control_problem_validation():
    with pytest.raises(ValidationError, match="full row rank"):
        ControlProblem(P=np.eye(2), Q=None, B=[[0.0], [1.0]])
    with pytest.raises(ValidationError, match="PSD"):
        ControlProblem(P=-np.eye(2), Q=None, B=np.eye(2))
    with pytest.raises(ValidationError, match="rows"):
        ControlProblem(P=np.eye(4), Q=None, B=np.eye(2))
    with pytest.raises(ValidationError, match="columns"):
        ControlProblem(P=np.eye(2), Q=np.eye(3), B=np.eye(2))
    with pytest.raises(ValidationError, match="PSD"):
        ControlProblem(P=np.eye(2), Q=-np.eye(2), B=np.eye(2))
    assert ControlProblem(P=np.eye(2), Q=None, B=np.eye(2)).q_zero_limit
    assert not ControlProblem(P=np.eye(2), Q=np.eye(2), B=np.eye(2)).q_zero_limit


def test_optimal_gain_scalar():
    Y = solve_control_care([[-1.0]], [[1.0]], [[1.0]], [[1.0]])
    K = optimal_gain(Y, [[1.0]], [[1.0]])
    np.testing.assert_allclose(K, [[np.sqrt(2.0) - 1.0]], atol=1e-10)
    with pytest.raises(ValidationError, match="singular"):
        optimal_gain(Y, [[1.0]], [[0.0]])


def test_design_optimal_example(example_model):
    control = ControlProblem(P=[[1.0, -1.0], [-1.0, 1.0]], Q=0.5 * np.eye(2), B=np.eye(2))
    Y = solve_control_care(example_model.A, control.B, control.P, control.Q)
    fm = filter_model(example_model, heterodyne(1))
    W = solve_filter_care(fm).X
    design = design_optimal(Y, control, fm, W)
    assert design.kind == "optimal"
    assert design.F is None
    np.testing.assert_allclose(design.K, np.linalg.solve(control.Q, control.B.T @ Y.X))
    assert np.max(np.linalg.eigvals(design.M_closed).real) < 0.0
    lam = Y.X @ control.B @ np.linalg.solve(control.Q, control.B.T @ Y.X)
    expected = float(np.trace(lam @ W) + np.trace(Y.X @ example_model.D))
    np.testing.assert_allclose(design.predicted_cost, expected, atol=1e-10)
    assert design.cancellation_residual == 0.0


def test_design_optimal_refuses_cheap_control(example_model):
    control = ControlProblem(P=np.eye(2), Q=None, B=np.eye(2))
    Y = solve_control_care(example_model.A, np.eye(2), np.eye(2), np.eye(2))
    fm = filter_model(example_model, heterodyne(1))
    W = solve_filter_care(fm).X
    with pytest.raises(ValidationError, match="Markovian"):
        design_optimal(Y, control, fm, W)


def test_markovian_heterodyne_closed_form(example_model, example_control):
    fm = filter_model(example_model, heterodyne(1))
    W = solve_filter_care(fm).X
    design = design_markovian(W, fm, example_control)
    np.testing.assert_allclose(
        design.F, np.diag([-1.0, np.sqrt(2.0) - 1.0]), atol=1e-9
    )
    np.testing.assert_allclose(design.M_closed, -np.sqrt(2.0) * np.eye(2), atol=1e-9)
    np.testing.assert_allclose(design.predicted_cost, np.sqrt(2.0), atol=1e-9)
    assert design.cancellation_residual <= 1e-12
    M = closed_loop_matrix(design, fm, example_model.A, example_control.B)
    np.testing.assert_allclose(M, design.M_closed, atol=1e-12)


def test_markovian_cancellation_identity():
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        n_modes = int(rng.integers(1, 3))
        L = int(rng.integers(1, 3))
        _, model, _, fm, sol = random_filter_instance(
            rng, n_modes, L, efficient=bool(seed % 2)
        )
        B = np.eye(2 * n_modes)
        F = markovian_gain(sol.X, fm, B)
        leftover = B @ F + sol.X @ fm.C.T + fm.Gamma.T
        assert np.linalg.norm(leftover) <= 1e-12 * (1.0 + np.linalg.norm(sol.X))


def test_markovian_rectangular_actuation(example_model, example_control):
    fm = filter_model(example_model, heterodyne(1))
    W = solve_filter_care(fm).X
    B = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    F = markovian_gain(W, fm, B)
    assert F.shape == (3, 2)
    target = -(W @ fm.C.T + fm.Gamma.T)
    np.testing.assert_allclose(B @ F, target, atol=1e-12)
    control = ControlProblem(P=example_control.P, Q=None, B=B)
    design = design_markovian(W, fm, control)
    assert design.cancellation_residual <= 1e-12
    np.testing.assert_allclose(design.predicted_cost, np.sqrt(2.0), atol=1e-9)


def test_markovian_rank_deficient_actuation(example_model):
    fm = filter_model(example_model, heterodyne(1))
    W = solve_filter_care(fm).X
    with pytest.raises(ValidationError, match="full row rank"):
        markovian_gain(W, fm, np.array([[1.0], [0.0]]))


def test_markovian_matches_free_control_optimum(example_spec, example_model, example_control):
    res = optimize_unravelling(example_spec, example_model, example_control)
    fm = filter_model(example_model, res.U_star)
    design = design_markovian(res.W_resolved, fm, example_control)
    np.testing.assert_allclose(design.predicted_cost, res.m_star, atol=1e-7)
    np.testing.assert_allclose(design.predicted_cost, EXAMPLE_M_STAR, atol=1e-6)
    assert design.cancellation_residual <= 1e-12


def test_separation_of_regulator_and_filter_spectra():
    for seed in range(10):
        rng = np.random.default_rng(600 + seed)
        _, model, _, fm, sol = random_filter_instance(rng, 1, 1, efficient=True)
        n = model.A.shape[0]
        control = ControlProblem(P=np.eye(n), Q=np.eye(n), B=np.eye(n))
        Y = solve_control_care(model.A, control.B, control.P, control.Q)
        design = design_optimal(Y, control, fm, sol.X)
        mean, error = closed_loop_matrix(design, fm, model.A, control.B)
        # joint (mean, estimation-error) dynamics are block triangular,
        # so the closed-loop spectrum is exactly the union
        BK = control.B @ design.K
        block = np.block([[model.A - BK, BK], [np.zeros((n, n)), error]])
        got = np.sort_complex(np.linalg.eigvals(block))
        want = np.sort_complex(
            np.concatenate([np.linalg.eigvals(mean), np.linalg.eigvals(error)])
        )
        np.testing.assert_allclose(got, want, atol=1e-8)
        assert np.max(got.real) < 0.0


def test_zero_information_measurement_gives_zero_gain():
    # U = 0 discards the record: no current feedback is possible and
    # the mean dynamics stay open loop
    spec = SystemSpec(
        hbar=1.0,
        G=np.zeros((2, 2)),
        C_re=[[1.0, 0.0]],
        C_im=[[0.0, 1.0]],
        B=np.eye(2),
    )
    model = derive_moment_model(spec)
    np.testing.assert_allclose(model.A, -np.eye(2), atol=1e-14)
    fm = filter_model(model, compose_U([0.0], np.zeros((1, 1), dtype=complex)))
    np.testing.assert_allclose(fm.C, 0.0, atol=1e-15)
    sol = solve_filter_care(fm)
    np.testing.assert_allclose(sol.X, 0.5 * np.eye(2), atol=1e-10)
    control = ControlProblem(P=np.eye(2), Q=None, B=np.eye(2))
    design = design_markovian(sol.X, fm, control)
    np.testing.assert_allclose(design.F, 0.0, atol=1e-10)
    np.testing.assert_allclose(design.M_closed, model.A, atol=1e-10)


def test_markovian_rejects_destabilizing_covariance(example_model, example_control):
    # the non-stabilizing root of the amplitude-quadrature filter leaves
    # an antidamped closed loop
    fm = filter_model(example_model, homodyne(0.0))
    W_bad = np.diag([0.0, 0.25])
    with pytest.raises(NumericalError, match="not strictly stable"):
        design_markovian(W_bad, fm, example_control)


def test_closed_loop_matrix_rejects_unknown_kind(example_model, example_control):
    fm = filter_model(example_model, heterodyne(1))
    bogus = ControllerDesign(
        kind="bogus",
        K=None,
        F=None,
        M_closed=np.eye(2),
        predicted_cost=0.0,
        W=np.eye(2),
        cancellation_residual=0.0,
    )
    with pytest.raises(ValidationError, match="kind"):
        closed_loop_matrix(bogus, fm, example_model.A, example_control.B)
