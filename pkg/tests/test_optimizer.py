import numpy as np
import pytest

from unravelopt import (
    ControlProblem,
    CostWeight,
    SystemSpec,
    cost_weight,
    derive_moment_model,
    filter_model,
    grid_oracle,
    heterodyne,
    optimize_unravelling,
    solve_control_care,
    solve_filter_care,
    solve_sdp,
)
from unravelopt.errors import NumericalError, ValidationError

from conftest import EXAMPLE_BETA_STAR, EXAMPLE_M_STAR, EXAMPLE_PHI_STAR


def test_cost_weight_cheap_control_is_state_weight():
    P = np.array([[1.0, -1.0], [-1.0, 1.0]])
    w = cost_weight(None, np.eye(2), None, np.eye(2), P=P)
    np.testing.assert_allclose(w.Lambda, P, atol=1e-15)
    assert w.constant_term == 0.0


def test_cost_weight_scalar_regulator():
    Y = solve_control_care([[-1.0]], [[1.0]], [[1.0]], [[1.0]])
    w = cost_weight(Y, [[1.0]], [[1.0]], [[1.0]])
    gold = np.sqrt(2.0) - 1.0
    np.testing.assert_allclose(w.Lambda, [[gold**2]], atol=1e-10)
    np.testing.assert_allclose(w.constant_term, gold, atol=1e-10)


def test_cost_weight_zero_state_cost_gives_zero_weight():
    Y = solve_control_care([[-1.0]], [[1.0]], [[0.0]], [[1.0]])
    w = cost_weight(Y, [[1.0]], [[1.0]], [[1.0]])
    np.testing.assert_allclose(w.Lambda, 0.0, atol=1e-12)
    np.testing.assert_allclose(w.constant_term, 0.0, atol=1e-12)


def test_cost_weight_rejects_bad_combinations():
    with pytest.raises(ValidationError, match="cheap-control"):
        cost_weight(None, np.eye(2), np.zeros((2, 2)), np.eye(2))
    with pytest.raises(ValidationError, match="requires P"):
        cost_weight(None, np.eye(2), None, np.eye(2))
    with pytest.raises(ValidationError, match="regulator solution"):
        cost_weight(None, np.eye(2), np.eye(2), np.eye(2))
    with pytest.raises(ValidationError, match="PSD"):
        CostWeight(Lambda=-np.eye(2), constant_term=0.0)


def test_sdp_reaches_known_optimum(example_model, example_control):
    weight = cost_weight(None, example_control.B, None, example_model.D, P=example_control.P)
    sdp = solve_sdp(weight, example_model)
    assert abs(sdp.m_star - EXAMPLE_M_STAR) <= 1e-6
    # duality gap certificate: mu shrinks until it bounds the gap
    assert sdp.barrier_mu_final <= 1.01e-9 * (1.0 + abs(sdp.m_star))
    f1, f2 = sdp.lmi_residuals
    assert f1 >= -1e-9 and f2 >= -1e-9
    # the uncertainty LMI is active at the optimum (pure state)
    assert abs(f1) <= 1e-6
    # optimal covariance beats the heterodyne baseline and is nontrivial
    fm_het = filter_model(example_model, heterodyne(1))
    W_het = solve_filter_care(fm_het).X
    het_cost = float(np.trace(example_control.P @ W_het))
    np.testing.assert_allclose(het_cost, np.sqrt(2.0), atol=1e-9)
    assert sdp.m_star < het_cost - 0.25
    assert sdp.m_star > 0.1


def test_sdp_flat_objective_short_circuits(example_model):
    weight = CostWeight(Lambda=np.zeros((2, 2)), constant_term=0.0)
    sdp = solve_sdp(weight, example_model)
    assert sdp.m_star == 0.0
    assert sdp.barrier_mu_final == 0.0
    f1, f2 = sdp.lmi_residuals
    assert f1 > 0.0 and f2 > 0.0


def test_sdp_rejects_hbar_mismatch(example_model, example_control):
    weight = cost_weight(None, example_control.B, None, example_model.D, P=example_control.P)
    with pytest.raises(ValidationError, match="hbar"):
        solve_sdp(weight, example_model, hbar=2.0)


def test_sdp_rejects_undetectable_system():
    spec = SystemSpec(
        hbar=1.0,
        G=[[0.0, 1.0], [1.0, 0.0]],
        C_re=[[0.0, 0.0]],
        C_im=[[0.0, 0.0]],
        B=np.eye(2),
    )
    model = derive_moment_model(spec)
    weight = CostWeight(Lambda=np.eye(2), constant_term=0.0)
    with pytest.raises(NumericalError, match="undetectable"):
        solve_sdp(weight, model)


def test_grid_oracle_locates_the_same_optimum(example_model, example_control):
    weight = cost_weight(None, example_control.B, None, example_model.D, P=example_control.P)
    oracle = grid_oracle(example_model, None, weight, resolution=np.pi / 80.0)
    assert oracle.theta_best == 1.0
    assert abs(oracle.phi_best - EXAMPLE_PHI_STAR) <= np.pi / 80.0
    assert abs(oracle.m_best - EXAMPLE_M_STAR) <= 5e-3
    assert oracle.m_best >= EXAMPLE_M_STAR - 1e-9
    # table covers 4 efficiencies x 80 phases with finite stabilizing costs
    assert oracle.table.shape == (320, 4)
    row = oracle.table[(oracle.table[:, 0] == 1.0) & (oracle.table[:, 1] == 0.0)]
    assert row.shape == (1, 4)
    np.testing.assert_allclose(row[0, 2], 1.25, atol=1e-9)
    assert row[0, 3] == 1.0


def test_grid_oracle_validation(example_model, example_control):
    weight = cost_weight(None, example_control.B, None, example_model.D, P=example_control.P)
    with pytest.raises(ValidationError, match="resolution"):
        grid_oracle(example_model, None, weight, resolution=4.0)
    rng = np.random.default_rng(3)
    from conftest import random_system

    _, model2 = random_system(rng, 2, 2)
    with pytest.raises(ValidationError, match="N = L = 1"):
        grid_oracle(model2, None, weight)


def test_full_pipeline_on_example(example_spec, example_model, example_control):
    res = optimize_unravelling(example_spec, example_model, example_control)
    assert abs(res.m_star - EXAMPLE_M_STAR) <= 1e-6
    assert not res.recover_flagged
    assert res.recover_residual <= 1e-8
    # recovered strategy: efficient homodyne at the optimal phase
    np.testing.assert_allclose(res.U_star.theta, [1.0], atol=1e-6)
    y = res.U_star.upsilon[0, 0]
    np.testing.assert_allclose(abs(y), 1.0, atol=1e-6)
    phi = 0.5 * np.angle(y)
    assert abs(phi - EXAMPLE_PHI_STAR) <= 1e-5
    # optimal covariance structure: 2W = [[a, b], [b, g]] is pure with
    # g = (1 - b^2)/2 and a = (1 + b^2)/g
    two_w = 2.0 * res.W_star
    b = two_w[0, 1]
    assert abs(b - EXAMPLE_BETA_STAR) <= 1e-5
    g = 0.5 * (1.0 - b * b)
    np.testing.assert_allclose(two_w[1, 1], g, atol=1e-6)
    np.testing.assert_allclose(two_w[0, 0], (1.0 + b * b) / g, atol=1e-5)
    np.testing.assert_allclose(np.linalg.det(two_w), 1.0, atol=1e-6)
    # the re-solved covariance reproduces the SDP optimum
    assert np.linalg.norm(res.W_resolved - res.W_star) <= 1e-6 * (
        1.0 + np.linalg.norm(res.W_star)
    )
    assert res.control_solution is None
    assert res.newton_iterations > 0


def test_full_pipeline_with_actuation_cost(example_spec, example_model):
    control = ControlProblem(
        P=[[1.0, -1.0], [-1.0, 1.0]], Q=0.5 * np.eye(2), B=np.eye(2)
    )
    res = optimize_unravelling(example_spec, example_model, control)
    Y = res.control_solution
    assert Y is not None and Y.stabilizing
    lam = Y.X @ control.B @ np.linalg.solve(control.Q, control.B.T @ Y.X)
    expected = float(np.trace(lam @ res.W_star) + np.trace(Y.X @ example_model.D))
    np.testing.assert_allclose(res.m_star, expected, atol=1e-8)
    # a bounded actuation budget can only cost more than free control
    cheap = optimize_unravelling(
        example_spec,
        example_model,
        ControlProblem(P=[[1.0, -1.0], [-1.0, 1.0]], Q=None, B=np.eye(2)),
    )
    assert res.m_star > cheap.m_star


def test_pipeline_rejects_dimension_mismatch(example_spec, example_model):
    control = ControlProblem(P=np.eye(4), Q=None, B=np.eye(4))
    with pytest.raises(ValidationError, match="dimensions"):
        optimize_unravelling(example_spec, example_model, control)
