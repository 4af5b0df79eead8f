import numpy as np
import pytest

from unravelopt import (
    MomentModel,
    SystemSpec,
    derive_moment_model,
    is_psd,
    pbh_detectable,
    symplectic_form,
    unconditional_evolution,
    validate_spec,
)
from unravelopt.errors import NumericalError, ValidationError

from conftest import random_system


def test_example_moment_model(example_spec, example_model):
    # Sigma (G + Im[C~+ C~]) collapses to diag(0, -2) for C~ = (1, i)
    np.testing.assert_allclose(example_model.A, np.diag([0.0, -2.0]), atol=1e-14)
    np.testing.assert_allclose(example_model.D, np.eye(2), atol=1e-14)
    np.testing.assert_allclose(example_model.C_bar, np.eye(2), atol=1e-14)
    assert example_spec.n_modes == 1
    assert example_spec.n_channels == 1
    assert example_spec.n_inputs == 2


def test_validate_spec_collects_findings():
    with pytest.raises(ValidationError) as err:
        validate_spec(
            SystemSpec(
                hbar=-1.0,
                G=[[0.0, 1.0], [1.0, 0.0]],
                C_re=[[1.0, 0.0]],
                C_im=[[0.0, 1.0]],
                B=np.eye(2),
            )
        )
    assert "hbar" in str(err.value)


def test_validate_spec_shape_errors():
    with pytest.raises(ValidationError):
        validate_spec(
            SystemSpec(hbar=1.0, G=np.eye(3), C_re=[[1, 0, 0]], C_im=[[0, 0, 1]], B=np.eye(3))
        )
    with pytest.raises(ValidationError):
        validate_spec(
            SystemSpec(
                hbar=1.0,
                G=[[0.0, 1.0], [0.0, 0.0]],
                C_re=[[1.0, 0.0]],
                C_im=[[0.0, 1.0]],
                B=np.eye(2),
            )
        )
    with pytest.raises(ValidationError):
        validate_spec(
            SystemSpec(
                hbar=1.0,
                G=[[0.0, 1.0], [1.0, 0.0]],
                C_re=[[1.0, 0.0]],
                C_im=[[0.0, 1.0], [1.0, 0.0]],
                B=np.eye(2),
            )
        )


def test_diffusion_always_psd():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        n_modes = int(rng.integers(1, 4))
        n_channels = int(rng.integers(1, 4))
        _, model = random_system(rng, n_modes, n_channels)
        assert is_psd(model.D), "diffusion matrix lost positivity"
        np.testing.assert_allclose(model.D, model.D.T, atol=1e-12)


def test_pbh_detectable_example(example_model):
    assert pbh_detectable(example_model.C_bar, example_model.A)


def test_pbh_closed_system_undetectable():
    spec = SystemSpec(
        hbar=1.0,
        G=[[0.0, 1.0], [1.0, 0.0]],
        C_re=[[0.0, 0.0]],
        C_im=[[0.0, 0.0]],
        B=np.eye(2),
    )
    model = derive_moment_model(spec)
    res = pbh_detectable(model.C_bar, model.A)
    assert not res
    assert len(res.witnesses) > 0
    lam, v = res.witnesses[0]
    assert lam.real >= -1e-8
    assert np.linalg.norm(model.C_bar @ v) < 1e-9


def test_pbh_single_hidden_mode():
    # C sees only the second coordinate; the marginal mode rides on the first
    A = np.array([[0.0, 0.0], [0.0, -1.0]])
    assert not pbh_detectable(np.array([[0.0, 1.0]]), A)
    assert pbh_detectable(np.array([[1.0, 0.0]]), A)


def test_unconditional_evolution_linear_growth(example_spec, example_model):
    # A = diag(0, -2), D = I: V11 grows linearly, V22 relaxes to 1/4
    t = np.linspace(0.0, 5.0, 26)
    x0 = np.zeros(2)
    V0 = 0.5 * np.eye(2)
    means, covs = unconditional_evolution(example_model, example_spec.B, None, x0, V0, t)
    np.testing.assert_allclose(means, 0.0, atol=1e-14)
    np.testing.assert_allclose(covs[-1, 0, 0], 0.5 + 5.0, atol=1e-9)
    np.testing.assert_allclose(covs[-1, 1, 1], 0.25, atol=1e-9)
    np.testing.assert_allclose(covs[-1, 0, 1], 0.0, atol=1e-12)


def test_unconditional_evolution_constant_input(example_spec, example_model):
    t = np.linspace(0.0, 2.0, 21)
    u = np.array([0.0, 1.0])
    x0 = np.zeros(2)
    V0 = 0.5 * np.eye(2)
    means, _ = unconditional_evolution(example_model, example_spec.B, u, x0, V0, t)
    # x2' = -2 x2 + 1 from rest
    expected = 0.5 * (1.0 - np.exp(-2.0 * t))
    np.testing.assert_allclose(means[:, 1], expected, atol=1e-9)
    np.testing.assert_allclose(means[:, 0], 0.0, atol=1e-12)


def test_unconditional_evolution_piecewise_input(example_spec, example_model):
    t = np.linspace(0.0, 1.0, 11)
    u = np.zeros((10, 2))
    u[:5, 1] = 1.0
    _, covs = unconditional_evolution(example_model, example_spec.B, u, np.zeros(2), 0.5 * np.eye(2), t)
    assert covs.shape == (11, 2, 2)
    with pytest.raises(ValidationError):
        unconditional_evolution(
            example_model, example_spec.B, np.zeros((3, 2)), np.zeros(2), 0.5 * np.eye(2), t
        )


def test_unconditional_evolution_uncertainty_guard(example_spec, example_model):
    # a V0 below the uncertainty floor is rejected outright
    with pytest.raises(ValidationError, match="uncertainty"):
        unconditional_evolution(
            example_model,
            example_spec.B,
            None,
            np.zeros(2),
            0.26 * np.eye(2),
            np.linspace(0.0, 0.5, 6),
        )
    # an unphysical model squeezing below the floor is caught mid-run
    leaky = MomentModel(
        hbar=1.0,
        A=-np.eye(2),
        D=np.zeros((2, 2)),
        C_bar=np.eye(2),
        sigma=symplectic_form(1),
    )
    with pytest.raises(NumericalError, match="uncertainty"):
        unconditional_evolution(
            leaky, np.eye(2), None, np.zeros(2), 0.5 * np.eye(2), np.linspace(0.0, 0.5, 6)
        )
