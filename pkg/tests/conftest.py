import numpy as np
import pytest

from unravelopt import (
    ControlProblem,
    SystemSpec,
    compose_U,
    derive_moment_model,
    filter_model,
    pbh_detectable,
    solve_filter_care,
)
from unravelopt.errors import NumericalError, ValidationError


@pytest.fixture(scope="session")
def example_spec():
    return SystemSpec(
        hbar=1.0,
        G=[[0.0, 1.0], [1.0, 0.0]],
        C_re=[[1.0, 0.0]],
        C_im=[[0.0, 1.0]],
        B=np.eye(2),
    )


@pytest.fixture(scope="session")
def example_model(example_spec):
    return derive_moment_model(example_spec)


@pytest.fixture(scope="session")
def example_control():
    return ControlProblem(P=[[1.0, -1.0], [-1.0, 1.0]], Q=None, B=np.eye(2))


# phase of the cost-minimizing homodyne strategy for the example, from
# an independent golden-section scan of the scalar filter equation
EXAMPLE_PHI_STAR = 0.2778964085903737 * np.pi
EXAMPLE_M_STAR = 1.1176927877989538
EXAMPLE_BETA_STAR = 0.24756370623933988


def random_system(rng, n_modes=1, n_channels=1, hbar=1.0, coupling=1.0):
    """Random spec whose joint quadrature pair (C_bar, A) is detectable."""
    n = 2 * n_modes
    for _ in range(200):
        G = rng.standard_normal((n, n))
        G = 0.5 * (G + G.T)
        C_re = coupling * rng.standard_normal((n_channels, n))
        C_im = coupling * rng.standard_normal((n_channels, n))
        spec = SystemSpec(hbar=hbar, G=G, C_re=C_re, C_im=C_im, B=np.eye(n))
        model = derive_moment_model(spec)
        if pbh_detectable(model.C_bar, model.A):
            return spec, model
    raise RuntimeError("no detectable system found")


def random_unravelling(rng, n_channels, efficient=False):
    """Random admissible strategy, shrinking Upsilon until U is PSD."""
    if efficient:
        theta = np.ones(n_channels)
    else:
        theta = rng.uniform(0.3, 1.0, size=n_channels)
    Y = rng.standard_normal((n_channels, n_channels)) + 1j * rng.standard_normal(
        (n_channels, n_channels)
    )
    Y = 0.5 * (Y + Y.T)
    for _ in range(60):
        try:
            return compose_U(theta, Y)
        except ValidationError:
            Y = 0.7 * Y
    return compose_U(theta, np.zeros((n_channels, n_channels), dtype=complex))


def random_filter_instance(rng, n_modes, n_channels, efficient=False, hbar=1.0):
    """A (spec, model, unravelling, fm) tuple whose filter equation is solvable."""
    for _ in range(200):
        spec, model = random_system(rng, n_modes, n_channels, hbar=hbar)
        unr = random_unravelling(rng, n_channels, efficient=efficient)
        fm = filter_model(model, unr)
        if not pbh_detectable(fm.C, fm.Omega_eff):
            continue
        try:
            sol = solve_filter_care(fm)
        except NumericalError:
            continue
        if sol.stabilizing:
            return spec, model, unr, fm, sol
    raise RuntimeError("no solvable filter instance found")
