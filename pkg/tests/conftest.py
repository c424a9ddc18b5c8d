import numpy as np
import pytest

from pathlangevin import (
    BridgeProblem,
    FreePathProblem,
    Grid,
    Observations,
    SmoothingProblem,
    builtin_potential,
    make_matrix_set,
    stationary_start_weight,
    zero_potential,
)


@pytest.fixture
def grid16():
    return Grid(16)


@pytest.fixture
def trivial_bridge():
    """f = 0, A = 0, B = 1 bridge from 0 to 0: exact Brownian bridge."""
    return BridgeProblem(
        mats=make_matrix_set(d=1),
        potential=zero_potential(1),
        x_minus=[0.0],
        x_plus=[0.0],
    )


@pytest.fixture
def ou_bridge():
    """Quadratic potential bridge from -1 to 1."""
    return BridgeProblem(
        mats=make_matrix_set(d=1),
        potential=builtin_potential("quadratic", Q=[[1.0]]),
        x_minus=[-1.0],
        x_plus=[1.0],
    )


@pytest.fixture
def ou_free_path():
    return FreePathProblem(
        mats=make_matrix_set(d=1),
        potential=builtin_potential("quadratic", Q=[[1.0]]),
        x_minus=[2.0],
    )


@pytest.fixture
def double_well_bridge():
    return BridgeProblem(
        mats=make_matrix_set(d=1),
        potential=builtin_potential("double_well", a=1.0, b=1.0),
        x_minus=[-1.0],
        x_plus=[1.0],
    )


def make_smoothing(grid, potential=None, a21=1.0, b11=1.0, b22=1.0, seed=7, scale=0.3):
    """Smoothing problem with synthetic increments (not from the model;
    the target is defined conditionally on whatever data is supplied)."""
    if potential is None:
        potential = builtin_potential("double_well", a=1.0, b=1.0)
    rng = np.random.default_rng(seed)
    obs = Observations(scale * rng.standard_normal((grid.M, 1)), grid)
    return SmoothingProblem(
        A21=[[a21]],
        B11=[[b11]],
        B22=[[b22]],
        potential=potential,
        start_weight=stationary_start_weight(potential),
        observations=obs,
    )


@pytest.fixture
def smoothing_nonlinear(grid16):
    return make_smoothing(grid16)
