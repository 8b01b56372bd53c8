"""Shared fixtures. Heavy objects (basis stacks, operators) are built once
per session; tests must not mutate them."""

import numpy as np
import pytest

from smolm.basis import SyntheticBasisParams, synthetic_basis
from smolm.operator import DesignOperator, GridSpec


@pytest.fixture(scope="session")
def basis_params():
    return SyntheticBasisParams()


@pytest.fixture(scope="session")
def basis(basis_params):
    return synthetic_basis(basis_params)


@pytest.fixture(scope="session")
def grid20(basis_params):
    return GridSpec(20, 20, basis_params.pixel_size_nm)


@pytest.fixture(scope="session")
def op20(basis, grid20):
    """Workhorse operator: 20x20-pixel camera, one grid point per pixel."""
    return DesignOperator(basis, grid20)


@pytest.fixture(scope="session")
def op_wide(basis, basis_params):
    """Rectangular instance exercising height != width code paths."""
    return DesignOperator(basis, GridSpec(32, 64, basis_params.pixel_size_nm))


@pytest.fixture(scope="session")
def op_fine(basis, basis_params):
    """Refined grid (two points per pixel) on a small camera."""
    return DesignOperator(
        basis, GridSpec(12, 12, basis_params.pixel_size_nm, points_per_pixel=2)
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
