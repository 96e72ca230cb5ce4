"""Kernel, centering, and trace checks against dense-matrix oracles."""

from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatial_r2d2 import _kernels
from spatial_r2d2.spatial_core import (
    BLOCKED_COMPOUND_SYMMETRY,
    COMPOUND_SYMMETRY,
    EXPONENTIAL,
    MATERN,
    CorrelationKernel,
    Locations,
    center_apply,
    correlation_matrix,
    distance_matrix,
    trace_pair,
)


def _dense_projection(n: int) -> np.ndarray:
    return (np.eye(n) - np.ones((n, n)) / n) / (n - 1.0)


def _random_spd(rng: np.random.Generator, n: int) -> np.ndarray:
    root = rng.standard_normal((n, n))
    return root @ root.T + n * np.eye(n)


def test_distance_matrix_345():
    locs = Locations(np.array([[0.0, 0.0], [3.0, 4.0]]))
    d = distance_matrix(locs)
    assert d[0, 1] == pytest.approx(5.0)
    assert d[0, 0] == 0.0


def test_distance_matrix_identical_points():
    locs = Locations(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert distance_matrix(locs)[0, 1] == 0.0


def test_distance_matrix_symmetric_exactly():
    rng = np.random.default_rng(0)
    d = distance_matrix(Locations(rng.random((10, 2))))
    assert np.array_equal(d, d.T)


def test_locations_validation():
    with pytest.raises(ValueError):
        Locations(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        Locations(np.array([[0.0, np.nan], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        Locations(np.zeros((3, 3)))


def test_exponential_kernel_value():
    rho = 0.3
    locs = Locations(np.array([[0.0, 0.0], [rho, 0.0]]))
    sigma = correlation_matrix(CorrelationKernel(EXPONENTIAL, rho), locs)
    assert sigma[0, 1] == pytest.approx(np.exp(-1.0), abs=1e-12)
    assert sigma[0, 0] == 1.0


def test_matern_kernel_values():
    rho = 0.5
    d = 0.25
    locs = Locations(np.array([[0.0, 0.0], [d, 0.0]]))
    u = d / rho
    expected = {
        0.5: np.exp(-u),
        1.5: (1 + np.sqrt(3) * u) * np.exp(-np.sqrt(3) * u),
        2.5: (1 + np.sqrt(5) * u + 5 * u**2 / 3) * np.exp(-np.sqrt(5) * u),
    }
    for nu, value in expected.items():
        sigma = correlation_matrix(CorrelationKernel(MATERN, rho, nu=nu), locs)
        assert sigma[0, 1] == pytest.approx(value, abs=1e-12)
        assert sigma[1, 1] == 1.0


def test_matern_half_matches_exponential():
    rng = np.random.default_rng(1)
    locs = Locations(rng.random((12, 2)))
    exp_sigma = correlation_matrix(CorrelationKernel(EXPONENTIAL, 0.4), locs)
    mat_sigma = correlation_matrix(CorrelationKernel(MATERN, 0.4, nu=0.5), locs)
    np.testing.assert_allclose(exp_sigma, mat_sigma, atol=1e-15)


def test_cs_zero_rho_is_identity():
    locs = Locations(np.zeros((5, 2)))
    sigma = correlation_matrix(CorrelationKernel(COMPOUND_SYMMETRY, 0.0), locs)
    np.testing.assert_array_equal(sigma, np.eye(5))


def test_blocked_cs_structure():
    locs = Locations(np.zeros((4, 2)))
    kernel = CorrelationKernel(BLOCKED_COMPOUND_SYMMETRY, 0.5, blocks=2)
    sigma = correlation_matrix(kernel, locs)
    block = np.array([[1.0, 0.5], [0.5, 1.0]])
    expected = np.block(
        [[block, np.zeros((2, 2))], [np.zeros((2, 2)), block]]
    )
    np.testing.assert_array_equal(sigma, expected)


def test_blocked_cs_requires_divisible_n():
    locs = Locations(np.zeros((5, 2)))
    kernel = CorrelationKernel(BLOCKED_COMPOUND_SYMMETRY, 0.5, blocks=2)
    with pytest.raises(ValueError):
        correlation_matrix(kernel, locs)


def test_kernel_validation():
    with pytest.raises(ValueError):
        CorrelationKernel(COMPOUND_SYMMETRY, 1.0)
    with pytest.raises(ValueError):
        CorrelationKernel(COMPOUND_SYMMETRY, -0.1)
    with pytest.raises(ValueError):
        CorrelationKernel(EXPONENTIAL, 0.0)
    with pytest.raises(ValueError):
        CorrelationKernel(MATERN, 1.0, nu=1.0)
    with pytest.raises(ValueError):
        CorrelationKernel("gaussian", 1.0)


def test_correlation_matrix_symmetric_unit_diagonal():
    rng = np.random.default_rng(2)
    locs = Locations(rng.random((30, 2)))
    for kernel in (
        CorrelationKernel(EXPONENTIAL, 0.2),
        CorrelationKernel(MATERN, 0.7, nu=1.5),
        CorrelationKernel(COMPOUND_SYMMETRY, 0.3),
    ):
        sigma = correlation_matrix(kernel, locs)
        assert np.array_equal(sigma, sigma.T)
        assert np.all(np.diag(sigma) == 1.0)


def test_center_apply_annihilates_constants():
    column = 3.7 * np.ones((6, 1))
    np.testing.assert_allclose(center_apply(column), 0.0, atol=1e-15)


def test_center_apply_small_case_matches_dense():
    m = np.array([[0.0], [2.0]])
    expected = _dense_projection(2) @ m
    np.testing.assert_allclose(center_apply(m), expected, atol=1e-15)
    np.testing.assert_allclose(center_apply(m).ravel(), [-1.0, 1.0])


def test_center_apply_matches_dense_projection():
    rng = np.random.default_rng(3)
    m = rng.standard_normal((20, 3))
    np.testing.assert_allclose(center_apply(m), _dense_projection(20) @ m, atol=1e-12)


def test_center_apply_scaled_idempotence():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((15, 2))
    once = center_apply(m)
    np.testing.assert_allclose(center_apply(once), once / 14.0, atol=1e-12)


def test_trace_pair_identity():
    tr1, tr2 = trace_pair(np.eye(3))
    assert tr1 == pytest.approx(1.0, abs=1e-12)
    assert tr2 == pytest.approx(0.5, abs=1e-12)


def test_trace_pair_all_ones():
    tr1, tr2 = trace_pair(np.ones((6, 6)))
    assert tr1 == pytest.approx(0.0, abs=1e-14)
    assert tr2 == pytest.approx(0.0, abs=1e-14)


def test_trace_pair_matches_dense_oracle():
    rng = np.random.default_rng(5)
    b = _random_spd(rng, 30)
    p = _dense_projection(30)
    expected1 = np.trace(p @ b)
    expected2 = np.trace(p @ b @ p @ b)
    tr1, tr2 = trace_pair(b)
    assert tr1 == pytest.approx(expected1, rel=1e-10)
    assert tr2 == pytest.approx(expected2, rel=1e-10)


def test_trace_pair_eigenvalue_route_agrees():
    rng = np.random.default_rng(6)
    b = _random_spd(rng, 25)
    direct = trace_pair(b)
    via_eigs = trace_pair(b, via_eigenvalues=True)
    np.testing.assert_allclose(direct, via_eigs, rtol=1e-9)


def test_trace_pair_unit_diagonal_closed_form():
    # with unit diagonal, tr(P Sigma) = 1 - 2/(n(n-1)) * sum of upper off-diagonals
    rng = np.random.default_rng(7)
    locs = Locations(rng.random((40, 2)))
    sigma = correlation_matrix(CorrelationKernel(EXPONENTIAL, 0.3), locs)
    upper_sum = sigma[np.triu_indices(40, k=1)].sum()
    expected = 1.0 - 2.0 / (40 * 39) * upper_sum
    assert trace_pair(sigma)[0] == pytest.approx(expected, abs=1e-10)


def test_kernel_backends_agree():
    rng = np.random.default_rng(8)
    b = _random_spd(rng, 40)
    np.testing.assert_allclose(
        _kernels.trace_pair_kernel(b), _kernels._trace_pair_numpy(b), rtol=1e-10
    )
    coords = rng.random((25, 2))
    np.testing.assert_allclose(
        _kernels.corr_fill_kernel(coords, 0.4, _kernels._FAMILY_MATERN, 1.5),
        _kernels._corr_fill_numpy(coords, 0.4, _kernels._FAMILY_MATERN, 1.5),
        atol=1e-15,
    )


def test_numba_disable_flag_selects_numpy_backend():
    code = "from spatial_r2d2 import _kernels; print(_kernels.BACKEND)"
    out = subprocess.run(
        [sys.executable, "-c", code],
        capture_output=True,
        text=True,
        env={"SPATIAL_R2D2_DISABLE_NUMBA": "1", "PATH": "/usr/bin:/bin"},
    )
    assert out.stdout.strip() == "numpy"


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=12), st.integers(min_value=0, max_value=10_000))
def test_center_apply_matches_dense_property(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, 2))
    np.testing.assert_allclose(center_apply(m), _dense_projection(n) @ m, atol=1e-10)
