"""Spatial locations, correlation kernels, and centered-trace machinery.

The projection P = (I - 11^T/n)/(n - 1) is never materialized; everything that
needs P goes through center_apply or the fused trace kernels, keeping the
moment-matching path O(n^2) once a correlation matrix exists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spatial_r2d2 import _kernels

__all__ = [
    "EXPONENTIAL",
    "MATERN",
    "COMPOUND_SYMMETRY",
    "BLOCKED_COMPOUND_SYMMETRY",
    "Locations",
    "CorrelationKernel",
    "distance_matrix",
    "correlation_matrix",
    "center_apply",
    "trace_pair",
]

EXPONENTIAL = "exponential"
MATERN = "matern"
COMPOUND_SYMMETRY = "compound_symmetry"
BLOCKED_COMPOUND_SYMMETRY = "blocked_compound_symmetry"

_FAMILIES = (EXPONENTIAL, MATERN, COMPOUND_SYMMETRY, BLOCKED_COMPOUND_SYMMETRY)
_HALF_INTEGER_NU = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class Locations:
    """Planar locations, assumed already rescaled to the unit square by ingestion."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must be n x 2, got shape {coords.shape}")
        if coords.shape[0] < 2:
            raise ValueError("need at least two locations")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coordinates must be finite")
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class CorrelationKernel:
    """Kernel family plus range parameter rho (and nu / block count where used)."""

    family: str
    rho: float
    nu: float | None = None
    blocks: int | None = None

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not np.isfinite(self.rho):
            raise ValueError("rho must be finite")
        if self.family in (EXPONENTIAL, MATERN):
            if self.rho <= 0:
                raise ValueError("rho must be positive for distance-based kernels")
        else:
            # rho = 1 makes the compound-symmetry matrix rank deficient
            if not 0 <= self.rho < 1:
                raise ValueError("compound-symmetry rho must satisfy 0 <= rho < 1")
        if self.family == MATERN:
            if self.nu not in _HALF_INTEGER_NU:
                raise ValueError(f"nu must be one of {_HALF_INTEGER_NU}, got {self.nu}")
        if self.family == BLOCKED_COMPOUND_SYMMETRY:
            if self.blocks is None or int(self.blocks) < 1:
                raise ValueError("blocked compound symmetry needs a positive block count")


def distance_matrix(locs: Locations) -> np.ndarray:
    """Pairwise Euclidean distances with an exactly zero diagonal."""
    coords = locs.coords
    delta = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((delta**2).sum(axis=-1))


def correlation_matrix(kernel: CorrelationKernel, locs: Locations) -> np.ndarray:
    """Dense unit-diagonal correlation matrix for the kernel at the given locations."""
    n = locs.n
    if kernel.family in (EXPONENTIAL, MATERN):
        family_code = (
            _kernels._FAMILY_EXPONENTIAL
            if kernel.family == EXPONENTIAL
            else _kernels._FAMILY_MATERN
        )
        nu = 0.5 if kernel.nu is None else float(kernel.nu)
        return _kernels.corr_fill_kernel(locs.coords, float(kernel.rho), family_code, nu)
    if kernel.family == COMPOUND_SYMMETRY:
        sigma = np.full((n, n), kernel.rho)
        np.fill_diagonal(sigma, 1.0)
        return sigma
    blocks = int(kernel.blocks)
    if n % blocks != 0:
        raise ValueError(f"block count {blocks} does not divide n = {n}")
    size = n // blocks
    sigma = np.zeros((n, n))
    for k in range(blocks):
        lo, hi = k * size, (k + 1) * size
        sigma[lo:hi, lo:hi] = kernel.rho
    np.fill_diagonal(sigma, 1.0)
    return sigma


def center_apply(m: np.ndarray) -> np.ndarray:
    """P @ m in O(nk): subtract column means, then divide by n - 1."""
    m = np.asarray(m, dtype=float)
    n = m.shape[0]
    if n < 2:
        raise ValueError("centering needs at least two rows")
    return (m - m.mean(axis=0)) / (n - 1.0)


def trace_pair(b: np.ndarray, via_eigenvalues: bool = False) -> tuple[float, float]:
    """tr(PB) and tr(PBPB) for symmetric B, in O(n^2) from the centered matrix.

    The eigenvalue route (sums of powers of the eigenvalues of PB) exists only
    as a verification path; the direct centered sum is the production one.
    """
    b = np.asarray(b, dtype=float)
    if via_eigenvalues:
        eigenvalues = np.linalg.eigvals(center_apply(b))
        return float(eigenvalues.sum().real), float((eigenvalues**2).sum().real)
    tr1, tr2 = _kernels.trace_pair_kernel(b)
    return float(tr1), float(tr2)
