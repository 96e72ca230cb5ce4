"""Hot numerical loops, compiled with numba when available.

Set SPATIAL_R2D2_DISABLE_NUMBA=1 before import to force the pure-numpy path;
both backends compute identical quantities and are benchmarked against each
other in benchmarks/bench_kernels.py.
"""

from __future__ import annotations

import os

import numpy as np

_FAMILY_EXPONENTIAL = 0
_FAMILY_MATERN = 1


def _trace_pair_numpy(b: np.ndarray) -> tuple[float, float]:
    n = b.shape[0]
    centered = (b - b.mean(axis=0)) / (n - 1.0)
    tr1 = float(np.trace(centered))
    tr2 = float((centered * centered.T).sum())
    return tr1, tr2


def _corr_fill_numpy(coords: np.ndarray, rho: float, family: int, nu: float) -> np.ndarray:
    delta = coords[:, None, :] - coords[None, :, :]
    d = np.sqrt((delta**2).sum(axis=-1))
    if family == _FAMILY_EXPONENTIAL or nu == 0.5:
        out = np.exp(-d / rho)
    elif nu == 1.5:
        t = np.sqrt(3.0) * d / rho
        out = (1.0 + t) * np.exp(-t)
    else:
        t = np.sqrt(5.0) * d / rho
        out = (1.0 + t + t * t / 3.0) * np.exp(-t)
    np.fill_diagonal(out, 1.0)
    return out


USE_NUMBA = os.environ.get("SPATIAL_R2D2_DISABLE_NUMBA", "0") != "1"
if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:
        USE_NUMBA = False

if USE_NUMBA:

    @njit(cache=True)
    def _trace_pair_numba(b):
        n = b.shape[0]
        col = np.zeros(n)
        for i in range(n):
            for j in range(n):
                col[j] += b[i, j]
        for j in range(n):
            col[j] /= n
        tr1 = 0.0
        tr2 = 0.0
        for i in range(n):
            tr1 += b[i, i] - col[i]
            for j in range(n):
                # b symmetric, so the (j, i) centered entry is b[i, j] - col[i]
                tr2 += (b[i, j] - col[j]) * (b[i, j] - col[i])
        denom = n - 1.0
        return tr1 / denom, tr2 / (denom * denom)

    @njit(cache=True)
    def _corr_fill_numba(coords, rho, family, nu):
        n = coords.shape[0]
        out = np.empty((n, n))
        for i in range(n):
            out[i, i] = 1.0
            for j in range(i + 1, n):
                dx = coords[i, 0] - coords[j, 0]
                dy = coords[i, 1] - coords[j, 1]
                d = np.sqrt(dx * dx + dy * dy)
                if family == _FAMILY_EXPONENTIAL or nu == 0.5:
                    v = np.exp(-d / rho)
                elif nu == 1.5:
                    t = np.sqrt(3.0) * d / rho
                    v = (1.0 + t) * np.exp(-t)
                else:
                    t = np.sqrt(5.0) * d / rho
                    v = (1.0 + t + t * t / 3.0) * np.exp(-t)
                out[i, j] = v
                out[j, i] = v
        return out

    BACKEND = "numba"
    trace_pair_kernel = _trace_pair_numba
    corr_fill_kernel = _corr_fill_numba
else:
    BACKEND = "numpy"
    trace_pair_kernel = _trace_pair_numpy
    corr_fill_kernel = _corr_fill_numpy
