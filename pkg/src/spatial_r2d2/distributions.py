"""Random variates and densities for the distribution families the samplers need.

Gamma draws are parameterized by shape and *scale* throughout; the few call
sites where a rate is more natural say so explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

__all__ = [
    "RandomStream",
    "GbpParams",
    "GigParams",
    "SingularMatrixError",
    "chol_spd",
    "gbp_pdf",
    "gbp_sample",
    "bp_sample_mixture",
    "gbp_sample_ratio",
    "gig_sample",
    "mvn_sample",
    "dirichlet_sample",
]


class SingularMatrixError(RuntimeError):
    """Matrix stayed non positive definite after the diagonal jitter retries."""


class RandomStream:
    """Seedable random source with reproducible substreams for parallel chains.

    Identical (seed, spawn_key) pairs yield bitwise-identical draw sequences;
    substreams for different chain indices are statistically independent.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self.rng = np.random.Generator(np.random.PCG64(sequence))

    def substream(self, index: int) -> RandomStream:
        """Independent stream for chain `index`, reproducible from (seed, index)."""
        return RandomStream(self.seed, self.spawn_key + (int(index),))

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, spawn_key={self.spawn_key})"


def _require_positive(**values: float) -> None:
    for name, value in values.items():
        if not np.isfinite(value) or value <= 0:
            raise ValueError(f"{name} must be finite and positive, got {value}")


@dataclass(frozen=True)
class GbpParams:
    """Generalized beta prime parameters: shapes a, b, power c, scale d."""

    a: float
    b: float
    c: float
    d: float

    def __post_init__(self):
        _require_positive(a=self.a, b=self.b, c=self.c, d=self.d)


@dataclass(frozen=True)
class GigParams:
    """Parameters of the density proportional to z^(lam-1) exp{-(rho*z + chi/z)/2}."""

    rho: float
    chi: float
    lam: float

    def __post_init__(self):
        _require_positive(rho=self.rho)
        if not np.isfinite(self.chi) or self.chi < 0:
            raise ValueError(f"chi must be finite and nonnegative, got {self.chi}")
        if not np.isfinite(self.lam):
            raise ValueError(f"lam must be finite, got {self.lam}")
        if self.chi == 0 and self.lam <= 0:
            raise ValueError("chi = 0 requires lam > 0 (gamma limit)")


def gbp_pdf(x, params: GbpParams):
    """Generalized beta prime density, zero for negative arguments.

    pi(x; a, b, c, d) = c (x/d)^(ac-1) {1 + (x/d)^c}^(-(a+b)) / (d B(a, b))
    """
    a, b, c, d = params.a, params.b, params.c, params.d
    arr = np.asarray(x, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.zeros(arr.shape)
    pos = arr > 0
    if np.any(pos):
        t = np.log(arr[pos] / d)
        # logaddexp keeps {1 + (x/d)^c} finite for arguments far into either tail
        log_pdf = (
            np.log(c)
            + (a * c - 1.0) * t
            - (a + b) * np.logaddexp(0.0, c * t)
            - np.log(d)
            - special.betaln(a, b)
        )
        out[pos] = np.exp(log_pdf)
    at_zero = arr == 0
    if np.any(at_zero):
        if a * c < 1.0:
            out[at_zero] = np.inf
        elif a * c == 1.0:
            out[at_zero] = c / (d * special.beta(a, b))
    return float(out[0]) if scalar else out


def gbp_cdf(x, params: GbpParams):
    """GBP distribution function via the monotone beta transform."""
    arr = np.asarray(x, dtype=float)
    ratio = np.clip(arr / params.d, 0.0, np.inf) ** params.c
    u = ratio / (1.0 + ratio)
    return stats.beta.cdf(u, params.a, params.b)


def gbp_sample(stream: RandomStream, params: GbpParams, size: int | None = None):
    """Draw X = d {U/(1-U)}^(1/c) with U ~ Beta(a, b), distributed GBP(a, b, c, d)."""
    u = stream.rng.beta(params.a, params.b, size=size)
    x = params.d * (u / (1.0 - u)) ** (1.0 / params.c)
    return float(x) if size is None else x


def bp_sample_mixture(stream: RandomStream, a: float, b: float, size: int | None = None):
    """Beta prime draw via the scale mixture X | g ~ Gamma(a, 1/g), g ~ Gamma(b, 1)."""
    _require_positive(a=a, b=b)
    g = stream.rng.gamma(b, size=size)
    x = stream.rng.gamma(a, size=size) / g
    return float(x) if size is None else x


def gbp_sample_ratio(
    stream: RandomStream,
    a1: float,
    b1: float,
    a2: float,
    b2: float,
    size: int | None = None,
):
    """Ratio of independent Gamma(a1, b1) and Gamma(a2, b2) draws, GBP(a1, a2, 1, b1/b2)."""
    _require_positive(a1=a1, b1=b1, a2=a2, b2=b2)
    x1 = stream.rng.gamma(a1, b1, size=size)
    x2 = stream.rng.gamma(a2, b2, size=size)
    x = x1 / x2
    return float(x) if size is None else x


def gig_sample(stream: RandomStream, params: GigParams, size: int | None = None):
    """Draw from the generalized inverse Gaussian defined by GigParams.

    For chi > 0 the draw uses scipy's geninvgauss, whose density is
    proportional to x^(p-1) exp{-omega (x + 1/x) / 2}: setting
    omega = sqrt(rho * chi) and rescaling z = sqrt(chi / rho) * x recovers the
    target density, and the underlying rejection sampler is valid for every
    (lam, rho, chi). chi = 0 is the Gamma(lam, scale 2/rho) limit and delegates
    to the gamma sampler.
    """
    if params.chi == 0.0:
        x = stream.rng.gamma(params.lam, 2.0 / params.rho, size=size)
    else:
        omega = np.sqrt(params.rho * params.chi)
        scaling = np.sqrt(params.chi / params.rho)
        x = scaling * stats.geninvgauss.rvs(
            params.lam, omega, size=size, random_state=stream.rng
        )
    return float(x) if size is None else x


def chol_spd(matrix: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with a bounded diagonal-jitter retry.

    On failure, adds 1e-10 * mean(diag) to the diagonal and retries up to three
    times with tenfold escalation before raising SingularMatrixError.
    """
    matrix = np.asarray(matrix, dtype=float)
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10 * float(np.mean(np.diag(matrix)))
    eye = np.eye(matrix.shape[0])
    for _ in range(3):
        try:
            return np.linalg.cholesky(matrix + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularMatrixError("matrix not positive definite after jitter retries")


def mvn_sample(stream: RandomStream, mean: np.ndarray, covariance: np.ndarray) -> np.ndarray:
    """Multivariate normal draw mean + L z with L the lower Cholesky factor."""
    mean = np.asarray(mean, dtype=float)
    factor = chol_spd(covariance)
    z = stream.rng.standard_normal(mean.shape[0])
    return mean + factor @ z


def dirichlet_sample(stream: RandomStream, concentration) -> np.ndarray:
    """Dirichlet draw via normalized gammas.

    Tiny concentrations can underflow every gamma draw to zero; those draws are
    retried a bounded number of times rather than returning NaN.
    """
    conc = np.asarray(concentration, dtype=float)
    if conc.ndim != 1 or conc.size == 0:
        raise ValueError("concentration must be a nonempty vector")
    if not np.all(np.isfinite(conc)) or np.any(conc <= 0):
        raise ValueError("concentration entries must be finite and positive")
    for _ in range(100):
        draws = stream.rng.gamma(conc)
        total = draws.sum()
        if total > 0:
            return draws / total
    raise FloatingPointError("every gamma draw underflowed to zero")
