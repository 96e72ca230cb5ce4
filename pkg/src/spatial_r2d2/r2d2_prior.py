"""Moment-matched gamma approximation of the quadratic form S and the induced prior on W.

The global variance W is built so that, with S = Z'PZ approximately
Gamma(alpha, beta), the product W*S is beta prime and the model R^2 follows the
requested Beta(a, b). Everything here is conditional on the design, the
variance split phi, and the kernel parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spatial_r2d2.distributions import RandomStream, chol_spd, dirichlet_sample
from spatial_r2d2.spatial_core import CorrelationKernel, Locations, correlation_matrix, trace_pair

__all__ = [
    "DegeneratePriorError",
    "VarianceSplit",
    "PriorShapeScale",
    "R2Hyper",
    "standardize_columns",
    "moment_match",
    "closed_form_cs",
    "closed_form_blocked_cs",
    "w_prior_sample",
    "w_prior_moments",
    "prior_r2_simulate",
]

# thresholds below which the gamma approximation of S has no usable scale
MU_S_FLOOR = 1e-8
SIGMA2_S_FLOOR = 1e-12


class DegeneratePriorError(RuntimeError):
    """The design makes S (near) degenerate, so no W scale can hit the R^2 target."""


@dataclass(frozen=True)
class VarianceSplit:
    """Variance shares: covariate entries, then group entries, then the spatial share.

    When equal_fixed_effects is set the p covariate shares are tied and the
    sampled ("working") simplex collapses them into a single component.
    """

    phi: np.ndarray
    n_covariates: int
    n_groups: int = 0
    equal_fixed_effects: bool = False

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        expected = self.n_covariates + self.n_groups + 1
        if phi.shape != (expected,):
            raise ValueError(f"phi must have length {expected}, got shape {phi.shape}")
        if not np.all(np.isfinite(phi)) or np.any(phi <= 0):
            raise ValueError("variance shares must be finite and positive")
        if abs(phi.sum() - 1.0) > 1e-12:
            raise ValueError(f"variance shares must sum to one, got {phi.sum()}")
        object.__setattr__(self, "phi", phi)

    @property
    def covariate_shares(self) -> np.ndarray:
        return self.phi[: self.n_covariates]

    @property
    def group_shares(self) -> np.ndarray:
        return self.phi[self.n_covariates : self.n_covariates + self.n_groups]

    @property
    def spatial_share(self) -> float:
        return float(self.phi[-1])

    def working(self) -> np.ndarray:
        """The simplex the sampler actually moves on."""
        if self.equal_fixed_effects and self.n_covariates > 0:
            head = [self.covariate_shares.sum()]
            return np.concatenate((head, self.group_shares, [self.phi[-1]]))
        return self.phi.copy()

    @classmethod
    def from_working(
        cls,
        working: np.ndarray,
        n_covariates: int,
        n_groups: int = 0,
        equal_fixed_effects: bool = False,
    ) -> VarianceSplit:
        working = np.asarray(working, dtype=float)
        if equal_fixed_effects and n_covariates > 0:
            phi = np.concatenate(
                (np.full(n_covariates, working[0] / n_covariates), working[1:])
            )
        else:
            phi = working
        return cls(phi, n_covariates, n_groups, equal_fixed_effects)


@dataclass(frozen=True)
class PriorShapeScale:
    """Mean/variance of S and the matched gamma shape alpha and scale beta."""

    mu_s: float
    sigma2_s: float

    def __post_init__(self):
        if not (np.isfinite(self.mu_s) and self.mu_s > 0):
            raise ValueError(f"mu_s must be positive, got {self.mu_s}")
        if not (np.isfinite(self.sigma2_s) and self.sigma2_s > 0):
            raise ValueError(f"sigma2_s must be positive, got {self.sigma2_s}")

    @property
    def alpha(self) -> float:
        return self.mu_s**2 / self.sigma2_s

    @property
    def beta(self) -> float:
        return self.sigma2_s / self.mu_s


@dataclass(frozen=True)
class R2Hyper:
    """Beta(a, b) hyperparameters for the prior coefficient of determination."""

    a: float
    b: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and self.a > 0 and np.isfinite(self.b) and self.b > 0):
            raise ValueError("a and b must be finite and positive")


def standardize_columns(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center each column and scale it so the column sum of squares is exactly n.

    The n (not n-1) convention makes the average prior variance of the linear
    predictor equal sigma^2 W exactly. Returns (standardized, means, scales).
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    means = x.mean(axis=0)
    centered = x - means
    sum_sq = (centered**2).sum(axis=0)
    if np.any(sum_sq <= 0):
        raise ValueError("constant column cannot be standardized")
    scales = np.sqrt(sum_sq / n)
    return centered / scales, means, scales


def shape_scale_from_matrix(b: np.ndarray) -> PriorShapeScale:
    """Gamma shape/scale of S from its marginal covariance matrix B.

    mu_S = tr(PB), sigma2_S = 2 tr((PB)^2); raises DegeneratePriorError when
    either moment falls below its floor (S concentrates at zero).
    """
    tr1, tr2 = trace_pair(b)
    mu_s = tr1
    sigma2_s = 2.0 * tr2
    if mu_s < MU_S_FLOOR or sigma2_s < SIGMA2_S_FLOOR:
        raise DegeneratePriorError(
            f"quadratic form is (near) degenerate: mu_S={mu_s:.3e}, sigma2_S={sigma2_s:.3e}"
        )
    return PriorShapeScale(mu_s, sigma2_s)


def moment_match(
    x: np.ndarray | None,
    z: np.ndarray | None,
    sigma: np.ndarray,
    split: VarianceSplit,
) -> PriorShapeScale:
    """Gamma shape/scale of S for the design (X, Z, Sigma) under the given split.

    Assembles B = X Phi X' + phi_group Z Z' + phi_spatial Sigma and matches
    moments mu_S = tr(PB), sigma2_S = 2 tr((PB)^2).
    """
    sigma = np.asarray(sigma, dtype=float)
    n = sigma.shape[0]
    b = split.spatial_share * sigma
    if split.n_covariates > 0:
        x = np.asarray(x, dtype=float)
        if x.shape != (n, split.n_covariates):
            raise ValueError(f"x must be {n} x {split.n_covariates}, got {x.shape}")
        b = b + (x * split.covariate_shares) @ x.T
    if split.n_groups > 0:
        if z is None:
            raise ValueError("split has a group share but no indicator matrix given")
        z = np.asarray(z, dtype=float)
        if z.shape[0] != n:
            raise ValueError(f"z must have {n} rows, got {z.shape}")
        b = b + split.group_shares[0] * (z @ z.T)
    return shape_scale_from_matrix(b)


def closed_form_cs(rho: float, n: int) -> tuple[float, float]:
    """Exact (mu_S, sigma2_S) for compound symmetry with no covariates."""
    if rho == 1.0:
        raise DegeneratePriorError("compound symmetry with rho = 1 degenerates S at zero")
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    if n < 2:
        raise ValueError("n must be at least 2")
    mu_s = 1.0 - rho
    sigma2_s = 2.0 * (1.0 - rho) ** 2 / (n - 1.0)
    return mu_s, sigma2_s


def closed_form_blocked_cs(rho: float, n: int, m: int) -> float:
    """Exact mu_S for m equal blocks of within-block correlation rho."""
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    if m < 1 or n % m != 0:
        raise ValueError(f"block count {m} must divide n = {n}")
    return 1.0 - (1.0 / m) * ((n - m) / (n - 1.0)) * rho


def w_prior_sample(
    stream: RandomStream, hyper: R2Hyper, ss: PriorShapeScale
) -> tuple[float, float, float, float]:
    """One draw of (W, gamma, U, V) from the hierarchical W prior.

    gamma ~ Gamma(b, 1); U | gamma ~ Gamma(a, scale 1/gamma); V is inverse
    gamma with shape alpha and scale 1/beta, drawn as the reciprocal of a
    Gamma(alpha, scale beta) variable; W = U * V.
    """
    gamma = stream.rng.gamma(hyper.b)
    u = stream.rng.gamma(hyper.a, 1.0 / gamma)
    v = 1.0 / stream.rng.gamma(ss.alpha, ss.beta)
    return u * v, gamma, u, v


def w_prior_moments(hyper: R2Hyper, ss: PriorShapeScale) -> tuple[float, float]:
    """Analytic prior mean and variance of W; infinite when the moments diverge.

    E(W) = a / (beta (alpha - 1) (b - 1)) when alpha > 1 and b > 1, and the
    variance is finite only when alpha > 2 and b > 2.
    """
    a, b = hyper.a, hyper.b
    alpha, beta = ss.alpha, ss.beta
    if alpha <= 1 or b <= 1:
        return np.inf, np.inf
    mean = a / (beta * (alpha - 1.0) * (b - 1.0))
    if alpha <= 2 or b <= 2:
        return mean, np.inf
    second = a * (a + 1.0) / (beta**2 * (b - 1.0) * (b - 2.0) * (alpha - 1.0) * (alpha - 2.0))
    return mean, second - mean**2


def prior_r2_simulate(
    stream: RandomStream,
    hyper: R2Hyper,
    x: np.ndarray | None,
    z: np.ndarray | None,
    kernel: CorrelationKernel,
    locs: Locations,
    phi_prior: VarianceSplit | np.ndarray,
    n_draws: int,
    equal_fixed_effects: bool = False,
    rho_prior: tuple[float, float] | None = None,
    w_override: float | None = None,
) -> np.ndarray:
    """Prior draws of R^2_n under the full generative construction.

    Each draw samples the variance split (or keeps it fixed when phi_prior is a
    VarianceSplit), optionally redraws the kernel range from a lognormal
    rho_prior = (mean, sd) on log rho, rebuilds the shape/scale, draws W, then
    draws the effects with sigma^2 = 1 (R^2 is invariant to sigma^2) and
    evaluates R^2 = v_n / (v_n + 1). w_override pins W for diagnostics.
    """
    n = locs.n
    p = 0 if x is None else np.asarray(x).shape[1]
    n_groups = 0 if z is None else 1
    fixed_split = isinstance(phi_prior, VarianceSplit)
    sigma = correlation_matrix(kernel, locs)
    factor = chol_spd(sigma)
    ss = None
    if fixed_split and rho_prior is None:
        ss = moment_match(x, z, sigma, phi_prior)

    draws = np.empty(n_draws)
    for i in range(n_draws):
        if fixed_split:
            split = phi_prior
        else:
            working = dirichlet_sample(stream, np.asarray(phi_prior, dtype=float))
            split = VarianceSplit.from_working(working, p, n_groups, equal_fixed_effects)
        if rho_prior is not None:
            rho = float(np.exp(rho_prior[0] + rho_prior[1] * stream.rng.standard_normal()))
            sigma = correlation_matrix(
                CorrelationKernel(kernel.family, rho, nu=kernel.nu, blocks=kernel.blocks), locs
            )
            factor = chol_spd(sigma)
        shape_scale = ss if ss is not None else moment_match(x, z, sigma, split)
        if w_override is not None:
            w = float(w_override)
        else:
            w, _, _, _ = w_prior_sample(stream, hyper, shape_scale)
        eta = np.sqrt(w * split.spatial_share) * (factor @ stream.rng.standard_normal(n))
        if p > 0:
            beta = np.sqrt(w * split.covariate_shares) * stream.rng.standard_normal(p)
            eta = eta + x @ beta
        if n_groups > 0:
            levels = z.shape[1]
            effects = np.sqrt(w * split.group_shares[0]) * stream.rng.standard_normal(levels)
            eta = eta + z @ effects
        v_n = float(np.var(eta, ddof=1))
        draws[i] = v_n / (v_n + 1.0)
    return draws
