"""Gibbs and Metropolis-Hastings samplers for the spatial variance-partition model.

run_chain drives the shrinkage-prior sampler (intercept, fixed effects,
optional grouped random intercept, Gaussian-process spatial effect, and the
latent variance-allocation block U, V, gamma, phi, rho). run_chain_baseline
drives the vague and penalized-complexity reference samplers that share the
likelihood but place independent variance priors on the random terms.

Every sampler consumes a RandomStream, so a fixed seed reproduces a run
bitwise. Setting use_likelihood=False removes the data contribution from each
full conditional, turning the sweep into a prior sampler; the retained draws
then recover every prior marginal, which is the main correctness probe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import gammaln

from .distributions import (
    GigParams,
    RandomStream,
    SingularMatrixError,
    chol_spd,
    dirichlet_sample,
    gig_sample,
)
from .r2d2_prior import (
    DegeneratePriorError,
    PriorShapeScale,
    R2Hyper,
    VarianceSplit,
    moment_match,
)
from .spatial_core import EXPONENTIAL, MATERN, CorrelationKernel, Locations, correlation_matrix

R2D2 = "r2d2"
VAGUE = "vague"
PC = "pc"
PRIOR_FAMILIES = (R2D2, VAGUE, PC)

# Acceptance band targeted by the burn-in adaptation.
ACCEPT_LOW = 0.20
ACCEPT_HIGH = 0.50

# Proposed variance shares below this floor are rejected outright: they would
# make the share-scaled precision numerically singular.
PHI_FLOOR = 1e-8

# Fixed IG(shape, scale) prior on the baseline variance components.
_BASELINE_IG_SHAPE = 0.10
_BASELINE_IG_SCALE = 0.10

# Initial log-sd proposal scale for the penalized-complexity variance move.
_C_SIGMA_INIT = 0.5

# Log-scale proposals beyond this magnitude would overflow exp(); they are so
# far outside the prior mass that rejecting them outright is exact in practice.
_LOG_PROPOSAL_BOUND = 300.0


class McmcError(RuntimeError):
    """A sweep failed irrecoverably; the message carries the sweep index."""


@dataclass(frozen=True)
class ModelData:
    """Response, standardized design, optional grouping, and spatial layout."""

    y: np.ndarray
    x: np.ndarray
    locations: Locations
    kernel: CorrelationKernel
    z: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        n = self.locations.n
        if y.shape != (n,):
            raise ValueError(f"y must have shape ({n},), got {y.shape}")
        if x.ndim != 2 or x.shape[0] != n or x.shape[1] < 1:
            raise ValueError(f"x must be {n} x p with p >= 1, got {x.shape}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("y and x must be finite")
        if np.any(np.abs(x.mean(axis=0)) > 1e-8):
            raise ValueError("covariate columns must have mean zero")
        if np.any(np.abs((x**2).sum(axis=0) - n) > 1e-8 * n):
            raise ValueError("covariate columns must have sum of squares n")
        if self.z is not None:
            z = np.asarray(self.z, dtype=float)
            object.__setattr__(self, "z", z)
            if z.ndim != 2 or z.shape[0] != n or z.shape[1] < 1:
                raise ValueError(f"z must be {n} x L, got {z.shape}")
            if not np.all((z == 0.0) | (z == 1.0)):
                raise ValueError("z must contain only 0/1 indicators")
            if np.any(z.sum(axis=1) != 1.0):
                raise ValueError("each z row must select exactly one level")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_levels(self) -> int:
        return 0 if self.z is None else self.z.shape[1]


@dataclass(frozen=True)
class HyperParams:
    """Every fixed prior constant for the three sampler families."""

    r2: R2Hyper
    prior_family: str = R2D2
    xi: float = 1.0
    mu0: float = 0.0
    sigma0_sq: float = 100.0
    a0: float = 0.10
    b0: float = 0.10
    m_rho: float = -2.0
    v_rho: float = 1.0
    sigma_beta_sq: float = 100.0
    alpha_tail: float = 0.05
    sigma0_pc: float = 10.0
    rho0_pc: float = 0.01
    equal_fixed_effects: bool = False

    def __post_init__(self):
        if self.prior_family not in PRIOR_FAMILIES:
            raise ValueError(f"prior_family must be one of {PRIOR_FAMILIES}")
        for name in (
            "xi",
            "sigma0_sq",
            "a0",
            "b0",
            "v_rho",
            "sigma_beta_sq",
            "sigma0_pc",
            "rho0_pc",
        ):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and positive, got {value}")
        if not 0.0 < self.alpha_tail < 1.0:
            raise ValueError(f"alpha_tail must lie in (0, 1), got {self.alpha_tail}")

    @property
    def pc_rate_sigma(self) -> float:
        """Exponential rate on sigma_theta giving P(sigma_theta > sigma0) = alpha_tail."""
        return -math.log(self.alpha_tail) / self.sigma0_pc

    @property
    def pc_scale_rho(self) -> float:
        """Inverse-gamma scale on rho giving P(rho < rho0) = alpha_tail."""
        return -math.log(self.alpha_tail) * self.rho0_pc


@dataclass(frozen=True)
class McmcConfig:
    """Sweep counts, thinning, and proposal-tuning knobs."""

    n_burnin: int
    n_iter: int
    thin: int = 1
    seed: int | None = None
    c1: float = 100.0
    c2: float = 0.5
    adapt_interval: int = 100

    def __post_init__(self):
        if self.n_burnin < 0 or self.n_iter < 1:
            raise ValueError("need n_burnin >= 0 and n_iter >= 1")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.adapt_interval < 1:
            raise ValueError("adapt_interval must be >= 1")
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("c1 and c2 must be positive")


@dataclass
class ChainState:
    """Mutable sampler state for the shrinkage-prior family.

    sigma, sigma_chol, sigma_logdet, and shape_scale cache quantities that
    depend only on (rho, phi); they are refreshed on every accepted move.
    """

    beta0: float
    beta: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    sigma_sq: float
    U: float
    V: float
    gamma: float
    phi: VarianceSplit
    rho: float
    sigma: np.ndarray
    sigma_chol: np.ndarray
    sigma_logdet: float
    shape_scale: PriorShapeScale

    @property
    def W(self) -> float:
        return self.U * self.V


@dataclass
class _BaselineState:
    """Mutable sampler state for the vague and penalized-complexity families."""

    beta0: float
    beta: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    sigma_sq: float
    sigma_u_sq: float
    sigma_theta_sq: float
    rho: float
    sigma: np.ndarray
    sigma_chol: np.ndarray
    sigma_logdet: float


@dataclass(frozen=True)
class PosteriorSamples:
    """Retained draws (one row per kept sweep) plus derived per-draw summaries.

    sigma2_theta is the sigma^2-relative spatial variance: phi_spatial * W for
    the shrinkage family and the sigma_theta_sq parameter for the baselines.
    The latent-block columns (U, V, gamma, W, phi) are None for baselines, as
    is sigma2_u whenever the model has no grouping factor.
    """

    prior_family: str
    beta0: np.ndarray
    beta: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    sigma_sq: np.ndarray
    rho: np.ndarray
    sigma2_theta: np.ndarray
    r2: np.ndarray
    acceptance: dict = field(default_factory=dict)
    proposal_scales: dict = field(default_factory=dict)
    sigma2_u: np.ndarray | None = None
    U: np.ndarray | None = None
    V: np.ndarray | None = None
    gamma: np.ndarray | None = None
    W: np.ndarray | None = None
    phi: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.beta0.shape[0]


def _spatial_caches(
    kernel: CorrelationKernel, locations: Locations, rho: float
) -> tuple[np.ndarray, np.ndarray, float]:
    """Correlation matrix at the given range plus its Cholesky and log-determinant."""
    k = CorrelationKernel(kernel.family, rho, nu=kernel.nu, blocks=kernel.blocks)
    sigma = correlation_matrix(k, locations)
    chol = chol_spd(sigma)
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    return sigma, chol, logdet


def _quad_inv(chol: np.ndarray, vec: np.ndarray) -> float:
    """vec' A^{-1} vec given the lower Cholesky factor of A."""
    half = solve_triangular(chol, vec, lower=True, check_finite=False)
    return float(half @ half)


def _log_invgamma(x: float, shape: float, scale: float) -> float:
    """Log density of the inverse gamma with density scale^shape x^{-shape-1} e^{-scale/x} / Gamma(shape)."""
    return shape * math.log(scale) - float(gammaln(shape)) - (shape + 1.0) * math.log(x) - scale / x


def _log_dirichlet(x: np.ndarray, conc: np.ndarray) -> float:
    return float(gammaln(conc.sum()) - gammaln(conc).sum() + ((conc - 1.0) * np.log(x)).sum())


def step_beta0(state, data: ModelData, hyper: HyperParams, stream: RandomStream, *, use_likelihood: bool = True) -> float:
    """Conjugate normal update of the intercept."""
    if not use_likelihood:
        state.beta0 = hyper.mu0 + math.sqrt(hyper.sigma0_sq) * stream.rng.standard_normal()
        return state.beta0
    r = data.y - data.x @ state.beta - state.theta
    if data.z is not None:
        r = r - data.z @ state.u
    v = 1.0 / (data.n / state.sigma_sq + 1.0 / hyper.sigma0_sq)
    m = v * (float(r.sum()) / state.sigma_sq + hyper.mu0 / hyper.sigma0_sq)
    state.beta0 = m + math.sqrt(v) * stream.rng.standard_normal()
    return state.beta0


def step_beta(
    state: ChainState, data: ModelData, hyper: HyperParams, stream: RandomStream, *, use_likelihood: bool = True
) -> np.ndarray:
    """Conjugate update of the fixed effects under the share-scaled prior."""
    w = state.U * state.V
    shares = state.phi.covariate_shares
    if not use_likelihood:
        sd = np.sqrt(state.sigma_sq * w * shares)
        state.beta = sd * stream.rng.standard_normal(data.p)
        return state.beta
    q = data.x.T @ data.x
    q[np.diag_indices_from(q)] += 1.0 / (w * shares)
    lq = chol_spd(q)
    r = data.y - state.beta0 - state.theta
    if data.z is not None:
        r = r - data.z @ state.u
    mean = cho_solve((lq, True), data.x.T @ r, check_finite=False)
    noise = solve_triangular(lq.T, stream.rng.standard_normal(data.p), lower=False, check_finite=False)
    state.beta = mean + math.sqrt(state.sigma_sq) * noise
    return state.beta


def _step_u_shared(state, data: ModelData, relative_var: float, stream: RandomStream, use_likelihood: bool) -> np.ndarray:
    """Per-level conjugate update of the grouped intercept; relative_var is its sigma^2-relative prior variance."""
    if data.z is None:
        return state.u
    if not use_likelihood:
        state.u = math.sqrt(state.sigma_sq * relative_var) * stream.rng.standard_normal(data.n_levels)
        return state.u
    r = data.y - state.beta0 - data.x @ state.beta - state.theta
    counts = data.z.sum(axis=0)
    sums = data.z.T @ r
    c = 1.0 / (counts + 1.0 / relative_var)
    state.u = c * sums + np.sqrt(state.sigma_sq * c) * stream.rng.standard_normal(data.n_levels)
    return state.u


def step_u(
    state: ChainState, data: ModelData, hyper: HyperParams, stream: RandomStream, *, use_likelihood: bool = True
) -> np.ndarray:
    if data.z is None:
        return state.u
    return _step_u_shared(state, data, state.phi.group_shares[0] * state.U * state.V, stream, use_likelihood)


def _centered_gaussian_draw(
    c: float,
    sigma_sq: float,
    m2: np.ndarray,
    sigma: np.ndarray,
    sigma_chol: np.ndarray,
    stream: RandomStream,
) -> np.ndarray:
    """Draw from Normal(V2 m2, sigma_sq V2) with V2 = cSigma (cSigma + I)^{-1}.

    Uses the decomposition draw = z1 + V2 (m2 - z1 - z2) with z1 ~ N(0,
    sigma_sq c Sigma) and z2 ~ N(0, sigma_sq I), which needs one Cholesky of
    cSigma + I (always well conditioned: eigenvalues >= 1) per call.
    """
    n = m2.shape[0]
    if c <= 0.0:
        return np.zeros(n)
    a = c * sigma
    a[np.diag_indices_from(a)] += 1.0
    la = np.linalg.cholesky(a)
    z1 = math.sqrt(sigma_sq * c) * (sigma_chol @ stream.rng.standard_normal(n))
    z2 = math.sqrt(sigma_sq) * stream.rng.standard_normal(n)
    t = cho_solve((la, True), m2 - z1 - z2, check_finite=False)
    return z1 + c * (sigma @ t)


def step_theta(
    state: ChainState, data: ModelData, hyper: HyperParams, stream: RandomStream, *, use_likelihood: bool = True
) -> np.ndarray:
    """Dense Gaussian update of the spatial effect."""
    c = state.phi.spatial_share * state.U * state.V
    if not use_likelihood:
        state.theta = math.sqrt(state.sigma_sq * c) * (
            state.sigma_chol @ stream.rng.standard_normal(data.n)
        )
        return state.theta
    m2 = data.y - state.beta0 - data.x @ state.beta
    if data.z is not None:
        m2 = m2 - data.z @ state.u
    state.theta = _centered_gaussian_draw(c, state.sigma_sq, m2, state.sigma, state.sigma_chol, stream)
    return state.theta


def _share_scaled_quadratics(state: ChainState, data: ModelData) -> float:
    """beta' Phi^{-1} beta + u'u/phi_group + theta' Sigma^{-1} theta / phi_spatial."""
    total = float(np.sum(state.beta**2 / state.phi.covariate_shares))
    if data.z is not None:
        total += float(state.u @ state.u) / state.phi.group_shares[0]
    total += _quad_inv(state.sigma_chol, state.theta) / state.phi.spatial_share
    return total


def step_sigma2(
    state: ChainState, data: ModelData, hyper: HyperParams, stream: RandomStream, *, use_likelihood: bool = True
) -> float:
    """Conjugate inverse-gamma update of the response variance."""
    w = state.U * state.V
    shape = hyper.a0 + (data.n + data.p + data.n_levels) / 2.0
    rate = hyper.b0 + 0.5 * _share_scaled_quadratics(state, data) / w
    if use_likelihood:
        r = data.y - state.beta0 - data.x @ state.beta - state.theta
        if data.z is not None:
            r = r - data.z @ state.u
        shape += data.n / 2.0
        rate += 0.5 * float(r @ r)
    state.sigma_sq = 1.0 / stream.rng.gamma(shape, 1.0 / rate)
    return state.sigma_sq


def step_U(state: ChainState, data: ModelData, hyper: HyperParams, stream: RandomStream) -> float:
    """Generalized-inverse-Gaussian update of the first variance factor."""
    lam = hyper.r2.a - (data.n + data.p + data.n_levels) / 2.0
    chi = _share_scaled_quadratics(state, data) / (state.V * state.sigma_sq)
    if chi == 0.0 and lam <= 0.0:
        state.U = stream.rng.gamma(hyper.r2.a, 1.0 / state.gamma)
    else:
        state.U = gig_sample(stream, GigParams(rho=2.0 * state.gamma, chi=chi, lam=lam))
    return state.U


def step_V(state: ChainState, data: ModelData, hyper: HyperParams, stream: RandomStream) -> float:
    """Conjugate inverse-gamma update of the second variance factor."""
    shape = state.shape_scale.alpha + (data.n + data.p + data.n_levels) / 2.0
    chi = _share_scaled_quadratics(state, data) / (state.U * state.sigma_sq)
    scale = 1.0 / state.shape_scale.beta + 0.5 * chi
    state.V = 1.0 / stream.rng.gamma(shape, 1.0 / scale)
    return state.V


def step_gamma(state: ChainState, hyper: HyperParams, stream: RandomStream) -> float:
    """Conjugate gamma update of the mixing rate: Gamma(a + b, rate 1 + U)."""
    state.gamma = stream.rng.gamma(hyper.r2.a + hyper.r2.b, 1.0 / (1.0 + state.U))
    return state.gamma


def _phi_log_terms(
    state: ChainState,
    data: ModelData,
    hyper: HyperParams,
    working: np.ndarray,
    split: VarianceSplit,
    ss: PriorShapeScale,
) -> float:
    """Log full-conditional density of a working simplex, up to phi-free constants."""
    s2w = state.sigma_sq * state.U * state.V
    shares = split.covariate_shares
    lp = float((hyper.xi - 1.0) * np.log(working).sum())
    lp += float(-0.5 * np.log(shares).sum() - np.sum(state.beta**2 / shares) / (2.0 * s2w))
    if data.z is not None:
        g = split.group_shares[0]
        lp += -0.5 * data.n_levels * math.log(g) - float(state.u @ state.u) / (2.0 * s2w * g)
    sp = split.spatial_share
    lp += -0.5 * data.n * math.log(sp) - _quad_inv(state.sigma_chol, state.theta) / (2.0 * s2w * sp)
    lp += _log_invgamma(state.V, ss.alpha, 1.0 / ss.beta)
    return lp


def phi_log_target(state: ChainState, data: ModelData, hyper: HyperParams, working: np.ndarray) -> float:
    """Recompute the phi log conditional from scratch (verification entry point)."""
    working = np.asarray(working, dtype=float)
    split = VarianceSplit.from_working(
        working,
        n_covariates=data.p,
        n_groups=1 if data.z is not None else 0,
        equal_fixed_effects=hyper.equal_fixed_effects,
    )
    ss = moment_match(data.x, data.z, state.sigma, split)
    return _phi_log_terms(state, data, hyper, working, split, ss)


def step_phi_mh(
    state: ChainState, data: ModelData, hyper: HyperParams, stream: RandomStream, c1: float
) -> bool:
    """Dirichlet random-walk move on the variance shares; returns acceptance."""
    working = state.phi.working()
    try:
        proposal = dirichlet_sample(stream, c1 * working)
    except FloatingPointError:
        return False
    if float(proposal.min()) < PHI_FLOOR:
        return False
    try:
        split = VarianceSplit.from_working(
            proposal,
            n_covariates=data.p,
            n_groups=1 if data.z is not None else 0,
            equal_fixed_effects=hyper.equal_fixed_effects,
        )
        ss_prop = moment_match(data.x, data.z, state.sigma, split)
    except DegeneratePriorError:
        return False
    log_ratio = _phi_log_terms(state, data, hyper, proposal, split, ss_prop)
    log_ratio -= _phi_log_terms(state, data, hyper, working, state.phi, state.shape_scale)
    log_ratio += _log_dirichlet(working, c1 * proposal) - _log_dirichlet(proposal, c1 * working)
    if math.log(stream.rng.uniform()) < log_ratio:
        state.phi = split
        state.shape_scale = ss_prop
        return True
    return False


def _rho_log_terms(
    state: ChainState,
    hyper: HyperParams,
    log_rho: float,
    logdet: float,
    theta_quad: float,
    ss: PriorShapeScale,
) -> float:
    """Log full-conditional density of log rho, up to rho-free constants."""
    lp = -((log_rho - hyper.m_rho) ** 2) / (2.0 * hyper.v_rho)
    s2w_sp = state.sigma_sq * state.U * state.V * state.phi.spatial_share
    lp += -0.5 * logdet - theta_quad / (2.0 * s2w_sp)
    lp += _log_invgamma(state.V, ss.alpha, 1.0 / ss.beta)
    return lp


def rho_log_target(state: ChainState, data: ModelData, hyper: HyperParams, log_rho: float) -> float:
    """Recompute the log-rho conditional from scratch (verification entry point)."""
    sigma, chol, logdet = _spatial_caches(data.kernel, data.locations, math.exp(log_rho))
    ss = moment_match(data.x, data.z, sigma, state.phi)
    return _rho_log_terms(state, hyper, log_rho, logdet, _quad_inv(chol, state.theta), ss)


def step_rho_mh(
    state: ChainState, data: ModelData, hyper: HyperParams, stream: RandomStream, c2: float
) -> bool:
    """Log-scale Gaussian random-walk move on the spatial range; returns acceptance."""
    log_cur = math.log(state.rho)
    log_prop = log_cur + c2 * stream.rng.standard_normal()
    if abs(log_prop) > _LOG_PROPOSAL_BOUND:
        return False
    try:
        sigma, chol, logdet = _spatial_caches(data.kernel, data.locations, math.exp(log_prop))
        ss_prop = moment_match(data.x, data.z, sigma, state.phi)
    except (SingularMatrixError, DegeneratePriorError):
        return False
    cur = _rho_log_terms(
        state, hyper, log_cur, state.sigma_logdet, _quad_inv(state.sigma_chol, state.theta), state.shape_scale
    )
    prop = _rho_log_terms(state, hyper, log_prop, logdet, _quad_inv(chol, state.theta), ss_prop)
    if math.log(stream.rng.uniform()) < prop - cur:
        state.rho = math.exp(log_prop)
        state.sigma = sigma
        state.sigma_chol = chol
        state.sigma_logdet = logdet
        state.shape_scale = ss_prop
        return True
    return False


def _adapt_scale(rate: float, scale: float, factor: float) -> float:
    """Random-walk SD adaptation: shrink when rejecting too much, grow when too little."""
    if rate < ACCEPT_LOW:
        return scale / factor
    if rate > ACCEPT_HIGH:
        return scale * factor
    return scale


def adapt_proposals(phi_rate: float, rho_rate: float, c1: float, c2: float) -> tuple[float, float]:
    """Burn-in tuning toward the [0.20, 0.50] acceptance band.

    c1 is a Dirichlet concentration (larger means tighter proposals), so it
    moves opposite to a random-walk SD: doubled when acceptance is low, halved
    when high. c2 follows the usual SD rule with factor 1.5.
    """
    if phi_rate < ACCEPT_LOW:
        c1 = c1 * 2.0
    elif phi_rate > ACCEPT_HIGH:
        c1 = c1 / 2.0
    return c1, _adapt_scale(rho_rate, c2, 1.5)


def _uniform_split(data: ModelData, hyper: HyperParams) -> VarianceSplit:
    n_groups = 1 if data.z is not None else 0
    k = (1 if hyper.equal_fixed_effects else data.p) + n_groups + 1
    return VarianceSplit.from_working(
        np.full(k, 1.0 / k),
        n_covariates=data.p,
        n_groups=n_groups,
        equal_fixed_effects=hyper.equal_fixed_effects,
    )


def initial_state(data: ModelData, hyper: HyperParams) -> ChainState:
    """Deterministic, data-scaled starting point inside the support."""
    split = _uniform_split(data, hyper)
    rho = math.exp(hyper.m_rho)
    sigma, chol, logdet = _spatial_caches(data.kernel, data.locations, rho)
    ss = moment_match(data.x, data.z, sigma, split)
    var_y = float(np.var(data.y))
    denom = ss.alpha - 1.0
    v_raw = math.inf if denom == 0.0 else (1.0 / ss.beta) / denom
    return ChainState(
        beta0=float(np.mean(data.y)),
        beta=np.zeros(data.p),
        u=np.zeros(data.n_levels),
        theta=np.zeros(data.n),
        sigma_sq=var_y if var_y > 0 else 1.0,
        U=hyper.r2.a,
        V=float(min(max(v_raw, 1e-6), 1e6)),
        gamma=hyper.r2.b,
        phi=split,
        rho=rho,
        sigma=sigma,
        sigma_chol=chol,
        sigma_logdet=logdet,
        shape_scale=ss,
    )


def prior_draw_state(data: ModelData, hyper: HyperParams, stream: RandomStream) -> ChainState:
    """One independent draw of the full parameter vector from the joint prior."""
    n_groups = 1 if data.z is not None else 0
    k = (1 if hyper.equal_fixed_effects else data.p) + n_groups + 1
    working = dirichlet_sample(stream, np.full(k, hyper.xi))
    split = VarianceSplit.from_working(
        working, n_covariates=data.p, n_groups=n_groups, equal_fixed_effects=hyper.equal_fixed_effects
    )
    rho = math.exp(hyper.m_rho + math.sqrt(hyper.v_rho) * stream.rng.standard_normal())
    sigma, chol, logdet = _spatial_caches(data.kernel, data.locations, rho)
    ss = moment_match(data.x, data.z, sigma, split)
    gamma = stream.rng.gamma(hyper.r2.b)
    u_lat = stream.rng.gamma(hyper.r2.a, 1.0 / gamma)
    v_lat = 1.0 / stream.rng.gamma(ss.alpha, ss.beta)
    sigma_sq = 1.0 / stream.rng.gamma(hyper.a0, 1.0 / hyper.b0)
    w = u_lat * v_lat
    beta = np.sqrt(sigma_sq * w * split.covariate_shares) * stream.rng.standard_normal(data.p)
    u = (
        math.sqrt(sigma_sq * w * split.group_shares[0]) * stream.rng.standard_normal(data.n_levels)
        if n_groups
        else np.zeros(0)
    )
    theta = math.sqrt(sigma_sq * w * split.spatial_share) * (chol @ stream.rng.standard_normal(data.n))
    return ChainState(
        beta0=hyper.mu0 + math.sqrt(hyper.sigma0_sq) * stream.rng.standard_normal(),
        beta=beta,
        u=u,
        theta=theta,
        sigma_sq=sigma_sq,
        U=u_lat,
        V=v_lat,
        gamma=gamma,
        phi=split,
        rho=rho,
        sigma=sigma,
        sigma_chol=chol,
        sigma_logdet=logdet,
        shape_scale=ss,
    )


def linear_predictor(state, data: ModelData) -> np.ndarray:
    """beta0 + X beta + Z u + theta for either sampler family's state."""
    eta = state.beta0 + data.x @ state.beta + state.theta
    if data.z is not None:
        eta = eta + data.z @ state.u
    return eta


def _r2_value(state, data: ModelData) -> float:
    v = float(np.var(linear_predictor(state, data), ddof=1))
    return v / (v + state.sigma_sq)


def _sweep_r2d2(
    state: ChainState,
    data: ModelData,
    hyper: HyperParams,
    stream: RandomStream,
    c1: float,
    c2: float,
    use_likelihood: bool,
) -> tuple[bool, bool]:
    step_beta0(state, data, hyper, stream, use_likelihood=use_likelihood)
    step_beta(state, data, hyper, stream, use_likelihood=use_likelihood)
    step_u(state, data, hyper, stream, use_likelihood=use_likelihood)
    step_theta(state, data, hyper, stream, use_likelihood=use_likelihood)
    step_sigma2(state, data, hyper, stream, use_likelihood=use_likelihood)
    step_U(state, data, hyper, stream)
    step_V(state, data, hyper, stream)
    step_gamma(state, hyper, stream)
    phi_acc = step_phi_mh(state, data, hyper, stream, c1)
    rho_acc = step_rho_mh(state, data, hyper, stream, c2)
    return phi_acc, rho_acc


_SWEEP_ERRORS = (
    SingularMatrixError,
    DegeneratePriorError,
    FloatingPointError,
    OverflowError,
    ValueError,
    np.linalg.LinAlgError,
)


def run_chain(
    data: ModelData,
    hyper: HyperParams,
    config: McmcConfig,
    stream: RandomStream,
    *,
    use_likelihood: bool = True,
) -> PosteriorSamples:
    """Burn in with proposal adaptation, then sample the shrinkage-prior posterior."""
    if hyper.prior_family != R2D2:
        raise ValueError(f"run_chain handles the {R2D2!r} family, got {hyper.prior_family!r}")
    if data.kernel.family not in (EXPONENTIAL, MATERN):
        raise ValueError("sampling over rho requires a distance-based kernel")
    try:
        state = initial_state(data, hyper)
    except _SWEEP_ERRORS as exc:
        raise McmcError(f"initialization: {exc}") from exc

    c1, c2 = config.c1, config.c2
    win_phi = win_rho = win_n = 0
    for t in range(config.n_burnin):
        try:
            phi_acc, rho_acc = _sweep_r2d2(state, data, hyper, stream, c1, c2, use_likelihood)
        except _SWEEP_ERRORS as exc:
            raise McmcError(f"sweep {t}: {exc}") from exc
        win_phi += phi_acc
        win_rho += rho_acc
        win_n += 1
        if (t + 1) % config.adapt_interval == 0:
            c1, c2 = adapt_proposals(win_phi / win_n, win_rho / win_n, c1, c2)
            win_phi = win_rho = win_n = 0

    n_keep = config.n_iter // config.thin
    has_groups = data.z is not None
    out = {
        "beta0": np.empty(n_keep),
        "beta": np.empty((n_keep, data.p)),
        "u": np.empty((n_keep, data.n_levels)),
        "theta": np.empty((n_keep, data.n)),
        "sigma_sq": np.empty(n_keep),
        "rho": np.empty(n_keep),
        "sigma2_theta": np.empty(n_keep),
        "r2": np.empty(n_keep),
        "U": np.empty(n_keep),
        "V": np.empty(n_keep),
        "gamma": np.empty(n_keep),
        "W": np.empty(n_keep),
        "phi": np.empty((n_keep, data.p + (1 if has_groups else 0) + 1)),
    }
    sigma2_u = np.empty(n_keep) if has_groups else None
    acc_phi = acc_rho = 0
    row = 0
    for t in range(config.n_iter):
        try:
            phi_acc, rho_acc = _sweep_r2d2(state, data, hyper, stream, c1, c2, use_likelihood)
        except _SWEEP_ERRORS as exc:
            raise McmcError(f"sweep {config.n_burnin + t}: {exc}") from exc
        acc_phi += phi_acc
        acc_rho += rho_acc
        if (t + 1) % config.thin == 0:
            out["beta0"][row] = state.beta0
            out["beta"][row] = state.beta
            out["u"][row] = state.u
            out["theta"][row] = state.theta
            out["sigma_sq"][row] = state.sigma_sq
            out["rho"][row] = state.rho
            out["U"][row] = state.U
            out["V"][row] = state.V
            out["gamma"][row] = state.gamma
            out["W"][row] = state.W
            out["phi"][row] = state.phi.phi
            out["sigma2_theta"][row] = state.phi.spatial_share * state.W
            out["r2"][row] = _r2_value(state, data)
            if has_groups:
                sigma2_u[row] = state.phi.group_shares[0] * state.W
            row += 1

    return PosteriorSamples(
        prior_family=R2D2,
        beta0=out["beta0"],
        beta=out["beta"],
        u=out["u"],
        theta=out["theta"],
        sigma_sq=out["sigma_sq"],
        rho=out["rho"],
        sigma2_theta=out["sigma2_theta"],
        r2=out["r2"],
        acceptance={"phi": acc_phi / config.n_iter, "rho": acc_rho / config.n_iter},
        proposal_scales={"c1": c1, "c2": c2},
        sigma2_u=sigma2_u,
        U=out["U"],
        V=out["V"],
        gamma=out["gamma"],
        W=out["W"],
        phi=out["phi"],
    )


def _baseline_initial_state(data: ModelData, hyper: HyperParams) -> _BaselineState:
    if hyper.prior_family == PC:
        sigma_theta = math.log(2.0) / hyper.pc_rate_sigma
        rho = hyper.pc_scale_rho / math.log(2.0)
        sigma_theta_sq = sigma_theta**2
    else:
        rho = math.exp(hyper.m_rho)
        sigma_theta_sq = 1.0
    sigma, chol, logdet = _spatial_caches(data.kernel, data.locations, rho)
    var_y = float(np.var(data.y))
    return _BaselineState(
        beta0=float(np.mean(data.y)),
        beta=np.zeros(data.p),
        u=np.zeros(data.n_levels),
        theta=np.zeros(data.n),
        sigma_sq=var_y if var_y > 0 else 1.0,
        sigma_u_sq=1.0,
        sigma_theta_sq=sigma_theta_sq,
        rho=rho,
        sigma=sigma,
        sigma_chol=chol,
        sigma_logdet=logdet,
    )


def _baseline_step_beta(
    state: _BaselineState, data: ModelData, hyper: HyperParams, stream: RandomStream, use_likelihood: bool
) -> None:
    """Fixed effects under the flat Normal(0, sigma_beta_sq I) prior (not sigma^2-scaled)."""
    if not use_likelihood:
        state.beta = math.sqrt(hyper.sigma_beta_sq) * stream.rng.standard_normal(data.p)
        return
    q = data.x.T @ data.x / state.sigma_sq
    q[np.diag_indices_from(q)] += 1.0 / hyper.sigma_beta_sq
    lq = chol_spd(q)
    r = data.y - state.beta0 - state.theta
    if data.z is not None:
        r = r - data.z @ state.u
    mean = cho_solve((lq, True), data.x.T @ r / state.sigma_sq, check_finite=False)
    state.beta = mean + solve_triangular(
        lq.T, stream.rng.standard_normal(data.p), lower=False, check_finite=False
    )


def _baseline_step_sigma2(
    state: _BaselineState, data: ModelData, hyper: HyperParams, stream: RandomStream, use_likelihood: bool
) -> None:
    """sigma^2 update; u and theta priors are sigma^2-scaled, beta's is not."""
    shape = hyper.a0 + (data.n + data.n_levels) / 2.0
    rate = hyper.b0 + 0.5 * (
        (float(state.u @ state.u) / state.sigma_u_sq if data.z is not None else 0.0)
        + _quad_inv(state.sigma_chol, state.theta) / state.sigma_theta_sq
    )
    if use_likelihood:
        r = data.y - state.beta0 - data.x @ state.beta - state.theta
        if data.z is not None:
            r = r - data.z @ state.u
        shape += data.n / 2.0
        rate += 0.5 * float(r @ r)
    state.sigma_sq = 1.0 / stream.rng.gamma(shape, 1.0 / rate)


def _baseline_rho_log_target(
    state: _BaselineState, hyper: HyperParams, log_rho: float, logdet: float, theta_quad: float
) -> float:
    if hyper.prior_family == PC:
        lp = -log_rho - hyper.pc_scale_rho * math.exp(-log_rho)
    else:
        lp = -((log_rho - hyper.m_rho) ** 2) / (2.0 * hyper.v_rho)
    return lp - 0.5 * logdet - theta_quad / (2.0 * state.sigma_sq * state.sigma_theta_sq)


def _baseline_step_rho(
    state: _BaselineState, data: ModelData, hyper: HyperParams, stream: RandomStream, c2: float
) -> bool:
    log_cur = math.log(state.rho)
    log_prop = log_cur + c2 * stream.rng.standard_normal()
    if abs(log_prop) > _LOG_PROPOSAL_BOUND:
        return False
    try:
        sigma, chol, logdet = _spatial_caches(data.kernel, data.locations, math.exp(log_prop))
    except SingularMatrixError:
        return False
    cur = _baseline_rho_log_target(
        state, hyper, log_cur, state.sigma_logdet, _quad_inv(state.sigma_chol, state.theta)
    )
    prop = _baseline_rho_log_target(state, hyper, log_prop, logdet, _quad_inv(chol, state.theta))
    if math.log(stream.rng.uniform()) < prop - cur:
        state.rho = math.exp(log_prop)
        state.sigma = sigma
        state.sigma_chol = chol
        state.sigma_logdet = logdet
        return True
    return False


def _pc_step_sigma_theta(
    state: _BaselineState, data: ModelData, hyper: HyperParams, stream: RandomStream, c_sigma: float
) -> bool:
    """MH move on log sigma_theta against the exponential complexity-penalty prior."""
    s_cur = 0.5 * math.log(state.sigma_theta_sq)
    s_prop = s_cur + c_sigma * stream.rng.standard_normal()
    if abs(s_prop) > _LOG_PROPOSAL_BOUND:
        return False
    quad = _quad_inv(state.sigma_chol, state.theta)
    rate = hyper.pc_rate_sigma

    def log_target(s: float) -> float:
        return (
            -data.n * s
            - math.exp(-2.0 * s) * quad / (2.0 * state.sigma_sq)
            - rate * math.exp(s)
            + s
        )

    if math.log(stream.rng.uniform()) < log_target(s_prop) - log_target(s_cur):
        state.sigma_theta_sq = math.exp(2.0 * s_prop)
        return True
    return False


def _sweep_baseline(
    state: _BaselineState,
    data: ModelData,
    hyper: HyperParams,
    stream: RandomStream,
    c2: float,
    c_sigma: float,
    use_likelihood: bool,
) -> tuple[bool, bool]:
    step_beta0(state, data, hyper, stream, use_likelihood=use_likelihood)
    _baseline_step_beta(state, data, hyper, stream, use_likelihood)
    _step_u_shared(state, data, state.sigma_u_sq, stream, use_likelihood)
    if not use_likelihood:
        state.theta = math.sqrt(state.sigma_sq * state.sigma_theta_sq) * (
            state.sigma_chol @ stream.rng.standard_normal(data.n)
        )
    else:
        m2 = data.y - state.beta0 - data.x @ state.beta
        if data.z is not None:
            m2 = m2 - data.z @ state.u
        state.theta = _centered_gaussian_draw(
            state.sigma_theta_sq, state.sigma_sq, m2, state.sigma, state.sigma_chol, stream
        )
    _baseline_step_sigma2(state, data, hyper, stream, use_likelihood)
    if data.z is not None:
        shape = _BASELINE_IG_SHAPE + data.n_levels / 2.0
        rate = _BASELINE_IG_SCALE + 0.5 * float(state.u @ state.u) / state.sigma_sq
        state.sigma_u_sq = 1.0 / stream.rng.gamma(shape, 1.0 / rate)
    if hyper.prior_family == PC:
        sig_acc = _pc_step_sigma_theta(state, data, hyper, stream, c_sigma)
    else:
        shape = _BASELINE_IG_SHAPE + data.n / 2.0
        rate = _BASELINE_IG_SCALE + 0.5 * _quad_inv(state.sigma_chol, state.theta) / state.sigma_sq
        state.sigma_theta_sq = 1.0 / stream.rng.gamma(shape, 1.0 / rate)
        sig_acc = False
    rho_acc = _baseline_step_rho(state, data, hyper, stream, c2)
    return rho_acc, sig_acc


def run_chain_baseline(
    data: ModelData,
    hyper: HyperParams,
    config: McmcConfig,
    stream: RandomStream,
    *,
    use_likelihood: bool = True,
) -> PosteriorSamples:
    """Sample the vague or penalized-complexity posterior with the shared likelihood."""
    if hyper.prior_family not in (VAGUE, PC):
        raise ValueError(f"run_chain_baseline handles {VAGUE!r} or {PC!r}, got {hyper.prior_family!r}")
    if data.kernel.family not in (EXPONENTIAL, MATERN):
        raise ValueError("sampling over rho requires a distance-based kernel")
    try:
        state = _baseline_initial_state(data, hyper)
    except _SWEEP_ERRORS as exc:
        raise McmcError(f"initialization: {exc}") from exc

    is_pc = hyper.prior_family == PC
    c2, c_sigma = config.c2, _C_SIGMA_INIT
    win_rho = win_sig = win_n = 0
    for t in range(config.n_burnin):
        try:
            rho_acc, sig_acc = _sweep_baseline(state, data, hyper, stream, c2, c_sigma, use_likelihood)
        except _SWEEP_ERRORS as exc:
            raise McmcError(f"sweep {t}: {exc}") from exc
        win_rho += rho_acc
        win_sig += sig_acc
        win_n += 1
        if (t + 1) % config.adapt_interval == 0:
            c2 = _adapt_scale(win_rho / win_n, c2, 1.5)
            if is_pc:
                c_sigma = _adapt_scale(win_sig / win_n, c_sigma, 1.5)
            win_rho = win_sig = win_n = 0

    n_keep = config.n_iter // config.thin
    has_groups = data.z is not None
    out = {
        "beta0": np.empty(n_keep),
        "beta": np.empty((n_keep, data.p)),
        "u": np.empty((n_keep, data.n_levels)),
        "theta": np.empty((n_keep, data.n)),
        "sigma_sq": np.empty(n_keep),
        "rho": np.empty(n_keep),
        "sigma2_theta": np.empty(n_keep),
        "r2": np.empty(n_keep),
    }
    sigma2_u = np.empty(n_keep) if has_groups else None
    acc_rho = acc_sig = 0
    row = 0
    for t in range(config.n_iter):
        try:
            rho_acc, sig_acc = _sweep_baseline(state, data, hyper, stream, c2, c_sigma, use_likelihood)
        except _SWEEP_ERRORS as exc:
            raise McmcError(f"sweep {config.n_burnin + t}: {exc}") from exc
        acc_rho += rho_acc
        acc_sig += sig_acc
        if (t + 1) % config.thin == 0:
            out["beta0"][row] = state.beta0
            out["beta"][row] = state.beta
            out["u"][row] = state.u
            out["theta"][row] = state.theta
            out["sigma_sq"][row] = state.sigma_sq
            out["rho"][row] = state.rho
            out["sigma2_theta"][row] = state.sigma_theta_sq
            out["r2"][row] = _r2_value(state, data)
            if has_groups:
                sigma2_u[row] = state.sigma_u_sq
            row += 1

    acceptance = {"rho": acc_rho / config.n_iter}
    scales = {"c2": c2}
    if is_pc:
        acceptance["sigma_theta"] = acc_sig / config.n_iter
        scales["c_sigma"] = c_sigma
    return PosteriorSamples(
        prior_family=hyper.prior_family,
        beta0=out["beta0"],
        beta=out["beta"],
        u=out["u"],
        theta=out["theta"],
        sigma_sq=out["sigma_sq"],
        rho=out["rho"],
        sigma2_theta=out["sigma2_theta"],
        r2=out["r2"],
        acceptance=acceptance,
        proposal_scales=scales,
        sigma2_u=sigma2_u,
    )
