"""Prior-construction checks: closed forms, Table-style moment oracles, calibration."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from spatial_r2d2.distributions import RandomStream, chol_spd
from spatial_r2d2.r2d2_prior import (
    DegeneratePriorError,
    PriorShapeScale,
    R2Hyper,
    VarianceSplit,
    closed_form_blocked_cs,
    closed_form_cs,
    moment_match,
    prior_r2_simulate,
    standardize_columns,
    w_prior_moments,
    w_prior_sample,
)
from spatial_r2d2.spatial_core import (
    BLOCKED_COMPOUND_SYMMETRY,
    COMPOUND_SYMMETRY,
    EXPONENTIAL,
    CorrelationKernel,
    Locations,
    correlation_matrix,
)

# Prop-3 moments at (a, b) = (4, 4), (alpha, beta) = (6.63, 0.14); product-moment
# and two-term expansions agree on these to 1e-15, and the published rounded
# values 1.70 / 3.68 sit within rounding distance of them.
W_MEAN_TABLE = 1.6916180326482277
W_VAR_TABLE = 3.662718900025032


class _StubRng:
    def __init__(self, gamma_draws):
        self._gamma = list(gamma_draws)

    def gamma(self, shape, scale=1.0, size=None):
        return self._gamma.pop(0)


class _StubStream:
    def __init__(self, rng):
        self.rng = rng


def _bp_cdf(x, a, b):
    x = np.asarray(x, dtype=float)
    return stats.beta.cdf(x / (1.0 + x), a, b)


def _shape_scale(alpha, beta):
    return PriorShapeScale(mu_s=alpha * beta, sigma2_s=alpha * beta**2)


def test_variance_split_validation():
    with pytest.raises(ValueError):
        VarianceSplit(np.array([0.5, 0.6]), n_covariates=1)
    with pytest.raises(ValueError):
        VarianceSplit(np.array([0.5, -0.5, 1.0]), n_covariates=2)
    with pytest.raises(ValueError):
        VarianceSplit(np.array([0.5, 0.5]), n_covariates=2)


def test_variance_split_working_round_trip():
    split = VarianceSplit.from_working(
        np.array([0.6, 0.1, 0.3]), n_covariates=4, n_groups=1, equal_fixed_effects=True
    )
    np.testing.assert_allclose(split.covariate_shares, 0.15)
    np.testing.assert_allclose(split.group_shares, [0.1])
    assert split.spatial_share == 0.3
    np.testing.assert_allclose(split.working(), [0.6, 0.1, 0.3])

    plain = VarianceSplit(np.array([0.2, 0.3, 0.5]), n_covariates=2)
    np.testing.assert_allclose(plain.working(), plain.phi)


def test_shape_scale_consistency():
    ss = PriorShapeScale(0.5, 0.25)
    assert ss.alpha * ss.beta == pytest.approx(0.5, abs=1e-10)
    assert ss.alpha * ss.beta**2 == pytest.approx(0.25, abs=1e-10)


def test_moment_match_identity_design():
    split = VarianceSplit(np.array([1.0]), n_covariates=0)
    ss = moment_match(None, None, np.eye(3), split)
    assert ss.mu_s == pytest.approx(1.0, abs=1e-12)
    assert ss.sigma2_s == pytest.approx(1.0, abs=1e-12)
    assert ss.alpha == pytest.approx(1.0, abs=1e-12)
    assert ss.beta == pytest.approx(1.0, abs=1e-12)


def test_moment_match_cs_paper_values():
    split = VarianceSplit(np.array([1.0]), n_covariates=0)
    locs = Locations(np.zeros((3, 2)))
    sigma = correlation_matrix(CorrelationKernel(COMPOUND_SYMMETRY, 0.5), locs)
    ss = moment_match(None, None, sigma, split)
    assert ss.mu_s == pytest.approx(0.5, abs=1e-12)
    assert ss.sigma2_s == pytest.approx(0.25, abs=1e-12)


def test_moment_match_degenerate_cs():
    split = VarianceSplit(np.array([1.0]), n_covariates=0)
    with pytest.raises(DegeneratePriorError):
        moment_match(None, None, np.ones((4, 4)), split)


def test_closed_form_cs_values():
    assert closed_form_cs(0.0, 101) == pytest.approx((1.0, 0.02))
    assert closed_form_cs(0.5, 101) == pytest.approx((0.5, 0.005))
    assert closed_form_cs(0.9, 11) == pytest.approx((0.1, 0.002))
    with pytest.raises(DegeneratePriorError):
        closed_form_cs(1.0, 10)
    with pytest.raises(ValueError):
        closed_form_cs(-0.1, 10)


def test_closed_form_blocked_cs_values():
    assert closed_form_blocked_cs(0.3, 12, 1) == pytest.approx(0.7)
    assert closed_form_blocked_cs(0.5, 10, 2) == pytest.approx(7.0 / 9.0)
    assert closed_form_blocked_cs(0.0, 12, 3) == 1.0
    with pytest.raises(ValueError):
        closed_form_blocked_cs(0.5, 10, 3)


def test_moment_match_matches_cs_closed_form():
    split = VarianceSplit(np.array([1.0]), n_covariates=0)
    locs = Locations(np.zeros((10, 2)))
    for rho in (0.0, 0.2, 0.5, 0.9):
        sigma = correlation_matrix(CorrelationKernel(COMPOUND_SYMMETRY, rho), locs)
        ss = moment_match(None, None, sigma, split)
        mu, s2 = closed_form_cs(rho, 10)
        assert ss.mu_s == pytest.approx(mu, abs=1e-10)
        assert ss.sigma2_s == pytest.approx(s2, abs=1e-10)


def test_moment_match_matches_blocked_closed_form():
    split = VarianceSplit(np.array([1.0]), n_covariates=0)
    locs = Locations(np.zeros((12, 2)))
    for m in (1, 2, 3, 4):
        kernel = CorrelationKernel(BLOCKED_COMPOUND_SYMMETRY, 0.4, blocks=m)
        sigma = correlation_matrix(kernel, locs)
        ss = moment_match(None, None, sigma, split)
        assert ss.mu_s == pytest.approx(closed_form_blocked_cs(0.4, 12, m), abs=1e-10)


def test_moment_match_full_design_dense_oracle():
    rng = np.random.default_rng(10)
    n, p, levels = 25, 3, 4
    x, _, _ = standardize_columns(rng.standard_normal((n, p)))
    z = np.zeros((n, levels))
    z[np.arange(n), rng.integers(0, levels, n)] = 1.0
    locs = Locations(rng.random((n, 2)))
    sigma = correlation_matrix(CorrelationKernel(EXPONENTIAL, 0.3), locs)
    split = VarianceSplit(
        np.array([0.1, 0.15, 0.05, 0.3, 0.4]), n_covariates=3, n_groups=1
    )
    ss = moment_match(x, z, sigma, split)

    b = x @ np.diag(split.covariate_shares) @ x.T + 0.3 * z @ z.T + 0.4 * sigma
    proj = (np.eye(n) - np.ones((n, n)) / n) / (n - 1)
    assert ss.mu_s == pytest.approx(np.trace(proj @ b), rel=1e-10)
    assert ss.sigma2_s == pytest.approx(2 * np.trace(proj @ b @ proj @ b), rel=1e-10)


def test_w_prior_sample_forced():
    stream = _StubStream(_StubRng([1.0, 2.0, 2.0]))
    w, gamma, u, v = w_prior_sample(stream, R2Hyper(4, 4), _shape_scale(2.0, 1.0))
    assert (w, gamma, u, v) == (1.0, 1.0, 2.0, 0.5)


def test_w_prior_sample_ks_bp_identity():
    # Eq-style identity: W/V (equivalently W*S with S = 1/V ~ Gamma(alpha, beta),
    # independent of the BP factor) must be exactly BP(a, b)
    stream = RandomStream(59)
    hyper = R2Hyper(4, 4)
    ss = _shape_scale(1.0, 1.0)
    ratios = np.empty(100_000)
    for i in range(ratios.size):
        w, _, _, v = w_prior_sample(stream, hyper, ss)
        ratios[i] = w / v
    assert stats.kstest(ratios, lambda t: _bp_cdf(t, 4, 4)).statistic < 0.02


def test_w_prior_sample_table_mean():
    stream = RandomStream(61)
    hyper = R2Hyper(4, 4)
    ss = _shape_scale(6.63, 0.14)
    draws = np.array([w_prior_sample(stream, hyper, ss)[0] for _ in range(100_000)])
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - W_MEAN_TABLE) < 3 * se


def test_w_prior_moments_table_row():
    mean, var = w_prior_moments(R2Hyper(4, 4), _shape_scale(6.63, 0.14))
    assert mean == pytest.approx(W_MEAN_TABLE, abs=1e-12)
    assert var == pytest.approx(W_VAR_TABLE, abs=1e-12)
    # published rounded values are within rounding distance
    assert abs(mean - 1.70) < 0.02
    assert abs(var - 3.68) < 0.05


def test_w_prior_moments_divergence():
    assert w_prior_moments(R2Hyper(4, 1), _shape_scale(6.0, 0.2)) == (np.inf, np.inf)
    mean, var = w_prior_moments(R2Hyper(4, 2), _shape_scale(2.5, 0.2))
    assert np.isfinite(mean)
    assert var == np.inf


def test_w_prior_moments_match_monte_carlo():
    hyper = R2Hyper(2, 6)
    ss = _shape_scale(8.0, 0.5)
    mean, var = w_prior_moments(hyper, ss)
    stream = RandomStream(67)
    draws = np.array([w_prior_sample(stream, hyper, ss)[0] for _ in range(50_000)])
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - mean) < 3 * se
    assert np.isfinite(var)


def test_w_prior_mode_at_zero_for_small_a():
    stream = RandomStream(71)
    hyper = R2Hyper(0.5, 0.5)
    ss = _shape_scale(*_cs_alpha_beta(0.2, 50))
    draws = np.array([w_prior_sample(stream, hyper, ss)[0] for _ in range(100_000)])
    counts, _ = np.histogram(draws, bins=np.linspace(0, 0.5, 6))
    assert np.all(np.diff(counts) < 0)


def _cs_alpha_beta(rho, n):
    mu, s2 = closed_form_cs(rho, n)
    ss = PriorShapeScale(mu, s2)
    return ss.alpha, ss.beta


def test_standardize_columns_convention():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((40, 3)) * 5 + 2
    std, means, scales = standardize_columns(x)
    np.testing.assert_allclose(std.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose((std**2).sum(axis=0), 40.0, atol=1e-10)
    np.testing.assert_allclose(std * scales + means, x, atol=1e-10)
    with pytest.raises(ValueError):
        standardize_columns(np.ones((10, 1)))


def test_marginal_variance_identity():
    # with sum-of-squares-n standardization the mean prior variance of eta is W
    rng = np.random.default_rng(12)
    n, p, levels = 30, 4, 5
    x, _, _ = standardize_columns(rng.standard_normal((n, p)))
    z = np.zeros((n, levels))
    z[np.arange(n), rng.integers(0, levels, n)] = 1.0
    split = VarianceSplit(
        np.array([0.1, 0.2, 0.05, 0.15, 0.2, 0.3]), n_covariates=4, n_groups=1
    )
    w = 1.37
    per_point = (
        (x**2 * split.covariate_shares).sum(axis=1)
        + split.group_shares[0] * (z**2).sum(axis=1)
        + split.spatial_share * 1.0
    )
    assert np.mean(w * per_point) == pytest.approx(w, abs=1e-10)


def test_prior_r2_forced_w_zero():
    rng = np.random.default_rng(13)
    locs = Locations(rng.random((20, 2)))
    kernel = CorrelationKernel(EXPONENTIAL, 0.5)
    split = VarianceSplit(np.array([1.0]), n_covariates=0)
    stream = RandomStream(73)
    draws = prior_r2_simulate(
        stream, R2Hyper(1, 1), None, None, kernel, locs, split, 50, w_override=0.0
    )
    np.testing.assert_array_equal(draws, 0.0)


def test_prior_r2_calibration():
    rng = np.random.default_rng(14)
    n, p = 100, 5
    x, _, _ = standardize_columns(rng.standard_normal((n, p)))
    locs = Locations(rng.random((n, 2)))
    kernel = CorrelationKernel(EXPONENTIAL, 0.5)
    split = VarianceSplit(np.array([0.1] * 5 + [0.5]), n_covariates=5)
    stream = RandomStream(79)

    uniform = prior_r2_simulate(stream, R2Hyper(1, 1), x, None, kernel, locs, split, 4000)
    assert abs(uniform.mean() - 0.5) < 0.02
    assert stats.kstest(uniform, stats.uniform.cdf).statistic < 0.05

    skewed = prior_r2_simulate(stream, R2Hyper(1, 4), x, None, kernel, locs, split, 4000)
    assert abs(skewed.mean() - 0.2) < 0.02


def test_r2_sigma2_invariance():
    # couple identical standard normals: scaling sigma^2 by k leaves R^2 unchanged
    rng = np.random.default_rng(15)
    n, p = 30, 2
    x, _, _ = standardize_columns(rng.standard_normal((n, p)))
    locs = Locations(rng.random((n, 2)))
    sigma = correlation_matrix(CorrelationKernel(EXPONENTIAL, 0.4), locs)
    factor = chol_spd(sigma)
    z_beta = rng.standard_normal(p)
    z_theta = rng.standard_normal(n)
    w = 0.7
    shares = np.array([0.25, 0.15, 0.6])
    results = []
    for k in (1.0, 4.0, 0.25):
        scale = np.sqrt(k)
        beta = scale * np.sqrt(w * shares[:2]) * z_beta
        theta = scale * np.sqrt(w * shares[2]) * (factor @ z_theta)
        v_n = np.var(x @ beta + theta, ddof=1)
        results.append(v_n / (v_n + k))
    np.testing.assert_allclose(results, results[0], rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(min_value=1e-4, max_value=1e4),
    st.floats(min_value=1e-6, max_value=1e2),
)
def test_shape_scale_consistency_property(mu, s2):
    ss = PriorShapeScale(mu, s2)
    assert ss.alpha * ss.beta == pytest.approx(mu, rel=1e-10)
    assert ss.alpha * ss.beta**2 == pytest.approx(s2, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=10_000))
def test_from_working_always_simplex(p, seed):
    rng = np.random.default_rng(seed)
    working = rng.dirichlet(np.ones(3))
    if np.any(working <= 1e-12):
        return
    split = VarianceSplit.from_working(
        working, n_covariates=p, n_groups=1, equal_fixed_effects=True
    )
    assert abs(split.phi.sum() - 1.0) <= 1e-12
    assert split.phi.shape == (p + 2,)
