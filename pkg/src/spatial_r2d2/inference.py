"""Posterior summaries: per-draw R^2, quantile tables, ESS, and study metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mcmc_engine import ModelData, PosteriorSamples, linear_predictor


@dataclass(frozen=True)
class SummaryRow:
    """Median, equal-tailed 95% interval, and effective sample size for one parameter."""

    name: str
    median: float
    ci_low: float
    ci_high: float
    ess: float

    def __post_init__(self):
        if not self.ci_low <= self.median <= self.ci_high:
            raise ValueError(f"{self.name}: interval [{self.ci_low}, {self.ci_high}] must bracket the median")


def r2_per_draw(draw, data: ModelData) -> float:
    """Proportion of response variance explained by the linear predictor at one draw.

    Uses the n-1 sample variance of eta = beta0 + X beta + Z u + theta, so the
    value is invariant to shifting eta by a constant.
    """
    v = float(np.var(linear_predictor(draw, data), ddof=1))
    return v / (v + draw.sigma_sq)


def ess(chain) -> float:
    """Effective sample size N / (1 + 2 sum of autocorrelations).

    Autocorrelations are summed over Geyer's initial positive sequence: lag
    pairs (2m, 2m+1) are accumulated while their sum stays positive and the
    remainder is truncated. Negative-correlation chains truncate immediately,
    so the estimate can exceed N (the pair sums are floored rather than
    subtracted). A zero-variance chain has ESS defined as N.
    """
    x = np.asarray(chain, dtype=float)
    n = x.size
    if n < 10:
        raise ValueError("need at least 10 draws to estimate ESS")
    centered = x - x.mean()
    # rounding in the mean leaves O(eps|x|) residue on constant chains
    if float(np.max(np.abs(centered))) <= 1e-12 * max(float(np.max(np.abs(x))), 1.0):
        return float(n)
    width = 1
    while width < 2 * n:
        width *= 2
    spectrum = np.fft.rfft(centered, width)
    acov = np.fft.irfft(spectrum * np.conj(spectrum))[:n].real
    acf = acov / acov[0]
    pair_total = 0.0
    m = 0
    while 2 * m + 1 < n:
        pair = acf[2 * m] + acf[2 * m + 1]
        if pair <= 0.0:
            break
        pair_total += pair
        m += 1
    tau = max(2.0 * pair_total - 1.0, 1e-8)
    return float(n / tau)


def _quantile_summary(name: str, chain: np.ndarray) -> SummaryRow:
    lo, med, hi = np.quantile(chain, [0.025, 0.5, 0.975])
    return SummaryRow(name=name, median=float(med), ci_low=float(lo), ci_high=float(hi), ess=ess(chain))


def summarize(samples: PosteriorSamples) -> list[SummaryRow]:
    """Median / 95% interval / ESS rows for every scalar-level parameter.

    Variance shares are reported aggregated: phi_fixed is the summed covariate
    share, then phi_group (when a grouping factor exists) and phi_spatial,
    matching how allocation tables present them.
    """
    if samples.n_draws < 10:
        raise ValueError("need at least 10 retained draws to summarize")
    rows = [_quantile_summary("beta0", samples.beta0)]
    for j in range(samples.beta.shape[1]):
        rows.append(_quantile_summary(f"beta_{j + 1}", samples.beta[:, j]))
    rows.append(_quantile_summary("sigma_sq", samples.sigma_sq))
    rows.append(_quantile_summary("sigma2_theta", samples.sigma2_theta))
    if samples.sigma2_u is not None:
        rows.append(_quantile_summary("sigma2_u", samples.sigma2_u))
    rows.append(_quantile_summary("rho", samples.rho))
    rows.append(_quantile_summary("r2", samples.r2))
    if samples.W is not None:
        rows.append(_quantile_summary("W", samples.W))
    if samples.phi is not None:
        p = samples.beta.shape[1]
        has_group = samples.sigma2_u is not None
        rows.append(_quantile_summary("phi_fixed", samples.phi[:, :p].sum(axis=1)))
        if has_group:
            rows.append(_quantile_summary("phi_group", samples.phi[:, p]))
        rows.append(_quantile_summary("phi_spatial", samples.phi[:, -1]))
    return rows


def prob_positive(chain) -> float:
    """Fraction of draws strictly greater than zero."""
    x = np.asarray(chain, dtype=float)
    if x.size == 0:
        raise ValueError("chain must be nonempty")
    return float(np.mean(x > 0.0))


def sim_metrics(
    truths, medians, ci_low, ci_high
) -> tuple[float, float]:
    """Replicate-study accuracy: RMSE of medians and 95%-interval coverage.

    Arrays may be (R,) for scalars or (R, p) for vector parameters; vector
    errors and hits are averaged over components as well as replicates.
    """
    truths = np.asarray(truths, dtype=float)
    medians = np.asarray(medians, dtype=float)
    ci_low = np.asarray(ci_low, dtype=float)
    ci_high = np.asarray(ci_high, dtype=float)
    if not truths.shape == medians.shape == ci_low.shape == ci_high.shape:
        raise ValueError("all metric inputs must share one shape")
    if truths.size == 0:
        raise ValueError("need at least one replicate")
    rmse = float(np.sqrt(np.mean((medians - truths) ** 2)))
    coverage = float(np.mean((ci_low <= truths) & (truths <= ci_high)))
    return rmse, coverage
