"""Batch entry points: CSV model fits, prior calibration checks, replicate studies.

Subcommands (`fit`, `prior-check`, `simulate`) read one flat JSON config each,
write machine-readable artifacts (samples/summary CSVs plus a meta.json that
pins seed, config hash, and standardization constants), and exit 0 on success,
2 on input problems, 3 on sampler aborts, 4 when too many replicate fits fail.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .distributions import RandomStream, chol_spd
from .inference import summarize
from .mcmc_engine import (
    PC,
    PRIOR_FAMILIES,
    R2D2,
    VAGUE,
    HyperParams,
    McmcConfig,
    McmcError,
    ModelData,
    PosteriorSamples,
    run_chain,
    run_chain_baseline,
)
from .r2d2_prior import (
    DegeneratePriorError,
    R2Hyper,
    VarianceSplit,
    moment_match,
    prior_r2_simulate,
    standardize_columns,
    w_prior_sample,
)
from .spatial_core import EXPONENTIAL, CorrelationKernel, Locations, correlation_matrix

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SAMPLER = 3
EXIT_SIM_FAILURES = 4

_REQUIRED = object()


class CliError(Exception):
    """Operator-facing failure with the process exit code it should produce."""

    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for `fit` and `prior-check`."""

    data: str | None
    out: str
    prior: str
    a: float
    b: float
    xi: float
    kernel: str
    nu: float | None
    rho: float
    mu0: float
    sigma0_sq: float
    a0: float
    b0: float
    m_rho: float
    v_rho: float
    sigma_beta_sq: float
    alpha_tail: float
    sigma0_pc: float
    rho0_pc: float
    equal_fixed_effects: bool
    seed: int
    burnin: int
    iters: int
    thin: int
    chains: int
    c1: float
    c2: float
    adapt_interval: int
    n_draws: int
    stub_n: int
    stub_p: int


@dataclass(frozen=True)
class SimStudyConfig:
    """Resolved settings for the replicate `simulate` study."""

    out: str
    families: tuple[str, ...]
    n_values: tuple[int, ...]
    rho_values: tuple[float, ...]
    p: int
    ar1_r: float
    sigma_sq: float
    sigma_beta_sq: float
    sigma_theta_sq: float
    replicates: int
    a: float
    b: float
    xi: float
    mu0: float
    sigma0_sq: float
    a0: float
    b0: float
    m_rho: float
    v_rho: float
    alpha_tail: float
    seed: int
    burnin: int
    iters: int
    thin: int
    c1: float
    c2: float
    adapt_interval: int
    workers: int


_RUN_KEYS = {
    "data": None,
    "out": _REQUIRED,
    "prior": R2D2,
    "a": 1.0,
    "b": 1.0,
    "xi": 1.0,
    "kernel": EXPONENTIAL,
    "nu": None,
    "rho": 0.2,
    "mu0": 0.0,
    "sigma0_sq": 100.0,
    "a0": 0.10,
    "b0": 0.10,
    "m_rho": -2.0,
    "v_rho": 1.0,
    "sigma_beta_sq": 100.0,
    "alpha_tail": 0.05,
    "sigma0_pc": 10.0,
    "rho0_pc": 0.01,
    "equal_fixed_effects": False,
    "seed": 0,
    "burnin": 500,
    "iters": 2000,
    "thin": 1,
    "chains": 1,
    "c1": 100.0,
    "c2": 0.5,
    "adapt_interval": 100,
    "n_draws": 4000,
    "stub_n": 100,
    "stub_p": 10,
}

_SIM_KEYS = {
    "out": _REQUIRED,
    "families": (R2D2, VAGUE, PC),
    "n_values": (100,),
    "rho_values": (0.1,),
    "p": 10,
    "ar1_r": 0.8,
    "sigma_sq": 1.0,
    "sigma_beta_sq": 0.25,
    "sigma_theta_sq": 0.25,
    "replicates": 20,
    "a": 1.0,
    "b": 1.0,
    "xi": 1.0,
    "mu0": 0.0,
    "sigma0_sq": 100.0,
    "a0": 0.10,
    "b0": 0.10,
    "m_rho": -2.0,
    "v_rho": 1.0,
    "alpha_tail": 0.05,
    "seed": 0,
    "burnin": 500,
    "iters": 2000,
    "thin": 1,
    "c1": 100.0,
    "c2": 0.5,
    "adapt_interval": 100,
    "workers": 1,
}

_INT_KEYS = {
    "seed", "burnin", "iters", "thin", "chains", "adapt_interval",
    "n_draws", "stub_n", "stub_p", "p", "replicates", "workers",
}
_SEQUENCE_KEYS = {"families", "n_values", "rho_values"}


def _resolve_config(raw: dict, keys: dict, label: str) -> dict:
    unknown = sorted(set(raw) - set(keys))
    if unknown:
        raise CliError(EXIT_INPUT, f"unknown {label} config keys: {', '.join(unknown)}")
    resolved = {}
    for name, default in keys.items():
        if name in raw:
            value = raw[name]
        elif default is _REQUIRED:
            raise CliError(EXIT_INPUT, f"{label} config requires key {name!r}")
        else:
            value = default
        if value is not None:
            if name in _INT_KEYS:
                if isinstance(value, bool) or value != int(value):
                    raise CliError(EXIT_INPUT, f"config key {name!r} must be an integer")
                value = int(value)
            elif name in _SEQUENCE_KEYS:
                if not isinstance(value, (list, tuple)) or not value:
                    raise CliError(EXIT_INPUT, f"config key {name!r} must be a nonempty list")
                if name == "n_values":
                    value = tuple(int(v) for v in value)
                elif name == "rho_values":
                    value = tuple(float(v) for v in value)
                else:
                    value = tuple(value)
            elif isinstance(value, (int, float)) and not isinstance(value, bool):
                value = float(value)
        resolved[name] = value
    return resolved


def load_run_config(raw: dict) -> RunConfig:
    resolved = _resolve_config(raw, _RUN_KEYS, "run")
    if resolved["prior"] not in PRIOR_FAMILIES:
        raise CliError(EXIT_INPUT, f"prior must be one of {PRIOR_FAMILIES}, got {resolved['prior']!r}")
    if resolved["chains"] < 1 or resolved["n_draws"] < 1:
        raise CliError(EXIT_INPUT, "chains and n_draws must be >= 1")
    return RunConfig(**resolved)


def load_sim_config(raw: dict) -> SimStudyConfig:
    resolved = _resolve_config(raw, _SIM_KEYS, "simulate")
    for family in resolved["families"]:
        if family not in PRIOR_FAMILIES:
            raise CliError(EXIT_INPUT, f"families entries must be in {PRIOR_FAMILIES}, got {family!r}")
    if resolved["replicates"] < 1 or resolved["workers"] < 1:
        raise CliError(EXIT_INPUT, "replicates and workers must be >= 1")
    if any(n < 2 for n in resolved["n_values"]):
        raise CliError(EXIT_INPUT, "n_values entries must be >= 2")
    if any(not 0 < r for r in resolved["rho_values"]):
        raise CliError(EXIT_INPUT, "rho_values entries must be positive")
    return SimStudyConfig(**resolved)


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INPUT, f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError(EXIT_INPUT, f"config {path} must be a JSON object")
    return raw


def _parse_cell(text: str, line: int, column: str) -> float:
    text = text.strip()
    if text == "":
        raise CliError(EXIT_INPUT, f"line {line}, column {column!r}: missing value")
    try:
        value = float(text)
    except ValueError as exc:
        raise CliError(
            EXIT_INPUT, f"line {line}, column {column!r}: non-numeric value {text!r}"
        ) from exc
    if not math.isfinite(value):
        raise CliError(EXIT_INPUT, f"line {line}, column {column!r}: non-finite value {text!r}")
    return value


def _rescale_coordinates(coords: np.ndarray) -> tuple[np.ndarray, list[float], float]:
    """Map coordinates into the unit square, preserving the aspect ratio.

    Data already inside [0,1]^2 passes through untouched; otherwise both axes
    shift to zero minimum and divide by the larger side length.
    """
    if coords.min() >= 0.0 and coords.max() <= 1.0:
        return coords, [0.0, 0.0], 1.0
    mins = coords.min(axis=0)
    side = float((coords - mins).max())
    if side <= 0.0:
        raise CliError(EXIT_INPUT, "coordinates collapse to a single point; cannot rescale")
    return (coords - mins) / side, [float(mins[0]), float(mins[1])], side


def build_model_data(
    y: np.ndarray,
    coords: np.ndarray,
    x_raw: np.ndarray,
    x_names: list[str],
    group_labels: list[str] | None,
    kernel: CorrelationKernel,
) -> tuple[ModelData, dict]:
    """Shared raw-arrays-to-ModelData path used by ingest and the simulator."""
    for j, name in enumerate(x_names):
        if float(np.var(x_raw[:, j])) == 0.0:
            raise CliError(
                EXIT_INPUT, f"column {name!r}: cannot standardize zero-variance column"
            )
    x_std, means, scales = standardize_columns(x_raw)
    coords_std, shift, side = _rescale_coordinates(coords)
    z = None
    levels: list[str] = []
    if group_labels is not None:
        levels = sorted(set(group_labels))
        index = {label: i for i, label in enumerate(levels)}
        z = np.zeros((len(group_labels), len(levels)))
        for i, label in enumerate(group_labels):
            z[i, index[label]] = 1.0
    try:
        data = ModelData(y=y, x=x_std, locations=Locations(coords_std), kernel=kernel, z=z)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    meta = {
        "n": data.n,
        "p": data.p,
        "n_levels": data.n_levels,
        "covariate_columns": x_names,
        "covariate_means": [float(v) for v in means],
        "covariate_scales": [float(v) for v in scales],
        "coordinate_shift": shift,
        "coordinate_scale": side,
        "group_levels": levels,
    }
    return data, meta


def ingest_csv(path: str, kernel: CorrelationKernel | None = None) -> tuple[ModelData, dict]:
    """Read a modeling dataset: y, s1, s2 required, x_* covariates, optional group."""
    if kernel is None:
        kernel = CorrelationKernel(EXPONENTIAL, 0.2)
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read data {path}: {exc}") from exc
    if not rows:
        raise CliError(EXIT_INPUT, f"data {path} is empty")
    header = [name.strip() for name in rows[0]]
    for required in ("y", "s1", "s2"):
        if required not in header:
            raise CliError(EXIT_INPUT, f"missing required column {required!r}")
    x_names = [name for name in header if name.startswith("x_")]
    col = {name: header.index(name) for name in header}
    records = rows[1:]
    if not records:
        raise CliError(EXIT_INPUT, f"data {path} has a header but no rows")
    n = len(records)
    y = np.empty(n)
    coords = np.empty((n, 2))
    x_raw = np.empty((n, len(x_names)))
    group_labels: list[str] | None = ["" for _ in range(n)] if "group" in col else None
    for i, record in enumerate(records):
        line = i + 2
        if len(record) != len(header):
            raise CliError(
                EXIT_INPUT, f"line {line}: expected {len(header)} fields, got {len(record)}"
            )
        y[i] = _parse_cell(record[col["y"]], line, "y")
        coords[i, 0] = _parse_cell(record[col["s1"]], line, "s1")
        coords[i, 1] = _parse_cell(record[col["s2"]], line, "s2")
        for j, name in enumerate(x_names):
            x_raw[i, j] = _parse_cell(record[col[name]], line, name)
        if group_labels is not None:
            label = record[col["group"]].strip()
            if label == "":
                raise CliError(EXIT_INPUT, f"line {line}, column 'group': missing value")
            group_labels[i] = label
    if not x_names:
        raise CliError(EXIT_INPUT, "no covariate columns found (prefix them with 'x_')")
    return build_model_data(y, coords, x_raw, x_names, group_labels, kernel)


def write_dataset_csv(
    path: str | Path,
    y: np.ndarray,
    coords: np.ndarray,
    x_raw: np.ndarray,
    group_labels: list[str] | None = None,
) -> None:
    """Write a dataset in the ingest layout with full round-trip precision."""
    header = ["y", "s1", "s2"] + [f"x_{j + 1}" for j in range(x_raw.shape[1])]
    if group_labels is not None:
        header.append("group")
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for i in range(y.shape[0]):
            row = [repr(float(y[i])), repr(float(coords[i, 0])), repr(float(coords[i, 1]))]
            row += [repr(float(v)) for v in x_raw[i]]
            if group_labels is not None:
                row.append(group_labels[i])
            writer.writerow(row)


def _make_kernel(config: RunConfig) -> CorrelationKernel:
    try:
        return CorrelationKernel(config.kernel, config.rho, nu=config.nu)
    except ValueError as exc:
        raise CliError(
            EXIT_INPUT, f"kernel {config.kernel!r} with rho={config.rho}, nu={config.nu}: {exc}"
        ) from exc


def _make_hyper(config: RunConfig) -> HyperParams:
    try:
        return HyperParams(
            r2=R2Hyper(config.a, config.b),
            prior_family=config.prior,
            xi=config.xi,
            mu0=config.mu0,
            sigma0_sq=config.sigma0_sq,
            a0=config.a0,
            b0=config.b0,
            m_rho=config.m_rho,
            v_rho=config.v_rho,
            sigma_beta_sq=config.sigma_beta_sq,
            alpha_tail=config.alpha_tail,
            sigma0_pc=config.sigma0_pc,
            rho0_pc=config.rho0_pc,
            equal_fixed_effects=config.equal_fixed_effects,
        )
    except ValueError as exc:
        raise CliError(EXIT_INPUT, f"invalid hyperparameters: {exc}") from exc


def _make_mcmc(config) -> McmcConfig:
    try:
        return McmcConfig(
            n_burnin=config.burnin,
            n_iter=config.iters,
            thin=config.thin,
            seed=config.seed,
            c1=config.c1,
            c2=config.c2,
            adapt_interval=config.adapt_interval,
        )
    except ValueError as exc:
        raise CliError(EXIT_INPUT, f"invalid mcmc settings: {exc}") from exc


def _run_family(data, hyper, mcmc, stream) -> PosteriorSamples:
    try:
        if hyper.prior_family == R2D2:
            return run_chain(data, hyper, mcmc, stream)
        return run_chain_baseline(data, hyper, mcmc, stream)
    except McmcError as exc:
        raise CliError(EXIT_SAMPLER, f"sampler failed: {exc}") from exc
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc


def _pool_chains(chains: list[PosteriorSamples]) -> PosteriorSamples:
    first = chains[0]
    if len(chains) == 1:
        return first

    def cat(name):
        parts = [getattr(c, name) for c in chains]
        return None if parts[0] is None else np.concatenate(parts, axis=0)

    return PosteriorSamples(
        prior_family=first.prior_family,
        beta0=cat("beta0"),
        beta=cat("beta"),
        u=cat("u"),
        theta=cat("theta"),
        sigma_sq=cat("sigma_sq"),
        rho=cat("rho"),
        sigma2_theta=cat("sigma2_theta"),
        r2=cat("r2"),
        sigma2_u=cat("sigma2_u"),
        U=cat("U"),
        V=cat("V"),
        gamma=cat("gamma"),
        W=cat("W"),
        phi=cat("phi"),
    )


def _sample_columns(samples: PosteriorSamples, n: int, n_levels: int) -> list[tuple[str, np.ndarray]]:
    p = samples.beta.shape[1]
    columns = [("beta0", samples.beta0)]
    columns += [(f"beta_{j + 1}", samples.beta[:, j]) for j in range(p)]
    columns += [(f"u_{k + 1}", samples.u[:, k]) for k in range(n_levels)]
    columns += [(f"theta_{i + 1}", samples.theta[:, i]) for i in range(n)]
    columns.append(("sigma_sq", samples.sigma_sq))
    columns.append(("rho", samples.rho))
    columns.append(("sigma2_theta", samples.sigma2_theta))
    if samples.sigma2_u is not None:
        columns.append(("sigma2_u", samples.sigma2_u))
    if samples.W is not None:
        columns += [
            ("U", samples.U), ("V", samples.V), ("gamma", samples.gamma), ("W", samples.W),
        ]
        columns += [(f"phi_{j + 1}", samples.phi[:, j]) for j in range(p)]
        if samples.sigma2_u is not None:
            columns.append(("phi_group", samples.phi[:, p]))
        columns.append(("phi_spatial", samples.phi[:, -1]))
    columns.append(("r2", samples.r2))
    return columns


def _write_samples_csv(path: Path, chains: list[PosteriorSamples], n: int, n_levels: int) -> None:
    named = [_sample_columns(c, n, n_levels) for c in chains]
    header = ["chain", "draw"] + [name for name, _ in named[0]]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for c, columns in enumerate(named):
            for t in range(chains[c].n_draws):
                row = [str(c), str(t)] + [repr(float(series[t])) for _, series in columns]
                writer.writerow(row)


def _write_summary_csv(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["name", "median", "ci_low", "ci_high", "ess"])
        for row in rows:
            writer.writerow(
                [row.name, repr(row.median), repr(row.ci_low), repr(row.ci_high), repr(row.ess)]
            )


def _config_echo(config) -> dict:
    echo = {}
    for name, value in vars(config).items():
        echo[name] = list(value) if isinstance(value, tuple) else value
    return echo


def _config_hash(echo: dict) -> str:
    canonical = json.dumps(echo, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _write_meta(path: Path, command: str, config, extra: dict) -> None:
    echo = _config_echo(config)
    meta = {
        "command": command,
        "config": echo,
        "config_sha256": _config_hash(echo),
        "seed": config.seed,
        **extra,
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(meta, handle, indent=2, sort_keys=True)
        handle.write("\n")


def cmd_fit(config: RunConfig) -> int:
    """Fit one model and write samples.csv, summary.csv, and meta.json."""
    start = time.perf_counter()
    if config.data is None:
        raise CliError(EXIT_INPUT, "fit requires a 'data' path in the config")
    data, data_meta = ingest_csv(config.data, _make_kernel(config))
    hyper = _make_hyper(config)
    mcmc = _make_mcmc(config)
    root = RandomStream(config.seed)
    chains = [
        _run_family(data, hyper, mcmc, root.substream(c)) for c in range(config.chains)
    ]
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_samples_csv(out / "samples.csv", chains, data.n, data.n_levels)
    _write_summary_csv(out / "summary.csv", summarize(_pool_chains(chains)))
    _write_meta(
        out / "meta.json",
        "fit",
        config,
        {
            "standardization": data_meta,
            "acceptance": [c.acceptance for c in chains],
            "proposal_scales": [c.proposal_scales for c in chains],
            "retained_draws_per_chain": chains[0].n_draws,
            "wall_time_s": time.perf_counter() - start,
        },
    )
    return EXIT_OK


def _stub_design(config: RunConfig, stream: RandomStream):
    x, _, _ = standardize_columns(stream.rng.standard_normal((config.stub_n, config.stub_p)))
    coords = stream.rng.uniform(size=(config.stub_n, 2))
    return x, Locations(coords)


def _histogram_csv(path: Path, values: np.ndarray, edges: np.ndarray) -> None:
    counts, _ = np.histogram(values, bins=edges)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, count in zip(edges[:-1], edges[1:], counts):
            writer.writerow([repr(float(lo)), repr(float(hi)), str(int(count))])


def cmd_prior_check(config: RunConfig) -> int:
    """Sample the induced R^2 and W priors and report calibration diagnostics."""
    start = time.perf_counter()
    kernel = _make_kernel(config)
    root = RandomStream(config.seed)
    if config.data is not None:
        data, _ = ingest_csv(config.data, kernel)
        x, locs, z = data.x, data.locations, data.z
    else:
        x, locs = _stub_design(config, root.substream(0))
        z = None
    hyper = R2Hyper(config.a, config.b)
    k = x.shape[1] + (1 if z is not None else 0) + 1
    if config.equal_fixed_effects:
        k = (1 if x.shape[1] else 0) + (1 if z is not None else 0) + 1
    concentration = np.full(k, config.xi)
    try:
        r2_draws = prior_r2_simulate(
            root.substream(1),
            hyper,
            x,
            z,
            kernel,
            locs,
            concentration,
            config.n_draws,
            equal_fixed_effects=config.equal_fixed_effects,
        )
        sigma = correlation_matrix(kernel, locs)
        w_stream = root.substream(2)
        w_draws = np.empty(config.n_draws)
        for i in range(config.n_draws):
            working = w_stream.rng.dirichlet(concentration)
            split = VarianceSplit.from_working(
                working, x.shape[1], 1 if z is not None else 0, config.equal_fixed_effects
            )
            ss = moment_match(x, z, sigma, split)
            w_draws[i], _, _, _ = w_prior_sample(w_stream, hyper, ss)
    except DegeneratePriorError as exc:
        raise CliError(
            EXIT_INPUT,
            f"degenerate prior for kernel {config.kernel!r} with rho={config.rho}: {exc}",
        ) from exc
    ks = stats.kstest(r2_draws, stats.beta(config.a, config.b).cdf).statistic
    mean_gap = abs(float(r2_draws.mean()) - config.a / (config.a + config.b))
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "prior_draws.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["r2", "w"])
        for r2, w in zip(r2_draws, w_draws):
            writer.writerow([repr(float(r2)), repr(float(w))])
    _histogram_csv(out / "r2_hist.csv", r2_draws, np.linspace(0.0, 1.0, 41))
    w_top = float(np.quantile(w_draws, 0.99))
    _histogram_csv(out / "w_hist.csv", w_draws, np.linspace(0.0, max(w_top, 1e-12), 41))
    _write_meta(
        out / "meta.json",
        "prior-check",
        config,
        {
            "ks_r2_vs_beta": float(ks),
            "r2_mean": float(r2_draws.mean()),
            "r2_target_mean": config.a / (config.a + config.b),
            "mean_gap": mean_gap,
            "w_mean": float(w_draws.mean()),
            "w_median": float(np.median(w_draws)),
            "wall_time_s": time.perf_counter() - start,
        },
    )
    return EXIT_OK


_SIM_PARAMETERS = ("beta", "sigma_sq", "sigma2_theta", "rho", "r2")


def _simulate_dataset(stream: RandomStream, n: int, rho: float, config: SimStudyConfig):
    """One replicate draw: AR(1) covariates, Gaussian-process field, iid noise."""
    rng = stream.rng
    coords = rng.uniform(size=(n, 2))
    locs = Locations(coords)
    lag = np.abs(np.subtract.outer(np.arange(config.p), np.arange(config.p)))
    x_raw = rng.standard_normal((n, config.p)) @ np.linalg.cholesky(config.ar1_r**lag).T
    beta = math.sqrt(config.sigma_sq * config.sigma_beta_sq) * rng.standard_normal(config.p)
    sigma = correlation_matrix(CorrelationKernel(EXPONENTIAL, rho), locs)
    theta = math.sqrt(config.sigma_sq * config.sigma_theta_sq) * (
        chol_spd(sigma) @ rng.standard_normal(n)
    )
    eta = x_raw @ beta + theta
    y = eta + math.sqrt(config.sigma_sq) * rng.standard_normal(n)
    v = float(np.var(eta, ddof=1))
    truths = {
        "beta": beta,
        "sigma_sq": config.sigma_sq,
        "sigma2_theta": config.sigma_theta_sq,
        "rho": rho,
        "r2": v / (v + config.sigma_sq),
    }
    return y, coords, x_raw, truths


def _family_hyper(family: str, rho: float, config: SimStudyConfig) -> HyperParams:
    return HyperParams(
        r2=R2Hyper(config.a, config.b),
        prior_family=family,
        xi=config.xi,
        mu0=config.mu0,
        sigma0_sq=config.sigma0_sq,
        a0=config.a0,
        b0=config.b0,
        m_rho=config.m_rho,
        v_rho=config.v_rho,
        alpha_tail=config.alpha_tail,
        # baseline tails anchored at the generative truth
        sigma0_pc=10.0 * math.sqrt(config.sigma_theta_sq),
        rho0_pc=rho / 10.0,
    )


def _fit_summaries(samples: PosteriorSamples, scales: np.ndarray) -> dict:
    """Per-parameter (median, ci_low, ci_high); beta on the original scale."""
    beta_orig = samples.beta / scales
    q = np.quantile(beta_orig, [0.025, 0.5, 0.975], axis=0)
    out = {"beta": (q[1], q[0], q[2])}
    for name in ("sigma_sq", "sigma2_theta", "rho", "r2"):
        lo, med, hi = np.quantile(getattr(samples, name), [0.025, 0.5, 0.975])
        out[name] = (med, lo, hi)
    return out


def _method_label(family: str, config: SimStudyConfig) -> str:
    if family == R2D2:
        return f"r2d2({config.a:g},{config.b:g})"
    return family


def _run_replicate(job) -> tuple[tuple, dict, list]:
    """Generate one dataset and fit every configured family on it."""
    key, n, rho, config = job
    stream = RandomStream(config.seed, spawn_key=key)
    y, coords, x_raw, truths = _simulate_dataset(stream.substream(0), n, rho, config)
    names = [f"x_{j + 1}" for j in range(config.p)]
    data, meta = build_model_data(
        y, coords, x_raw, names, None, CorrelationKernel(EXPONENTIAL, 0.2)
    )
    scales = np.asarray(meta["covariate_scales"])
    mcmc = _make_mcmc(config)
    fits = {}
    failures = []
    for f, family in enumerate(config.families):
        hyper = _family_hyper(family, rho, config)
        try:
            if family == R2D2:
                samples = run_chain(data, hyper, mcmc, stream.substream(1 + f))
            else:
                samples = run_chain_baseline(data, hyper, mcmc, stream.substream(1 + f))
            fits[family] = _fit_summaries(samples, scales)
        except (McmcError, ValueError) as exc:
            failures.append((key, family, str(exc)))
    return key, {"truths": truths, "fits": fits}, failures


def _metric_rows(config: SimStudyConfig, results: dict) -> list[dict]:
    rows = []
    for i_n, n in enumerate(config.n_values):
        for i_r, rho in enumerate(config.rho_values):
            for family in config.families:
                collected = {name: [] for name in _SIM_PARAMETERS}
                for rep in range(config.replicates):
                    record = results.get((i_n, i_r, rep))
                    if record is None or family not in record["fits"]:
                        continue
                    summaries = record["fits"][family]
                    truths = record["truths"]
                    for name in _SIM_PARAMETERS:
                        med, lo, hi = summaries[name]
                        collected[name].append((truths[name], med, lo, hi))
                for name in _SIM_PARAMETERS:
                    entries = collected[name]
                    if not entries:
                        continue
                    truth = np.array([e[0] for e in entries])
                    med = np.array([e[1] for e in entries])
                    lo = np.array([e[2] for e in entries])
                    hi = np.array([e[3] for e in entries])
                    sq_err = (med - truth) ** 2
                    rmse = float(np.sqrt(sq_err.mean()))
                    hits = (lo <= truth) & (truth <= hi)
                    coverage = float(hits.mean())
                    m = truth.size
                    if rmse > 0.0 and m > 1:
                        rmse_se = float(np.std(sq_err, ddof=1) / (2.0 * rmse * math.sqrt(m)))
                    else:
                        rmse_se = 0.0
                    coverage_se = math.sqrt(coverage * (1.0 - coverage) / m)
                    rows.append(
                        {
                            "n": n,
                            "rho": rho,
                            "method": _method_label(family, config),
                            "parameter": name,
                            "rmse": rmse,
                            "rmse_se": rmse_se,
                            "coverage": coverage,
                            "coverage_se": coverage_se,
                            "replicates_used": len(entries),
                        }
                    )
    return rows


def cmd_simulate(config: SimStudyConfig) -> int:
    """Run the replicate study and write tidy per-(method, parameter) metrics."""
    start = time.perf_counter()
    jobs = []
    for i_n, n in enumerate(config.n_values):
        for i_r, rho in enumerate(config.rho_values):
            for rep in range(config.replicates):
                jobs.append(((i_n, i_r, rep), n, rho, config))
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_run_replicate, jobs))
    else:
        outcomes = [_run_replicate(job) for job in jobs]
    results = {}
    failures = []
    for key, record, job_failures in sorted(outcomes, key=lambda item: item[0]):
        results[key] = record
        failures.extend(job_failures)
    rows = _metric_rows(config, results)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        header = [
            "n", "rho", "method", "parameter",
            "rmse", "rmse_se", "coverage", "coverage_se", "replicates_used",
        ]
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [
                    str(row["n"]), repr(float(row["rho"])), row["method"], row["parameter"],
                    repr(row["rmse"]), repr(row["rmse_se"]),
                    repr(row["coverage"]), repr(row["coverage_se"]),
                    str(row["replicates_used"]),
                ]
            )
    with open(out / "failures.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["n_index", "rho_index", "replicate", "family", "error"])
        for key, family, message in failures:
            writer.writerow([str(key[0]), str(key[1]), str(key[2]), family, message])
    total_fits = len(jobs) * len(config.families)
    failure_rate = len(failures) / total_fits
    _write_meta(
        out / "meta.json",
        "simulate",
        config,
        {
            "total_fits": total_fits,
            "failed_fits": len(failures),
            "failure_rate": failure_rate,
            "wall_time_s": time.perf_counter() - start,
        },
    )
    if failure_rate > 0.20:
        print(
            f"simulate: {len(failures)}/{total_fits} fits failed (> 20%)", file=sys.stderr
        )
        return EXIT_SIM_FAILURES
    return EXIT_OK


_OVERRIDE_KEYS = {
    "seed": "seed",
    "iters": "iters",
    "burnin": "burnin",
    "thin": "thin",
    "prior": "prior",
    "a": "a",
    "b": "b",
    "out": "out",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatial-r2d2",
        description="Spatial regression with R-squared-targeting shrinkage priors",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("fit", "fit a model from a CSV dataset"),
        ("prior-check", "sample the induced R2 and W priors"),
        ("simulate", "run the replicate simulation study"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to a flat JSON config")
        cmd.add_argument("--seed", type=int)
        cmd.add_argument("--iters", type=int)
        cmd.add_argument("--burnin", type=int)
        cmd.add_argument("--thin", type=int)
        cmd.add_argument("--prior", choices=sorted(PRIOR_FAMILIES))
        cmd.add_argument("--a", type=float)
        cmd.add_argument("--b", type=float)
        cmd.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        raw = _load_json(args.config)
        for cli_name, key in _OVERRIDE_KEYS.items():
            value = getattr(args, cli_name.replace("-", "_"))
            if value is not None:
                if args.command == "simulate" and key == "prior":
                    raw["families"] = [value]
                else:
                    raw[key] = value
        if args.command == "fit":
            return cmd_fit(load_run_config(raw))
        if args.command == "prior-check":
            return cmd_prior_check(load_run_config(raw))
        return cmd_simulate(load_sim_config(raw))
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
