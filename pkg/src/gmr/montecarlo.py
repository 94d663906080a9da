"""Ensemble simulation and statistical probes for the solution law.

Covers moment estimates and pathwise bounds, zero-hit statistics of the
a = 0 solution, the Gaussian survival-probability lower bound, the
self-similarity identity in distribution, small-noise concentration
around the deterministic skeleton, and a non-degeneracy smoke test for
marginal laws. Everything is reproducible: path i of an ensemble depends
only on (seed, i), never on the ensemble size or execution order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import ks_2samp

from .drivers import (
    CovarianceKernel,
    fbm_kernel,
    grid_index,
    sample_path_matrix,
    uniform_grid,
)
from .solver import deterministic_ode_solution, implicit_euler_nodes, sup_bound
from .transform import ModelParams, tilde_w_covariance_matrix, tilde_w_matrix

__all__ = [
    "EnsembleSpec",
    "EnsembleStats",
    "EnsembleResult",
    "SurvivalReport",
    "HorizonHitRate",
    "ScalingCheck",
    "DensitySmoke",
    "ensemble_simulate",
    "sup_bound_violations",
    "lp_convergence_check",
    "survival_bound_check",
    "hitting_time_stats",
    "scaling_identity_check",
    "small_noise_probe",
    "density_smoke",
    "stats_to_json",
    "paths_to_csv",
]

_DEFAULT_P = (1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class EnsembleSpec:
    """Everything needed to reproduce an ensemble bit for bit."""

    params: ModelParams
    kernel: CovarianceKernel
    M: int
    n: int
    seed: int
    horizon: float = 1.0
    marginal_times: tuple = ()
    p_exponents: tuple = _DEFAULT_P

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if any(p < 1 for p in self.p_exponents):
            raise ValueError("moment exponents must be >= 1")


@dataclass(frozen=True)
class EnsembleStats:
    lp_estimates: dict
    hit_fraction: float
    hit_times: np.ndarray
    marginal_samples: dict


@dataclass(frozen=True)
class EnsembleResult:
    """Stats plus the raw arrays backing them (the raw paths handle)."""

    spec: EnsembleSpec
    stats: EnsembleStats
    times: np.ndarray
    x: np.ndarray  # (M, n+1) solution values
    y: np.ndarray  # (M, n+1) transformed level (pre-truncation for a = 0)
    driver_sup: np.ndarray  # (M,) realized sup norms of the raw driver


def _solve_matrix(p: ModelParams, times: np.ndarray, drivers: np.ndarray):
    """Vectorized pipeline driver -> wtilde -> solution for a stack of paths.

    Returns (x, y, hit_steps) where hit_steps[i] is the first absorbed
    index for path i (n+1 when the path never hits; only a = 0 can hit).
    """
    wt = tilde_w_matrix(drivers, times, p)
    m = times.size
    if p.a == 0.0:
        y = p.y0 + wt
        alive = np.cumprod(y > 0.0, axis=1).astype(bool)
        x = np.where(alive, np.where(alive, y, 1.0) ** (p.gamma + 1.0), 0.0)
        x *= np.exp(-p.b * times)[None, :]
        hit_steps = alive.sum(axis=1)
    else:
        y = implicit_euler_nodes(p, times, wt)
        x = y ** (p.gamma + 1.0) * np.exp(-p.b * times)[None, :]
        hit_steps = np.full(y.shape[0], m)
    return x, y, hit_steps


def ensemble_simulate(spec: EnsembleSpec) -> EnsembleResult:
    """Simulate M independent solution paths and aggregate their stats."""
    times = uniform_grid(spec.n, spec.horizon)
    drivers = sample_path_matrix(spec.kernel, times, spec.M, spec.seed)
    x, y, hit_steps = _solve_matrix(spec.params, times, drivers)
    sups = np.max(np.abs(x), axis=1)
    lp = {
        float(p): float(np.mean(sups**p) ** (1.0 / p))
        for p in spec.p_exponents
    }
    hits = hit_steps < times.size
    hit_times = times[hit_steps[hits]] if hits.any() else np.empty(0)
    marginal = {
        float(t): x[:, grid_index(times, t)].copy() for t in spec.marginal_times
    }
    stats = EnsembleStats(
        lp_estimates=lp,
        hit_fraction=float(np.mean(hits)),
        hit_times=hit_times,
        marginal_samples=marginal,
    )
    return EnsembleResult(
        spec=spec,
        stats=stats,
        times=times,
        x=x,
        y=y,
        driver_sup=np.max(np.abs(drivers), axis=1),
    )


def sup_bound_violations(result: EnsembleResult, tol: float = 1e-9) -> int:
    """Count paths whose realized ||x||_inf exceeds the pathwise bound."""
    p = result.spec.params
    horizon = result.spec.horizon
    bounds = np.array([sup_bound(p, s, horizon) for s in result.driver_sup])
    return int(np.sum(np.max(np.abs(result.x), axis=1) > bounds * (1.0 + tol)))


def lp_convergence_check(
    p: ModelParams,
    kernel: CovarianceKernel,
    M: int,
    n_list,
    ref_n: int,
    p_exponent: float,
    horizon: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """L^p error of the scheme against a nested fine reference.

    Returns E[||X^n - X^ref||_inf^p]^(1/p) for each n, estimated over M
    common driver paths.
    """
    n_list = sorted(int(n) for n in n_list)
    if p.a <= 0:
        raise ValueError("the scheme error study needs a > 0")
    if any(ref_n % n != 0 for n in n_list):
        raise ValueError("each n must divide ref_n (nested grids)")
    times = uniform_grid(ref_n, horizon)
    drivers = sample_path_matrix(kernel, times, M, seed)
    wt = tilde_w_matrix(drivers, times, p)
    damp = np.exp(-p.b * times)
    x_ref = implicit_euler_nodes(p, times, wt) ** (p.gamma + 1.0) * damp[None, :]
    errors = []
    for n in n_list:
        stride = ref_n // n
        xc = (
            implicit_euler_nodes(p, times[::stride], wt[:, ::stride]) ** (p.gamma + 1.0)
            * damp[None, ::stride]
        )
        d = np.max(np.abs(xc - x_ref[:, ::stride]), axis=1)
        errors.append(float(np.mean(d**p_exponent) ** (1.0 / p_exponent)))
    return np.array(errors)


@dataclass(frozen=True)
class SurvivalReport:
    applicable: bool
    empirical: float
    bound: float
    std_error: float
    sigma_bar_sq: float
    passed: bool


def survival_bound_check(
    y0: float,
    p: ModelParams,
    kernel: CovarianceKernel,
    grid: np.ndarray,
    M: int,
    seed: int = 0,
) -> SurvivalReport:
    """Gaussian concentration bound on the no-hit event for a = 0.

    The event {inf wtilde > -y0} implies the solution lives on the whole
    horizon; its probability is at least 1 - 2 exp(-y0^2 / (2 sbar^2))
    with sbar^2 the largest variance of wtilde on the grid, provided
    2 sbar^2 ln 2 < y0^2 (otherwise the check is reported not applicable).
    """
    if y0 <= 0:
        raise ValueError("y0 must be positive")
    grid = np.asarray(grid, dtype=float)
    sigma_bar_sq = float(np.max(np.diag(tilde_w_covariance_matrix(p, kernel, grid))))
    applicable = 2.0 * sigma_bar_sq * math.log(2.0) < y0**2
    bound = 1.0 - 2.0 * math.exp(-(y0**2) / (2.0 * sigma_bar_sq)) if sigma_bar_sq > 0 else 1.0
    drivers = sample_path_matrix(kernel, grid, M, seed)
    wt = tilde_w_matrix(drivers, grid, p)
    empirical = float(np.mean(np.min(wt, axis=1) > -y0))
    se = math.sqrt(empirical * (1.0 - empirical) / M)
    passed = bool(applicable and empirical >= bound - 2.0 * se)
    return SurvivalReport(
        applicable=applicable,
        empirical=empirical,
        bound=bound,
        std_error=se,
        sigma_bar_sq=sigma_bar_sq,
        passed=passed,
    )


@dataclass(frozen=True)
class HorizonHitRate:
    horizon: float
    fraction: float
    ci_low: float
    ci_high: float


def hitting_time_stats(
    p: ModelParams,
    kernel: CovarianceKernel,
    M: int,
    horizons,
    steps_per_unit: int = 64,
    seed: int = 0,
) -> list[HorizonHitRate]:
    """Fraction of a = 0 paths absorbed by each horizon, with 95% CIs.

    One ensemble is simulated on the largest horizon and each path's hit
    time reused across horizons, so the fractions are monotone by
    construction.
    """
    if p.a != 0.0:
        raise ValueError("hitting-time statistics apply to the a = 0 solution")
    horizons = sorted(float(t) for t in horizons)
    if horizons[0] <= 0:
        raise ValueError("horizons must be positive")
    t_max = horizons[-1]
    n = max(2, int(round(steps_per_unit * t_max)))
    times = uniform_grid(n, t_max)
    drivers = sample_path_matrix(kernel, times, M, seed)
    _, _, hit_steps = _solve_matrix(p, times, drivers)
    hit_time = np.where(hit_steps < times.size, times[np.minimum(hit_steps, n)], np.inf)
    out = []
    for t in horizons:
        frac = float(np.mean(hit_time <= t * (1 + 1e-12)))
        se = math.sqrt(frac * (1.0 - frac) / M)
        out.append(
            HorizonHitRate(
                horizon=t,
                fraction=frac,
                ci_low=max(0.0, frac - 1.96 * se),
                ci_high=min(1.0, frac + 1.96 * se),
            )
        )
    return out


@dataclass(frozen=True)
class ScalingCheck:
    eps: float
    t: float
    ks_statistic: float
    p_value: float
    passed: bool


def scaling_identity_check(
    p: ModelParams,
    hurst: float,
    eps: float,
    t: float,
    M: int,
    n: int = 256,
    seed: int = 0,
) -> ScalingCheck:
    """Two-sample KS test of the self-similarity identity for fBm drivers.

    Compares samples of X_{eps t} with samples at t of the equation with
    coefficients (eps a, eps b, eps^H sigma); the identity says the two
    laws coincide. Passes when the KS p-value exceeds 1%.
    """
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must lie in (0, 1]")
    k = eps * n
    if abs(k - round(k)) > 1e-9:
        raise ValueError("eps * n must be an integer so eps*t is a grid point")
    kernel = fbm_kernel(hurst)
    times = uniform_grid(n, t)
    seed_left, seed_right = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    left_drivers = sample_path_matrix(kernel, times, M, seed_left)
    x_left, _, _ = _solve_matrix(p, times, left_drivers)
    left = x_left[:, int(round(k))]
    scaled = ModelParams(
        x0=p.x0, a=eps * p.a, b=eps * p.b, sigma=p.sigma * eps**hurst, beta=p.beta
    )
    right_drivers = sample_path_matrix(kernel, times, M, seed_right)
    x_right, _, _ = _solve_matrix(scaled, times, right_drivers)
    right = x_right[:, -1]
    stat, pvalue = ks_2samp(left, right)
    return ScalingCheck(
        eps=eps,
        t=t,
        ks_statistic=float(stat),
        p_value=float(pvalue),
        passed=bool(pvalue > 0.01),
    )


def small_noise_probe(
    p: ModelParams,
    kernel: CovarianceKernel,
    eps_list,
    M: int,
    n: int = 128,
    horizon: float = 1.0,
    seed: int = 0,
    quantiles=(0.5, 0.9),
) -> list[dict]:
    """Concentration of the solution around the noise-free skeleton.

    For each eps (decreasing), the noise scale becomes eps * sigma and
    the sup distance to the deterministic solution is summarized by
    quantiles over M paths; the same driver ensemble is reused across
    eps levels (common random numbers).
    """
    eps_list = [float(e) for e in eps_list]
    if any(e2 >= e1 for e1, e2 in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    if any(e < 0 for e in eps_list):
        raise ValueError("eps must be nonnegative")
    times = uniform_grid(n, horizon)
    skeleton = deterministic_ode_solution(p, times)
    drivers = sample_path_matrix(kernel, times, M, seed)
    out = []
    for eps in eps_list:
        if eps == 0.0:
            dist = np.zeros(M)
        else:
            scaled = ModelParams(x0=p.x0, a=p.a, b=p.b, sigma=eps * p.sigma, beta=p.beta)
            x, _, _ = _solve_matrix(scaled, times, drivers)
            dist = np.max(np.abs(x - skeleton[None, :]), axis=1)
        out.append(
            {
                "eps": eps,
                "quantiles": {float(q): float(np.quantile(dist, q)) for q in quantiles},
            }
        )
    return out


@dataclass(frozen=True)
class DensitySmoke:
    applicable: bool
    sample_variance: float
    distinct_fraction: float


def density_smoke(spec: EnsembleSpec, t: float) -> DensitySmoke:
    """Weak numerical face of absolute continuity of the marginal law.

    With noise on and t > 0 the marginal sample must have positive
    variance and no repeated values at double precision.
    """
    applicable = spec.params.sigma > 0 and t > 0
    probe = EnsembleSpec(
        params=spec.params,
        kernel=spec.kernel,
        M=spec.M,
        n=spec.n,
        seed=spec.seed,
        horizon=spec.horizon,
        marginal_times=(t,),
        p_exponents=spec.p_exponents,
    )
    samples = ensemble_simulate(probe).stats.marginal_samples[float(t)]
    var = float(np.var(samples, ddof=1)) if samples.size > 1 else 0.0
    distinct = float(np.unique(samples).size / samples.size)
    return DensitySmoke(
        applicable=applicable, sample_variance=var, distinct_fraction=distinct
    )


def stats_to_json(stats: EnsembleStats, path) -> None:
    payload = {
        "lp_estimates": [
            {"p": p, "estimate": v} for p, v in sorted(stats.lp_estimates.items())
        ],
        "hit_fraction": stats.hit_fraction,
        "hit_times": [float(t) for t in stats.hit_times],
        "marginal_samples": {
            "%.17g" % t: [float(v) for v in vals]
            for t, vals in sorted(stats.marginal_samples.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def paths_to_csv(result: EnsembleResult, path) -> None:
    """Raw ensemble matrix as CSV: columns t, path_0, ..., path_{M-1}."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(["t"] + [f"path_{i}" for i in range(result.x.shape[0])])
        for k, t in enumerate(result.times):
            writer.writerow(["%.17g" % t] + ["%.17g" % v for v in result.x[:, k]])
