"""Batch command-line front-end.

Each subcommand reads a single JSON config object, runs the library and
writes plot-ready CSV / JSON artifacts into the output directory. Config
keys are validated strictly (unknown keys are rejected and range errors
name the offending key); identical config + seed produces byte-identical
output files. Exit codes: 0 success, 1 validation error, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .drivers import (
    CovarianceError,
    CovarianceKernel,
    brownian_kernel,
    fbm_kernel,
    sample_paths,
    uniform_grid,
)
from .montecarlo import (
    EnsembleSpec,
    ensemble_simulate,
    hitting_time_stats,
    paths_to_csv,
    stats_to_json,
    survival_bound_check,
)
from .pk import (
    AdmissibilityError,
    ConcentrationSeries,
    PkParams,
    SensitivitySpec,
    ThetaBounds,
    build_quad_grid,
    deterministic_concentration,
    fit_mle,
    sensitivity_fd,
    sensitivity_plsin,
    simulate_concentration,
)
from .solver import (
    RootSolveError,
    convergence_study,
    rate_report_to_csv,
    rate_report_to_json,
    solve_gmr,
)
from .transform import ModelParams, TruncatedPath

__all__ = ["main", "run", "ConfigError"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


_FUNCTIONALS = {
    "identity": (lambda r: r, lambda r: np.ones_like(np.asarray(r, dtype=float))),
    "square": (lambda r: r**2, lambda r: 2.0 * r),
    "sin": (np.sin, np.cos),
}


def _check_keys(obj: dict, allowed: set, ctx: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{ctx}: expected a JSON object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{ctx}: unknown key {sorted(unknown)[0]!r}")


def _get(obj: dict, key: str, ctx: str, kind=float, required=True, default=None):
    if key not in obj:
        if required:
            raise ConfigError(f"{ctx}: missing key {key!r}")
        return default
    value = obj[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{ctx}.{key}: expected a number")
        return float(value)
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{ctx}.{key}: expected an integer")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{ctx}.{key}: expected a string")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{ctx}.{key}: expected a boolean")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(f"{ctx}.{key}: expected an array")
        return value
    if kind is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{ctx}.{key}: expected an object")
        return value
    raise AssertionError(kind)


def _model_from(cfg: dict, ctx: str = "model") -> ModelParams:
    _check_keys(cfg, {"x0", "a", "b", "sigma", "beta"}, ctx)
    try:
        return ModelParams(
            x0=_get(cfg, "x0", ctx),
            a=_get(cfg, "a", ctx),
            b=_get(cfg, "b", ctx),
            sigma=_get(cfg, "sigma", ctx),
            beta=_get(cfg, "beta", ctx),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{ctx}: {exc}") from exc


def _kernel_from(cfg: dict, ctx: str = "kernel") -> CovarianceKernel:
    _check_keys(cfg, {"kind", "hurst"}, ctx)
    kind = _get(cfg, "kind", ctx, kind=str)
    if kind == "fbm":
        hurst = _get(cfg, "hurst", ctx)
        if not 0.0 < hurst < 1.0:
            raise ConfigError(f"{ctx}.hurst: must lie in (0, 1)")
        return fbm_kernel(hurst)
    if kind == "brownian":
        if "hurst" in cfg:
            raise ConfigError(f"{ctx}.hurst: not applicable to the brownian kernel")
        return brownian_kernel()
    raise ConfigError(f"{ctx}.kind: expected 'fbm' or 'brownian'")


def _grid_from(cfg: dict, ctx: str = "grid"):
    _check_keys(cfg, {"n", "T"}, ctx)
    n = _get(cfg, "n", ctx, kind=int)
    horizon = _get(cfg, "T", ctx)
    if n < 2:
        raise ConfigError(f"{ctx}.n: must be >= 2")
    if horizon <= 0:
        raise ConfigError(f"{ctx}.T: must be positive")
    return n, horizon


def _pk_from(cfg: dict, ctx: str = "pk") -> PkParams:
    _check_keys(cfg, {"A0", "v", "Ka", "Ke", "sigma", "beta"}, ctx)
    try:
        return PkParams(
            A0=_get(cfg, "A0", ctx),
            v=_get(cfg, "v", ctx),
            Ka=_get(cfg, "Ka", ctx, required=False, default=0.0),
            Ke=_get(cfg, "Ke", ctx),
            sigma=_get(cfg, "sigma", ctx),
            beta=_get(cfg, "beta", ctx),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{ctx}: {exc}") from exc


def _seed_from(cfg: dict, args) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise ConfigError("seed: missing (set it in the config or pass --seed)")
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed: expected an unsigned 64-bit integer")
    return seed


def _write_json(payload: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(path)


def _write_csv(rows, header, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        writer.writerows(rows)
    print(path)


def _cmd_simulate(cfg: dict, args) -> None:
    _check_keys(cfg, {"model", "kernel", "grid", "seed"}, "config")
    model = _model_from(_get(cfg, "model", "config", kind=dict))
    kernel = _kernel_from(_get(cfg, "kernel", "config", kind=dict))
    n, horizon = _grid_from(_get(cfg, "grid", "config", kind=dict))
    seed = _seed_from(cfg, args)
    driver = sample_paths(kernel, uniform_grid(n, horizon), 1, seed)[0]
    solution = solve_gmr(model, driver, n)
    path = solution.path if isinstance(solution, TruncatedPath) else solution
    _write_csv(
        [["%.17g" % t, "%.17g" % v] for t, v in zip(path.times, path.values)],
        ["t", "value"],
        os.path.join(args.out, "simulate.csv"),
    )


def _cmd_converge(cfg: dict, args) -> None:
    _check_keys(cfg, {"model", "kernel", "T", "n_list", "ref_n", "seed"}, "config")
    model = _model_from(_get(cfg, "model", "config", kind=dict))
    kernel = _kernel_from(_get(cfg, "kernel", "config", kind=dict))
    horizon = _get(cfg, "T", "config")
    n_list = _get(cfg, "n_list", "config", kind=list)
    ref_n = _get(cfg, "ref_n", "config", kind=int)
    seed = _seed_from(cfg, args)
    if not n_list or not all(isinstance(n, int) and n >= 1 for n in n_list):
        raise ConfigError("n_list: expected a nonempty array of positive integers")
    driver = sample_paths(kernel, uniform_grid(ref_n, horizon), 1, seed)[0]
    try:
        report = convergence_study(model, driver, n_list, ref_n, kernel.holder_exponent)
    except ValueError as exc:
        raise ConfigError(f"n_list/ref_n: {exc}") from exc
    rate_report_to_csv(report, os.path.join(args.out, "converge.csv"))
    print(os.path.join(args.out, "converge.csv"))
    rate_report_to_json(report, os.path.join(args.out, "converge.json"))
    print(os.path.join(args.out, "converge.json"))


def _cmd_ensemble(cfg: dict, args) -> None:
    _check_keys(cfg, {"model", "kernel", "grid", "ensemble", "seed", "write_paths"}, "config")
    model = _model_from(_get(cfg, "model", "config", kind=dict))
    kernel = _kernel_from(_get(cfg, "kernel", "config", kind=dict))
    n, horizon = _grid_from(_get(cfg, "grid", "config", kind=dict))
    ens = _get(cfg, "ensemble", "config", kind=dict)
    _check_keys(ens, {"M", "p_exponents", "marginal_times"}, "ensemble")
    m_count = _get(ens, "M", "ensemble", kind=int)
    p_exp = tuple(ens.get("p_exponents", (1.0, 2.0, 4.0, 8.0)))
    marginal = tuple(ens.get("marginal_times", ()))
    seed = _seed_from(cfg, args)
    try:
        spec = EnsembleSpec(
            params=model,
            kernel=kernel,
            M=m_count,
            n=n,
            seed=seed,
            horizon=horizon,
            marginal_times=marginal,
            p_exponents=p_exp,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"ensemble: {exc}") from exc
    result = ensemble_simulate(spec)
    stats_to_json(result.stats, os.path.join(args.out, "ensemble.json"))
    print(os.path.join(args.out, "ensemble.json"))
    if _get(cfg, "write_paths", "config", kind=bool, required=False, default=False):
        paths_to_csv(result, os.path.join(args.out, "ensemble_paths.csv"))
        print(os.path.join(args.out, "ensemble_paths.csv"))


def _cmd_hit_times(cfg: dict, args) -> None:
    _check_keys(cfg, {"model", "kernel", "horizons", "steps_per_unit", "M", "seed"}, "config")
    model = _model_from(_get(cfg, "model", "config", kind=dict))
    if model.a != 0.0:
        raise ConfigError("model.a: hit-time statistics need a = 0")
    kernel = _kernel_from(_get(cfg, "kernel", "config", kind=dict))
    horizons = _get(cfg, "horizons", "config", kind=list)
    if not horizons or any(not isinstance(t, (int, float)) or t <= 0 for t in horizons):
        raise ConfigError("horizons: expected an array of positive numbers")
    spu = _get(cfg, "steps_per_unit", "config", kind=int, required=False, default=64)
    m_count = _get(cfg, "M", "config", kind=int)
    seed = _seed_from(cfg, args)
    rates = hitting_time_stats(model, kernel, m_count, horizons, spu, seed)
    _write_json(
        {
            "M": m_count,
            "horizons": [
                {
                    "horizon": r.horizon,
                    "fraction": r.fraction,
                    "ci_low": r.ci_low,
                    "ci_high": r.ci_high,
                }
                for r in rates
            ],
        },
        os.path.join(args.out, "hit_times.json"),
    )


def _cmd_survival(cfg: dict, args) -> None:
    _check_keys(cfg, {"y0", "model", "kernel", "grid", "M", "seed"}, "config")
    y0 = _get(cfg, "y0", "config")
    if y0 <= 0:
        raise ConfigError("y0: must be positive")
    raw = _get(cfg, "model", "config", kind=dict)
    _check_keys(raw, {"b", "sigma", "beta"}, "model")
    beta = _get(raw, "beta", "model")
    if not 0.0 < beta < 1.0:
        raise ConfigError("model.beta: must lie in (0, 1)")
    try:
        model = ModelParams(
            x0=y0 ** (1.0 / (1.0 - beta)),
            a=0.0,
            b=_get(raw, "b", "model"),
            sigma=_get(raw, "sigma", "model"),
            beta=beta,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    kernel = _kernel_from(_get(cfg, "kernel", "config", kind=dict))
    n, horizon = _grid_from(_get(cfg, "grid", "config", kind=dict))
    m_count = _get(cfg, "M", "config", kind=int)
    seed = _seed_from(cfg, args)
    report = survival_bound_check(y0, model, kernel, uniform_grid(n, horizon), m_count, seed)
    _write_json(
        {
            "applicable": report.applicable,
            "empirical": report.empirical,
            "bound": report.bound,
            "std_error": report.std_error,
            "sigma_bar_sq": report.sigma_bar_sq,
            "passed": report.passed,
        },
        os.path.join(args.out, "survival.json"),
    )


def _cmd_pk_simulate(cfg: dict, args) -> None:
    _check_keys(cfg, {"pk", "kernel", "grid", "seed"}, "config")
    pk = _pk_from(_get(cfg, "pk", "config", kind=dict))
    kernel = _kernel_from(_get(cfg, "kernel", "config", kind=dict))
    n, horizon = _grid_from(_get(cfg, "grid", "config", kind=dict))
    seed = _seed_from(cfg, args)
    stochastic = simulate_concentration(pk, kernel, n, seed, horizon).path
    deterministic = deterministic_concentration(pk, stochastic.times)
    _write_csv(
        [
            ["%.17g" % t, "%.17g" % s, "%.17g" % d]
            for t, s, d in zip(stochastic.times, stochastic.values, deterministic)
        ],
        ["t", "stochastic", "deterministic"],
        os.path.join(args.out, "pk_simulate.csv"),
    )


def _cmd_pk_fit(cfg: dict, args) -> None:
    _check_keys(
        cfg,
        {"pk_constants", "kernel", "observations", "column", "drop_nonpositive",
         "init", "bounds", "quad_refine", "seed"},
        "config",
    )
    constants = _get(cfg, "pk_constants", "config", kind=dict)
    _check_keys(constants, {"A0", "v"}, "pk_constants")
    a0 = _get(constants, "A0", "pk_constants")
    vol = _get(constants, "v", "pk_constants")
    if a0 <= 0 or vol <= 0:
        raise ConfigError("pk_constants: A0 and v must be positive")
    kernel = _kernel_from(_get(cfg, "kernel", "config", kind=dict))
    obs_path = _get(cfg, "observations", "config", kind=str)
    column = _get(cfg, "column", "config", kind=str, required=False)
    drop = _get(cfg, "drop_nonpositive", "config", kind=bool, required=False, default=True)
    try:
        obs = ConcentrationSeries.from_csv(obs_path, column=column, drop_nonpositive=drop)
    except OSError as exc:
        raise ConfigError(f"observations: cannot read {obs_path!r} ({exc})") from exc
    except ValueError as exc:
        raise ConfigError(f"observations: {exc}") from exc
    init_cfg = _get(cfg, "init", "config", kind=dict)
    _check_keys(init_cfg, {"Ke", "sigma", "beta"}, "init")
    init = (
        _get(init_cfg, "Ke", "init"),
        _get(init_cfg, "sigma", "init"),
        _get(init_cfg, "beta", "init"),
    )
    bounds_cfg = _get(cfg, "bounds", "config", kind=dict, required=False, default={})
    _check_keys(bounds_cfg, {"ke_max", "sigma_max", "beta_min", "beta_max"}, "bounds")
    try:
        bounds = ThetaBounds(
            ke_max=_get(bounds_cfg, "ke_max", "bounds", required=False, default=50.0),
            sigma_max=_get(bounds_cfg, "sigma_max", "bounds", required=False, default=20.0),
            beta_min=_get(bounds_cfg, "beta_min", "bounds", required=False, default=0.05),
            beta_max=_get(bounds_cfg, "beta_max", "bounds", required=False, default=0.95),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bounds: {exc}") from exc
    refine = _get(cfg, "quad_refine", "config", kind=int, required=False)
    quad = build_quad_grid(obs.times, refine)
    try:
        est = fit_mle(obs, kernel, init, a0, vol, bounds=bounds, quad_grid=quad)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"init: {exc}") from exc
    _write_json(
        {
            "Ke": est.Ke,
            "sigma": est.sigma,
            "beta": est.beta,
            "log_likelihood": est.log_likelihood,
            "converged": est.converged,
            "iterations": est.iterations,
        },
        os.path.join(args.out, "pk_fit.json"),
    )


def _cmd_pk_sensitivity(cfg: dict, args) -> None:
    _check_keys(
        cfg,
        {"pk", "kernel", "x", "functional", "tau", "grid", "M", "method", "h", "seed"},
        "config",
    )
    pk = _pk_from(_get(cfg, "pk", "config", kind=dict))
    kernel = _kernel_from(_get(cfg, "kernel", "config", kind=dict))
    x = _get(cfg, "x", "config")
    if x <= 0:
        raise ConfigError("x: must be positive")
    name = _get(cfg, "functional", "config", kind=str)
    if name not in _FUNCTIONALS:
        raise ConfigError(f"functional: expected one of {sorted(_FUNCTIONALS)}")
    func, fdot = _FUNCTIONALS[name]
    tau_cfg = _get(cfg, "tau", "config", kind=dict)
    _check_keys(tau_cfg, {"kind", "time"}, "tau")
    tau_kind = _get(tau_cfg, "kind", "tau", kind=str)
    if tau_kind not in ("fixed", "hit_capped"):
        raise ConfigError("tau.kind: expected 'fixed' or 'hit_capped'")
    tau_time = _get(tau_cfg, "time", "tau", required=(tau_kind == "fixed"))
    n, horizon = _grid_from(_get(cfg, "grid", "config", kind=dict))
    m_count = _get(cfg, "M", "config", kind=int)
    method = _get(cfg, "method", "config", kind=str, required=False, default="pathwise")
    if method not in ("pathwise", "fd"):
        raise ConfigError("method: expected 'pathwise' or 'fd'")
    seed = _seed_from(cfg, args)
    try:
        spec = SensitivitySpec(
            F=func,
            Fdot=fdot,
            tau_kind=tau_kind,
            M=m_count,
            n=n,
            horizon=horizon,
            tau_time=tau_time,
            seed=seed,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"tau: {exc}") from exc
    if method == "pathwise":
        report = sensitivity_plsin(pk, x, spec, kernel)
    else:
        h = _get(cfg, "h", "config", required=False, default=min(1e-3, 0.5 * x))
        if not 0.0 < h < x:
            raise ConfigError("h: must satisfy 0 < h < x")
        report = sensitivity_fd(pk, x, spec, kernel, h)
    payload = {
        "estimate": report.estimate,
        "std_error": report.std_error,
        "M": report.M,
        "tau": {"kind": tau_kind, "time": tau_time},
        "capped_fraction": report.capped_fraction,
        "method": method,
    }
    _write_json(payload, os.path.join(args.out, "pk_sensitivity.json"))


_COMMANDS = {
    "simulate": _cmd_simulate,
    "converge": _cmd_converge,
    "ensemble": _cmd_ensemble,
    "hit-times": _cmd_hit_times,
    "survival": _cmd_survival,
    "pk-simulate": _cmd_pk_simulate,
    "pk-fit": _cmd_pk_fit,
    "pk-sensitivity": _cmd_pk_sensitivity,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmr",
        description="Mean-reverting SDEs with rough Gaussian drivers: "
        "simulation, convergence studies and pharmacokinetic estimation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="JSON config file")
        cmd.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        cmd.add_argument("--out", default=".", help="output directory")
        cmd.add_argument(
            "--threads",
            type=int,
            default=None,
            help="worker budget hint (GMR_THREADS env as fallback); execution "
            "is sequential and results never depend on it",
        )
    return parser


def run(argv) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        threads = args.threads
        if threads is None:
            env = os.environ.get("GMR_THREADS")
            if env is not None:
                if not env.isdigit():
                    raise ConfigError("GMR_THREADS: expected a positive integer")
                threads = int(env)
        if threads is not None and threads < 1:
            raise ConfigError("threads: must be >= 1")
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"config: cannot read {args.config!r} ({exc})") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config: expected a single top-level JSON object")
        os.makedirs(args.out, exist_ok=True)
        _COMMANDS[args.command](cfg, args)
        return 0
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CovarianceError, RootSolveError, AdmissibilityError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
