"""Centered Gaussian driver paths on uniform grids.

Supported covariance kernels: fractional Brownian motion (Hurst H),
standard Brownian motion, and user-supplied kernels pinned to a grid.
Sampling is exact via dense Cholesky factorization of the grid covariance,
with a bounded jitter escalation for nearly singular matrices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import toeplitz

__all__ = [
    "CovarianceError",
    "SamplePath",
    "CovarianceKernel",
    "fbm_kernel",
    "brownian_kernel",
    "custom_kernel",
    "uniform_grid",
    "kernel_eval",
    "covariance_matrix",
    "sample_paths",
    "sample_path_matrix",
    "empirical_covariance",
]

# jitter escalation: start at 1e-12 * max diagonal, x10 until 1e-8, then fail
_JITTER_START = 1e-12
_JITTER_STOP = 1e-8

_GRID_RTOL = 1e-9


class CovarianceError(RuntimeError):
    """Covariance matrix could not be factorized (even after jitter)."""


@dataclass(frozen=True)
class SamplePath:
    """A path on a time grid: times start at 0 and increase strictly.

    Used for drivers (values[0] == 0), weighted integrals and solutions
    alike; it is the common currency between modules.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or values.ndim != 1:
            raise ValueError("times and values must be 1-d arrays")
        if times.shape != values.shape:
            raise ValueError("times and values must have equal length")
        if times.size < 2:
            raise ValueError("a path needs at least 2 grid points")
        if times[0] != 0.0:
            raise ValueError("times must start at 0")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def index_of(self, t: float) -> int:
        """Grid index of time t; raises if t is not a grid point."""
        return grid_index(self.times, t)

    def value_at(self, t: float) -> float:
        return float(self.values[self.index_of(t)])

    def to_csv(self, path) -> None:
        """Write the path as CSV with header ``t,value`` (%.17g)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(["t", "value"])
            for t, v in zip(self.times, self.values):
                writer.writerow(["%.17g" % t, "%.17g" % v])

    @classmethod
    def from_csv(cls, path) -> "SamplePath":
        with open(path, "r", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if len(header) < 2:
                raise ValueError("expected header with at least 't,value'")
            rows = [(float(r[0]), float(r[1])) for r in reader if r]
        times, values = zip(*rows)
        return cls(np.array(times), np.array(values))


def uniform_grid(n: int, horizon: float) -> np.ndarray:
    """n+1 equally spaced times on [0, horizon]."""
    if n < 1:
        raise ValueError("need at least one step")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    return np.linspace(0.0, float(horizon), n + 1)


def grid_index(grid: np.ndarray, t: float) -> int:
    """Index of t in grid, matched to relative tolerance; error off-grid."""
    grid = np.asarray(grid, dtype=float)
    i = int(np.searchsorted(grid, t))
    scale = max(abs(t), grid[-1], 1e-300)
    for j in (i - 1, i, i + 1):
        if 0 <= j < grid.size and abs(grid[j] - t) <= _GRID_RTOL * scale:
            return j
    raise ValueError(f"time {t!r} is not on the grid")


def _is_uniform(times: np.ndarray) -> bool:
    d = np.diff(times)
    return bool(np.all(np.abs(d - d[0]) <= 1e-9 * abs(d[0])))


@dataclass(frozen=True)
class CovarianceKernel:
    """Law of the centered Gaussian driver.

    ``holder_exponent`` is the path regularity exponent used downstream
    (for fBm we record H itself and absorb the epsilon loss in test
    tolerances). Custom kernels are pinned to the grid they were built
    on; evaluating them off that grid is an error.
    """

    kind: str
    holder_exponent: float
    hurst: Optional[float] = None
    grid: Optional[np.ndarray] = field(default=None, repr=False)
    matrix: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("fbm", "brownian", "custom"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not 0.0 < self.holder_exponent <= 1.0:
            raise ValueError("holder_exponent must lie in (0, 1]")
        if self.kind == "fbm":
            if self.hurst is None or not 0.0 < self.hurst < 1.0:
                raise ValueError("fbm kernel needs Hurst parameter in (0, 1)")
        if self.kind == "custom":
            if self.grid is None or self.matrix is None:
                raise ValueError("custom kernel needs a grid and a matrix")


def fbm_kernel(hurst: float) -> CovarianceKernel:
    """Fractional Brownian motion; recorded Holder exponent is H."""
    return CovarianceKernel(kind="fbm", holder_exponent=hurst, hurst=hurst)


def brownian_kernel() -> CovarianceKernel:
    """Standard Brownian motion (the fBm H = 1/2 special case)."""
    return CovarianceKernel(kind="brownian", holder_exponent=0.5)


def custom_kernel(
    grid: np.ndarray,
    cov: Union[Callable[[float, float], float], np.ndarray],
    holder_exponent: float,
) -> CovarianceKernel:
    """Kernel given by an explicit function or matrix on a fixed grid.

    The covariance is materialized on ``grid`` at construction and
    validated: symmetric, zero on the ``t = 0`` row/column.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing and start at 0")
    if callable(cov):
        mat = np.array([[float(cov(s, t)) for t in grid] for s in grid])
    else:
        mat = np.asarray(cov, dtype=float)
        if mat.shape != (grid.size, grid.size):
            raise ValueError("matrix shape must match the grid")
    if not np.allclose(mat, mat.T, rtol=0, atol=1e-12 * max(1.0, np.abs(mat).max())):
        raise ValueError("covariance must be symmetric")
    mat = 0.5 * (mat + mat.T)
    if np.any(mat[0] != 0.0) or np.any(mat[:, 0] != 0.0):
        raise ValueError("covariance must vanish on the t = 0 row (driver starts at 0)")
    return CovarianceKernel(
        kind="custom", holder_exponent=holder_exponent, grid=grid, matrix=mat
    )


def kernel_eval(kernel: CovarianceKernel, s: float, t: float) -> float:
    """Covariance c(s, t) of the driver; symmetric in (s, t)."""
    if s < 0 or t < 0:
        raise ValueError("times must be nonnegative")
    if kernel.kind == "fbm":
        h2 = 2.0 * kernel.hurst
        return 0.5 * (s**h2 + t**h2 - abs(t - s) ** h2)
    if kernel.kind == "brownian":
        return min(s, t)
    i = grid_index(kernel.grid, s)
    j = grid_index(kernel.grid, t)
    return float(kernel.matrix[i, j])


def covariance_matrix(kernel: CovarianceKernel, times: np.ndarray) -> np.ndarray:
    """Covariance matrix of the driver on the given times (symmetric)."""
    times = np.asarray(times, dtype=float)
    if kernel.kind == "fbm":
        h2 = 2.0 * kernel.hurst
        pw = times**h2
        if times.size > 2 and _is_uniform(times):
            # uniform grid: |t_i - t_j| takes only n distinct values, so a
            # 1-d power table + Toeplitz beats n^2 fractional pow calls
            dt = times[1] - times[0]
            lag = (np.arange(times.size) * dt) ** h2
            return 0.5 * (pw[:, None] + pw[None, :] - toeplitz(lag))
        return 0.5 * (pw[:, None] + pw[None, :] - np.abs(times[:, None] - times[None, :]) ** h2)
    if kernel.kind == "brownian":
        return np.minimum(times[:, None], times[None, :])
    idx = np.array([grid_index(kernel.grid, t) for t in times])
    return kernel.matrix[np.ix_(idx, idx)]


def _cholesky_with_jitter(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter before giving up."""
    maxdiag = float(np.max(np.diag(cov))) if cov.size else 0.0
    if maxdiag == 0.0:
        if np.any(cov != 0.0):
            raise CovarianceError("zero diagonal with nonzero off-diagonal entries")
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    jitter = _JITTER_START * maxdiag
    eye = np.eye(cov.shape[0])
    while jitter <= _JITTER_STOP * maxdiag * (1 + 1e-12):
        try:
            return np.linalg.cholesky(cov + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    smallest = float(np.linalg.eigvalsh(cov).min())
    raise CovarianceError(
        "covariance factorization failed after jitter escalation "
        f"(smallest eigenvalue estimate {smallest:.3e})"
    )


def _path_rng(seed: int, index: int) -> np.random.Generator:
    # counter-based generator keyed by (seed, index): path i never depends
    # on the ensemble size or on iteration order
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def sample_paths(
    kernel: CovarianceKernel,
    grid: np.ndarray,
    count: int,
    seed: int,
) -> list[SamplePath]:
    """Draw independent centered Gaussian paths with the kernel's covariance.

    Parameters
    ----------
    kernel : CovarianceKernel
        Driver law.
    grid : ndarray
        ``n + 1`` uniform times on ``[0, T]`` starting at 0.
    count : int
        Number of independent paths.
    seed : int
        Master seed; path ``i`` is a deterministic function of ``(seed, i)``.

    Returns
    -------
    list of SamplePath
        Each with ``values[0] == 0``.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or grid[0] != 0.0:
        raise ValueError("grid must start at 0 with at least 2 points")
    if not _is_uniform(grid):
        raise ValueError("grid must be uniform")
    if count < 1:
        raise ValueError("count must be >= 1")
    factor = driver_factor(kernel, grid)
    return [
        _build_path(grid, factor, _path_rng(seed, i)) for i in range(count)
    ]


def driver_factor(kernel: CovarianceKernel, grid: np.ndarray) -> np.ndarray:
    """Cholesky factor of the covariance on grid[1:] (t = 0 is pinned at 0)."""
    cov = covariance_matrix(kernel, grid)[1:, 1:]
    return _cholesky_with_jitter(cov)


def sample_path_matrix(
    kernel: CovarianceKernel, grid: np.ndarray, count: int, seed: int
) -> np.ndarray:
    """Like sample_paths but returned as a (count, n+1) array.

    Row i is bitwise identical to sample_paths(kernel, grid, ..., seed)[i]
    (one matrix-vector product per path, so rows never depend on count).
    """
    grid = np.asarray(grid, dtype=float)
    factor = driver_factor(kernel, grid)
    out = np.empty((count, grid.size))
    out[:, 0] = 0.0
    for i in range(count):
        z = _path_rng(seed, i).standard_normal(factor.shape[0])
        out[i, 1:] = factor @ z
    return out


def _build_path(grid: np.ndarray, factor: np.ndarray, rng: np.random.Generator) -> SamplePath:
    z = rng.standard_normal(factor.shape[0])
    values = np.concatenate(([0.0], factor @ z))
    return SamplePath(grid, values)


def empirical_covariance(paths: list[SamplePath], s: float, t: float) -> float:
    """Sample covariance (ddof = 1) of path values at times s and t."""
    if len(paths) < 2:
        raise ValueError("need at least 2 paths for a sample covariance")
    grid = paths[0].times
    for p in paths[1:]:
        if p.times.shape != grid.shape or np.any(p.times != grid):
            raise ValueError("all paths must share the same grid")
    i = grid_index(grid, s)
    j = grid_index(grid, t)
    xs = np.array([p.values[i] for p in paths])
    ys = np.array([p.values[j] for p in paths])
    return float(np.cov(xs, ys, ddof=1)[0, 1])
