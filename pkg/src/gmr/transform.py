"""Change-of-variable layer for the mean-reverting equation.

The equation dx = (a - b x) dt + sigma x^beta dw is reduced, via
y = x^(1-beta) e^(b(1-beta)t), to an equation with additive rough forcing

    y_t = y_0 + a(1-beta) int_0^t y_s^(-gamma) e^(bs) ds + wtilde_t,

where gamma = beta/(1-beta) and wtilde is the Young integral of the
smooth weight theta_t = sigma(1-beta) e^(b(1-beta)t) against the driver.
Because the weight is smooth, wtilde is computed through the exact
integration-by-parts identity plus trapezoidal quadrature of the
absolutely continuous remainder; this is exact when b = 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .drivers import CovarianceKernel, SamplePath, covariance_matrix, grid_index

__all__ = [
    "ModelParams",
    "TruncatedPath",
    "theta_weight",
    "theta_weight_derivative",
    "tilde_w_path",
    "tilde_w_covariance",
    "tilde_w_covariance_matrix",
    "y0_from_x0",
    "lift_y_to_x",
    "lower_x_to_y",
    "explicit_solution_a0",
]


@dataclass(frozen=True)
class ModelParams:
    """Coefficients of dx = (a - b x) dt + sigma x^beta dw.

    beta = 1 is excluded: the transform exponent gamma = beta/(1-beta)
    diverges there and the whole computational route is built on finite
    gamma (the linear case is elementary anyway).
    """

    x0: float
    a: float
    b: float
    sigma: float
    beta: float

    def __post_init__(self):
        if not self.x0 > 0:
            raise ValueError("x0 must be positive")
        if self.a < 0:
            raise ValueError("a must be nonnegative")
        if self.b < 0:
            raise ValueError("b must be nonnegative")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")

    @property
    def gamma(self) -> float:
        return self.beta / (1.0 - self.beta)

    @property
    def mu(self) -> float:
        """Rate exponent min(1, gamma)."""
        return min(1.0, self.gamma)

    @property
    def y0(self) -> float:
        return y0_from_x0(self.x0, self)

    def beta_admissible(self, holder_exponent: float) -> bool:
        """Well-posedness condition: the state exponent exceeds 1 - alpha."""
        return self.beta > 1.0 - holder_exponent


@dataclass(frozen=True)
class TruncatedPath:
    """A nonnegative path absorbed at its first zero hit.

    ``hit_index`` is the first grid index where the pre-lift level
    reached 0 (None when there is no hit on the horizon); values are
    strictly positive before it and exactly 0 from it on.
    """

    path: SamplePath
    hit_index: Optional[int]

    def __post_init__(self):
        v = self.path.values
        if self.hit_index is None:
            if np.any(v <= 0):
                raise ValueError("untruncated path must stay positive")
        else:
            k = self.hit_index
            if not 0 <= k <= v.size - 1:
                raise ValueError("hit_index out of range")
            if np.any(v[:k] <= 0) or np.any(v[k:] != 0.0):
                raise ValueError("values must be positive before the hit and 0 after")

    @property
    def hit_time(self) -> Optional[float]:
        if self.hit_index is None:
            return None
        return float(self.path.times[self.hit_index])


def theta_weight(t, p: ModelParams):
    """Smooth weight sigma(1-beta) e^(b(1-beta)t); scalar or array t."""
    t = np.asarray(t, dtype=float)
    out = p.sigma * (1.0 - p.beta) * np.exp(p.b * (1.0 - p.beta) * t)
    return float(out) if out.ndim == 0 else out


def theta_weight_derivative(t, p: ModelParams):
    """Time derivative of the weight: b(1-beta) * theta_weight."""
    t = np.asarray(t, dtype=float)
    out = p.b * (1.0 - p.beta) * theta_weight(t, p)
    return float(out) if np.ndim(out) == 0 else out


def tilde_w_path(driver: SamplePath, p: ModelParams) -> SamplePath:
    """Weighted driver wtilde_t = int_0^t theta_s dw_s on the driver grid.

    Evaluated through integration by parts,
    wtilde_t = theta_t w_t - int_0^t theta'_s w_s ds, with the remaining
    Riemann integral done by trapezoid. Exact at the grid points when
    b = 0 (the weight is then constant).
    """
    if driver.values[0] != 0.0:
        raise ValueError("driver path must start at 0")
    t = driver.times
    w = driver.values
    th = theta_weight(t, p)
    correction = cumulative_trapezoid(theta_weight_derivative(t, p) * w, t, initial=0.0)
    return SamplePath(t, th * w - correction)


def tilde_w_matrix(drivers: np.ndarray, times: np.ndarray, p: ModelParams) -> np.ndarray:
    """Row-wise tilde_w_path for a stack of driver paths (M x (n+1))."""
    th = theta_weight(times, p)
    correction = cumulative_trapezoid(
        theta_weight_derivative(times, p)[None, :] * drivers, times, axis=1, initial=0.0
    )
    return th[None, :] * drivers - correction


def tilde_w_covariance_matrix(
    p: ModelParams,
    kernel: CovarianceKernel,
    grid: np.ndarray,
    cov: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Covariance of wtilde at all grid pairs, from the driver covariance.

    Uses the same integration-by-parts representation as tilde_w_path:

        Cov(wtilde_s, wtilde_t) = theta_s theta_t c(s,t)
            - theta_s int_0^t theta'_v c(s,v) dv
            - theta_t int_0^s theta'_u c(u,t) du
            + int_0^s int_0^t theta'_u theta'_v c(u,v) du dv

    with all integrals by trapezoid on the grid; exact when b = 0.
    ``cov`` may carry a precomputed driver covariance on the grid (it does
    not depend on the model parameters, so callers that sweep parameters
    can reuse it).
    """
    grid = np.asarray(grid, dtype=float)
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing and start at 0")
    if cov is None:
        cov = covariance_matrix(kernel, grid)
    th = theta_weight(grid, p)
    dth = theta_weight_derivative(grid, p)
    inner = cumulative_trapezoid(cov * dth[None, :], grid, axis=1, initial=0.0)
    double = cumulative_trapezoid(inner * dth[:, None], grid, axis=0, initial=0.0)
    cross = th[:, None] * inner
    out = np.outer(th, th) * cov - cross - cross.T + double
    return 0.5 * (out + out.T)


def tilde_w_covariance(
    s: float,
    t: float,
    p: ModelParams,
    kernel: CovarianceKernel,
    grid: np.ndarray,
) -> float:
    """Cov(wtilde_s, wtilde_t) for s, t on the quadrature grid."""
    grid = np.asarray(grid, dtype=float)
    i = grid_index(grid, s)
    j = grid_index(grid, t)
    full = tilde_w_covariance_matrix(p, kernel, grid)
    return float(full[i, j])


def y0_from_x0(x0: float, p: ModelParams) -> float:
    """Transformed initial condition x0^(1-beta)."""
    if x0 <= 0:
        raise ValueError("x0 must be positive")
    return x0 ** (1.0 - p.beta)


def lift_y_to_x(y: SamplePath, p: ModelParams) -> SamplePath:
    """Pointwise lift x_t = y_t^(gamma+1) e^(-bt); y must be positive."""
    if np.any(y.values <= 0.0):
        raise ValueError("y must be strictly positive; truncate before lifting")
    x = y.values ** (p.gamma + 1.0) * np.exp(-p.b * y.times)
    return SamplePath(y.times, x)


def lower_x_to_y(x: SamplePath, p: ModelParams) -> SamplePath:
    """Algebraic inverse of lift_y_to_x: y_t = x_t^(1-beta) e^(b(1-beta)t)."""
    if np.any(x.values <= 0.0):
        raise ValueError("x must be strictly positive")
    y = x.values ** (1.0 - p.beta) * np.exp(p.b * (1.0 - p.beta) * x.times)
    return SamplePath(x.times, y)


def explicit_solution_a0(driver: SamplePath, p: ModelParams) -> TruncatedPath:
    """Closed-form solution for a = 0, absorbed at the first zero hit.

    x_t = (x0^(1-beta) + wtilde_t)^(gamma+1) e^(-bt) while the bracket is
    positive; the first grid index where it is <= 0 becomes the hit and
    the path is 0 from there on. Zero-hit detection is grid-based.
    """
    if p.a != 0.0:
        raise ValueError("explicit solution requires a = 0")
    wt = tilde_w_path(driver, p)
    y = p.y0 + wt.values
    hit = np.nonzero(y <= 0.0)[0]
    hit_index = int(hit[0]) if hit.size else None
    x = np.zeros_like(y)
    live = slice(None) if hit_index is None else slice(0, hit_index)
    x[live] = y[live] ** (p.gamma + 1.0) * np.exp(-p.b * wt.times[live])
    # y slightly above 0 can underflow to x == 0; fold that into the hit
    dead = np.nonzero(x[live] == 0.0)[0]
    if dead.size:
        hit_index = int(dead[0])
        x[hit_index:] = 0.0
    return TruncatedPath(SamplePath(wt.times, x), hit_index)
