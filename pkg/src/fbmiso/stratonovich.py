"""Regularized Riemann approximant of the symmetric-Stratonovich integral.

    I0(eps) = (1/2eps) int_0^T <g(s, B_s), B_{s+eps} - B_{s-eps}> ds,

with B_r = 0 for r <= 0.  The time integral is the composite trapezoid rule
on the sampling grid nodes 0..n; radii are whole numbers of grid cells.
"""
import math
from dataclasses import dataclass

import numpy as np

from .kernel import DomainError

HOLDER = "HOLDER"
MODULUS = "MODULUS"
RAW = "RAW"


class HorizonTooShort(ValueError):
    pass


@dataclass(frozen=True)
class IntegrandSpec:
    """g(t, x) -> R^d, vectorized: t of shape S, x of shape S + (d,)."""

    g: object
    kind: str = RAW
    gamma_bar: float = None
    gamma: float = None
    bound: float = None
    name: str = "custom"
    params: tuple = ()

    def __call__(self, t, x):
        return self.g(t, x)

    def check_exponents(self, p):
        if self.kind != HOLDER:
            return
        if not self.gamma > 1 / (2 * p.H) - 1:
            raise DomainError(f"space exponent {self.gamma} must exceed 1/(2H)-1 = {1 / (2 * p.H) - 1}")
        if not self.gamma_bar > 0.5 - p.H:
            raise DomainError(f"time exponent {self.gamma_bar} must exceed 1/2-H = {0.5 - p.H}")

    def theta_hat(self, p):
        """Local exponent of the increments: E|Y_t - Y_s|^2 ~ |t-s|^(2 theta)."""
        if self.kind == HOLDER:
            return min(self.gamma * p.H, self.gamma_bar)
        return None


@dataclass(frozen=True)
class MCEstimate:
    value: float
    std_error: float
    n_samples: int

    @classmethod
    def from_samples(cls, x):
        x = np.asarray(x, dtype=float)
        n = x.size
        se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
        return cls(float(np.mean(x)), se, n)

    def as_dict(self):
        return {"value": self.value, "std_error": self.std_error, "n_samples": self.n_samples}


def trapezoid_weights(n, dt):
    w = np.full(n + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def _shifted(data, m, n):
    # B at nodes k+m and k-m for k = 0..n, zero at negative times
    fwd = data[..., m:n + m + 1]
    back = np.zeros_like(fwd)
    back[..., m:] = data[..., : n + 1 - m]
    return fwd, back


def _check_horizon(grid, m):
    if m < 1:
        raise DomainError("radius must be at least one grid cell")
    if grid.n + m > grid.n_steps:
        raise HorizonTooShort(
            f"T + eps needs {grid.n + m} cells, grid has {grid.n_steps}")


def integrand_values(data, g, grid):
    """g(t_k, B_{t_k}) for k = 0..n, shape (M, d, n+1) from data (M, d, N+1)."""
    n = grid.n
    t = grid.times[: n + 1]
    x = np.moveaxis(data[..., : n + 1], -2, -1)
    y = np.asarray(g(np.broadcast_to(t, x.shape[:-1]), x), dtype=float)
    return np.moveaxis(np.broadcast_to(y, x.shape), -1, -2)


def I0_riemann(path, g, eps_cells, grid):
    """I0(eps) for one path of shape (d, n_steps + 1)."""
    return float(I0_batch(np.asarray(path)[None], g, [eps_cells], grid)[0, 0])


def I0_batch(data, g, eps_cells_list, grid, Y=None):
    """I0 for every path in data (M, d, N+1) and each radius; shape (M, K)."""
    n = grid.n
    w = trapezoid_weights(n, grid.dt)
    Y = integrand_values(data, g, grid) if Y is None else Y
    out = np.empty((data.shape[0], len(eps_cells_list)))
    for j, m in enumerate(eps_cells_list):
        _check_horizon(grid, m)
        fwd, back = _shifted(data, m, n)
        inner = (Y * (fwd - back)).sum(axis=-2)
        out[:, j] = inner @ w / (2 * m * grid.dt)
    return out


def increment_matrix_batch(data, g, m, grid, Y=None):
    """P_ab = (1/2eps) int Y^a_s (B^b_{s+eps} - B^b_{s-eps}) ds, shape (M, d, d)."""
    _check_horizon(grid, m)
    n = grid.n
    w = trapezoid_weights(n, grid.dt)
    Y = integrand_values(data, g, grid) if Y is None else Y
    fwd, back = _shifted(data, m, n)
    return np.einsum("mak,mbk,k->mab", Y, fwd - back, w) / (2 * m * grid.dt)


def I0_samples(ensemble, g, eps_list):
    grid = ensemble.grid
    cells = [grid.cells(e) for e in eps_list]
    return I0_batch(ensemble.data, g, cells, grid)


def mc_second_moment(ensemble, g, eps_list):
    x = I0_samples(ensemble, g, eps_list)
    return [MCEstimate.from_samples(x[:, j] ** 2) for j in range(x.shape[1])]


def mc_cross_moment(ensemble, g, eps, delta):
    x = I0_samples(ensemble, g, [eps, delta])
    return MCEstimate.from_samples(x[:, 0] * x[:, 1])


@dataclass
class Extrapolation:
    value: float
    std_error: float
    index: int
    stable: bool
    fit_value: float
    fit_rate: float
    observed_rate: float


def extrapolate(estimates, eps_list, rate):
    """Last Cauchy-stable estimate along decreasing radii, plus a fit in eps^rate.

    Index k is stable when estimate k differs from estimate k-1 by at most
    three combined standard errors.
    """
    order = np.argsort(eps_list)[::-1]
    eps = np.asarray(eps_list, dtype=float)[order]
    v = np.array([estimates[i].value for i in order])
    se = np.array([estimates[i].std_error for i in order])
    stable = [abs(v[k] - v[k - 1]) <= 3 * math.hypot(se[k], se[k - 1]) for k in range(1, v.size)]
    idx = v.size - 1
    ok = bool(stable and stable[-1])
    if not ok:
        hits = [k + 1 for k, s in enumerate(stable) if s]
        if hits:
            idx, ok = hits[-1], True
    X = np.column_stack([np.ones_like(eps), eps**rate])
    coef, *_ = np.linalg.lstsq(X, v, rcond=None)
    diffs = np.abs(np.diff(v))
    obs = float("nan")
    if diffs.size >= 2 and np.all(diffs > 0):
        obs = float(np.mean(np.log(diffs[:-1] / diffs[1:]) / np.log(eps[:-2] / eps[1:-1])))
    return Extrapolation(float(v[idx]), float(se[idx]), int(order[idx]), ok,
                         float(coef[0]), float(rate), obs)
