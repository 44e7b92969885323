"""Right-hand side of the isometry and end-to-end verification against E|I0|^2.

For Y_t = g(t, B_t) the second moment of the symmetric integral equals

    int E|Y_t|^2 m(dt) + 1/2 iint E|Y_t - Y_s|^2 |mu|(ds dt)      (RKHS term)
  - 1/2 iint E<Y_st (x) Y_st, W(s,t)> ds dt                        (W term)
  + 1/2 int E<Y_t (x) Y_t, M_t> dt                                 (M term)

All three terms are estimated path by path on one ensemble.  The double
integrals use cell centres of an (s,t)-mesh whose centres fall on sampling
grid nodes; cells within ``band_width`` rings of the diagonal are replaced
by a local power model fitted on the first retained ring.  Per path, the
W-term cell values come from the factorization

    <Y_j - Y_i, a1 B_i + a2 B_j> = a1 (<B_i,Y_j> - <B_i,Y_i>) + a2 (<B_j,Y_j> - <B_j,Y_i>)

so one batched matrix product per path replaces d x d contractions per cell.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate

from . import __version__
from . import kernel as K
from .fbm import CIRCULANT, GridSpec, sample
from .quadrature import BandDivergence, band_model, check_band, lag_weights
from .stratonovich import (HOLDER, MODULUS, MCEstimate, I0_batch, extrapolate,
                           increment_matrix_batch, integrand_values)

PASS = "PASS"
FAIL = "FAIL"
INCONCLUSIVE = "INCONCLUSIVE"


@dataclass(frozen=True)
class Budget:
    M: int = 10_000
    n: int = 2**12
    eps_list: tuple = tuple(2.0**-k for k in range(5, 10))
    mesh_n: int = 2**9
    band_width: int = 4
    theta_hat: float = None
    seed: int = 0
    method: str = CIRCULANT
    batch: int = 16

    def grid(self, p):
        return GridSpec(p.T, self.n, max(self.eps_list))


def resolve_theta(g, p, budget):
    if budget.theta_hat is not None:
        theta = budget.theta_hat
    elif g.kind == HOLDER:
        theta = g.theta_hat(p)
    elif g.kind == MODULUS:
        raise BandDivergence("modulus integrands sit at the threshold exponent; "
                             "pass an explicit theta_hat")
    else:
        theta = p.H
    check_band(theta, p)
    return theta


def kappa_band_envelope(theta, width, p):
    """iint over |t-s| < width of |t-s|^(2 theta) kappa(s, t) ds dt."""
    H, T = p.H, p.T

    def f(u):
        return u ** (2 * theta + H - 1) * (T - u) ** H / H + u ** (2 * theta + 2 * H - 1) * math.log(T / u)

    return 2 * integrate.quad(f, 0.0, width, limit=200)[0]


@dataclass
class _Mesh:
    """Precomputed tables for one (s,t)-mesh."""

    nm: int
    stride: int
    h: float
    offset: int
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    mean: np.ndarray
    mu_off: np.ndarray
    w_off: np.ndarray
    ring_i: np.ndarray
    ring_mu: float
    band_ratio: float


def _build_mesh(nm, n, p, bw, theta):
    stride = n // nm
    if stride < 2 or stride % 2 or n % nm:
        raise K.DomainError("mesh cells must span an even number of grid cells")
    h = p.T / nm
    c = (np.arange(nm) + 0.5) * h
    I, J = np.triu_indices(nm, 1)
    l11, l12, l21, l22 = K.regression_coefficients(c[I], c[J], p)
    gs, gt, r = K.gamma(c[I], p), K.gamma(c[J], p), K.eval_R(c[I], c[J], p)
    mean = l11 * l21 * gs + (l11 * l22 + l12 * l21) * r + l12 * l22 * gt
    tabs = []
    for v in (l11, l12, l21, l22, mean):
        A = np.zeros((nm, nm))
        A[I, J] = v
        tabs.append(A)
    lag = lag_weights(nm, p)
    k = J - I
    keep = k >= bw
    mu_off = np.zeros((nm, nm))
    mu_off[I[keep], J[keep]] = lag[k[keep]]
    w_off = np.zeros((nm, nm))
    w_off[I[keep], J[keep]] = h * h
    beta = 2 * theta + 2 * p.H - 2
    band_total, fit_ring = band_model(nm, bw, beta)
    # the model is symmetric, so the upper-triangle band over the upper ring
    # has the same ratio as on the full square
    return _Mesh(nm, stride, h, stride // 2, *tabs, mu_off=mu_off, w_off=w_off,
                 ring_i=np.arange(nm - bw), ring_mu=float(lag[bw]),
                 band_ratio=band_total / fit_ring)


@dataclass
class PathTerms:
    """Per-path contributions; every field is an array over paths."""

    m_part: np.ndarray
    mu_off: np.ndarray
    mu_ring: np.ndarray
    w_off: np.ndarray
    w_ring: np.ndarray
    marg: np.ndarray
    band_ratio: float
    bw: int

    @property
    def mu_upper(self):
        return self.mu_off + self.band_ratio * self.mu_ring

    @property
    def rkhs(self):
        return self.m_part + self.mu_upper

    @property
    def w_term(self):
        return -(self.w_off + self.band_ratio * self.w_ring)

    @property
    def m_term(self):
        return 0.5 * self.marg

    @property
    def rhs(self):
        return self.rkhs + self.w_term + self.m_term


class RhsEngine:
    """Evaluates per-path RHS contributions on a fixed sampling grid."""

    def __init__(self, p, grid, mesh_n, band_width, theta, moment_p=None):
        self.p, self.grid = p, grid
        self.bw, self.theta = band_width, theta
        n = grid.n
        self.mesh = _build_mesh(mesh_n, n, p, band_width, theta)
        # one-dimensional terms use the centres of pairs of grid cells
        n1 = n // 2
        self.n1 = n1
        nodes = np.linspace(0.0, p.T, n1 + 1)
        self.m_mass = np.diff(K.eval_R(p.T, nodes, p))
        centres = 0.5 * (nodes[1:] + nodes[:-1])
        self.idx1 = 2 * np.arange(n1) + 1
        self.gam1 = K.gamma(centres, p)
        self.f1 = (p.T / n1) * K.eval_R(p.T, centres, p) * K.dgamma(centres, p) / self.gam1
        self.moment_p = moment_p
        if moment_p is not None:
            self.mom1 = np.zeros(n1)
            self.mom2 = np.zeros((mesh_n, mesh_n))
            self.mom_count = 0

    def process(self, data, Y=None):
        """PathTerms for a batch of paths data (Mb, d, N+1)."""
        Y = integrand_values(data, self._g, self.grid) if Y is None else Y
        Y1, B1 = Y[..., self.idx1], data[..., self.idx1]
        y2 = (Y1 * Y1).sum(axis=1)
        yb = (Y1 * B1).sum(axis=1)
        m_part = y2 @ self.m_mass
        marg = (yb**2 - y2 * self.gam1) @ (self.f1 / self.gam1)
        if self.moment_p is not None:
            self.mom1 += (y2**self.moment_p).sum(axis=0)
        two = self._double(Y, data)
        return PathTerms(m_part, *two, marg, self.mesh.band_ratio, self.bw)

    def _double(self, Y, data):
        ms = self.mesh
        idx = np.arange(ms.nm) * ms.stride + ms.offset
        Yc = np.ascontiguousarray(np.swapaxes(Y[..., idx], 1, 2))
        Bc = np.ascontiguousarray(np.swapaxes(data[..., idx], 1, 2))
        KB = Bc @ np.swapaxes(Yc, 1, 2)            # <B_i, Y_j>
        YY = Yc @ np.swapaxes(Yc, 1, 2)
        q = np.diagonal(KB, axis1=1, axis2=2).copy()
        y2 = np.diagonal(YY, axis1=1, axis2=2).copy()
        dist = YY
        dist *= -2.0
        dist += y2[:, :, None]
        dist += y2[:, None, :]                      # |Y_j - Y_i|^2
        D2 = q[:, None, :] - np.swapaxes(KB, 1, 2)  # <Y_j - Y_i, B_j>
        D1 = KB
        D1 -= q[:, :, None]                         # <Y_j - Y_i, B_i>
        P1 = ms.a1 * D1
        P1 += ms.a2 * D2
        P2 = D1
        P2 *= ms.b1
        D2 *= ms.b2
        P2 += D2
        del D2
        P1 *= P2
        del P2
        P1 -= ms.mean * dist
        Q = P1
        rows = ms.ring_i
        mu_off = np.einsum("mij,ij->m", dist, ms.mu_off)
        mu_ring = dist[:, rows, rows + self.bw].sum(axis=1) * ms.ring_mu
        w_off = np.einsum("mij,ij->m", Q, ms.w_off)
        w_ring = Q[:, rows, rows + self.bw].sum(axis=1) * ms.h**2
        if self.moment_p is not None:
            self.mom2 += (np.maximum(dist, 0.0) ** self.moment_p).sum(axis=0)
            self.mom_count += dist.shape[0]
        return mu_off, mu_ring, w_off, w_ring

    def bind(self, g):
        self._g = g
        return self


def _concat(parts):
    first = parts[0]
    return PathTerms(*(np.concatenate([getattr(t, f) for t in parts])
                       for f in ("m_part", "mu_off", "mu_ring", "w_off", "w_ring", "marg")),
                     first.band_ratio, first.bw)


def ensemble_terms(ensemble, g, mesh_n=2**9, band_width=4, theta=None, batch=16):
    p = ensemble.params
    theta = resolve_theta(g, p, Budget(theta_hat=theta)) if theta is None else theta
    eng = RhsEngine(p, ensemble.grid, mesh_n, band_width, theta).bind(g)
    parts = [eng.process(ensemble.data[a:a + batch]) for a in range(0, ensemble.M, batch)]
    return _concat(parts)


def rhs_rkhs_term(ensemble, g, mesh_n=2**9, band_width=4, theta=None):
    return MCEstimate.from_samples(ensemble_terms(ensemble, g, mesh_n, band_width, theta).rkhs)


def rhs_w_term(ensemble, g, mesh_n=2**9, band_width=4, theta=None):
    return MCEstimate.from_samples(ensemble_terms(ensemble, g, mesh_n, band_width, theta).w_term)


def rhs_m_term(ensemble, g, mesh_n=2**9, band_width=4, theta=None):
    return MCEstimate.from_samples(ensemble_terms(ensemble, g, mesh_n, band_width, theta).m_term)


def rhs_direct(ensemble, g, mesh_n, band_width):
    """Per-path (Psi part, off-band Lambda part) assembled cell by cell from the
    limit matrices, without the factorization used by RhsEngine."""
    from .projection import M_eval, W_eval

    p, grid = ensemble.params, ensemble.grid
    n = grid.n
    Y = integrand_values(ensemble.data, g, grid)
    n1 = n // 2
    nodes = np.linspace(0.0, p.T, n1 + 1)
    m_mass = np.diff(K.eval_R(p.T, nodes, p))
    h1 = p.T / n1
    stride = n // mesh_n
    h = p.T / mesh_n
    lag = lag_weights(mesh_n, p)
    eye = np.eye(p.d)
    psi = np.zeros(ensemble.M)
    lam = np.zeros(ensemble.M)
    for m in range(ensemble.M):
        for c in range(n1):
            k = 2 * c + 1
            cell = m_mass[c] * eye + 0.5 * h1 * M_eval(grid.times[k], ensemble.data[m, :, k], p)
            psi[m] += Y[m, :, k] @ cell @ Y[m, :, k]
        for i in range(mesh_n):
            for j in range(mesh_n):
                if abs(i - j) < band_width:
                    continue
                ki, kj = i * stride + stride // 2, j * stride + stride // 2
                s, t = grid.times[ki], grid.times[kj]
                cell = h * h * W_eval(s, t, ensemble.data[m, :, ki], ensemble.data[m, :, kj], p) \
                    - lag[abs(i - j)] * eye
                inc = Y[m, :, kj] - Y[m, :, ki]
                lam[m] += inc @ cell @ inc
    return psi, -0.5 * lam


@dataclass
class IsometryReport:
    lhs: MCEstimate
    rkhs_term: MCEstimate
    w_term: MCEstimate
    m_term: MCEstimate
    rhs: MCEstimate
    gap: float
    gap_std_error: float
    rel_gap: float
    combined_tolerance: float
    band_bound: float
    drift: float
    verdict: str
    antisym: MCEstimate = None
    gap_less_antisym: float = float("nan")
    lhs_table: list = field(default_factory=list)
    lhs_stable: bool = True
    lhs_fit: float = float("nan")
    lhs_fit_rate: float = float("nan")
    lhs_observed_rate: float = float("nan")
    config: dict = field(default_factory=dict)
    version: str = __version__

    def as_dict(self):
        return asdict(self)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)

    CSV_FIELDS = ("integrand", "H", "d", "M", "n", "mesh_n", "band_width", "lhs", "lhs_se",
                  "rkhs", "w_term", "m_term", "rhs", "rhs_se", "gap", "rel_gap",
                  "combined_tolerance", "verdict")

    def csv_row(self):
        c = self.config
        return [c.get("integrand"), c.get("H"), c.get("d"), c.get("M"), c.get("n"),
                c.get("mesh_n"), c.get("band_width"), self.lhs.value, self.lhs.std_error,
                self.rkhs_term.value, self.w_term.value, self.m_term.value, self.rhs.value,
                self.rhs.std_error, self.gap, self.rel_gap, self.combined_tolerance, self.verdict]

    def append_csv(self, path):
        import os

        new = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(self.CSV_FIELDS)
            w.writerow(self.csv_row())


def lhs_rate(g, p):
    if g.kind == HOLDER:
        return 2 * p.H - 1 + 2 * min(g.gamma_bar, g.gamma * p.H)
    return 2 * p.H


def verify_isometry(g, p, budget=Budget(), progress=None):
    g.check_exponents(p)
    theta = resolve_theta(g, p, budget)
    grid = budget.grid(p)
    cells = [grid.cells(e) for e in budget.eps_list]
    fine = RhsEngine(p, grid, budget.mesh_n, budget.band_width, theta).bind(g)
    coarse = RhsEngine(p, grid, budget.mesh_n // 2, budget.band_width, theta).bind(g)
    lhs_parts, ant_parts, fine_parts, coarse_parts = [], [], [], []
    for a in range(0, budget.M, budget.batch):
        Mb = min(budget.batch, budget.M - a)
        e = sample(budget.method, grid, p, Mb, budget.seed, first_path=a)
        Y = integrand_values(e.data, g, grid)
        I = I0_batch(e.data, g, cells, grid, Y=Y)
        lhs_parts.append(I**2)
        if p.d > 1:
            # anti-symmetric pairing 0.5 [I0^2 - tr(P^2)] at each radius
            tr = np.stack([np.einsum("mab,mba->m", P, P) for P in
                           (increment_matrix_batch(e.data, g, m, grid, Y=Y) for m in cells)], axis=1)
            ant_parts.append(0.5 * (I**2 - tr))
        fine_parts.append(fine.process(e.data, Y))
        coarse_parts.append(coarse.process(e.data, Y))
        if progress is not None:
            progress(a + Mb, budget.M)
    sq = np.concatenate(lhs_parts)
    terms = _concat(fine_parts)
    cterms = _concat(coarse_parts)
    ests = [MCEstimate.from_samples(sq[:, k]) for k in range(len(cells))]
    ext = extrapolate(ests, list(budget.eps_list), lhs_rate(g, p))
    lhs = ests[ext.index]
    rhs_samples = terms.rhs
    rhs = MCEstimate.from_samples(rhs_samples)
    gap_samples = sq[:, ext.index] - rhs_samples
    gap = lhs.value - rhs.value
    gap_se = float(gap_samples.std(ddof=1) / math.sqrt(gap_samples.size))
    drift = abs(float(np.mean(rhs_samples - cterms.rhs)))
    if ant_parts:
        antisym = MCEstimate.from_samples(np.concatenate(ant_parts)[:, ext.index])
    else:
        antisym = MCEstimate(0.0, 0.0, budget.M)

    beta = 2 * theta + 2 * p.H - 2
    band_mu = float(np.mean(terms.mu_ring)) * terms.band_ratio
    # fitted constant of E|Y_st|^2 ~ C u^(2 theta) from the first retained ring
    h = p.T / budget.mesh_n
    _, fit_ring = band_model(budget.mesh_n, budget.band_width, beta,
                             p.H * (1 - 2 * p.H) * h ** (beta + 2))
    C_Y = 2 * float(np.mean(terms.mu_ring)) / fit_ring
    band_bound = band_mu + 0.5 * C_Y * kappa_band_envelope(theta, budget.band_width * h, p)

    tol = 3 * math.hypot(lhs.std_error, rhs.std_error) + band_bound + drift
    rel = abs(gap) / abs(rhs.value) if rhs.value != 0 else (0.0 if gap == 0 else float("inf"))
    noisy = (lhs.std_error > 0.2 * abs(lhs.value)) or (rhs.std_error > 0.2 * abs(rhs.value))
    if noisy:
        verdict = INCONCLUSIVE
    else:
        verdict = PASS if abs(gap) <= tol else FAIL
    config = {
        "integrand": g.name, "integrand_params": list(g.params), "H": p.H, "T": p.T, "d": p.d,
        "M": budget.M, "n": budget.n, "eps_list": list(budget.eps_list),
        "mesh_n": budget.mesh_n, "band_width": budget.band_width, "theta_hat": theta,
        "seed": budget.seed, "method": budget.method, "batch": budget.batch,
        "n_steps": grid.n_steps, "horizon": grid.horizon,
    }
    return IsometryReport(
        lhs=lhs, rkhs_term=MCEstimate.from_samples(terms.rkhs),
        w_term=MCEstimate.from_samples(terms.w_term), m_term=MCEstimate.from_samples(terms.m_term),
        rhs=rhs, gap=gap, gap_std_error=gap_se, rel_gap=rel, combined_tolerance=tol,
        band_bound=band_bound, drift=drift, verdict=verdict, antisym=antisym,
        gap_less_antisym=gap - antisym.value,
        lhs_table=[(e, est.value, est.std_error, est.n_samples) for e, est in zip(budget.eps_list, ests)],
        lhs_stable=ext.stable, lhs_fit=ext.fit_value, lhs_fit_rate=ext.fit_rate,
        lhs_observed_rate=ext.observed_rate, config=config)


@dataclass
class BoundReport:
    norm_sq_est: float
    norm_std_error: float
    bound_rhs: float
    ratio: float
    pnorm: float
    empirical_theta: float
    C_report: float
    verdict: str
    config: dict = field(default_factory=dict)
    version: str = __version__

    def as_dict(self):
        return asdict(self)


def bound_check(g, p, pnorm, budget=Budget(M=2000), C_report=1.0):
    """Compare the isometry value with the moment bound over m and |mu| + kappa."""
    if not 1 < pnorm <= 4:
        raise K.DomainError("moment order must lie in (1, 4]")
    theta = resolve_theta(g, p, budget)
    grid = budget.grid(p)
    eng = RhsEngine(p, grid, budget.mesh_n, budget.band_width, theta, moment_p=pnorm).bind(g)
    parts = []
    for a in range(0, budget.M, budget.batch):
        Mb = min(budget.batch, budget.M - a)
        e = sample(budget.method, grid, p, Mb, budget.seed, first_path=a)
        parts.append(eng.process(e.data))
    terms = _concat(parts)
    norm = MCEstimate.from_samples(terms.rhs)

    nm, bw = budget.mesh_n, budget.band_width
    h = p.T / nm
    one = (eng.mom1 / budget.M) ** (1 / pnorm)
    two = (eng.mom2 / budget.M) ** (1 / pnorm)
    # empirical local exponent from ring means at lags 1..16 cells
    lags = np.arange(1, min(17, nm // 4))
    ring_means = np.array([np.diagonal(two, offset=k).mean() for k in lags])
    if np.all(ring_means == 0):
        theta_emp = math.inf      # increments vanish identically
    else:
        slope = np.polyfit(np.log(lags * h), np.log(np.maximum(ring_means, 1e-300)), 1)[0]
        theta_emp = 0.5 * slope
    if theta_emp <= 0.5 - p.H:
        raise BandDivergence(f"empirical increment exponent {theta_emp:.4f} is not above 1/2-H")
    c = (np.arange(nm) + 0.5) * h
    I, J = np.triu_indices(nm, bw)
    lag = lag_weights(nm, p)
    rho = lag[J - I] + K.eval_kappa(c[I], c[J], p) * h * h
    off_full = 2 * float(np.sum(two[I, J] * rho))
    beta = 2 * theta + 2 * p.H - 2
    band_total, fit_ring = band_model(nm, bw, beta, p.H * (1 - 2 * p.H) * h ** (beta + 2))
    ring_full = 2 * float(np.diagonal(two, offset=bw).sum() * lag[bw])
    C_Y = ring_full / fit_ring
    band_full = C_Y * band_total + C_Y * kappa_band_envelope(theta, bw * h, p)
    bound = float(one @ eng.m_mass) + 0.5 * (off_full + band_full)
    ratio = norm.value / bound if bound > 0 else float("inf")
    verdict = PASS if norm.value - 3 * norm.std_error <= C_report * bound else FAIL
    config = {"integrand": g.name, "H": p.H, "T": p.T, "d": p.d, "M": budget.M, "n": budget.n,
              "mesh_n": nm, "band_width": bw, "theta_hat": theta, "seed": budget.seed, "pnorm": pnorm}
    return BoundReport(norm.value, norm.std_error, bound, ratio, pnorm, float(theta_emp),
                       C_report, verdict, config)
