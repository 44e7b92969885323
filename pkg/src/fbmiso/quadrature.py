"""Quadrature against m(dt), the singular measure |mu|(dsdt) and kappa dsdt.

The square [0, T]^2 is cut into n x n cells of side h = T/n.  Off-diagonal
cell masses of |mu| are planar increments of R, which depend only on the lag
between the cells, so all two-dimensional sums are organised by diagonal
ring.  Rings closer to the diagonal than ``band_width`` are replaced by a
local power model fitted on the first ring outside the band.
"""
import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .kernel import DomainError, eval_R, eval_kappa

CONVERGENT = "CONVERGENT"
DIVERGENT = "DIVERGENT"
INCONCLUSIVE = "INCONCLUSIVE"


class BandDivergence(ValueError):
    pass


@dataclass(frozen=True)
class MeshSpec:
    n: int
    band_width: int = 1
    theta_hat: float = 0.5

    def __post_init__(self):
        if self.n < 8 or self.n & (self.n - 1):
            raise DomainError(f"mesh size must be a power of two >= 8, got {self.n}")
        if not 1 <= self.band_width <= self.n // 4:
            raise DomainError(f"band width must lie in [1, n/4], got {self.band_width}")

    def h(self, p):
        return p.T / self.n


def check_band(theta_hat, p):
    if theta_hat <= (1 - 2 * p.H) / 2 + 1e-12:
        raise BandDivergence(
            f"increment exponent {theta_hat} is not above {(1 - 2 * p.H) / 2}; "
            "the diagonal band integral diverges")


def lag_weights(n, p, T=None):
    """|mu|-mass of one off-diagonal cell at lag k = 0..n-1 (entry 0 unused).

    The mass is h^2H |k^2H - ((k+1)^2H + (k-1)^2H)/2|; for k >= 4 the second
    difference is summed as a binomial series to avoid cancellation.
    """
    T = p.T if T is None else T
    a = 2 * p.H
    h = T / n
    k = np.arange(n, dtype=float)
    w = np.zeros(n)
    small = (k >= 1) & (k < 4)
    ks = k[small]
    w[small] = np.abs(ks**a - 0.5 * ((ks + 1) ** a + (ks - 1) ** a))
    big = k >= 4
    kb = k[big]
    x2 = (1.0 / kb) ** 2
    series = np.zeros_like(kb)
    term = np.ones_like(kb)
    for m in range(1, 40):
        term = term * x2
        series += special.binom(a, 2 * m) * term
    w[big] = np.abs(kb**a * series)
    return w * h**a


@dataclass
class CellWeights:
    n: int
    h: float
    lag: np.ndarray
    m_mass: np.ndarray
    nodes: np.ndarray = field(repr=False, default=None)

    def cell(self, i, j):
        if i == j:
            raise DomainError("diagonal cells carry infinite |mu|-mass")
        return self.lag[abs(i - j)]

    def rectangle(self, i0, i1, j0, j1):
        """Exact sum of masses over cells [i0, i1) x [j0, j1) off the diagonal."""
        total = []
        for i in range(i0, i1):
            ks = np.abs(np.arange(j0, j1) - i)
            if np.any(ks == 0):
                raise DomainError("rectangle meets the diagonal")
            total.append(self.lag[ks].sum())
        return math.fsum(total)


def cell_weights(mesh, p):
    n, h = mesh.n, mesh.h(p)
    nodes = np.linspace(0.0, p.T, n + 1)
    m_mass = np.diff(eval_R(p.T, nodes, p))
    return CellWeights(n=n, h=h, lag=lag_weights(n, p), m_mass=m_mass, nodes=nodes)


def _ring_profile(k, beta):
    # integral of |t-s|^beta over one cell at lag k, in units of
    # h^(beta+2): second difference of x^(beta+2)/((beta+1)(beta+2))
    c = 1.0 / ((beta + 1) * (beta + 2))
    k = np.asarray(k, dtype=float)
    G = lambda x: c * np.power(np.maximum(x, 0.0), beta + 2)
    return np.where(k == 0, 2 * c, G(k + 1) - 2 * G(k) + G(k - 1))


def band_model(n, band_width, beta, density=1.0):
    """Ring integrals of density*|t-s|^beta for rings 0..band_width, unit h.

    Returns (band_total, fit_ring) where band_total covers rings below
    band_width on the full square and fit_ring is ring band_width.
    """
    if beta <= -1:
        raise BandDivergence("local model is not integrable at the diagonal")
    k = np.arange(band_width + 1)
    counts = np.where(k == 0, n, 2 * (n - k))
    rings = density * counts * _ring_profile(k, beta)
    return math.fsum(rings[:band_width]), rings[band_width]


def _evaluate(F, s, t):
    return np.broadcast_to(np.asarray(F(s, t), dtype=float), s.shape)


@dataclass
class QuadResult:
    total: float
    off_band: float
    band: float
    n: int
    band_width: int
    fit_constant: float = float("nan")

    @property
    def band_fraction(self):
        return self.band / self.total if self.total != 0 else 0.0

    def __float__(self):
        return float(self.total)

    def row(self):
        return (self.n, self.band_width, self.off_band, self.band, self.total)


def integrate_m(f, mesh, p):
    """sum f(midpoint) * [R(T, t_{i+1}) - R(T, t_i)]."""
    w = cell_weights(mesh, p)
    mid = 0.5 * (w.nodes[1:] + w.nodes[:-1])
    vals = np.broadcast_to(np.asarray(f(mid), dtype=float), mid.shape)
    return math.fsum(vals * w.m_mass)


def ring_sums(F, mesh, p, weights=None, k_min=1):
    """Sum of F(center)*weight over each ring k >= k_min of the full square.

    ``weights`` is the per-lag cell weight (defaults to |mu|-masses)."""
    n, h = mesh.n, mesh.h(p)
    lag = lag_weights(n, p) if weights is None else weights
    centers = (np.arange(n) + 0.5) * h
    out = np.zeros(n)
    for k in range(k_min, n):
        s = centers[: n - k]
        t = centers[k:]
        up = _evaluate(F, s, t).sum()
        lo = _evaluate(F, t, s).sum()
        out[k] = lag[k] * (up + lo)
    return out


def integrate_mu(F, mesh, p):
    """Integral of F against |mu| over [0,T]^2 with diagonal band extrapolation."""
    check_band(mesh.theta_hat, p)
    n, bw, h = mesh.n, mesh.band_width, mesh.h(p)
    rings = ring_sums(F, mesh, p, k_min=bw)
    off = math.fsum(rings[bw:])
    beta = 2 * mesh.theta_hat + 2 * p.H - 2
    dens = p.H * (1 - 2 * p.H) * h ** (beta + 2)
    band_total, fit_ring = band_model(n, bw, beta, dens)
    C = rings[bw] / fit_ring
    band = C * band_total
    return QuadResult(total=off + band, off_band=off, band=band, n=n,
                      band_width=bw, fit_constant=C)


def _flat(f, x):
    v = np.asarray(f(x), dtype=float)
    if v.ndim == 0:
        v = np.full(x.shape, float(v))
    return v


def rkhs_norm_quadrature(f, mesh, p):
    """int |f|^2 dm + 1/2 int int |f_t - f_s|^2 d|mu| for f on [0,T].

    ``f`` maps an array of times to values of shape (N,) or (N, d).
    """
    def sq(x):
        v = _flat(f, x)
        return v**2 if v.ndim == 1 else (v**2).sum(axis=-1)

    def inc(s, t):
        v = _flat(f, t) - _flat(f, s)
        return v**2 if v.ndim == 1 else (v**2).sum(axis=-1)

    first = integrate_m(sq, mesh, p)
    second = integrate_mu(inc, mesh, p)
    return first + 0.5 * second.total


def rkhs_norm_step(breaks, levels, p):
    """Exact E|int f dB|^2 for f = sum_i levels[i] 1_(breaks[i], breaks[i+1]]."""
    b = np.asarray(breaks, dtype=float)
    a = np.asarray(levels, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.size != a.shape[0] + 1 or np.any(np.diff(b) < 0):
        raise DomainError("need increasing breakpoints, one more than levels")
    if b[0] < 0 or b[-1] > p.T:
        raise DomainError("breakpoints must lie in [0, T]")
    lo, hi = b[:-1], b[1:]
    cov = (eval_R(hi[:, None], hi[None, :], p) + eval_R(lo[:, None], lo[None, :], p)
           - eval_R(lo[:, None], hi[None, :], p) - eval_R(hi[:, None], lo[None, :], p))
    gram = a @ a.T
    return math.fsum((gram * cov).ravel())


def step_function(breaks, levels):
    """Vectorized evaluation of a left-open step function."""
    b = np.asarray(breaks, dtype=float)
    a = np.asarray(levels, dtype=float)

    def f(x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(b, x, side="left") - 1
        inside = (idx >= 0) & (idx < a.shape[0])
        out = np.zeros(x.shape + a.shape[1:])
        out[inside] = a[idx[inside]]
        return out

    return f


# ---------------------------------------------------------------------------
# trend classification for refinement sequences

def classify_increments(incs, window=6, conv_window=3, ratio_max=0.95,
                        cauchy_rtol=1e-3, totals=None):
    """Verdict from the tail increments of a refinement sequence.

    DIVERGENT when the last ``window`` increments never decrease; CONVERGENT
    when the last ``conv_window`` ratios are below one with geometric mean at
    most ``ratio_max``, or the increments are Cauchy-small against ``totals``.
    """
    incs = np.abs(np.asarray(incs, dtype=float))
    if incs.size < window + 1:
        return INCONCLUSIVE
    if incs[-1] == 0.0:
        return CONVERGENT
    tail = incs[-(window + 1):]
    if np.all(tail[1:] >= tail[:-1] * (1 - 1e-9)):
        return DIVERGENT
    tail = incs[-(conv_window + 1):]
    if np.all(tail > 0):
        ratios = tail[1:] / tail[:-1]
        if np.all(ratios < 1.0) and np.exp(np.mean(np.log(ratios))) <= ratio_max:
            return CONVERGENT
    if totals is not None:
        tot = np.abs(np.asarray(totals, dtype=float)[-(conv_window + 1):])
        if np.all(tail <= cauchy_rtol * tot) and np.all(np.diff(tail) <= 0):
            return CONVERGENT
    return INCONCLUSIVE


@dataclass
class MembershipVerdict:
    verdict: str
    band_verdict: str
    log_verdict: str
    h: list
    band_totals: list
    band_increments: list
    log_levels: list
    log_increments: list


def _log_criterion(psi_log, v0, levels, iterate=False):
    # int_0^eta psi^2(y)/y dy = int_{log 1/eta} psi^2(e^-v) dv over dyadic v,
    # or over dyadic w = log v when iterate is set
    edges = v0 * 2.0 ** np.arange(levels + 1)
    if iterate:
        f = lambda w: psi_log(math.exp(w)) ** 2 * math.exp(w)
    else:
        f = lambda v: psi_log(v) ** 2
    incs = []
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(f, a, b, limit=200)
        incs.append(val)
    return edges[1:].tolist(), incs


def check_membership(V, p, refinement_levels=40, psi_log=None, log_levels=40, iterate=False):
    """Evidence for int int V(|t-s|)^2 |mu|(dsdt) < infinity.

    Two refinement sequences are classified: the square restricted to
    |t-s| > 2^-k, and the one-dimensional integral of psi^2(y)/y written in
    v = log(1/y) over dyadic v-levels, with psi(y) = V(y)/y^(1/2-H).
    ``psi_log(v)``, if given, evaluates psi(exp(-v)) directly.  With
    ``iterate`` the levels are dyadic in log v instead (at most 9 levels).
    """
    H, T = p.H, p.T
    c = H * (1 - 2 * H)

    def band_piece(a, b):
        g = lambda u: V(u) ** 2 * u ** (2 * H - 2) * (T - u)
        val, _ = integrate.quad(g, a, b, limit=200)
        return 2 * c * val

    ks = np.arange(4, refinement_levels + 1)
    hs = T * 2.0 ** (-ks.astype(float))
    base = band_piece(hs[0], T)
    totals, incs = [base], []
    for a, b in zip(hs[1:], hs[:-1]):
        inc = band_piece(a, b)
        incs.append(inc)
        totals.append(totals[-1] + inc)
    band_verdict = classify_increments(incs, totals=totals[1:])

    if psi_log is None:
        def psi_log(v):
            y = math.exp(-v)
            return V(y) / y ** (0.5 - H) if y > 0 else 0.0
        levels = min(log_levels, 9)
    else:
        levels = min(log_levels, 9) if iterate else log_levels
    v0 = max(1.0, -math.log(min(T, 1.0) / 2))
    log_lv, log_inc = _log_criterion(psi_log, v0, levels, iterate)
    log_verdict = classify_increments(log_inc)

    if DIVERGENT in (band_verdict, log_verdict):
        verdict = DIVERGENT
    elif log_verdict == CONVERGENT:
        verdict = CONVERGENT
    else:
        verdict = band_verdict
    return MembershipVerdict(verdict, band_verdict, log_verdict, hs.tolist(),
                             totals, incs, log_lv, log_inc)


# ---------------------------------------------------------------------------
# kappa^q integrability

@dataclass
class KappaBandTable:
    q: float
    h: list
    totals: list
    increments: list
    verdict: str


def kappa_band_integrals(q, p, levels=30, k0=2):
    """int int kappa^q over {s,t > h, |t-s| > h} for dyadic h = T 2^-k."""
    T = p.T

    def piece(h_lo, h_hi):
        # region {min(s,t) > h_lo, |t-s| > h_lo} minus the same at h_hi,
        # integrated in log coordinates on the upper triangle
        def f(b, a):
            s, u = math.exp(a), math.exp(b)
            return float(eval_kappa(s, s + u, p)) ** q * s * u

        def region(h):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", integrate.IntegrationWarning)
                val, _ = integrate.dblquad(
                    f, math.log(h), math.log(T - h),
                    lambda a: math.log(h), lambda a: math.log(T - math.exp(a)),
                    epsabs=1e-12, epsrel=1e-10)
            return 2 * val
        return region(h_lo) - (region(h_hi) if h_hi is not None else 0.0)

    hs = [T * 2.0**-k for k in range(k0, levels + 1)]
    totals, incs = [piece(hs[0], None)], []
    for a, b in zip(hs[1:], hs[:-1]):
        totals.append(piece(a, None))
        incs.append(totals[-1] - totals[-2])
    return KappaBandTable(q, hs, totals, incs,
                          classify_increments(incs, totals=totals[1:]))


def refinement_table(F, p, ns, band_width=1, theta_hat=0.5):
    return [integrate_mu(F, MeshSpec(n, band_width, theta_hat), p).row() for n in ns]


def write_refinement_csv(path, rows, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["n", "band_width", "off_band_sum", "band_estimate", "total"])
        for r in rows:
            w.writerow([r[0], r[1], repr(float(r[2])), repr(float(r[3])), repr(float(r[4]))])
