"""Closed-form functions of the fractional Brownian covariance.

Every function accepts scalars or numpy arrays (broadcast together) and
extends the covariance by zero for nonpositive times, matching the
convention B_r = 0 for r <= 0.  Points where a formula is singular raise a
typed error instead of returning infinities.
"""
from dataclasses import dataclass, field

import numpy as np


class KernelError(ValueError):
    pass


class DiagonalSingularity(KernelError):
    pass


class OriginSingularity(KernelError):
    pass


class NonpositiveScale(KernelError):
    pass


class DomainError(KernelError):
    pass


@dataclass(frozen=True)
class ModelParams:
    H: float
    T: float = 1.0
    d: int = 1

    def __post_init__(self):
        if not 0.25 < self.H < 0.5:
            raise DomainError(f"Hurst index must lie in (1/4, 1/2), got {self.H}")
        if not self.T > 0:
            raise DomainError(f"horizon must be positive, got {self.T}")
        if int(self.d) != self.d or self.d < 1:
            raise DomainError(f"dimension must be a positive integer, got {self.d}")


def _pos_pow(x, a):
    return np.power(np.maximum(x, 0.0), a)


def _check_offdiag(s, t):
    if np.any(s == t):
        raise DiagonalSingularity("formula is singular on the diagonal s = t")


def _check_positive(*xs):
    for x in xs:
        if np.any(x <= 0):
            raise OriginSingularity("formula is singular at time 0")


def eval_R(s, t, p):
    """Covariance E[B_s B_t] of one coordinate, zero for nonpositive times."""
    s = np.maximum(np.asarray(s, dtype=float), 0.0)
    t = np.maximum(np.asarray(t, dtype=float), 0.0)
    h2 = 2 * p.H
    return 0.5 * (t**h2 + s**h2 - np.abs(t - s) ** h2)


def gamma(t, p):
    return _pos_pow(np.asarray(t, dtype=float), 2 * p.H)


def dgamma(t, p):
    t = np.asarray(t, dtype=float)
    _check_positive(t)
    return 2 * p.H * t ** (2 * p.H - 1)


def eval_derivatives(s, t, p):
    """Return (dR/ds, dR/dt, d2R/dtds, gamma'(t)) at (s, t)."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    _check_offdiag(s, t)
    _check_positive(s, t)
    H = p.H
    u = np.abs(t - s)
    sg = np.sign(t - s)
    dR_ds = H * s ** (2 * H - 1) + H * sg * u ** (2 * H - 1)
    dR_dt = H * t ** (2 * H - 1) - H * sg * u ** (2 * H - 1)
    d2R = H * (2 * H - 1) * u ** (2 * H - 2)
    return dR_ds, dR_dt, d2R, 2 * H * t ** (2 * H - 1)


def m_density(t, p):
    """Density of m(dt) = dR/dt(T, t) dt on (0, T)."""
    t = np.asarray(t, dtype=float)
    if np.any((t <= 0) | (t >= p.T)):
        raise DomainError("m-density is evaluated on the open interval (0, T)")
    H = p.H
    return H * (t ** (2 * H - 1) + (p.T - t) ** (2 * H - 1))


def mu_density(s, t, p):
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    _check_offdiag(s, t)
    H = p.H
    return H * (1 - 2 * H) * np.abs(t - s) ** (2 * H - 2)


def planar_increment(s, t, eps, delta, p):
    """Covariance of B_{s-eps, s+eps} and B_{t-delta, t+delta}."""
    return (eval_R(s + eps, t + delta, p) + eval_R(s - eps, t - delta, p)
            - eval_R(s - eps, t + delta, p) - eval_R(s + eps, t - delta, p))


def rect_increment(a, b, c, d, p):
    """R(b,d) + R(a,c) - R(a,d) - R(b,c) for the rectangle [a,b] x [c,d]."""
    return eval_R(b, d, p) + eval_R(a, c, p) - eval_R(a, d, p) - eval_R(b, c, p)


def eval_theta(s, t, p):
    """Return (theta, A) with theta = gamma(s)gamma(t) - R^2 and A = theta/|t-s|^2H.

    theta is computed as the determinant of the covariance of
    (B_lo, B_hi - B_lo), which loses no accuracy near the diagonal.
    """
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    _check_offdiag(s, t)
    h2 = 2 * p.H
    lo = np.maximum(np.minimum(s, t), 0.0)
    hi = np.maximum(s, t)
    uu = (hi - lo) ** h2
    phi = 0.5 * (hi**h2 - lo**h2 - uu)
    theta = lo**h2 * uu - phi**2
    return theta, theta / uu


def A_direct(s, t, p):
    """Four-term expression for A(s, t); kept as a cross-check."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    _check_offdiag(s, t)
    h2 = 2 * p.H
    uu = np.abs(t - s) ** h2
    return 0.25 * (2 * s**h2 + 2 * t**h2 - uu - (t**h2 - s**h2) ** 2 / uu)


def theta_bound_constant(p):
    return 2 ** (2 - 2 * p.H) / (4 - 2 ** (2 * p.H))


def eval_ell(x, a, p):
    """l_a(x) = |a+x|^2H - |a-x|^2H."""
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise NonpositiveScale("scale a must be positive")
    x = np.asarray(x, dtype=float)
    h2 = 2 * p.H
    return np.abs(a + x) ** h2 - np.abs(a - x) ** h2


def eval_delta_ell(delta, s, t, p):
    """(t^2H/2) l(delta/t) - ((t-s)^2H/2) l(delta/(t-s)) for 0 < s < t."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(s <= 0) or np.any(s >= t):
        raise DomainError("requires 0 < s < t")
    if np.any(delta <= 0):
        raise DomainError("radius must be positive")
    return 0.5 * (eval_ell(delta, t, p) - eval_ell(delta, t - s, p))


def _lambda_ordered(s, t, H):
    # regression of the limit increments on (B_s, B_t) for s < t, built from
    # the increment basis (B_s, B_t - B_s) to avoid cancellation
    h2 = 2 * H
    u = t - s
    su, uu = s**h2, u**h2
    su1, uu1 = s ** (h2 - 1), u ** (h2 - 1)
    phi = 0.5 * (t**h2 - su - uu)
    theta = su * uu - phi**2
    dtR = H * t ** (h2 - 1) - H * uu1
    e11 = H * (su1 * uu - phi * uu1) / theta
    e12 = H * (su * uu1 - su1 * phi) / theta
    e21 = (dtR * uu - phi * H * uu1) / theta
    e22 = (su * H * uu1 - phi * dtR) / theta
    return e11 - e12, e12, e21 - e22, e22


def regression_coefficients(s, t, p):
    """Limit coefficients (lambda11, lambda12, lambda21, lambda22) at (s, t)."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    _check_offdiag(s, t)
    _check_positive(s, t)
    lo, hi = np.minimum(s, t), np.maximum(s, t)
    m11, m12, m21, m22 = _lambda_ordered(lo, hi, p.H)
    swap = s > t
    # lambda11(s,t) = lambda22(t,s) and lambda12(s,t) = lambda21(t,s)
    return (np.where(swap, m22, m11), np.where(swap, m21, m12),
            np.where(swap, m12, m21), np.where(swap, m11, m22))


def regression_coefficients_direct(s, t, p):
    """The same coefficients from the defining quotients over theta."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    dR_ds, dR_dt, _, dg_t = eval_derivatives(s, t, p)
    dg_s = dgamma(s, p)
    gs, gt, r = gamma(s, p), gamma(t, p), eval_R(s, t, p)
    theta = gs * gt - r**2
    l11 = (0.5 * dg_s * gt - r * dR_ds) / theta
    l12 = (dR_ds * gs - r * 0.5 * dg_s) / theta
    l21 = (dR_dt * gt - r * 0.5 * dg_t) / theta
    l22 = (0.5 * dg_t * gs - r * dR_dt) / theta
    return l11, l12, l21, l22


def increment_coefficients(s, t, p):
    """(eta11, eta12, eta21, eta22): coefficients on (B_s, B_t - B_s)."""
    l11, l12, l21, l22 = regression_coefficients(s, t, p)
    return l11 + l12, l12, l21 + l22, l22


def eval_kappa(s, t, p):
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    _check_offdiag(s, t)
    _check_positive(s, t)
    H = p.H
    u = np.abs(t - s)
    return np.minimum(s, t) ** (H - 1) * u ** (H - 1) + u ** (2 * H - 1) / np.maximum(s, t)


@dataclass(frozen=True)
class KernelPoint:
    s: float
    t: float
    R: float
    gamma_s: float
    gamma_t: float
    dgamma_s: float
    dgamma_t: float
    phi: float
    theta: float
    A: float
    dR_ds: float
    dR_dt: float
    d2R: float
    lambda11: float
    lambda12: float
    lambda21: float
    lambda22: float
    eta11: float
    eta12: float
    eta21: float
    eta22: float
    kappa: float
    mu_density: float

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def eval_lambda_limit(s, t, p):
    s, t = float(s), float(t)
    dR_ds, dR_dt, d2R, dg_t = eval_derivatives(s, t, p)
    theta, A = eval_theta(s, t, p)
    l11, l12, l21, l22 = regression_coefficients(s, t, p)
    r = eval_R(s, t, p)
    gs = gamma(s, p)
    return KernelPoint(
        s=s, t=t, R=float(r), gamma_s=float(gs), gamma_t=float(gamma(t, p)),
        dgamma_s=float(dgamma(s, p)), dgamma_t=float(dg_t), phi=float(r - gs),
        theta=float(theta), A=float(A), dR_ds=float(dR_ds), dR_dt=float(dR_dt),
        d2R=float(d2R), lambda11=float(l11), lambda12=float(l12),
        lambda21=float(l21), lambda22=float(l22), eta11=float(l11 + l12),
        eta12=float(l12), eta21=float(l21 + l22), eta22=float(l22),
        kappa=float(eval_kappa(s, t, p)), mu_density=float(mu_density(s, t, p)),
    )


@dataclass(frozen=True)
class PreLimitCoeffs:
    eps: float
    delta: float
    n11: float
    n12: float
    n21: float
    n22: float
    o11: float
    o12: float
    o21: float
    o22: float
    lam11e: float
    lam12e: float
    lam21d: float
    lam22d: float
    eta11e: float
    eta12e: float
    eta21d: float
    eta22d: float
    dell: float = None


def _o_entries_simplex(eps, delta, s, t, p):
    # the case representations of the covariance matrix of the symmetric
    # increments against (B_s, B_{s,t}) on 0 < s < t
    R = lambda a, b: float(eval_R(a, b, p))
    u = t - s
    uu = u ** (2 * p.H)
    if s - eps > 0:
        o11 = 0.5 * s ** (2 * p.H) * float(eval_ell(eps / s, 1.0, p))
        o12 = 0.5 * uu * float(eval_ell(eps / u, 1.0, p))
    else:
        o11 = R(s, s + eps)
        o12 = R(t, s + eps) - R(s, s + eps)
    if t - delta > 0:
        o21 = float(eval_delta_ell(delta, s, t, p))
        o22 = 0.5 * uu * float(eval_ell(delta / u, 1.0, p))
    else:
        o21 = R(s, t + delta)
        o22 = R(t + delta, t) - R(t + delta, s)
    return o11, o12, o21, o22


def eval_prelimit(eps, delta, s, t, p):
    """Regression of B_{s-eps,s+eps} and B_{t-delta,t+delta} on (B_s, B_t).

    The lam/eta fields include the 1/theta factor, so lam/(2 eps) tends to
    the limit coefficient directly.
    """
    eps, delta, s, t = float(eps), float(delta), float(s), float(t)
    if eps <= 0 or delta <= 0:
        raise DomainError("radii must be positive")
    _check_offdiag(s, t)
    _check_positive(s, t)
    R = lambda a, b: float(eval_R(a, b, p))
    n11 = R(s, s + eps) - R(s, s - eps)
    n12 = R(s + eps, t) - R(s - eps, t)
    n21 = R(s, t + delta) - R(s, t - delta)
    n22 = R(t + delta, t) - R(t - delta, t)
    if s < t:
        o11, o12, o21, o22 = _o_entries_simplex(eps, delta, s, t, p)
        dell = float(eval_delta_ell(delta, s, t, p))
    else:
        o11, o12, o21, o22 = n11, n12 - n11, n21, n22 - n21
        dell = None
    gs, gt, r = R(s, s), R(t, t), R(s, t)
    theta = float(eval_theta(s, t, p)[0])
    lam11e = (gt * n11 - r * n12) / theta
    lam12e = (gs * n12 - r * n11) / theta
    lam21d = (gt * n21 - r * n22) / theta
    lam22d = (gs * n22 - r * n21) / theta
    return PreLimitCoeffs(
        eps=eps, delta=delta, n11=n11, n12=n12, n21=n21, n22=n22,
        o11=o11, o12=o12, o21=o21, o22=o22,
        lam11e=lam11e, lam12e=lam12e, lam21d=lam21d, lam22d=lam22d,
        eta11e=lam11e + lam12e, eta12e=lam12e, eta21d=lam21d + lam22d,
        eta22d=lam22d, dell=dell,
    )


# ---------------------------------------------------------------------------
# lemma suite

SLACK = 1e-10


@dataclass
class LemmaResult:
    name: str
    n_points: int
    max_violation: float
    worst: tuple = ()
    note: str = ""

    @property
    def passed(self):
        return self.max_violation <= SLACK


@dataclass
class SuiteReport:
    H: float
    T: float
    grid_density: int
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    @property
    def total_violations(self):
        return sum(not r.passed for r in self.results)


def _result(name, viol, coords, note=""):
    viol = np.asarray(viol, dtype=float).ravel()
    k = int(np.argmax(viol))
    worst = tuple(float(np.asarray(c).ravel()[k]) for c in coords)
    return LemmaResult(name, viol.size, float(viol[k]), worst, note)


def clustered_pairs(grid_density, T):
    """Pairs s < t clustered toward the diagonal and the origin."""
    lags = T * np.geomspace(2.0**-24, 1.0, grid_density)
    base = np.unique(np.concatenate([
        T * np.geomspace(2.0**-24, 1.0, grid_density),
        np.linspace(0.0, T, grid_density + 1)[1:],
    ]))
    s, u = np.meshgrid(base, lags, indexing="ij")
    s, u = s.ravel(), u.ravel()
    t = s + u
    keep = t <= T
    return s[keep], t[keep]


def run_lemma_suite(grid_density, p):
    if grid_density < 16:
        raise DomainError("grid_density must be at least 16")
    H, T = p.H, p.T
    h2 = 2 * H
    rep = SuiteReport(H=H, T=T, grid_density=grid_density)
    s, t = clustered_pairs(grid_density, T)

    # theta factorization and the lower bound on A
    theta, A = eval_theta(s, t, p)
    Ad = A_direct(s, t, p)
    rel = np.abs(theta - np.abs(t - s) ** h2 * Ad) / np.abs(theta)
    lhs = np.minimum(s, t) ** h2 / np.abs(A)
    rep.results.append(_result(
        "theta_lower_bound", lhs - theta_bound_constant(p), (s, t),
        note=f"max relative factorization error {rel.max():.3e}"))

    # growth of l_a(x)/x
    a = np.geomspace(2.0**-6, 2.0**6, grid_density)
    x = np.concatenate([np.geomspace(1e-8, 1e4, 16 * grid_density), [1.0]])
    aa, xx = np.meshgrid(a, x, indexing="ij")
    xx = np.concatenate([xx, a[:, None]], axis=1)
    aa = np.concatenate([aa, a[:, None]], axis=1)
    ratio = np.abs(eval_ell(xx, aa, p) / xx)
    bound = 2**h2 * aa ** (h2 - 1)
    attained = float(np.min(np.max(ratio / bound, axis=1)))
    rep.results.append(_result(
        "ell_growth", ratio - bound, (xx, aa),
        note=f"min over a of sup-ratio attained {attained:.12f}"))

    # covariance of B_s with B_{s,t}
    u = t - s
    phi = eval_R(s, t, p) - s**h2
    env = np.minimum(np.minimum(s**H * u**H, u**h2), s**h2)
    rep.results.append(_result("increment_covariance", np.abs(phi) - env, (s, t)))

    # (1-u)^2H >= 1 - 4Hu below the crossing point
    cstar = 1 - 2 ** (-1 / (1 - h2))
    uu = np.linspace(0.0, cstar, 64 * grid_density + 1)
    rep.results.append(_result(
        "power_lower_bound", (1 - 4 * H * uu) - (1 - uu) ** h2, (uu,),
        note=f"C* = {cstar:.12f}"))

    # both bounds on delta-ell
    deltas = np.geomspace(2.0**-24, 0.5, grid_density // 2) * min(T, 1.0)
    ss, tt, dd = (np.repeat(s, deltas.size), np.repeat(t, deltas.size),
                  np.tile(deltas, s.size))
    far = ss < tt - dd
    sf, tf, df = ss[far], tt[far], dd[far]
    dl = np.abs(eval_delta_ell(df, sf, tf, p))
    c1 = 1.0
    b1 = c1 * (sf**h2 * df / tf
               + (tf - sf) ** (h2 - 1) * (1 - df / tf) ** (h2 - 1) * df * sf / tf
               + (tf - sf - df) ** (h2 - 1) * (df * sf / tf) * (tf - sf) ** (-h2))
    near = (tt > dd) & (ss > tt - dd)
    sn, tn, dn = ss[near], tt[near], dd[near]
    v2 = sn ** (-h2) * np.abs(eval_delta_ell(dn, sn, tn, p)) - (2 + (2 * T) ** h2)
    v1 = dl - b1
    viol = np.concatenate([v1, v2])
    coords = (np.concatenate([df, dn]), np.concatenate([sf, sn]),
              np.concatenate([tf, tn]))
    rep.results.append(_result(
        "delta_ell_bounds", viol, coords,
        note=f"far-case constant C = {c1}; {v1.size} far and {v2.size} near points"))
    return rep
