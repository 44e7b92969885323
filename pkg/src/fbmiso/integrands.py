"""Catalog of test integrands.

Hölder integrands (Lipschitz in time and space) and radial integrands built
from a slowly varying modulus V(x) = x^(1/(2H) - 1) psi(x), which sit just
outside every admissible Hölder class but still inside the isometry domain.
"""
import math
from dataclasses import dataclass

import numpy as np

from .kernel import DomainError
from .quadrature import BandDivergence, CONVERGENT, DIVERGENT, check_membership
from .stratonovich import HOLDER, MODULUS, IntegrandSpec, MCEstimate

SIN = "SIN"
TANH = "TANH"
TIME_SIN = "TIME_SIN"
CONSTANT = "CONSTANT"
POWER = "POWER"

LOG_POW = "LOG_POW"
LOGLOG = "LOGLOG"
EXP_LOGLOG = "EXP_LOGLOG"

DEFAULT_CUTOFF = {LOG_POW: 0.9, LOGLOG: math.exp(-math.e), EXP_LOGLOG: 1 / math.e}


def make_holder(name, p=None):
    if name == SIN:
        return IntegrandSpec(lambda t, x: np.sin(x), HOLDER, 1.0, 1.0, 1.0, SIN)
    if name == TANH:
        return IntegrandSpec(lambda t, x: np.tanh(x), HOLDER, 1.0, 1.0, 1.0, TANH)
    if name == TIME_SIN:
        return IntegrandSpec(lambda t, x: np.sin(x + np.asarray(t)[..., None]),
                             HOLDER, 1.0, 1.0, 1.0, TIME_SIN)
    raise DomainError(f"unknown Hölder integrand {name}")


def make_constant(c):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return IntegrandSpec(lambda t, x: np.broadcast_to(c, np.shape(x)), "RAW",
                         bound=float(np.max(np.abs(c))), name=CONSTANT, params=tuple(c.tolist()))


@dataclass(frozen=True)
class PsiFamily:
    kind: str
    param: float
    cutoff: float = None

    def __post_init__(self):
        if self.kind not in DEFAULT_CUTOFF:
            raise DomainError(f"unknown psi family {self.kind}")
        if self.cutoff is None:
            object.__setattr__(self, "cutoff", DEFAULT_CUTOFF[self.kind])
        if not 0 < self.cutoff < 1:
            raise DomainError("cutoff must lie in (0, 1)")

    @property
    def v_min(self):
        return math.log(1 / self.cutoff)

    def psi_log(self, v):
        """psi(exp(-v)), with v clamped to the cutoff."""
        v = np.maximum(np.asarray(v, dtype=float), self.v_min)
        if self.kind == LOG_POW:
            return v ** (-self.param)
        if self.kind == LOGLOG:
            return v**-0.5 * np.log(v) ** (-self.param)
        return np.exp(-np.log(v) ** self.param)

    def psi(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        pos = x > 0
        with np.errstate(divide="ignore"):
            out[pos] = self.psi_log(-np.log(np.minimum(x[pos], self.cutoff)))
        return out

    @property
    def in_range(self):
        return self.param > (1.0 if self.kind == EXP_LOGLOG else 0.5)

    @property
    def expected_verdict(self):
        # convergence of int psi^2(x)/x dx near 0
        if self.kind == EXP_LOGLOG:
            return CONVERGENT if self.param >= 1 else DIVERGENT
        return CONVERGENT if self.param > 0.5 else DIVERGENT


@dataclass
class ModulusIntegrand:
    family: PsiFamily
    H: float
    integrand: IntegrandSpec
    expected_verdict: str
    radius: float = None

    @property
    def cutoff(self):
        return self.family.cutoff

    def V(self, x):
        """Space modulus x^(1/(2H)-1) psi(x)."""
        x = np.asarray(x, dtype=float)
        return np.maximum(x, 0.0) ** (1 / (2 * self.H) - 1) * self.family.psi(x)

    def time_modulus(self, u):
        """u^(1/2-H) psi(u): the L2 size of Y_{s,t} at lag u, up to constants."""
        u = np.asarray(u, dtype=float)
        return u ** (0.5 - self.H) * self.family.psi(u)

    def membership(self, p, refinement_levels=40, log_levels=40):
        return check_membership(lambda u: float(self.time_modulus(u)), p,
                                refinement_levels, psi_log=lambda v: float(self.family.psi_log(v)),
                                log_levels=log_levels, iterate=self.family.kind == LOGLOG)


def concavity_end(fam, H, u_max=700.0, points=20000):
    """Largest a <= cutoff with V(x) = x^(1/(2H)-1) psi(x) concave on (0, a].

    Concavity of V (with V(0) = 0) makes V subadditive, so the radial
    realization has modulus of continuity at most V.  Scanned in u = log(1/x).
    """
    expo = 1 / (2 * H) - 1
    u = np.linspace(fam.v_min, u_max, points)
    logV = -expo * u + np.log(fam.psi_log(u))
    # V'(x) = -exp(u) dV/du; concave iff V' is nondecreasing in u
    dlog = np.gradient(logV, u)
    dV = -np.exp(u + logV) * dlog
    bad = np.nonzero(np.diff(dV) < 0)[0]
    if bad.size == 0:
        return fam.cutoff
    return float(min(fam.cutoff, math.exp(-u[bad[-1] + 1])))


def make_modulus(fam, p):
    """Radial realization g(x) = V(min(|x|, a)) in every coordinate.

    a is the family cutoff, shrunk to the concavity range of V.
    """
    a = concavity_end(fam, p.H)
    expo = 1 / (2 * p.H) - 1

    def g(t, x):
        r = np.minimum(np.linalg.norm(x, axis=-1), a)
        v = r**expo * fam.psi(r)
        return np.repeat(v[..., None], np.shape(x)[-1], axis=-1)

    spec = IntegrandSpec(g, MODULUS, bound=float(a**expo * fam.psi(a)),
                         name=f"{fam.kind}({fam.param:g})", params=(fam.kind, fam.param, a))
    return ModulusIntegrand(fam, p.H, spec, fam.expected_verdict, a)


@dataclass
class PowerModulus:
    alpha: float
    integrand: IntegrandSpec
    expected_verdict: str = CONVERGENT

    def membership(self, p, refinement_levels=40):
        a = self.alpha
        return check_membership(lambda u: u**a, p, refinement_levels)


def make_power(alpha, p):
    """Integrand whose increments have time modulus u^alpha; alpha must exceed 1/2-H."""
    if alpha <= 0.5 - p.H + 1e-12:
        raise BandDivergence(f"power {alpha} is not above 1/2-H = {0.5 - p.H}; "
                             "the |mu|-integral of the squared modulus diverges")
    gam = alpha / p.H
    spec = IntegrandSpec(lambda t, x: np.minimum(np.abs(x), 1.0) ** gam, HOLDER, 1.0,
                         min(gam, 1.0), 1.0, f"{POWER}({alpha:g})", (alpha,))
    return PowerModulus(alpha, spec)


def empirical_modulus(g, sample_count, hs=None, radius=1.0, d=1, seed=0):
    """Rows (h, sup over probes of |g(x + h e) - g(x)|), probes include the origin."""
    hs = 2.0 ** -np.arange(2, 31) if hs is None else np.asarray(hs, dtype=float)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-radius, radius, size=(sample_count, d))
    x[0] = 0.0
    e = np.zeros(d)
    e[0] = 1.0
    t = np.zeros(sample_count)
    base = np.asarray(g(t, x), dtype=float)
    rows = []
    for h in hs:
        diff = np.asarray(g(t, x + h * e), dtype=float) - base
        rows.append((float(h), float(np.max(np.linalg.norm(np.atleast_2d(diff), axis=-1)))))
    return rows


def local_slopes(rows):
    h = np.array([r[0] for r in rows])
    v = np.array([r[1] for r in rows])
    return np.diff(np.log(v)) / np.diff(np.log(h))


def power_rescaling_ratio(fam, H, xs=None):
    """max over x of psi^2(x^H) / psi^2(x); finite when the doubling-type condition holds."""
    xs = np.geomspace(1e-8, fam.cutoff, 400) if xs is None else np.asarray(xs)
    return float(np.max(fam.psi(xs**H) ** 2 / fam.psi(xs) ** 2))


def reverse_jensen_check(fam, p, lag, r=2.0, M=100_000, seed=0):
    """MC of E psi^2r(|B_st| 1{|B_st| <= A}) against psi^2r(lag^H).

    A is the end of the concavity range of psi^2r.
    """
    if fam.kind != LOG_POW:
        raise DomainError("concavity range is tabulated for LOG_POW only")
    A = min(fam.cutoff, math.exp(-(2 * r * fam.param + 1)))
    rng = np.random.default_rng(seed)
    b = np.abs(rng.standard_normal(M)) * lag**p.H
    x = np.where(b <= A, b, 0.0)
    est = MCEstimate.from_samples(fam.psi(x) ** (2 * r))
    return est, float(fam.psi(np.array(lag**p.H)) ** (2 * r)), A


def catalog(p):
    """Serializable catalog entries (key, kind, params, expected verdict, cutoff)."""
    rows = []
    for name in (SIN, TANH, TIME_SIN):
        rows.append({"key": name, "kind": HOLDER, "params": {"gamma_bar": 1.0, "gamma": 1.0},
                     "expected": CONVERGENT, "cutoff": None})
    for kind, par in ((LOG_POW, 0.75), (LOG_POW, 0.5), (LOGLOG, 0.75), (EXP_LOGLOG, 1.5)):
        fam = PsiFamily(kind, par)
        rows.append({"key": kind, "kind": MODULUS, "params": {"param": par},
                     "expected": fam.expected_verdict, "cutoff": fam.cutoff,
                     "in_range": fam.in_range})
    alpha = round(0.5 - p.H + 0.2, 10)
    rows.append({"key": POWER, "kind": HOLDER, "params": {"alpha": alpha},
                 "expected": CONVERGENT, "cutoff": 1.0})
    return rows


def lookup(key, p, **params):
    if key in (SIN, TANH, TIME_SIN):
        return make_holder(key, p)
    if key == CONSTANT:
        return make_constant(params.get("c", [1.0] * p.d))
    if key in DEFAULT_CUTOFF:
        return make_modulus(PsiFamily(key, float(params.get("param", 0.75))), p).integrand
    if key == POWER:
        return make_power(float(params.get("alpha", 0.5 - p.H + 0.2)), p).integrand
    raise DomainError(f"unknown integrand {key}")
