"""Projection of the tensor of two symmetric increments onto (B_s, B_t).

Lambda0(eps, delta; s, t) is the conditional expectation of
B_{s-eps,s+eps} (x) B_{t-delta,t+delta} / (4 eps delta) given the pair
(B_s, B_t).  It splits into a centered quadratic form W0 plus a deterministic
diagonal part, and tends to W + d2R * I as the radii shrink.
"""
import csv
import math
from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .kernel import DomainError
from .stratonovich import MCEstimate, increment_matrix_batch, integrand_values, I0_batch

BASE = "BASE"
INCREMENT = "INCREMENT"


def _vec(x, d):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (d,):
        raise DomainError(f"expected a vector of length {d}, got shape {x.shape}")
    return x


@dataclass
class ProjectionSample:
    s: float
    t: float
    eps: float
    delta: float
    Z1: np.ndarray
    Z2: np.ndarray
    lambda0: np.ndarray
    det_part: float
    rand_part: np.ndarray


def _pair_covariance(a1, a2, b1, b2, s, t, p):
    # E[(a1 B_s + a2 B_t)(b1 B_s + b2 B_t)] for one coordinate
    gs, gt, r = K.gamma(s, p), K.gamma(t, p), K.eval_R(s, t, p)
    return a1 * b1 * gs + (a1 * b2 + a2 * b1) * r + a2 * b2 * gt


def project_lambda0(eps, delta, s, t, Bs, Bt, p):
    if not (0 < eps < 1 and 0 < delta < 1):
        raise DomainError("radii must lie in (0, 1)")
    c = K.eval_prelimit(eps, delta, s, t, p)
    Bs, Bt = _vec(Bs, p.d), _vec(Bt, p.d)
    z1 = c.lam11e * Bs + c.lam12e * Bt
    z2 = c.lam21d * Bs + c.lam22d * Bt
    mean = float(_pair_covariance(c.lam11e, c.lam12e, c.lam21d, c.lam22d, s, t, p))
    scale = 1.0 / (4 * eps * delta)
    eye = np.eye(p.d)
    rand = scale * (np.outer(z1, z2) - mean * eye)
    det = scale * float(K.planar_increment(s, t, eps, delta, p))
    d = p.d
    return ProjectionSample(
        s=s, t=t, eps=eps, delta=delta,
        Z1=np.repeat(z1[:, None], d, axis=1), Z2=np.repeat(z2[None, :], d, axis=0),
        lambda0=rand + det * eye, det_part=det, rand_part=rand)


def conditional_increments(eps, delta, s, t, Bs, Bt, p):
    """E[B_{s-eps,s+eps} | B] and E[B_{t-delta,t+delta} | B] by a direct 2x2 solve."""
    R = lambda a, b: float(K.eval_R(a, b, p))
    C = np.array([[R(s, s), R(s, t)], [R(s, t), R(t, t)]])
    cov1 = np.array([R(s + eps, s) - R(s - eps, s), R(s + eps, t) - R(s - eps, t)])
    cov2 = np.array([R(t + delta, s) - R(t - delta, s), R(t + delta, t) - R(t - delta, t)])
    X = np.vstack([_vec(Bs, p.d), _vec(Bt, p.d)])
    return np.linalg.solve(C, cov1) @ X, np.linalg.solve(C, cov2) @ X


def nelson_identity_gap(eps, delta, s, t, Bs, Bt, p):
    """Max gap between the product of conditional increments and Z1 Z2/(4 eps delta)."""
    e1, e2 = conditional_increments(eps, delta, s, t, Bs, Bt, p)
    lhs = np.outer(e1 / (2 * eps), e2 / (2 * delta))
    ps = project_lambda0(eps, delta, s, t, Bs, Bt, p)
    rhs = ps.Z1 * ps.Z2 / (4 * eps * delta)
    return float(np.max(np.abs(lhs - rhs)) / max(1.0, float(np.max(np.abs(lhs)))))


def _w_base(s, t, Bs, Bt, p):
    l11, l12, l21, l22 = K.regression_coefficients(s, t, p)
    z1 = l11 * Bs + l12 * Bt
    z2 = l21 * Bs + l22 * Bt
    mean = _pair_covariance(l11, l12, l21, l22, s, t, p)
    return z1, z2, mean


def _eta_ordered(lo, hi, H):
    l11, l12, l21, l22 = K._lambda_ordered(lo, hi, H)
    return l11 + l12, l12, l21 + l22, l22


def _w_increment(s, t, Bs, Bt, p):
    h2 = 2 * p.H
    if s < t:
        e11, e12, e21, e22 = _eta_ordered(s, t, p.H)
        inc = Bt - Bs
        z1 = e11 * Bs + e12 * inc
        z2 = e21 * Bs + e22 * inc
        lo, u = s, t - s
    else:
        # reflection: W(s,t) is the transpose of W(t,s) with the roles swapped
        e11, e12, e21, e22 = _eta_ordered(t, s, p.H)
        inc = Bs - Bt
        z2 = e11 * Bt + e12 * inc
        z1 = e21 * Bt + e22 * inc
        lo, u = t, s - t
    phi = 0.5 * ((lo + u) ** h2 - lo**h2 - u**h2)
    mean = e11 * e21 * lo**h2 + (e11 * e22 + e12 * e21) * phi + e12 * e22 * u**h2
    return z1, z2, mean


def W_eval(s, t, Bs, Bt, p, rep=BASE):
    s, t = float(s), float(t)
    K._check_offdiag(s, t)
    K._check_positive(s, t)
    Bs, Bt = _vec(Bs, p.d), _vec(Bt, p.d)
    if rep == BASE:
        z1, z2, mean = _w_base(s, t, Bs, Bt, p)
    elif rep == INCREMENT:
        z1, z2, mean = _w_increment(s, t, Bs, Bt, p)
    else:
        raise DomainError(f"unknown representation {rep}")
    return np.outer(z1, z2) - float(mean) * np.eye(p.d)


def W_batch(s, t, Bs, Bt, p, rep=BASE):
    """W_eval for many path values at once: Bs, Bt of shape (M, d) -> (M, d, d)."""
    s, t = float(s), float(t)
    K._check_offdiag(s, t)
    K._check_positive(s, t)
    Bs, Bt = np.asarray(Bs, dtype=float), np.asarray(Bt, dtype=float)
    form = _w_base if rep == BASE else _w_increment
    if rep not in (BASE, INCREMENT):
        raise DomainError(f"unknown representation {rep}")
    z1, z2, mean = form(s, t, Bs, Bt, p)
    return np.einsum("ma,mb->mab", z1, z2) - float(mean) * np.eye(Bs.shape[-1])


def marginal_factor(t, p):
    """f(t) = R(T, t) gamma'(t) / gamma(t)."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise K.OriginSingularity("marginal process is singular at t = 0")
    return K.eval_R(p.T, t, p) * K.dgamma(t, p) / K.gamma(t, p)


def M_eval(t, Bt, p):
    t = float(t)
    if not 0 < t <= p.T:
        if t <= 0:
            raise K.OriginSingularity("marginal process is singular at t = 0")
        raise DomainError("t must lie in (0, T]")
    Bt = _vec(Bt, p.d)
    g = float(K.gamma(t, p))
    return float(marginal_factor(t, p)) * (np.outer(Bt, Bt) - g * np.eye(p.d)) / g


def M_batch(t, Bt, p):
    """M_eval for many path values at once: Bt of shape (M, d) -> (M, d, d)."""
    t = float(t)
    if t <= 0:
        raise K.OriginSingularity("marginal process is singular at t = 0")
    Bt = np.asarray(Bt, dtype=float)
    g = float(K.gamma(t, p))
    outer = np.einsum("ma,mb->mab", Bt, Bt) - g * np.eye(Bt.shape[-1])
    return float(marginal_factor(t, p)) * outer / g


@dataclass
class LimitFields:
    W: np.ndarray
    M: np.ndarray
    Psi: np.ndarray
    Lambda: np.ndarray


def limit_fields(s, t, Bs, Bt, p):
    """Limit matrices at (s, t); M and Psi refer to the later time t.

    Psi carries half of M: the marginal correction enters the isometry as
    m(t) I + M_t / 2.
    """
    W = W_eval(s, t, Bs, Bt, p)
    M = M_eval(t, Bt, p)
    eye = np.eye(p.d)
    d2R = float(K.eval_derivatives(s, t, p)[2])
    m = float(K.m_density(t, p)) if t < p.T else float(p.H * t ** (2 * p.H - 1))
    return LimitFields(W=W, M=M, Psi=m * eye + 0.5 * M, Lambda=W + d2R * eye)


@dataclass
class QuadFormSpec:
    Wmat: np.ndarray
    Sigma_bar: np.ndarray


def quad_form_spec(s, t, i, j, p):
    """Coefficient and covariance matrices of W^{ij}(s,t) in increment coordinates."""
    K._check_offdiag(s, t)
    K._check_positive(s, t)
    lo, hi = min(s, t), max(s, t)
    e11, e12, e21, e22 = _eta_ordered(lo, hi, p.H)
    h2 = 2 * p.H
    u = hi - lo
    phi = 0.5 * (hi**h2 - lo**h2 - u**h2)
    S = np.array([[lo**h2, phi], [phi, u**h2]])
    A = np.outer([e11, e12], [e21, e22])
    if i == j:
        return QuadFormSpec(0.5 * (A + A.T), S)
    A4 = np.zeros((4, 4))
    A4[:2, 2:] = A
    return QuadFormSpec(0.5 * (A4 + A4.T), np.block([[S, np.zeros((2, 2))], [np.zeros((2, 2)), S]]))


def closed_norms(s, t, p):
    """(||W(s,t)||_2, ||M_t||_2) with Frobenius aggregation over entries."""
    total = 0.0
    for i in range(p.d):
        for j in range(p.d):
            q = quad_form_spec(s, t, i, j, p)
            P = q.Wmat @ q.Sigma_bar
            total += 2 * np.trace(P @ P)
    normM = math.sqrt(p.d**2 + p.d) * float(marginal_factor(t, p))
    return math.sqrt(total), normM


def lambda_convergence(s, t, Bs, Bt, p, ks):
    """Rows (k, eps, max entrywise error, relative Frobenius error) for eps = delta = 2^-k."""
    lim = limit_fields(s, t, Bs, Bt, p).Lambda
    ref = np.linalg.norm(lim)
    rows = []
    for k in ks:
        e = 2.0 ** (-k)
        L0 = project_lambda0(e, e, s, t, Bs, Bt, p).lambda0
        err = L0 - lim
        rows.append((int(k), e, float(np.max(np.abs(err))), float(np.linalg.norm(err) / ref)))
    return rows


def write_convergence_csv(path, rows, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["k", "eps", "entrywise_error", "norm_error"])
        for r in rows:
            w.writerow([r[0]] + [repr(x) for x in r[1:]])


def antisym_samples(ensemble, g, eps, delta):
    """Per-path anti-symmetric pairing, 0.5 * [I0(eps) I0(delta) - tr(P(eps) P(delta))]."""
    grid = ensemble.grid
    me, md = grid.cells(eps), grid.cells(delta)
    Y = integrand_values(ensemble.data, g, grid)
    I = I0_batch(ensemble.data, g, [me, md], grid, Y=Y)
    Pe = increment_matrix_batch(ensemble.data, g, me, grid, Y=Y)
    Pd = increment_matrix_batch(ensemble.data, g, md, grid, Y=Y)
    tr = np.einsum("mab,mba->m", Pe, Pd)
    return 0.5 * (I[:, 0] * I[:, 1] - tr)


def antisym_check(ensemble, g, eps, delta):
    return MCEstimate.from_samples(antisym_samples(ensemble, g, eps, delta))
