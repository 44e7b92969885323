"""Acceptance criteria, one test (or parametrized family) per criterion.

Each test records a PASS/FAIL line through the ``verdict_line`` fixture and
then asserts the same condition, so the terminal summary lists every verdict.
"""
import functools

import numpy as np
import pytest

from fbmiso import fbm as F
from fbmiso import isometry as I
from fbmiso import kernel as K
from fbmiso import projection as PR
from fbmiso import quadrature as Q
from fbmiso import stratonovich as S
from fbmiso.integrands import EXP_LOGLOG, LOG_POW, PsiFamily, make_holder, make_modulus, make_power
from fbmiso.stratonovich import MCEstimate

import oracles

P4 = K.ModelParams(0.4)


# 1. lemma suite

@pytest.mark.parametrize("H", [0.26, 0.30, 0.35, 0.40, 0.45, 0.49])
def test_c01_lemma_suite(H, verdict_line):
    rep = K.run_lemma_suite(64, K.ModelParams(H))
    worst = max(rep.results, key=lambda r: r.max_violation)
    ok = rep.total_violations == 0
    verdict_line(f"C1 lemma suite H={H}", ok,
                 f"violations={rep.total_violations} worst={worst.name}:{worst.max_violation:.2e}")
    assert ok


# 2. Paley-Wiener oracle

def random_steps(count, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        k = int(rng.integers(1, 9))
        breaks = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, k - 1)), [1.0]])
        out.append((breaks, rng.normal(size=k)))
    return out


STEPS = random_steps(20, 2024)
# 2 cells per radius at n = 2^12 is the finest the grid supports
STEP_EPS = [2.0**-k for k in range(5, 12)]


@functools.lru_cache(maxsize=None)
def step_ensemble():
    return F.sample_circulant(F.GridSpec(1.0, 2**12, max(STEP_EPS)), P4, 10_000, seed=0)


def deterministic(f):
    return S.IntegrandSpec(lambda t, x: np.asarray(f(t))[..., None] * np.ones_like(x), S.RAW)


def test_c02_step_quadrature(verdict_line):
    errs = []
    for breaks, levels in STEPS:
        ref = Q.rkhs_norm_step(breaks, levels, P4)
        got = Q.rkhs_norm_quadrature(Q.step_function(breaks, levels), Q.MeshSpec(2**12), P4)
        errs.append(abs(got - ref) / ref)
    ok = max(errs) <= 0.02
    verdict_line("C2 step norms, quadrature vs closed form", ok, f"max_rel_err={max(errs):.2e}")
    assert ok


def test_c02_step_refinement_improves():
    breaks, levels = max(STEPS, key=lambda s: len(s[1]))
    ref = Q.rkhs_norm_step(breaks, levels, P4)
    f = Q.step_function(breaks, levels)
    errs = [abs(Q.rkhs_norm_quadrature(f, Q.MeshSpec(n), P4) - ref) for n in (2**8, 2**10, 2**12)]
    assert errs[2] < errs[0]


def test_c02_step_monte_carlo(verdict_line):
    e = step_ensemble()
    worst, fails = 0.0, 0
    for breaks, levels in STEPS:
        ests = S.mc_second_moment(e, deterministic(Q.step_function(breaks, levels)), STEP_EPS)
        ex = S.extrapolate(ests, STEP_EPS, 2 * P4.H)
        z = (ex.value - Q.rkhs_norm_step(breaks, levels, P4)) / ex.std_error
        worst = max(worst, abs(z))
        fails += not (ex.stable and abs(z) <= 3)
    ok = fails == 0
    verdict_line("C2 step norms, MC second moment vs closed form", ok,
                 f"M=10000 failures={fails}/20 max|z|={worst:.2f}")
    assert ok


# 3. projection convergence

def test_c03_projection_convergence(verdict_line):
    rows = PR.lambda_convergence(0.5, 1.0, [0.3], [-0.7], P4, range(4, 15))
    err = np.array([r[3] for r in rows])
    ok = err[-1] <= 1e-3 and bool(np.all(np.diff(err[-5:]) < 0))
    verdict_line("C3 projection convergence", ok, f"rel_err(k=14)={err[-1]:.2e}")
    assert ok


# 4. closed-form second moments

PROBES = [(0.5, 1.0), (0.2, 0.9), (0.8, 0.3), (0.45, 0.5), (0.05, 0.6)]


@pytest.mark.parametrize("s,t", PROBES)
def test_c04_second_moments(s, t, verdict_line):
    p = K.ModelParams(0.4, d=2)
    Bs, Bt = oracles.pair_draws(s, t, p.H, p.d, 100_000, seed=int(1e3 * s + 1e6 * t))
    w_ref = 0.0
    for i in range(2):
        for j in range(2):
            q = PR.quad_form_spec(s, t, i, j, p)
            P = q.Wmat @ q.Sigma_bar
            w_ref += 2 * np.trace(P @ P)
    f = float(PR.marginal_factor(t, p))
    m_ref = 2 * (2 * f * f) + 2 * f * f
    w = MCEstimate.from_samples((PR.W_batch(s, t, Bs, Bt, p) ** 2).sum(axis=(1, 2)))
    m = MCEstimate.from_samples((PR.M_batch(t, Bt, p) ** 2).sum(axis=(1, 2)))
    zw = (w.value - w_ref) / w.std_error
    zm = (m.value - m_ref) / m.std_error
    ok = abs(zw) <= 3 and abs(zm) <= 3
    verdict_line(f"C4 second moments at ({s},{t})", ok, f"z_W={zw:.2f} z_M={zm:.2f}")
    assert ok


# 5. anti-symmetric pairing

def test_c05_antisymmetry(verdict_line):
    p = K.ModelParams(0.4, d=2)
    e = F.sample_circulant(F.GridSpec(1.0, 2**11, 2**-5), p, 10_000, seed=5)
    g = S.IntegrandSpec(lambda t, x: np.stack([np.sin(x[..., 1]), np.cos(x[..., 0])], axis=-1))
    est = PR.antisym_check(e, g, 2**-7, 2**-7)
    ok = abs(est.value) <= 3 * est.std_error
    verdict_line("C5 anti-symmetric pairing, g=(sin x2, cos x1)", ok,
                 f"I_ant={est.value:.2e} se={est.std_error:.1e}")
    assert ok


# 6. end-to-end isometry

@functools.lru_cache(maxsize=None)
def sin_report(d, H):
    return I.verify_isometry(make_holder("SIN"), K.ModelParams(H, d=d), I.Budget())


def _isometry_line(rep, d, H):
    return (f"LHS={rep.lhs.value:.4f}+-{rep.lhs.std_error:.4f} RHS={rep.rhs.value:.4f}+-{rep.rhs.std_error:.4f} "
            f"gap={rep.gap:+.4f} tol={rep.combined_tolerance:.4f} rel={rep.rel_gap:.2%} verdict={rep.verdict}")


MIXING_XFAIL = pytest.mark.xfail(
    strict=True,
    reason="for d >= 2 the cross-coordinate pairing of sin(B^i) with sin(B^j) does not vanish; "
           "its mean accounts for the whole gap (see test_c06_gap_is_the_cross_pairing)")


@pytest.mark.slow
@pytest.mark.parametrize("d,H", [
    (1, 0.35), (1, 0.45),
    pytest.param(2, 0.35, marks=MIXING_XFAIL),
    pytest.param(2, 0.45, marks=MIXING_XFAIL),
])
def test_c06_isometry_sin(d, H, verdict_line):
    rep = sin_report(d, H)
    ok = rep.verdict == I.PASS and abs(rep.rel_gap) <= 0.10
    verdict_line(f"C6 isometry g=sin d={d} H={H}", ok, _isometry_line(rep, d, H))
    assert ok


@pytest.mark.slow
@pytest.mark.parametrize("H", [0.35, 0.45])
def test_c06_gap_is_the_cross_pairing(H):
    # once the measured pairing is accounted for, the two sides agree
    rep = sin_report(2, H)
    assert rep.antisym.value > 10 * rep.antisym.std_error
    assert abs(rep.gap_less_antisym) <= rep.combined_tolerance + 3 * rep.antisym.std_error
    exact = oracles.sin_exact_limit(2, 1.0, H)
    assert abs(rep.lhs.value - exact) <= 3 * rep.lhs.std_error + 0.01 * exact


# 7. kappa integrability

def test_c07_kappa_integrability(verdict_line):
    conv = Q.kappa_band_integrals(1.5, P4, levels=22)
    div = Q.kappa_band_integrals(1.8, P4, levels=16)
    tail = np.asarray(div.increments[-7:])
    ok = (conv.verdict == Q.CONVERGENT and div.verdict == Q.DIVERGENT
          and bool(np.all(np.diff(tail) >= 0)))
    verdict_line("C7 kappa^q band integrals", ok, f"q=1.5:{conv.verdict} q=1.8:{div.verdict}")
    assert ok


# 8. membership verdicts

def test_c08_membership(verdict_line):
    got = {
        "LOG_POW(0.75)": make_modulus(PsiFamily(LOG_POW, 0.75), P4).membership(P4).verdict,
        "LOG_POW(0.5)": make_modulus(PsiFamily(LOG_POW, 0.5), P4).membership(P4).verdict,
        "EXP_LOGLOG(1.5)": make_modulus(PsiFamily(EXP_LOGLOG, 1.5), P4).membership(P4).verdict,
        "x^0.15": make_power(0.15, P4).membership(P4).verdict,
    }
    want = {"LOG_POW(0.75)": Q.CONVERGENT, "LOG_POW(0.5)": Q.DIVERGENT,
            "EXP_LOGLOG(1.5)": Q.CONVERGENT, "x^0.15": Q.CONVERGENT}
    try:
        make_power(0.5 - P4.H, P4)
        rejected = False
    except Q.BandDivergence:
        rejected = True
    ok = got == want and rejected
    verdict_line("C8 membership verdicts", ok,
                 " ".join(f"{k}:{v}" for k, v in got.items()) + f" threshold_rejected={rejected}")
    assert ok


# 9. representation equivalence

def test_c09_representations(verdict_line):
    rng = np.random.default_rng(9)
    worst_w, worst_eta = 0.0, 0.0
    for _ in range(1000):
        H = rng.uniform(0.26, 0.49)
        s, t = rng.uniform(0.01, 1.0, 2)
        if abs(s - t) < 1e-3:
            continue
        p = K.ModelParams(H, d=2)
        Bs, Bt = rng.standard_normal(2), rng.standard_normal(2)
        a = PR.W_eval(s, t, Bs, Bt, p, PR.BASE)
        b = PR.W_eval(s, t, Bs, Bt, p, PR.INCREMENT)
        worst_w = max(worst_w, np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a))))
        kp = K.eval_lambda_limit(s, t, p)
        lam = (kp.lambda11, kp.lambda12, kp.lambda21, kp.lambda22)
        eta = (kp.eta11, kp.eta12, kp.eta21, kp.eta22)
        sums = (lam[0] + lam[1], lam[1], lam[2] + lam[3], lam[3])
        # the increment-basis regression solved independently, for s < t
        lo, hi = min(s, t), max(s, t)
        ref = oracles.increment_regression_mp(lo, hi, H)
        kq = K.eval_lambda_limit(lo, hi, p)
        own = (kq.eta11, kq.eta12, kq.eta21, kq.eta22)
        for x, y in ((eta, sums), (own[:2], ref[:2]), (own[2:], ref[2:])):
            scale = max(abs(v) for v in y)
            worst_eta = max(worst_eta, max(abs(u - v) for u, v in zip(x, y)) / scale)
    ok = worst_w <= 1e-10 and worst_eta <= 1e-12
    verdict_line("C9 BASE vs INCREMENT and eta identities", ok,
                 f"max_rel_W={worst_w:.1e} max_rel_eta={worst_eta:.1e}")
    assert ok


# 10. sampler validation

def test_c10_samplers(verdict_line):
    grid = F.GridSpec(1.0, 256)
    probes = [(0.25, 0.5), (0.5, 1.0), (1.0, 1.0), (0.125, 0.875), (0.5, 0.5), (0.75, 0.8125)]
    ch = F.sample_cholesky(grid, P4, 10_000, seed=101)
    ci = F.sample_circulant(grid, P4, 10_000, seed=102)
    zc = F.validate_ensemble(ch, probes).max_abs_z
    zi = F.validate_ensemble(ci, probes).max_abs_z
    ks = F.ks_terminal(ch, ci)
    ok = zc <= 4 and zi <= 4 and ks > 0.01
    verdict_line("C10 sampler validation", ok, f"max|z| cholesky={zc:.2f} circulant={zi:.2f} KS_p={ks:.3f}")
    assert ok
