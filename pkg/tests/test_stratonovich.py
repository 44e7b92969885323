import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from fbmiso import fbm as F
from fbmiso import kernel as K
from fbmiso import stratonovich as S
from fbmiso.stratonovich import IntegrandSpec, MCEstimate

import oracles

P4 = K.ModelParams(0.4)
SIN = IntegrandSpec(lambda t, x: np.sin(x), S.HOLDER, 1.0, 1.0, 1.0, "SIN")


def const(c):
    c = np.asarray(c, dtype=float)
    return IntegrandSpec(lambda t, x: np.broadcast_to(c, np.shape(x)))


def loop_I0(path, gfun, m, grid):
    # node-by-node trapezoid, B = 0 at negative times
    n, dt = grid.n, grid.dt
    tot = 0.0
    for k in range(n + 1):
        w = dt / 2 if k in (0, n) else dt
        back = path[:, k - m] if k - m >= 0 else 0.0
        y = np.asarray(gfun(k * dt, path[:, k]))
        tot += w * float(np.dot(y, path[:, k + m] - back))
    return tot / (2 * m * dt)


def test_constant_integrand_matches_loop():
    p = K.ModelParams(0.4, d=2)
    grid = F.GridSpec(1.0, 256, 2**-4)
    e = F.sample_circulant(grid, p, 3, seed=4)
    c = np.array([1.5, -0.5])
    got = S.I0_batch(e.data, const(c), [4, 16], grid)
    for i in range(3):
        for j, m in enumerate([4, 16]):
            assert got[i, j] == pytest.approx(loop_I0(e.data[i], lambda t, x: c, m, grid), rel=1e-12, abs=1e-14)


def test_constant_integrand_rearrangement():
    # <c, avg of B over [T-eps, T+eps] - (1/2eps) int_0^eps B>, up to O(dt)
    grid = F.GridSpec(1.0, 1024, 2**-5)
    e = F.sample_circulant(grid, P4, 1, seed=8)
    m = grid.cells(2**-5)
    b = e.data[0, 0]
    dt = grid.dt
    n = grid.n
    tail = np.trapezoid(b[n - m: n + m + 1], dx=dt) / (2 * m * dt)
    head = np.trapezoid(b[: m + 1], dx=dt) / (2 * m * dt)
    got = S.I0_riemann(e.data[0], const([2.0]), m, grid)
    assert got == pytest.approx(2 * (tail - head), abs=5 * dt**0.4)


def test_linear_path_value():
    grid = F.GridSpec(1.0, 2**12, 2**-4)
    path = grid.times[None, :]
    for k in (4, 6):
        eps = 2.0**-k
        got = S.I0_riemann(path, const([1.0]), grid.cells(eps), grid)
        assert got == pytest.approx(1 - eps / 4, abs=2 * grid.dt)


def test_quadratic_path_against_fine_quadrature():
    grid = F.GridSpec(1.0, 2**12, 2**-4)
    path = (grid.times**2)[None, :]
    eps = 2.0**-5
    B = lambda r: r * r if r > 0 else 0.0
    ref = integrate.quad(lambda s: B(s) * (B(s + eps) - B(s - eps)), 0, 1, points=[eps], limit=200)[0] / (2 * eps)
    got = S.I0_riemann(path, IntegrandSpec(lambda t, x: x), grid.cells(eps), grid)
    assert got == pytest.approx(ref, abs=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_linearity_per_path(a, b, seed):
    grid = F.GridSpec(1.0, 256, 2**-5)
    e = F.sample_circulant(grid, P4, 4, seed=seed)
    tanh = IntegrandSpec(lambda t, x: np.tanh(x))
    mix = IntegrandSpec(lambda t, x: a * np.sin(x) + b * np.tanh(x))
    cells = [2, 8]
    lhs = S.I0_batch(e.data, mix, cells, grid)
    rhs = a * S.I0_batch(e.data, SIN, cells, grid) + b * S.I0_batch(e.data, tanh, cells, grid)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_horizon_errors():
    grid = F.GridSpec(1.0, 256)
    e = F.sample_circulant(grid, P4, 1, seed=0)
    with pytest.raises(S.HorizonTooShort):
        S.I0_batch(e.data, SIN, [2], grid)
    with pytest.raises(K.DomainError):
        S.I0_samples(e, SIN, [0.001])


def test_exponent_gate():
    bad = IntegrandSpec(SIN.g, S.HOLDER, 1.0, 0.2, 1.0)
    with pytest.raises(K.DomainError):
        bad.check_exponents(P4)
    SIN.check_exponents(K.ModelParams(0.26))
    assert SIN.theta_hat(P4) == pytest.approx(0.4)


def test_sin_second_moment_matches_exact_discrete_value():
    grid = F.GridSpec(1.0, 256, 2**-5)
    e = F.sample_circulant(grid, P4, 10_000, seed=21)
    est = S.mc_second_moment(e, SIN, [2**-5, 2**-7])
    for eps, mc in zip([2**-5, 2**-7], est):
        ref = oracles.sin_discrete_lhs(0.4, 256, grid.cells(eps))
        assert abs(mc.value - ref) <= 3 * mc.std_error


def test_constant_second_moment():
    grid = F.GridSpec(1.0, 256, 2**-5)
    # I0 is linear in B here: exact variance from the covariance matrix
    m = grid.cells(2**-7)
    n, dt = grid.n, grid.dt
    w = np.zeros(grid.n_steps + 1)
    tw = S.trapezoid_weights(n, dt) / (2 * m * dt)
    w[m: n + m + 1] += tw
    w[: n + 1 - m] -= tw[m:]
    t = grid.times
    C = np.asarray(K.eval_R(t[:, None], t[None, :], P4))
    exact = float(w @ C @ w)
    assert exact == pytest.approx(1.0, abs=0.05)
    e = F.sample_circulant(grid, P4, 5000, seed=2)
    mc = S.mc_second_moment(e, const([1.0]), [2**-7])[0]
    assert abs(mc.value - exact) <= 3 * mc.std_error
    cross = S.mc_cross_moment(e, const([1.0]), 2**-7, 2**-6)
    assert cross.value == pytest.approx(1.0, abs=0.1)


def test_cross_moment_definitions():
    grid = F.GridSpec(1.0, 256, 2**-5)
    e = F.sample_circulant(grid, P4, 500, seed=3)
    sm = S.mc_second_moment(e, SIN, [2**-6])[0]
    cm = S.mc_cross_moment(e, SIN, 2**-6, 2**-6)
    assert cm.value == pytest.approx(sm.value, rel=1e-14)
    a = S.mc_cross_moment(e, SIN, 2**-6, 2**-7)
    b = S.mc_cross_moment(e, SIN, 2**-7, 2**-6)
    assert abs(a.value - b.value) <= 3 * a.std_error


def test_increment_matrix_trace_is_I0():
    p = K.ModelParams(0.4, d=3)
    grid = F.GridSpec(1.0, 256, 2**-5)
    e = F.sample_circulant(grid, p, 4, seed=1)
    P = S.increment_matrix_batch(e.data, SIN, 4, grid)
    I = S.I0_batch(e.data, SIN, [4], grid)[:, 0]
    assert np.allclose(np.trace(P, axis1=1, axis2=2), I, rtol=1e-12)


def test_mc_estimate():
    est = MCEstimate.from_samples([1.0, 2.0, 3.0, 4.0])
    assert est.value == 2.5
    assert est.std_error == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert MCEstimate.from_samples([1.0]).std_error == math.inf
    assert est.as_dict()["n_samples"] == 4


def test_extrapolate_picks_last_stable_value():
    eps = [2.0**-k for k in range(5, 10)]
    vals = [1.0 - 0.5 * e**0.5 for e in eps]
    ests = [MCEstimate(v, 5e-3, 100) for v in vals]
    ex = S.extrapolate(ests, eps, 0.5)
    assert ex.index == 4 and ex.stable
    assert ex.fit_value == pytest.approx(1.0, abs=1e-10)
    assert ex.observed_rate == pytest.approx(0.5, abs=1e-10)
    jumpy = [MCEstimate(v, 1e-6, 100) for v in (1.0, 1.1, 1.1, 1.3, 1.6)]
    ex2 = S.extrapolate(jumpy, eps, 0.5)
    assert ex2.index == 2 and ex2.stable
