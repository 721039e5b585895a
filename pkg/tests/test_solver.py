import math

import numpy as np
import pytest
from scipy.integrate import cumulative_trapezoid, quad
from scipy.special import beta

from marge_ude.core import ParticleParams, TruncatedTrajectoryError
from marge_ude.flowfields import StillFluid, VortexField, material_derivative
from marge_ude.solver import (
    SolveConfig,
    ab_integral,
    basset_rate,
    build_quadrature,
    g_tilde,
    history_direct,
    history_increment,
    solve_marge,
)

VORTEX = VortexField()
HEAVY = ParticleParams(R=0.968, S=1.0, G=np.array([0.0, 0.0, 1.0]))
TABLES = {m: build_quadrature(256, m) for m in (1, 2)}


def kernel_moment(k: int, T: float) -> float:
    """int_0^T tau^k (T - tau)^(-1/2) dtau."""
    return T ** (k + 0.5) * beta(k + 1, 0.5)


# -- quadrature -------------------------------------------------------------


def test_order1_first_step_weights():
    mu = TABLES[1].mu[1]
    assert mu[0] == pytest.approx(4 / 3, abs=1e-14)
    assert mu[1] == pytest.approx(2 / 3, abs=1e-14)


def test_first_row_weights_against_adaptive_integration():
    # linear interpolant w(s) = w0 (1 - s) + w1 s in s = (t_1 - tau) / h
    a, _ = quad(lambda s: (1 - s) / math.sqrt(s), 0, 1)
    b, _ = quad(lambda s: s / math.sqrt(s), 0, 1)
    np.testing.assert_allclose(TABLES[1].mu[1], [a, b], rtol=1e-10)


@pytest.mark.parametrize("order", [1, 2])
@pytest.mark.parametrize("h", [0.1, 0.013])
def test_sum_rule(order, h):
    for n in range(1, 257):
        lhs = math.sqrt(h) * TABLES[order].mu[n].sum()
        assert lhs == pytest.approx(2 * math.sqrt(n * h), rel=1e-12)


@pytest.mark.parametrize("order", [1, 2])
def test_weights_finite_and_leading_positive(order):
    for row in TABLES[order].mu[1:]:
        assert np.all(np.isfinite(row))
        assert row[0] > 0


@pytest.mark.parametrize("order", [1, 2])
def test_polynomial_exactness(order):
    h = 0.07
    table = TABLES[order]
    # the order-2 table falls back to linear on its single-interval first row
    n_start = 1 if order == 1 else 2
    for degree in range(order + 1):
        for n in range(n_start, 65):
            tau = h * np.arange(n + 1)
            approx = table.integrate(tau**degree, h)
            exact = kernel_moment(degree, n * h)
            assert approx == pytest.approx(exact, rel=1e-11), (degree, n)


def test_order2_first_row_is_linear():
    np.testing.assert_array_equal(TABLES[2].mu[1], TABLES[1].mu[1])


def test_quadratic_example_n4():
    h = 0.1
    tau = h * np.arange(5)
    approx = TABLES[2].integrate(tau**2, h)
    T = 4 * h
    # closed form: T^(5/2) * 16/15
    assert approx == pytest.approx(16 / 15 * T**2.5, rel=1e-12)


@pytest.mark.parametrize("order", [1, 2])
def test_sin_convergence_order(order):
    errors = []
    for h in (1 / 16, 1 / 32, 1 / 64, 1 / 128):
        n = int(round(1 / h))
        err = 0.0
        for k in range(1, n + 1):
            T = k * h
            exact, _ = quad(np.sin, 0, T, weight="alg", wvar=(0, -0.5), epsabs=1e-14, epsrel=1e-13)
            approx = TABLES[order].integrate(np.sin(h * np.arange(k + 1)), h)
            err = max(err, abs(approx - exact))
        errors.append(err)
    rates = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
    assert min(rates) >= order - 0.2, rates


def test_build_quadrature_rejects_bad_arguments():
    with pytest.raises(ValueError):
        build_quadrature(0)
    with pytest.raises(ValueError):
        build_quadrature(4, order=3)


# -- right-hand side and Adams-Bashforth ------------------------------------


def test_g_tilde_still_fluid_is_gravity_only():
    p = ParticleParams(R=0.5, S=2.0, G=np.array([0.3, -0.1, 1.0]))
    s = StillFluid().sample(np.zeros(3), 0.0)
    np.testing.assert_array_equal(g_tilde(np.zeros(3), s, np.zeros(3), p), -(1 - p.R) * p.G)


def test_g_tilde_tracer_zero(rng):
    p = ParticleParams(R=1.0, S=1.0, G=np.array([0.0, 0.0, 1.0]))
    for _ in range(5):
        x = rng.uniform(-1, 1, 3)
        s = VORTEX.sample(x, 0.7)
        assert np.all(g_tilde(np.zeros(3), s, s.u, p) == 0.0)


def test_g_tilde_term_by_term(rng):
    p = ParticleParams(R=0.8, S=1.7, G=np.array([0.1, 0.2, 0.9]))
    for _ in range(10):
        x, w, t = rng.uniform(-1, 1, 3), rng.normal(size=3), rng.uniform(0, 5)
        s = VORTEX.sample(x, t)
        v = w + s.u
        dudt = s.du_dt_partial + np.array([sum(s.grad_u[i, j] * v[j] for j in range(3)) for i in range(3)])
        shear = np.array([sum(w[j] * s.grad_u[i, j] for j in range(3)) for i in range(3)])
        expected = (p.R - 1) * dudt - (p.R / p.S) * w - p.R * shear - (1 - p.R) * p.G
        np.testing.assert_allclose(g_tilde(w, s, v, p), expected, rtol=1e-13, atol=1e-15)


def test_ab_constant_and_linear():
    c = np.array([1.0, -2.0, 0.5])
    for order in (1, 2):
        np.testing.assert_allclose(ab_integral([c, c], 0.1, order), 0.1 * c, rtol=1e-15)
    # G(t) = a + b t sampled at t_{n-1}, t_n; exact integral over [t_n, t_n + h]
    a, b, h, tn = 0.3, -1.7, 0.05, 2.0
    exact = a * h + b * ((tn + h) ** 2 - tn**2) / 2
    got = ab_integral([np.array(a + b * (tn - h)), np.array(a + b * tn)], h, 2)
    assert float(got) == pytest.approx(exact, abs=1e-14)


def test_ab_example_and_startup():
    got = ab_integral([np.zeros(3), np.array([1.0, 0, 0])], 0.1, 2)
    np.testing.assert_allclose(got, [0.15, 0, 0], atol=1e-16)
    np.testing.assert_array_equal(ab_integral([np.ones(3)], 0.1, 2), 0.1 * np.ones(3))
    with pytest.raises(ValueError):
        ab_integral([], 0.1, 2)


# -- stepping and the full solve --------------------------------------------


def test_single_step_hand_oracle():
    R, S, h = 0.968, 1.0, 0.1
    G = np.array([0.0, 0.0, -1.0])
    p = ParticleParams(R=R, S=S, G=G)
    traj = solve_marge(np.array([0.2, 0.1, 0.0]), None, SolveConfig(h, 1, StillFluid(), p))
    xi = math.sqrt(h) * R * math.sqrt(3 / (S * math.pi))
    w1 = h * (-(1 - R) * -1.0) / (1 + xi * 4 / 3)
    np.testing.assert_allclose(traj.w[1], [0.0, 0.0, w1], rtol=1e-14, atol=0)
    np.testing.assert_array_equal(traj.y[1], traj.y[0])
    # H_1 = -xi * mu[1][0] * w_1 since w_0 = 0
    assert traj.H[1, 2] == pytest.approx(-xi * 4 / 3 * w1, rel=1e-14)


def test_still_fluid_equilibrium():
    p = ParticleParams(R=0.5, S=1.0, G=np.zeros(3))
    traj = solve_marge(np.array([0.3, -0.2, 0.1]), None, SolveConfig(0.1, 50, StillFluid(), p))
    assert np.all(traj.w == 0.0)
    assert np.all(traj.y == traj.y[0])
    assert np.all(traj.H == 0.0)


def test_tracer_limit_exact_zero():
    p = ParticleParams(R=1.0, S=1.0, G=np.array([0.0, 0.0, 1.0]))
    traj = solve_marge(np.array([0.5, 0.3, 0.1]), None, SolveConfig(0.1, 100, VORTEX, p))
    assert np.all(traj.w == 0.0)
    assert np.all(traj.H == 0.0)


def test_vortex_run_length():
    traj = solve_marge(np.array([0.5, 0.3, 0.1]), None, SolveConfig(0.1, 100, VORTEX, HEAVY))
    assert len(traj) == 101
    assert traj.t[-1] == pytest.approx(10.0)


def test_history_constant_w():
    h, c = 0.1, np.array([1.0, -0.5, 2.0])
    coef = HEAVY.basset_coefficient
    xi = math.sqrt(h) * coef
    w_hist = np.tile(c, (41, 1))
    for n in (1, 7, 40):
        H = history_direct(w_hist, TABLES[2], n, xi)
        np.testing.assert_allclose(H, -coef * 2 * math.sqrt(n * h) * c, rtol=1e-12)


def test_history_all_zero():
    w_hist = np.zeros((11, 3))
    for n in range(10):
        assert np.all(history_increment(w_hist, TABLES[2], n, 0.3) == 0.0)


@pytest.mark.parametrize("order", [1, 2])
def test_increments_telescope_to_direct(order):
    h = 0.1
    cfg = SolveConfig(h, 100, VORTEX, HEAVY, order)
    traj = solve_marge(np.array([0.4, -0.6, 0.2]), None, cfg)
    for n in range(len(traj)):
        direct = history_direct(traj.w, TABLES[order], n, cfg.xi)
        np.testing.assert_allclose(traj.H[n], direct, rtol=1e-12, atol=1e-15)


def test_H_equals_scaled_quadrature():
    cfg = SolveConfig(0.1, 60, VORTEX, HEAVY)
    traj = solve_marge(np.array([-0.3, 0.7, 0.0]), None, cfg)
    for n in (5, 33, 60):
        quadv = TABLES[2].integrate(traj.w[: n + 1], cfg.h)
        np.testing.assert_allclose(traj.H[n], -HEAVY.basset_coefficient * quadv, rtol=1e-12, atol=1e-15)


def test_self_convergence_order():
    y0 = np.array([0.5, 0.3, 0.1])
    finals = []
    for h in (0.02, 0.01, 0.005):
        finals.append(solve_marge(y0, None, SolveConfig(h, int(round(1 / h)), VORTEX, HEAVY)).y[-1])
    p = math.log2(np.linalg.norm(finals[0] - finals[1]) / np.linalg.norm(finals[1] - finals[2]))
    assert 1.7 <= p <= 2.3


def test_relative_speed_decays_in_still_fluid():
    p = ParticleParams(R=0.7, S=1.5, G=np.zeros(3))
    traj = solve_marge(np.zeros(3), np.array([1.0, -0.5, 0.2]), SolveConfig(0.05, 200, StillFluid(), p))
    speed = np.linalg.norm(traj.w, axis=1)
    assert np.all(np.diff(speed) <= 1e-15)
    assert speed[-1] < 0.1 * speed[0]
    # agrees with a fine-step reference
    fine = solve_marge(np.zeros(3), np.array([1.0, -0.5, 0.2]), SolveConfig(0.0125, 800, StillFluid(), p))
    np.testing.assert_allclose(traj.w[-1], fine.w[-1], atol=5e-3)


def test_determinism():
    cfg = SolveConfig(0.1, 80, VORTEX, HEAVY)
    a = solve_marge(np.array([0.1, 0.2, 0.3]), None, cfg)
    b = solve_marge(np.array([0.1, 0.2, 0.3]), None, cfg)
    assert a.q.tobytes() == b.q.tobytes()
    assert a.H.tobytes() == b.H.tobytes()


def test_domain_exit_truncates():
    from marge_ude.flowfields import sample_field_on_grid

    axes = [np.linspace(-1, 1, 9)] * 3
    grid = sample_field_on_grid(VORTEX, axes, np.linspace(0, 20, 5))
    p = ParticleParams(R=0.2, S=5.0, G=np.array([0.0, 0.0, 3.0]))
    with pytest.raises(TruncatedTrajectoryError) as info:
        solve_marge(np.array([0.0, 0.5, 0.8]), None, SolveConfig(0.1, 200, grid, p))
    assert info.value.step < 200
    assert info.value.partial is not None


def test_basset_rate_second_order_for_smooth_start():
    y0 = np.array([0.5, 0.3, 0.1])
    # G balancing the initial fluid acceleration makes dw/dt vanish at t0
    p = ParticleParams(R=0.968, S=1.0, G=-material_derivative(VORTEX.sample(y0, 0.0)))
    errs = []
    for h in (0.1, 0.05, 0.025):
        traj = solve_marge(y0, None, SolveConfig(h, int(round(10 / h)), VORTEX, p))
        rec = cumulative_trapezoid(basset_rate(traj), traj.t, axis=0, initial=0.0)
        errs.append(np.abs(rec - traj.H).max())
    assert errs[0] / errs[1] >= 3.5 and errs[1] / errs[2] >= 3.5
