import numpy as np
import pytest
from scipy import integrate, special

from actionlab import TimeGrid, action, catalog, el_process, grad_check, path_actions
from conftest import deterministic_law


def test_action_brownian_kinetic_exact_zero(bm_small):
    est = action(bm_small, catalog.get_lagrangian("kinetic"))
    assert est.mean == 0.0 and est.stderr == 0.0


def test_action_deterministic_exact(grid200):
    c = 1.3
    ens = deterministic_law(grid200, n_paths=64, drift_value=lambda t: c)
    for t_max in (0.5, 1.0):
        est = action(ens, catalog.get_lagrangian("kinetic"), t_max=t_max)
        assert est.mean == pytest.approx(c ** 2 * t_max / 2, abs=1e-12)


def test_action_rejects_bad_horizon(bm_small):
    with pytest.raises(ValueError):
        action(bm_small, catalog.get_lagrangian("kinetic"), t_max=0.0)


def test_action_linearity(pinned_mid):
    kin = catalog.get_lagrangian("kinetic")
    kq = catalog.get_lagrangian("kinetic_quadratic")
    lam = 0.7
    from actionlab.lagrangians import Lagrangian
    combo = Lagrangian(
        name="combo",
        value=lambda t, x, v, a: kin.value(t, x, v, a) + lam * kq.value(t, x, v, a),
        grad_x=lambda t, x, v, a: kin.grad_x(t, x, v, a) + lam * kq.grad_x(t, x, v, a),
        grad_v=lambda t, x, v, a: kin.grad_v(t, x, v, a) + lam * kq.grad_v(t, x, v, a),
        grad_a=lambda t, x, v, a: kin.grad_a(t, x, v, a) + lam * kq.grad_a(t, x, v, a))
    lhs = path_actions(pinned_mid, combo)
    rhs = path_actions(pinned_mid, kin) + lam * path_actions(pinned_mid, kq)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_squared_increment_action_oracle(grid200):
    # independent quadrature: E[Z^2 ln Z^2] for the chi-square density equals
    # ln 2 + digamma(3/2); the kinetic action of the law must match
    f = lambda z: z * z * np.log(z * z) * np.exp(-z * z / 2) / np.sqrt(2 * np.pi)
    quad, _ = integrate.quad(f, 1e-12, 14, limit=400)
    oracle = 2 * quad
    assert oracle == pytest.approx(np.log(2) + special.digamma(1.5), abs=1e-12)

    kin = catalog.get_lagrangian("kinetic")
    n = 20000
    sde = catalog.build_law("squared_increment", grid200, n, seed=201)
    est = action(sde, kin, t_max=1.0)
    assert abs(est.mean - oracle) < 4 * est.stderr + 2.5 / grid200.m
    weighted = catalog.build_law("squared_increment_weighted", grid200, n, seed=202)
    estw = action(weighted, kin, t_max=1.0)
    assert abs(estw.mean - oracle) < 4 * estw.stderr + 2.5 / grid200.m
    # reweighting consistency between the two representations
    comb = np.hypot(est.stderr, estw.stderr)
    assert abs(est.mean - estw.mean) < 4 * comb + 1 / grid200.m


def test_grad_check_kinetic():
    rng = np.random.default_rng(5)
    pts = [(rng.random(), rng.standard_normal(2), rng.standard_normal(2),
            np.eye(2) + 0.1 * rng.standard_normal((2, 2))) for _ in range(5)]
    rep = grad_check(catalog.get_lagrangian("kinetic"), pts)
    assert rep.worst_v < 1e-8 and rep.worst_x < 1e-8


def test_grad_check_quadratic_potential():
    rng = np.random.default_rng(6)
    pts = [(rng.random(), rng.standard_normal(2), rng.standard_normal(2),
            np.eye(2)) for _ in range(5)]
    rep = grad_check(catalog.get_lagrangian("kinetic_quadratic", dim=2), pts)
    assert rep.worst < 1e-8


def test_grad_check_trace_alpha():
    rng = np.random.default_rng(7)
    pts = [(rng.random(), rng.standard_normal(2), rng.standard_normal(2),
            np.eye(2) + 0.2 * abs(rng.standard_normal()) * np.eye(2))
           for _ in range(5)]
    rep = grad_check(catalog.get_lagrangian("trace_alpha_kinetic"), pts)
    assert rep.worst_a < 1e-7 and rep.worst_v < 1e-7


def test_grad_check_taylor_green_pressure():
    rng = np.random.default_rng(8)
    pts = [(rng.random(), rng.random(2) * 2 * np.pi, rng.standard_normal(2),
            np.eye(2)) for _ in range(5)]
    rep = grad_check(catalog.get_lagrangian("kinetic_taylor_green"), pts)
    assert rep.worst < 1e-7


def test_el_process_brownian_zero(bm_small):
    n = el_process(bm_small, catalog.get_lagrangian("kinetic"))
    assert np.max(np.abs(n)) == 0.0


def test_el_process_equals_drift_for_free_lagrangian(pinned_mid):
    n = el_process(pinned_mid, catalog.get_lagrangian("kinetic"))
    assert np.array_equal(n, pinned_mid.drifts)


def test_el_process_pinned_spot_check(pinned_mid):
    # N_t = (y - W_t)/(1 - t) along one path, evaluated by hand
    n = el_process(pinned_mid, catalog.get_lagrangian("kinetic"))
    dt = pinned_mid.grid.dt
    for j in (0, 77, 150):
        w = pinned_mid.states[0, j, 0]
        assert n[0, j, 0] == pytest.approx((1.0 - w) / (1.0 - j * dt), rel=1e-12)


def test_el_process_classical_oscillator_constant():
    # discrete harmonic oscillator: momentum plus force integral telescopes
    g = TimeGrid(1000)
    ens = catalog.build_law("classical_oscillator", g, 4, seed=1)
    n = el_process(ens, catalog.get_lagrangian("kinetic_quadratic"))
    assert np.max(np.abs(n - 1.0)) < 1e-6
    # and the trajectory tracks the classical solution sin(t)
    assert np.max(np.abs(ens.states[0, :, 0] - np.sin(g.times))) < 1e-2
