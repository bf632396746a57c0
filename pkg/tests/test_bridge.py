import numpy as np
import pytest
from scipy import integrate

from actionlab import (BridgeProblem, FbsdeSpec, action, bridge_to_model,
                       catalog, delta_marginal, el_certify, el_process,
                       fbsde_simulate, gaussian_marginal,
                       navier_stokes_residual, simulate, sinkhorn_bridge)
from actionlab.bridge import (ConvergenceError, UnsupportedSpecError,
                              _cell_kernel, marginal_from_csv, reference_terminal)


def kl_oracle():
    # relative entropy of N(0,2) against N(0,1) by independent quadrature
    p = lambda x: np.exp(-x * x / 4) / np.sqrt(4 * np.pi)
    q = lambda x: np.exp(-x * x / 2) / np.sqrt(2 * np.pi)
    val, _ = integrate.quad(lambda x: p(x) * np.log(p(x) / q(x)), -20, 20,
                            limit=200)
    return val


def test_marginal_helpers():
    p = gaussian_marginal(0.0, 2.0)
    assert p.shape == (481,) and abs(p.sum() - 1.0) < 1e-12
    d = delta_marginal(0.0)
    assert d.sum() == 1.0 and d[240] == 1.0
    with pytest.raises(ValueError, match="mass"):
        BridgeProblem(p0=d, p1=p * 0.5)


def test_marginal_from_csv(tmp_path):
    path = tmp_path / "marg.csv"
    centers = np.linspace(-1, 1, 21)
    mass = np.exp(-centers ** 2)
    np.savetxt(path, np.stack([centers, mass], axis=1), delimiter=",")
    p, x_min, x_max = marginal_from_csv(path)
    assert abs(p.sum() - 1.0) < 1e-12
    assert x_min == pytest.approx(-1.05) and x_max == pytest.approx(1.05)


def test_kernel_rows_stochastic():
    centers = delta_marginal(0.0) * 0 + np.linspace(-6, 6, 481)
    k = _cell_kernel(np.linspace(-5.9875, 5.9875, 481), 0.025, 0.005)
    assert np.allclose(k.sum(axis=1), 1.0, atol=1e-12)
    assert k.min() >= 0.0


def test_trivial_bridge_reference_marginal(grid200):
    # final marginal equal to the reference heat marginal: potentials vanish
    # and the drift is numerically zero well inside the lattice
    p0 = gaussian_marginal(0.0, 0.25)
    problem = BridgeProblem(p0=p0, p1=p0, x_min=-6, x_max=6)
    p1 = reference_terminal(problem)
    problem = BridgeProblem(p0=p0, p1=p1, x_min=-6, x_max=6)
    sol = sinkhorn_bridge(problem, grid200)
    assert sol.iterations <= 2
    assert np.max(np.abs(sol.log_f[problem.p0 > 0])) < 1e-9
    assert np.max(np.abs(sol.log_g[problem.p1 > 0])) < 1e-9
    centers = problem.centers
    inner = np.abs(centers) <= 2.0
    assert np.max(np.abs(sol.drift_field[:, inner])) < 1e-4


def test_sinkhorn_entropy_matches_kl(grid200):
    problem = BridgeProblem(p0=delta_marginal(0.0), p1=gaussian_marginal(0.0, 2.0))
    sol = sinkhorn_bridge(problem, grid200)
    assert sol.marginal_error < 1e-9
    assert abs(sol.entropy - kl_oracle()) < 2e-3
    # marginal misfit history is monotone
    assert np.all(np.diff(sol.error_history) <= 1e-15)


def test_sinkhorn_harmonic_propagation_exact(grid200):
    problem = BridgeProblem(p0=delta_marginal(0.0), p1=gaussian_marginal(0.0, 2.0))
    sol = sinkhorn_bridge(problem, grid200)
    kstep = _cell_kernel(problem.centers, problem.dx, grid200.dt)
    for j in (0, 57, 133, 199):
        assert np.max(np.abs(sol.h[j] - kstep @ sol.h[j + 1])) < 1e-10


def test_sinkhorn_nonconvergence_error(grid200):
    # a point initial mass fits in two iterations, so cap below that
    problem = BridgeProblem(p0=delta_marginal(0.0), p1=gaussian_marginal(1.5, 0.5))
    with pytest.raises(ConvergenceError):
        sinkhorn_bridge(problem, grid200, tol=1e-12, max_iter=1)


def test_bridge_simulation_terminal_fit_and_entropy_identity(grid200):
    problem = BridgeProblem(p0=delta_marginal(0.0), p1=gaussian_marginal(0.0, 2.0))
    sol = sinkhorn_bridge(problem, grid200)
    model, holder = bridge_to_model(sol)
    ens = simulate(model, grid200, 50_000, seed=71)
    # terminal histogram vs the target on quarter-width bins
    edges = np.linspace(-6, 6, 49)
    hist, _ = np.histogram(ens.states[:, -1, 0], bins=edges)
    hist = hist / ens.n_paths
    centers = problem.centers
    target = np.array([problem.p1[(centers >= a) & (centers < b)].sum()
                       for a, b in zip(edges[:-1], edges[1:])])
    tv = 0.5 * np.abs(hist - target / target.sum()).sum()
    assert tv < 0.02
    # rare excursions past the lattice edge are clamped and counted
    assert holder.clamped < 1e-4 * ens.n_paths * grid200.m
    # action equals the entropy of the fitted coupling (relative-entropy identity)
    est = action(ens, catalog.get_lagrangian("kinetic"))
    assert abs(est.mean - sol.entropy) < 4 * est.stderr + 2e-3
    assert el_certify(ens, catalog.get_lagrangian("kinetic")).verdict


def test_zero_drift_field_gives_brownian(grid200):
    problem = BridgeProblem(p0=delta_marginal(0.0), p1=gaussian_marginal(0.0, 2.0))
    sol = sinkhorn_bridge(problem, grid200)
    sol.drift_field[:] = 0.0
    model, _ = bridge_to_model(sol)
    ens = simulate(model, grid200, 20000, seed=72)
    x1 = ens.states[:, -1, 0]
    assert abs(x1.mean()) < 4 / np.sqrt(ens.n_paths)
    assert abs(x1.var() - 1.0) < 5 * np.sqrt(2 / ens.n_paths)


def test_fbsde_adapted_constancy(grid200):
    from actionlab import TimeGrid
    g = TimeGrid(1000)
    ens = catalog.build_law("oscillator_adapted", g, 1000, seed=73)
    n = el_process(ens, catalog.get_lagrangian("kinetic_quadratic"))
    assert np.max(np.abs(n - n[:, :1])) < 1e-3


def test_fbsde_filtering_riccati_and_certification(grid200):
    spec = FbsdeSpec(dim=1, grad_potential=lambda t, x: x,
                     y0_gaussian=(0.0, 1.0), curvature=1.0,
                     initial_sampler=catalog.point_sampler(np.zeros(1)))
    res = fbsde_simulate(spec, grid200, 20000, seed=74, variant="filtering")
    t = grid200.times[:-1]
    assert np.max(np.abs(res.posterior_var - 1.0 / (1.0 + t))) < 1e-8
    assert el_certify(res.ensemble,
                      catalog.get_lagrangian("kinetic_quadratic")).verdict


def test_fbsde_filtering_with_martingale_noise(grid200):
    # independent Brownian component in the backward equation: still certified
    spec = FbsdeSpec(dim=1, grad_potential=lambda t, x: x,
                     y0_gaussian=(0.0, 1.0), curvature=1.0,
                     z_mode="independent_brownian",
                     initial_sampler=catalog.point_sampler(np.zeros(1)))
    res = fbsde_simulate(spec, grid200, 20000, seed=75, variant="filtering")
    assert el_certify(res.ensemble,
                      catalog.get_lagrangian("kinetic_quadratic")).verdict


def test_fbsde_spec_validation(grid200):
    with pytest.raises(UnsupportedSpecError, match="linear grad V"):
        fbsde_simulate(FbsdeSpec(dim=1, grad_potential=lambda t, x: x ** 3,
                                 y0_gaussian=(0.0, 1.0)),
                       grid200, 2000, seed=1, variant="filtering")
    with pytest.raises(UnsupportedSpecError, match="constant martingale"):
        fbsde_simulate(FbsdeSpec(dim=1, grad_potential=lambda t, x: x,
                                 y0_fn=lambda x0: np.zeros(1),
                                 z_mode="independent_brownian"),
                       grid200, 2000, seed=1, variant="adapted")
    with pytest.raises(UnsupportedSpecError, match="y0_fn"):
        fbsde_simulate(FbsdeSpec(dim=1, grad_potential=lambda t, x: x),
                       grid200, 2000, seed=1, variant="adapted")


def test_navier_stokes_oracles():
    residual, div = navier_stokes_residual(n_space=50, n_time=10)
    assert residual < 1e-10
    assert div < 1e-12


def test_taylor_green_certification(grid200):
    ens = catalog.build_law("taylor_green", grid200, 20000, seed=76)
    assert ens.dim == 2
    rep = el_certify(ens, catalog.get_lagrangian("kinetic_taylor_green"))
    assert rep.verdict, rep.max_abs_statistic
    # wrong potential is detected
    rep_bad = el_certify(ens, catalog.get_lagrangian("kinetic_quadratic", dim=2))
    assert not rep_bad.verdict
