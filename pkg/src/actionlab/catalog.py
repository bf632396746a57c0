"""Named registries of laws, Lagrangians, shifts, maps, potentials and
symmetry families, shared by the CLI and the test suite.

Law builders have signature ``build(grid, n_paths, seed, threads=1, **params)``
and return a :class:`~actionlab.paths.PathEnsemble`.  Everything else is a
factory taking keyword parameters.  Unknown names raise ``KeyError`` with the
list of valid entries, so configuration mistakes surface immediately.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Dict

import numpy as np
from numpy.random import Generator

from . import bridge as _bridge
from .diagnostics import NoetherFamily
from .lagrangians import Lagrangian
from .paths import PathEnsemble, SemimartingaleModel, TimeGrid, simulate
from .shifts import AdaptedShift
from .transform import SpaceTimeMap

__all__ = [
    "LAWS", "LAGRANGIANS", "SHIFTS", "MAPS", "FAMILIES", "POTENTIALS",
    "get_law", "get_lagrangian", "get_shift", "get_map", "get_family",
    "build_law", "make_state_features", "make_test_feature_map",
    "point_sampler", "normal_sampler",
]


def _lookup(registry: Dict, kind: str, name: str):
    try:
        return registry[name]
    except KeyError:
        known = ", ".join(sorted(registry))
        raise KeyError(f"unknown {kind} '{name}'; registered: {known}") from None


# -- feature maps --------------------------------------------------------------

def make_state_features(degree: int = 2, include_initial: bool = False):
    """Prefix features at step j: 1, state coords, optional initial coords,
    and second-order state monomials when degree >= 2."""

    def feature_map(ensemble: PathEnsemble, j: int):
        x = ensemble.states[:, j]
        n, d = x.shape
        feats = [np.ones(n)]
        names = ["1"]
        for k in range(d):
            feats.append(x[:, k])
            names.append(f"x{k}")
        if include_initial:
            x0 = ensemble.states[:, 0]
            for k in range(d):
                feats.append(x0[:, k])
                names.append(f"x0_{k}")
        if degree >= 2:
            for k in range(d):
                for l in range(k, d):
                    feats.append(x[:, k] * x[:, l])
                    names.append(f"x{k}*x{l}")
        return np.stack(feats, axis=1), names

    return feature_map


def make_test_feature_map(fns, names):
    """Feature map from explicit callables state -> column."""

    def feature_map(ensemble: PathEnsemble, j: int):
        x = ensemble.states[:, j]
        return np.stack([np.asarray(f(x), dtype=np.float64) for f in fns], axis=1), list(names)

    return feature_map


# -- initial samplers -----------------------------------------------------------

def point_sampler(x0):
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))

    def sampler(rng: Generator) -> np.ndarray:
        return x0

    return sampler


def normal_sampler(mean, std, dim: int):
    def sampler(rng: Generator) -> np.ndarray:
        return mean + std * rng.standard_normal(dim)

    return sampler


# -- potentials -----------------------------------------------------------------

def _pot_zero(dim):
    return (lambda t, x: np.zeros(x.shape[:-1]),
            lambda t, x: np.zeros_like(x), 0.0)


def _pot_quadratic(dim, k=1.0):
    return (lambda t, x: 0.5 * k * np.einsum("...d,...d->...", x, x),
            lambda t, x: k * x, float(k))


def _pot_x1_squared(dim):
    def grad(t, x):
        g = np.zeros_like(x)
        g[..., 0] = 2.0 * x[..., 0]
        return g

    return (lambda t, x: x[..., 0] ** 2, grad, None)


def _pot_taylor_green(dim):
    # time-reversed pressure of the vortex pair
    def value(t, x):
        return _bridge.taylor_green_pressure(1.0 - t, x)

    def grad(t, x):
        return _bridge.taylor_green_pressure_gradient(1.0 - t, x)

    return (value, grad, None)


POTENTIALS: Dict[str, Callable] = {
    "zero": _pot_zero,
    "quadratic": _pot_quadratic,
    "x1_squared": _pot_x1_squared,
    "taylor_green_pressure": _pot_taylor_green,
}


# -- Lagrangians ----------------------------------------------------------------

def _kinetic(**_):
    return Lagrangian(
        name="kinetic",
        value=lambda t, x, v, a: 0.5 * np.einsum("...d,...d->...", v, v),
        grad_x=lambda t, x, v, a: np.zeros_like(x),
        grad_v=lambda t, x, v, a: v,
        grad_a=lambda t, x, v, a: np.zeros_like(a))


def _kinetic_minus_potential(potential: str, name: str, **params):
    def factory(**kw):
        merged = dict(params)
        merged.update(kw)
        dim = merged.pop("dim", 1)
        vfun, gfun, _ = POTENTIALS[potential](dim, **merged)
        return Lagrangian(
            name=name,
            value=lambda t, x, v, a: 0.5 * np.einsum("...d,...d->...", v, v) - vfun(t, x),
            grad_x=lambda t, x, v, a: -gfun(t, x),
            grad_v=lambda t, x, v, a: v,
            grad_a=lambda t, x, v, a: np.zeros_like(a))

    return factory


def _trace_alpha_kinetic(**_):
    return Lagrangian(
        name="trace_alpha_kinetic",
        value=lambda t, x, v, a: np.trace(a, axis1=-2, axis2=-1)
        * np.einsum("...d,...d->...", v, v),
        grad_x=lambda t, x, v, a: np.zeros_like(x),
        grad_v=lambda t, x, v, a: 2.0 * np.trace(a, axis1=-2, axis2=-1)[..., None] * v,
        grad_a=lambda t, x, v, a: np.einsum("...d,...d->...", v, v)[..., None, None]
        * np.eye(a.shape[-1]))


LAGRANGIANS: Dict[str, Callable[..., Lagrangian]] = {
    "kinetic": _kinetic,
    "kinetic_quadratic": _kinetic_minus_potential("quadratic", "kinetic_quadratic"),
    "kinetic_x1sq": _kinetic_minus_potential("x1_squared", "kinetic_x1sq"),
    "kinetic_taylor_green": _kinetic_minus_potential(
        "taylor_green_pressure", "kinetic_taylor_green", dim=2),
    "trace_alpha_kinetic": _trace_alpha_kinetic,
}


# -- laws -----------------------------------------------------------------------

def _law_brownian(grid, n_paths, seed, threads=1, dim=1, x0=0.0):
    model = SemimartingaleModel(
        name="brownian", dim=dim,
        initial_sampler=point_sampler(np.full(dim, x0)),
        drift=lambda j, prefix: np.zeros((prefix.shape[0], dim)),
        diffusion_factor=None)
    return simulate(model, grid, n_paths, seed, threads=threads)


def _law_brownian_drift_t(grid, n_paths, seed, threads=1, dim=1):
    dt = grid.dt

    def drift(j, prefix):
        v = np.zeros((prefix.shape[0], dim))
        v[:, 0] = j * dt
        return v

    model = SemimartingaleModel(name="brownian_drift_t", dim=dim,
                                initial_sampler=point_sampler(np.zeros(dim)),
                                drift=drift, diffusion_factor=None)
    return simulate(model, grid, n_paths, seed, threads=threads)


def _law_ornstein_uhlenbeck(grid, n_paths, seed, threads=1, dim=1, rate=1.0, x0=0.0):
    def drift(j, prefix):
        return -rate * prefix[:, j]

    model = SemimartingaleModel(name="ornstein_uhlenbeck", dim=dim,
                                initial_sampler=point_sampler(np.full(dim, x0)),
                                drift=drift, diffusion_factor=None)
    return simulate(model, grid, n_paths, seed, threads=threads)


def _law_pinned_brownian(grid, n_paths, seed, threads=1, dim=1, x0=0.0, y=1.0):
    dt = grid.dt
    target = np.full(dim, y, dtype=np.float64)

    def drift(j, prefix):
        return (target - prefix[:, j]) / (1.0 - j * dt)

    model = SemimartingaleModel(name="pinned_brownian", dim=dim,
                                initial_sampler=point_sampler(np.full(dim, x0)),
                                drift=drift, diffusion_factor=None)
    return simulate(model, grid, n_paths, seed, threads=threads,
                    t_max=1.0 - grid.dt)


def _anchor_index(grid: TimeGrid, anchor: float) -> int:
    a = anchor * grid.m
    if abs(a - round(a)) > 1e-9:
        raise ValueError("anchor time must sit on the grid (anchor * m integer)")
    return int(round(a))


def _squared_increment_drift(x, x_anchor, t):
    d = x - x_anchor
    return 2.0 * d / (1.0 - t + d * d)


def _law_squared_increment(grid, n_paths, seed, threads=1, anchor=0.5):
    """Law absolutely continuous w.r.t. the Wiener measure with density
    proportional to the squared increment after the anchor time, realized as
    its non-Markovian SDE."""
    dt = grid.dt
    ja = _anchor_index(grid, anchor)

    def drift(j, prefix):
        if j < ja:
            return np.zeros((prefix.shape[0], 1))
        return _squared_increment_drift(prefix[:, j, 0], prefix[:, ja, 0],
                                        j * dt)[:, None]

    model = SemimartingaleModel(name="squared_increment", dim=1,
                                initial_sampler=point_sampler(np.zeros(1)),
                                drift=drift, diffusion_factor=None)
    return simulate(model, grid, n_paths, seed, threads=threads)


def _law_squared_increment_weighted(grid, n_paths, seed, threads=1, anchor=0.5):
    """Same law represented by density weights on Wiener paths, with the drift
    records evaluated from the closed-form drift along those paths."""
    base = _law_brownian(grid, n_paths, seed, threads=threads, dim=1)
    ja = _anchor_index(grid, anchor)
    x = base.states[:, :, 0]
    w = (x[:, -1] - x[:, ja]) ** 2 / (1.0 - anchor)
    w = w * (n_paths / w.sum())
    drifts = np.zeros_like(base.drifts)
    times = grid.times[:-1]
    mask = times >= anchor
    drifts[:, mask, 0] = _squared_increment_drift(
        x[:, :-1][:, mask], x[:, ja][:, None], times[None, mask])
    drifts.setflags(write=False)
    return replace(base, drifts=drifts, weights=w,
                   label="squared_increment_weighted")


def _law_sinkhorn_bridge(grid, n_paths, seed, threads=1, final="gaussian",
                         final_mean=0.0, final_var=2.0, initial_at=0.0,
                         x_min=-6.0, x_max=6.0, n_cells=481, tol=1e-9,
                         max_iter=10_000):
    p0 = _bridge.delta_marginal(initial_at, x_min, x_max, n_cells)
    if final == "gaussian":
        p1 = _bridge.gaussian_marginal(final_mean, final_var, x_min, x_max, n_cells)
    elif final == "reference":
        p1 = _bridge.reference_terminal(
            _bridge.BridgeProblem(p0=p0, p1=p0, x_min=x_min, x_max=x_max))
    else:
        raise ValueError("final must be 'gaussian' or 'reference'")
    problem = _bridge.BridgeProblem(p0=p0, p1=p1, x_min=x_min, x_max=x_max)
    solution = _bridge.sinkhorn_bridge(problem, grid, tol=tol, max_iter=max_iter)
    model, _holder = _bridge.bridge_to_model(solution)
    ens = simulate(model, grid, n_paths, seed, threads=threads,
                   label="sinkhorn_bridge")
    return ens


def _oscillator_spec(dim, curvature, potential, x0, y0):
    if potential == "quadratic":
        _, gfun, curv = POTENTIALS["quadratic"](dim, k=curvature)
    elif potential == "x1_squared":
        _, gfun, curv = POTENTIALS["x1_squared"](dim)
    else:
        raise ValueError("oscillator potential must be 'quadratic' or 'x1_squared'")
    x0 = np.full(dim, x0, dtype=np.float64) if np.isscalar(x0) else np.asarray(x0, float)
    y0 = np.full(dim, y0, dtype=np.float64) if np.isscalar(y0) else np.asarray(y0, float)
    return gfun, curv, x0, y0


def _law_oscillator_adapted(grid, n_paths, seed, threads=1, dim=1,
                            curvature=1.0, potential="quadratic",
                            x0=1.0, y0=0.0, sigma_scale=1.0):
    gfun, _, x0v, y0v = _oscillator_spec(dim, curvature, potential, x0, y0)
    spec = _bridge.FbsdeSpec(dim=dim, grad_potential=lambda t, x: gfun(t, x),
                             y0_fn=lambda x_init: y0v,
                             sigma=sigma_scale * np.eye(dim),
                             initial_sampler=point_sampler(x0v))
    return _bridge.fbsde_simulate(spec, grid, n_paths, seed,
                                  variant="adapted").ensemble


def _law_oscillator_filtering(grid, n_paths, seed, threads=1, curvature=1.0,
                              x0=0.0, y0_mean=0.0, y0_var=1.0):
    gfun, curv, x0v, _ = _oscillator_spec(1, curvature, "quadratic", x0, 0.0)
    spec = _bridge.FbsdeSpec(dim=1, grad_potential=lambda t, x: gfun(t, x),
                             y0_gaussian=(y0_mean, y0_var), curvature=curv,
                             initial_sampler=point_sampler(x0v))
    return _bridge.fbsde_simulate(spec, grid, n_paths, seed,
                                  variant="filtering").ensemble


def _law_classical_oscillator(grid, n_paths, seed, threads=1):
    """Deterministic harmonic oscillator (zero diffusion): the classical
    Euler-Lagrange solution embedded as a point law."""
    return _law_oscillator_adapted(grid, n_paths, seed, threads=threads, dim=1,
                                   x0=0.0, y0=1.0, sigma_scale=0.0)


def _law_taylor_green(grid, n_paths, seed, threads=1):
    model = _bridge.taylor_green_model(grid)
    return simulate(model, grid, n_paths, seed, threads=threads)


LAWS: Dict[str, Callable[..., PathEnsemble]] = {
    "brownian": _law_brownian,
    "brownian_drift_t": _law_brownian_drift_t,
    "ornstein_uhlenbeck": _law_ornstein_uhlenbeck,
    "pinned_brownian": _law_pinned_brownian,
    "squared_increment": _law_squared_increment,
    "squared_increment_weighted": _law_squared_increment_weighted,
    "sinkhorn_bridge": _law_sinkhorn_bridge,
    "oscillator_adapted": _law_oscillator_adapted,
    "oscillator_nonradial": lambda grid, n, seed, threads=1, **kw: _law_oscillator_adapted(
        grid, n, seed, threads=threads, dim=2, potential="x1_squared",
        x0=kw.pop("x0", (1.0, 0.0)), y0=kw.pop("y0", 0.0), **kw),
    "oscillator_filtering": _law_oscillator_filtering,
    "classical_oscillator": _law_classical_oscillator,
    "taylor_green": _law_taylor_green,
}


# -- shifts ---------------------------------------------------------------------

def _shift_constant(coord=0, scale=1.0, dim=1):
    vec = np.zeros(dim)
    vec[coord] = scale

    def derivative(j, states):
        return np.broadcast_to(vec, (states.shape[0], dim))

    return AdaptedShift(name=f"constant[{coord}]", derivative=derivative)


def _shift_state(**_):
    def derivative(j, states):
        return states[:, j]

    return AdaptedShift(name="state", derivative=derivative)


def _shift_tanh_state(scale=1.0, **_):
    def derivative(j, states):
        return np.tanh(scale * states[:, j])

    return AdaptedShift(name="tanh_state", derivative=derivative)


def make_plus_minus_shift(grid: TimeGrid, coord=0, scale=1.0, dim=1, split=0.5):
    vec = np.zeros(dim)
    vec[coord] = scale
    j_split = int(round(split * grid.m))

    def derivative(j, states):
        sgn = 1.0 if j < j_split else -1.0
        return np.broadcast_to(sgn * vec, (states.shape[0], dim))

    return AdaptedShift(name=f"plus_minus[{coord}]", derivative=derivative)


def make_wave_shift(grid: TimeGrid, kind="sine", k=1, coord=0, dim=1, scale=1.0):
    vec = np.zeros(dim)
    vec[coord] = scale
    fn = np.sin if kind == "sine" else np.cos

    def derivative(j, states):
        return np.broadcast_to(fn(2 * np.pi * k * j * grid.dt) * vec,
                               (states.shape[0], dim))

    return AdaptedShift(name=f"{kind}{k}[{coord}]", derivative=derivative)


def make_random_shift(grid: TimeGrid, seed: int, dim=1):
    """Randomized adapted shift: trigonometric time profiles times bounded
    state envelopes, with coefficients drawn from the given seed."""
    rng = np.random.default_rng(seed)
    n_terms = 3
    amps = rng.uniform(0.3, 1.0, size=n_terms)
    freqs = rng.integers(1, 5, size=n_terms)
    phases = rng.uniform(0, 2 * np.pi, size=n_terms)
    kinds = rng.integers(0, 3, size=n_terms)

    def envelope(kind, x):
        if kind == 0:
            return np.ones(x.shape[0])
        if kind == 1:
            return np.tanh(x[:, 0])
        return np.sin(x[:, 0])

    def derivative(j, states):
        t = j * grid.dt
        x = states[:, j]
        out = np.zeros((states.shape[0], dim))
        for a, f, ph, kind in zip(amps, freqs, phases, kinds):
            out[:, 0] += a * np.cos(2 * np.pi * f * t + ph) * envelope(kind, x)
        return out

    return AdaptedShift(name=f"random[{seed}]", derivative=derivative)


def make_random_endpoint_zero_shift(grid: TimeGrid, seed: int, dim=1):
    """Randomized adapted shift that vanishes pathwise at t = 1.

    Each term freezes a bounded state envelope at a grid time s and rides a
    full-period wave on [s, 1]; the wave sums to zero over its own sub-grid,
    so the terminal value cancels exactly on every path while the derivative
    before s is zero and after s depends only on the frozen prefix value.
    """
    rng = np.random.default_rng(seed)
    m = grid.m
    n_terms = 3
    starts = rng.integers(0, m // 2, size=n_terms)
    # one cycle per window: keeps the derivative slow relative to the 2/n
    # delay of the block operators, so reconstruction improves with n
    freqs = np.ones(n_terms, dtype=int)
    amps = rng.uniform(0.3, 1.0, size=n_terms)
    kinds = rng.integers(0, 3, size=n_terms)
    use_sin = rng.integers(0, 2, size=n_terms)

    def envelope(kind, frozen):
        if kind == 0:
            return np.ones(frozen.shape[0])
        if kind == 1:
            return np.tanh(frozen[:, 0])
        return np.sin(frozen[:, 0])

    def derivative(j, states):
        out = np.zeros((states.shape[0], dim))
        for j0, f, a, kind, sin_flag in zip(starts, freqs, amps, kinds, use_sin):
            if j < j0:
                continue
            span = m - j0
            phase = 2 * np.pi * f * (j - j0) / span
            wave = np.sin(phase) if sin_flag else np.cos(phase)
            out[:, 0] += a * wave * envelope(kind, states[:, j0])
        return out

    return AdaptedShift(name=f"random_ez[{seed}]", derivative=derivative)


SHIFTS: Dict[str, Callable] = {
    "constant": lambda grid, **kw: _shift_constant(**kw),
    "state": lambda grid, **kw: _shift_state(**kw),
    "tanh_state": lambda grid, **kw: _shift_tanh_state(**kw),
    "plus_minus": make_plus_minus_shift,
    "sine": lambda grid, **kw: make_wave_shift(grid, kind="sine", **kw),
    "cosine": lambda grid, **kw: make_wave_shift(grid, kind="cosine", **kw),
    "random": make_random_shift,
    "random_ez": make_random_endpoint_zero_shift,
}


# -- space-time maps ------------------------------------------------------------

def _map_identity(dim=1):
    eye = np.eye(dim)
    return SpaceTimeMap(name="identity",
                        map_fn=lambda t, x: x,
                        jacobian=lambda t, x: eye,
                        inverse=lambda t, y: y)


def _map_affine(matrix=None, offset=None, dim=1):
    a = np.asarray(matrix, dtype=np.float64) if matrix is not None else np.eye(dim)
    b = np.asarray(offset, dtype=np.float64) if offset is not None else np.zeros(a.shape[0])
    ainv = np.linalg.inv(a)
    return SpaceTimeMap(name="affine",
                        map_fn=lambda t, x: x @ a.T + b,
                        jacobian=lambda t, x: a,
                        inverse=lambda t, y: (y - b) @ ainv.T)


def _map_sine_squash(amplitude=0.2, dim=1):
    amp = float(amplitude)
    if not abs(amp) < 1.0:
        raise ValueError("amplitude must lie in (-1, 1) for invertibility")

    def map_fn(t, x):
        return x + amp * np.sin(x)

    def jacobian(t, x):
        n, d = x.shape
        out = np.zeros((n, d, d))
        diag = 1.0 + amp * np.cos(x)
        for k in range(d):
            out[:, k, k] = diag[:, k]
        return out

    def hessian(t, x):
        n, d = x.shape
        out = np.zeros((n, d, d, d))
        second = -amp * np.sin(x)
        for k in range(d):
            out[:, k, k, k] = second[:, k]
        return out

    def inverse(t, y):
        x = y.copy()
        for _ in range(40):
            f = x + amp * np.sin(x) - y
            x = x - f / (1.0 + amp * np.cos(x))
            if np.max(np.abs(f)) < 1e-14:
                break
        return x

    return SpaceTimeMap(name="sine_squash", map_fn=map_fn, jacobian=jacobian,
                        hessian=hessian, inverse=inverse)


def _field_coordinate(dim=1):
    eye = np.eye(dim)
    return SpaceTimeMap(name="coordinate", map_fn=lambda t, x: x,
                        jacobian=lambda t, x: eye)


def _field_square(dim=1, subtract_t=False):
    def map_fn(t, x):
        out = x ** 2
        return out - t if subtract_t else out

    def jacobian(t, x):
        n, d = x.shape
        out = np.zeros((n, d, d))
        for k in range(d):
            out[:, k, k] = 2.0 * x[:, k]
        return out

    def hessian(t, x):
        n, d = x.shape
        out = np.zeros((n, d, d, d))
        for k in range(d):
            out[:, k, k, k] = 2.0
        return out

    dt_fn = (lambda t, x: -np.ones_like(x)) if subtract_t else None
    return SpaceTimeMap(name="square_minus_t" if subtract_t else "square",
                        map_fn=map_fn, jacobian=jacobian, hessian=hessian,
                        dt_fn=dt_fn)


MAPS: Dict[str, Callable[..., SpaceTimeMap]] = {
    "identity": _map_identity,
    "affine": _map_affine,
    "sine_squash": _map_sine_squash,
    "coordinate": _field_coordinate,
    "square": lambda **kw: _field_square(subtract_t=False, **kw),
    "square_minus_t": lambda **kw: _field_square(subtract_t=True, **kw),
}


# -- symmetry families ----------------------------------------------------------

def _family_translation(coord=0, dim=1):
    vec = np.zeros(dim)
    vec[coord] = 1.0
    zero = np.zeros((dim, dim))

    def maps(eps):
        return _map_affine(matrix=np.eye(dim), offset=eps * vec, dim=dim)

    return NoetherFamily(name=f"translation[{coord}]",
                         generator=lambda t, x: np.broadcast_to(vec, x.shape),
                         grad_generator=lambda t, x: zero,
                         maps=maps)


def _family_rotation(**_):
    jmat = np.array([[0.0, -1.0], [1.0, 0.0]])

    def maps(eps):
        c, s = np.cos(eps), np.sin(eps)
        return _map_affine(matrix=np.array([[c, -s], [s, c]]), dim=2)

    return NoetherFamily(name="rotation",
                         generator=lambda t, x: x @ jmat.T,
                         grad_generator=lambda t, x: jmat,
                         maps=maps)


FAMILIES: Dict[str, Callable[..., NoetherFamily]] = {
    "translation": _family_translation,
    "rotation": _family_rotation,
}


# -- lookups --------------------------------------------------------------------

def get_law(name: str) -> Callable:
    return _lookup(LAWS, "law", name)


def build_law(name: str, grid: TimeGrid, n_paths: int, seed: int,
              threads: int = 1, **params) -> PathEnsemble:
    return get_law(name)(grid, n_paths, seed, threads=threads, **params)


def get_lagrangian(name: str, **params) -> Lagrangian:
    return _lookup(LAGRANGIANS, "lagrangian", name)(**params)


def get_shift(name: str, grid: TimeGrid, **params) -> AdaptedShift:
    return _lookup(SHIFTS, "shift", name)(grid, **params)


def get_map(name: str, **params) -> SpaceTimeMap:
    return _lookup(MAPS, "map", name)(**params)


def get_family(name: str, **params) -> NoetherFamily:
    return _lookup(FAMILIES, "family", name)(**params)
