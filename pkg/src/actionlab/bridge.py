"""Constructors of laws that are critical points of the kinetic action:
entropic bridges fitted by iterative proportional fitting, coupled
forward-backward simulation, and a decaying two-dimensional vortex flow.

The bridge solver works on a one-dimensional lattice: the endpoint coupling
of the Brownian reference is rescaled in the log domain until the marginals
match, the terminal potential is propagated backward through the one-step
heat kernel (so discrete space-time harmonicity holds exactly by
construction), and the drift field is the central-difference log-gradient of
that propagated function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import logsumexp, ndtr

from .paths import PathEnsemble, SemimartingaleModel, TimeGrid

__all__ = [
    "BridgeProblem",
    "BridgeSolution",
    "ConvergenceError",
    "KernelUnderflowError",
    "UnsupportedSpecError",
    "gaussian_marginal",
    "delta_marginal",
    "marginal_from_csv",
    "reference_terminal",
    "sinkhorn_bridge",
    "bridge_to_model",
    "export_drift_field_csv",
    "FbsdeSpec",
    "FbsdeResult",
    "fbsde_simulate",
    "taylor_green_velocity",
    "taylor_green_pressure",
    "taylor_green_model",
    "navier_stokes_residual",
]


class ConvergenceError(RuntimeError):
    """Iterative proportional fitting did not reach tolerance."""


class KernelUnderflowError(RuntimeError):
    """Full-interval heat kernel underflows; shrink the lattice."""


class UnsupportedSpecError(ValueError):
    """Requested variant is outside the supported model class."""


@dataclass(frozen=True)
class BridgeProblem:
    """Initial and final marginals as histograms on a uniform 1-d lattice."""

    p0: np.ndarray
    p1: np.ndarray
    x_min: float = -6.0
    x_max: float = 6.0

    def __post_init__(self):
        for name, p in (("p0", self.p0), ("p1", self.p1)):
            p = np.asarray(p, dtype=np.float64)
            if (p < 0).any() or not np.isfinite(p).all():
                raise ValueError(f"{name} must be finite and nonnegative")
            if abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} mass must be 1 within 1e-12")
        if self.p0.shape != self.p1.shape:
            raise ValueError("marginals must share the lattice")

    @property
    def n_cells(self) -> int:
        return self.p0.shape[0]

    @property
    def centers(self) -> np.ndarray:
        dx = (self.x_max - self.x_min) / self.n_cells
        return self.x_min + dx * (np.arange(self.n_cells) + 0.5)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells


def _normalized(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p / p.sum()


def gaussian_marginal(mean: float, var: float, x_min: float = -6.0,
                      x_max: float = 6.0, n_cells: int = 481) -> np.ndarray:
    """Cell-integrated Gaussian masses, renormalized to total one."""
    dx = (x_max - x_min) / n_cells
    edges = x_min + dx * np.arange(n_cells + 1)
    z = (edges - mean) / np.sqrt(var)
    mass = ndtr(z[1:]) - ndtr(z[:-1])
    return _normalized(mass)


def delta_marginal(at: float = 0.0, x_min: float = -6.0, x_max: float = 6.0,
                   n_cells: int = 481) -> np.ndarray:
    """Point mass on the lattice cell containing ``at``."""
    dx = (x_max - x_min) / n_cells
    idx = int(np.clip((at - x_min) / dx, 0, n_cells - 1))
    p = np.zeros(n_cells)
    p[idx] = 1.0
    return p


def marginal_from_csv(path) -> Tuple[np.ndarray, float, float]:
    """Read a 2-column CSV (cell center, mass); returns (masses, x_min, x_max)."""
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    centers, mass = data[:, 0], data[:, 1]
    dx = centers[1] - centers[0]
    if np.max(np.abs(np.diff(centers) - dx)) > 1e-9 * abs(dx):
        raise ValueError("cell centers must be uniformly spaced")
    return _normalized(mass), float(centers[0] - dx / 2), float(centers[-1] + dx / 2)


def _cell_kernel(centers: np.ndarray, dx: float, tau: float) -> np.ndarray:
    """Row-stochastic heat transition between lattice cells over time tau.

    Cell masses are evaluated on the lower Gaussian tail (by symmetry) so far
    cells keep their tiny but strictly positive probabilities instead of
    rounding to 1 - 1 = 0.
    """
    s = np.sqrt(tau)
    gap = centers[None, :] - centers[:, None]
    lo = (gap - dx / 2) / s
    hi = (gap + dx / 2) / s
    k = np.where(gap > 0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
    rows = k.sum(axis=1, keepdims=True)
    return k / rows


def reference_terminal(problem: BridgeProblem) -> np.ndarray:
    """Terminal marginal of the Brownian reference started from p0."""
    k01 = _cell_kernel(problem.centers, problem.dx, 1.0)
    return _normalized(problem.p0 @ k01)


@dataclass
class BridgeSolution:
    problem: BridgeProblem
    grid: TimeGrid
    log_f: np.ndarray            # row potential on the lattice (log domain)
    log_g: np.ndarray            # column potential (log domain)
    h: np.ndarray                # [m+1, L] backward space-time-harmonic function
    drift_field: np.ndarray      # [m, L] log-gradient of h
    entropy: float               # KL of the fitted coupling w.r.t. the reference
    marginal_error: float        # total-variation misfit at convergence
    error_history: np.ndarray
    iterations: int


def sinkhorn_bridge(problem: BridgeProblem, grid: TimeGrid, tol: float = 1e-9,
                    max_iter: int = 10_000) -> BridgeSolution:
    """Fit the endpoint coupling by iterative proportional fitting.

    Runs in the log domain on log pi_ij = f_i + log p0_i + log K_ij + g_j.
    After convergence the terminal potential exp(g) is propagated backward by
    the one-step kernel to all grid times; the drift field is the central
    difference of log h on the lattice.
    """
    centers, dx = problem.centers, problem.dx
    k01 = _cell_kernel(centers, dx, 1.0)
    if k01.min() <= 0.0:
        raise KernelUnderflowError("full-interval kernel underflows; lattice too wide")
    logk = np.log(k01)
    with np.errstate(divide="ignore"):
        logp0 = np.log(problem.p0)
        logp1 = np.log(problem.p1)
    sup0 = problem.p0 > 0
    sup1 = problem.p1 > 0

    log_f = np.zeros(problem.n_cells)
    log_g = np.where(sup1, 0.0, -np.inf)
    history = []
    it = 0
    err = np.inf
    base = np.where(sup0, logp0, -np.inf)
    for it in range(1, max_iter + 1):
        # row fit (exact), then measure the column misfit before fitting it
        log_f = np.where(sup0, -logsumexp(logk + log_g[None, :], axis=1), -np.inf)
        log_denom = logsumexp((base + log_f)[:, None] + logk, axis=0)
        col = np.exp(log_g + log_denom)
        err = 0.5 * np.abs(col - problem.p1).sum()
        history.append(err)
        if err < tol:
            break
        log_g = np.where(sup1, logp1 - log_denom, -np.inf)
    else:
        raise ConvergenceError(
            f"marginal TV error {err:.3e} after {max_iter} iterations (tol {tol:.1e})")

    # coupling entropy relative to the reference: E_pi[f + g]
    with np.errstate(invalid="ignore"):
        logpi = (logp0 + log_f)[:, None] + logk + log_g[None, :]
    pi = np.exp(logpi)
    entropy = float(np.sum(pi * np.where(pi > 0, (log_f[:, None] + log_g[None, :]), 0.0)))

    kstep = _cell_kernel(centers, dx, grid.dt)
    h = np.empty((grid.m + 1, problem.n_cells))
    h[grid.m] = np.exp(log_g)
    for j in range(grid.m - 1, -1, -1):
        h[j] = kstep @ h[j + 1]

    drift = np.zeros((grid.m, problem.n_cells))
    with np.errstate(divide="ignore"):
        logh = np.where(h > 0, np.log(np.where(h > 0, h, 1.0)), -np.inf)
    for j in range(grid.m):
        row = logh[j]
        ok = np.isfinite(row)
        v = np.zeros(problem.n_cells)
        inner = ok[2:] & ok[:-2]
        v[1:-1][inner] = (row[2:][inner] - row[:-2][inner]) / (2 * dx)
        if ok[0] and ok[1]:
            v[0] = (row[1] - row[0]) / dx
        if ok[-1] and ok[-2]:
            v[-1] = (row[-1] - row[-2]) / dx
        drift[j] = v
    return BridgeSolution(problem=problem, grid=grid, log_f=log_f, log_g=log_g,
                          h=h, drift_field=drift, entropy=entropy,
                          marginal_error=float(err),
                          error_history=np.array(history), iterations=it)


class _FieldDrift:
    """Bilinear lookup of a lattice drift field; clamps and counts excursions."""

    def __init__(self, solution: BridgeSolution):
        self.centers = solution.problem.centers
        self.field = solution.drift_field
        self.clamped = 0

    def __call__(self, j: int, prefix: np.ndarray) -> np.ndarray:
        x = prefix[:, j, 0]
        out_of_range = int((x < self.centers[0]).sum() + (x > self.centers[-1]).sum())
        if out_of_range:
            self.clamped += out_of_range
        return np.interp(x, self.centers, self.field[j])[:, None]


def bridge_to_model(solution: BridgeSolution, name: str = "sinkhorn_bridge"):
    """Unit-diffusion model whose drift interpolates the fitted field.

    The initial sampler draws lattice atoms from p0.  Returns
    ``(model, drift_holder)``; the holder exposes ``clamped``, the count of
    drift queries outside the lattice (clamped to the boundary cells).
    """
    cdf = np.cumsum(solution.problem.p0)
    centers = solution.problem.centers
    holder = _FieldDrift(solution)

    def initial_sampler(rng: Generator) -> np.ndarray:
        idx = int(np.searchsorted(cdf, rng.random(), side="right"))
        return np.array([centers[min(idx, len(centers) - 1)]])

    model = SemimartingaleModel(name=name, dim=1, initial_sampler=initial_sampler,
                                drift=holder, diffusion_factor=None)
    return model, holder


def export_drift_field_csv(solution: BridgeSolution, path) -> None:
    """CSV grid of the drift field: header of cell centers, one row per step."""
    lines = ["t," + ",".join(repr(float(c)) for c in solution.problem.centers)]
    for j in range(solution.grid.m):
        vals = ",".join(repr(float(v)) for v in solution.drift_field[j])
        lines.append(f"{repr(j * solution.grid.dt)},{vals}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())


# -- coupled forward-backward simulation --------------------------------------

@dataclass(frozen=True)
class FbsdeSpec:
    """Coupled system dX = sigma dB + Y dt, dY = dZ - grad V(t, X) dt.

    In the adapted variant Y_0 = y0_fn(X_0) and Z is constant, so Y is a
    functional of the X prefix and the drift records are Y itself.  In the
    filtering variant Y_0 is Gaussian and independent of X; the drift records
    are the exact linear-Gaussian posterior means E[Y_j | X prefix], which
    requires grad V(t, x) = curvature * x (scalar, d = 1).
    """

    dim: int
    grad_potential: Callable           # (t, x[n,d]) -> [n,d]
    y0_fn: Optional[Callable] = None   # adapted variant: g(x0) -> [d]
    y0_gaussian: Optional[Tuple[float, float]] = None  # filtering: (mean, var)
    z_mode: str = "constant"           # "constant" | "independent_brownian"
    sigma: Optional[np.ndarray] = None  # constant factor, None = identity
    curvature: Optional[float] = None  # grad V = curvature * x when linear
    initial_sampler: Optional[Callable] = None  # per-path rng -> [d]


@dataclass(frozen=True)
class FbsdeResult:
    ensemble: PathEnsemble
    y: np.ndarray                 # [n, m, d] backward component along the paths
    posterior_var: Optional[np.ndarray] = None  # [m] filtering variance P_j


def fbsde_simulate(spec: FbsdeSpec, grid: TimeGrid, n_paths: int, seed: int,
                   variant: str = "adapted", label: str = "") -> FbsdeResult:
    """Coupled Euler scheme for the forward-backward system."""
    if variant not in ("adapted", "filtering"):
        raise ValueError("variant must be 'adapted' or 'filtering'")
    if variant == "adapted":
        if spec.y0_fn is None:
            raise UnsupportedSpecError("adapted variant needs y0_fn = g(X_0)")
        if spec.z_mode != "constant":
            raise UnsupportedSpecError(
                "adapted variant requires a constant martingale component")
    else:
        if spec.y0_gaussian is None:
            raise UnsupportedSpecError("filtering variant needs a Gaussian Y_0 spec")
        if spec.curvature is None:
            raise UnsupportedSpecError(
                "filtering variant supports only linear grad V (quadratic potential)")
        if spec.dim != 1:
            raise UnsupportedSpecError("filtering variant is scalar (d = 1)")

    n, m, d = n_paths, grid.m, spec.dim
    dt, sqdt = grid.dt, np.sqrt(grid.dt)
    sigma = np.eye(d) if spec.sigma is None else np.asarray(spec.sigma, dtype=np.float64)

    states = np.empty((n, m + 1, d))
    noise = np.empty((n, m, d))
    znoise = np.empty((n, m, d)) if spec.z_mode == "independent_brownian" else None
    y0 = np.empty((n, d))
    for i in range(n):
        g = Generator(Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, i]))
        if spec.initial_sampler is not None:
            states[i, 0] = np.asarray(spec.initial_sampler(g), dtype=np.float64)
        else:
            states[i, 0] = 0.0
        if variant == "filtering":
            mu, var = spec.y0_gaussian
            y0[i] = mu + np.sqrt(var) * g.standard_normal(d)
        else:
            y0[i] = np.asarray(spec.y0_fn(states[i, 0]), dtype=np.float64)
        noise[i] = g.standard_normal((m, d))
        if znoise is not None:
            znoise[i] = g.standard_normal((m, d))

    drifts = np.empty((n, m, d))
    yrec = np.empty((n, m, d))
    y = y0.copy()
    post_var = None
    if variant == "filtering":
        mu, var = spec.y0_gaussian
        mean = np.full(n, mu)
        pvar = float(var)
        s2 = float(sigma[0, 0] ** 2)
        qvar = 1.0 if spec.z_mode == "independent_brownian" else 0.0
        post_var = np.empty(m)

    for j in range(m):
        t = j * dt
        yrec[:, j] = y
        if variant == "adapted":
            drifts[:, j] = y
        else:
            post_var[j] = pvar
            drifts[:, j, 0] = mean
        dx = y * dt + (noise[:, j] * sqdt) @ sigma.T
        states[:, j + 1] = states[:, j] + dx
        if variant == "filtering":
            innov = dx[:, 0] - mean * dt
            gain = pvar * dt / (pvar * dt * dt + s2 * dt)
            mean = mean + gain * innov
            pvar = pvar * s2 / (pvar * dt + s2)
            mean = mean - spec.curvature * states[:, j, 0] * dt
            pvar = pvar + qvar * dt
        gv = np.asarray(spec.grad_potential(t, states[:, j]), dtype=np.float64)
        y = y - gv * dt
        if znoise is not None:
            y = y + znoise[:, j] * sqdt

    diffusions = np.broadcast_to(sigma, (n, m, d, d))
    for arr in (states, drifts):
        arr.setflags(write=False)
    ens = PathEnsemble(grid=grid, states=states, drifts=drifts,
                       diffusions=diffusions, seed=seed,
                       label=label or f"fbsde_{variant}")
    return FbsdeResult(ensemble=ens, y=yrec, posterior_var=post_var)


# -- decaying vortex flow ------------------------------------------------------

def taylor_green_velocity(t, x: np.ndarray) -> np.ndarray:
    """Divergence-free velocity field with amplitude exp(-t)."""
    a = np.exp(-np.asarray(t, dtype=np.float64))
    u1 = a * np.sin(x[..., 0]) * np.cos(x[..., 1])
    u2 = -a * np.cos(x[..., 0]) * np.sin(x[..., 1])
    return np.stack([u1, u2], axis=-1)


def taylor_green_pressure(t, x: np.ndarray) -> np.ndarray:
    """Pressure paired with the vortex velocity (viscosity one half)."""
    a2 = np.exp(-2.0 * np.asarray(t, dtype=np.float64))
    return (a2 / 4.0) * (np.cos(2 * x[..., 0]) + np.cos(2 * x[..., 1]))


def taylor_green_pressure_gradient(t, x: np.ndarray) -> np.ndarray:
    a2 = np.exp(-2.0 * np.asarray(t, dtype=np.float64))
    g1 = -(a2 / 2.0) * np.sin(2 * x[..., 0])
    g2 = -(a2 / 2.0) * np.sin(2 * x[..., 1])
    return np.stack([g1, g2], axis=-1)


def navier_stokes_residual(n_space: int = 50, n_time: int = 10):
    """Pointwise momentum residual and divergence of the vortex pair.

    Evaluates d_t u + (u . grad)u + grad p - (1/2) lap u on a space-time grid
    with every derivative written out explicitly; both returns should sit at
    rounding level for the implemented field.
    """
    xs = np.linspace(0.0, 2 * np.pi, n_space)
    ts = np.linspace(0.0, 1.0, n_time)
    xg, yg = np.meshgrid(xs, xs, indexing="ij")
    worst_mom = 0.0
    worst_div = 0.0
    for t in ts:
        a = np.exp(-t)
        u1 = a * np.sin(xg) * np.cos(yg)
        u2 = -a * np.cos(xg) * np.sin(yg)
        dtu1, dtu2 = -u1, -u2
        du1x = a * np.cos(xg) * np.cos(yg)
        du1y = -a * np.sin(xg) * np.sin(yg)
        du2x = a * np.sin(xg) * np.sin(yg)
        du2y = -a * np.cos(xg) * np.cos(yg)
        lap_u1 = -2 * u1
        lap_u2 = -2 * u2
        a2 = np.exp(-2 * t)
        dpx = -(a2 / 2.0) * np.sin(2 * xg)
        dpy = -(a2 / 2.0) * np.sin(2 * yg)
        r1 = dtu1 + u1 * du1x + u2 * du1y + dpx - 0.5 * lap_u1
        r2 = dtu2 + u1 * du2x + u2 * du2y + dpy - 0.5 * lap_u2
        worst_mom = max(worst_mom, float(np.max(np.abs(r1))), float(np.max(np.abs(r2))))
        worst_div = max(worst_div, float(np.max(np.abs(du1x + du2y))))
    return worst_mom, worst_div


def taylor_green_model(grid: TimeGrid) -> SemimartingaleModel:
    """Unit-diffusion planar model with drift -u(1 - t, x), started uniformly
    on the periodic cell.  The matching potential for certification is
    p(1 - t, x), exposed in the Lagrangian registry."""
    dt = grid.dt

    def drift(j, prefix):
        return -taylor_green_velocity(1.0 - j * dt, prefix[:, j])

    def initial_sampler(rng: Generator) -> np.ndarray:
        return rng.random(2) * 2 * np.pi

    return SemimartingaleModel(name="taylor_green", dim=2,
                               initial_sampler=initial_sampler, drift=drift,
                               diffusion_factor=None)
