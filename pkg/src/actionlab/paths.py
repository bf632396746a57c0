"""Time grids, reproducible Euler-Maruyama simulation, and drift/covariance
re-estimation by least-squares regression.

A law of a continuous semi-martingale is represented at desk scale by a
:class:`PathEnsemble`: sampled paths on a uniform grid together with the
per-step drift and diffusion-factor evaluations that generated them.  The
drift and diffusion coefficients of a :class:`SemimartingaleModel` are
*adapted*: their value at step ``j`` may depend only on the path prefix up to
``j``.  That contract is enforced empirically by the prefix probe in
:func:`adaptedness_probe`.

Randomness is counter-based and splittable: path ``i`` of a simulation with
seed ``s`` draws from ``Philox(key=[s, i])``, so ensembles are bit-identical
for any worker-thread count or chunking of the path axis.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.random import Generator, Philox

from ._accum import weighted_mean_stderr

__all__ = [
    "TimeGrid",
    "SemimartingaleModel",
    "PathEnsemble",
    "SimulationError",
    "RankDeficiencyError",
    "simulate",
    "estimate_characteristics",
    "CharacteristicsEstimate",
    "adaptedness_probe",
    "save_ensemble",
    "load_ensemble",
    "export_paths_csv",
]


class SimulationError(RuntimeError):
    """A model coefficient produced a non-finite value during simulation."""


class RankDeficiencyError(RuntimeError):
    """Normal equations of a regression are singular; shrink the feature set."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_j = j/m on [0, 1]."""

    m: int

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("step count m must be >= 1")

    @property
    def dt(self) -> float:
        return 1.0 / self.m

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.m + 1) / self.m

    def index_of(self, t: float) -> int:
        """Nearest grid index for a time in [0, 1]."""
        j = int(round(t * self.m))
        return min(max(j, 0), self.m)

    def probe_indices(self, fractions: Sequence[float], t_max: float = 1.0):
        """Distinct step indices at ``fractions * t_max`` (all < m)."""
        idx = []
        for f in fractions:
            j = min(self.index_of(f * t_max), self.m - 1)
            if not idx or j > idx[-1]:
                idx.append(j)
        return idx


DriftFn = Callable[[int, np.ndarray], np.ndarray]
DiffusionSpec = Union[None, np.ndarray, Callable[[int, np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class SemimartingaleModel:
    """Initial law plus adapted drift and diffusion-factor coefficients.

    ``drift(j, states)`` receives the states array with at least ``j+1``
    filled entries along axis 1 and must return the per-path drift [n, d]
    reading only ``states[:, :j+1, :]``.  ``diffusion_factor`` is ``None``
    (identity), a constant [d, d] matrix, or a callable with the same
    signature returning [n, d, d] (or a broadcastable [d, d]).
    ``initial_sampler(rng)`` draws one initial point per path from its
    dedicated random stream.
    """

    name: str
    dim: int
    initial_sampler: Callable[[Generator], np.ndarray]
    drift: DriftFn
    diffusion_factor: DiffusionSpec = None


@dataclass(frozen=True)
class PathEnsemble:
    """Sampled paths with their per-step characteristics records.

    states:     [n, m+1, d] path values
    drifts:     [n, m, d]   drift evaluations used at each step
    diffusions: [n, m, d, d] diffusion-factor evaluations (alpha = sigma sigma^T)
    weights:    optional [n], nonnegative, mean one; present for laws defined
                by a density against the simulated reference
    t_max:      recommended diagnostics horizon (< 1 for laws whose drift is
                singular at t = 1)
    """

    grid: TimeGrid
    states: np.ndarray
    drifts: np.ndarray
    diffusions: np.ndarray
    seed: int
    weights: Optional[np.ndarray] = None
    label: str = ""
    t_max: float = 1.0

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def alpha(self, j: int) -> np.ndarray:
        """sigma sigma^T at step j, shape [n, d, d]."""
        s = self.diffusions[:, j]
        return np.einsum("nik,njk->nij", s, s)

    def validate(self, n_sample: int = 64) -> None:
        """Check structural invariants on a deterministic subsample."""
        n, m = self.n_paths, self.grid.m
        if self.states.shape != (n, m + 1, self.dim):
            raise ValueError("states shape mismatch")
        if self.drifts.shape != (n, m, self.dim):
            raise ValueError("drifts shape mismatch")
        if self.diffusions.shape != (n, m, self.dim, self.dim):
            raise ValueError("diffusions shape mismatch")
        if not np.isfinite(self.states).all():
            raise ValueError("non-finite states")
        if self.weights is not None:
            w = self.weights
            if w.shape != (n,) or not np.isfinite(w).all() or (w < 0).any():
                raise ValueError("weights must be finite and nonnegative")
            if abs(w.mean() - 1.0) > 1e-12:
                raise ValueError("weights must have mean one within 1e-12")
        take_p = np.linspace(0, n - 1, min(n, n_sample)).astype(int)
        take_j = np.linspace(0, m - 1, min(m, n_sample)).astype(int)
        for j in take_j:
            a = self.alpha(int(j))[take_p]
            if np.max(np.abs(a - np.swapaxes(a, 1, 2))) > 1e-12:
                raise ValueError(f"alpha not symmetric at step {j}")
            if np.min(np.linalg.eigvalsh(a)) < -1e-10:
                raise ValueError(f"alpha not PSD at step {j}")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _fill_noise(model, seed, states, noise, lo, hi):
    m, d = noise.shape[1], noise.shape[2]
    for i in range(lo, hi):
        g = Generator(Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, i]))
        x0 = np.asarray(model.initial_sampler(g), dtype=np.float64).reshape(d)
        states[i, 0] = x0
        noise[i] = g.standard_normal((m, d))


def _euler_chunk(model, grid, states, drifts, diffusions, noise, lo, hi):
    m, d = grid.m, states.shape[2]
    dt = grid.dt
    sqdt = np.sqrt(dt)
    diff = model.diffusion_factor
    const_diff = diff is None or isinstance(diff, np.ndarray)
    for j in range(m):
        prefix = states[lo:hi, : j + 1]
        v = np.asarray(model.drift(j, prefix), dtype=np.float64)
        v = np.broadcast_to(v, (hi - lo, d))
        if not np.isfinite(v).all():
            i = lo + int(np.argwhere(~np.isfinite(v).all(axis=1))[0, 0])
            raise SimulationError(
                f"model '{model.name}': non-finite drift at step {j}, path {i}")
        drifts[lo:hi, j] = v
        db = noise[lo:hi, j] * sqdt
        if diff is None:
            inc = db
        elif const_diff:
            inc = db @ diff.T
        else:
            s = np.asarray(diff(j, prefix), dtype=np.float64)
            s = np.broadcast_to(s, (hi - lo, d, d))
            if not np.isfinite(s).all():
                raise SimulationError(
                    f"model '{model.name}': non-finite diffusion at step {j}")
            diffusions[lo:hi, j] = s
            inc = np.einsum("nij,nj->ni", s, db)
        states[lo:hi, j + 1] = states[lo:hi, j] + v * dt + inc


def simulate(model: SemimartingaleModel, grid: TimeGrid, n_paths: int,
             seed: int, threads: int = 1, label: str = "",
             t_max: float = 1.0) -> PathEnsemble:
    """Euler-Maruyama simulation of ``n_paths`` paths of ``model``.

    Increments for path ``i`` come from the counter-based stream keyed by
    ``(seed, i)``; the result is bit-identical for any ``threads``.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    n, m, d = n_paths, grid.m, model.dim
    states = np.empty((n, m + 1, d))
    drifts = np.empty((n, m, d))
    noise = np.empty((n, m, d))

    diff = model.diffusion_factor
    if diff is None:
        diffusions = np.broadcast_to(np.eye(d), (n, m, d, d))
    elif isinstance(diff, np.ndarray):
        diffusions = np.broadcast_to(np.asarray(diff, dtype=np.float64), (n, m, d, d))
    else:
        diffusions = np.empty((n, m, d, d))

    bounds = [(k * n // max(threads, 1), (k + 1) * n // max(threads, 1))
              for k in range(max(threads, 1))]
    bounds = [(lo, hi) for lo, hi in bounds if hi > lo]
    if len(bounds) <= 1:
        _fill_noise(model, seed, states, noise, 0, n)
        _euler_chunk(model, grid, states, drifts, diffusions, noise, 0, n)
    else:
        with ThreadPoolExecutor(max_workers=len(bounds)) as ex:
            list(ex.map(lambda b: _fill_noise(model, seed, states, noise, *b), bounds))
            list(ex.map(lambda b: _euler_chunk(
                model, grid, states, drifts, diffusions, noise, *b), bounds))

    for arr in (states, drifts):
        _freeze(arr)
    if isinstance(diffusions, np.ndarray) and diffusions.flags.writeable:
        _freeze(diffusions)
    return PathEnsemble(grid=grid, states=states, drifts=drifts,
                        diffusions=diffusions, seed=seed,
                        label=label or model.name, t_max=t_max)


def adaptedness_probe(fn, ensemble: PathEnsemble, steps: Sequence[int],
                      rng_seed: int = 0, max_paths: int = 256,
                      lag_steps: int = 0) -> float:
    """Max change of ``fn(j, states)`` when data after step ``j - lag_steps``
    is perturbed.

    Adapted coefficients return 0.0 (with ``lag_steps=0``); a peeking
    coefficient returns a positive defect.  ``lag_steps > 0`` probes delayed
    operators which must ignore a trailing window of the prefix as well.
    """
    rng = np.random.default_rng(rng_seed)
    n = min(ensemble.n_paths, max_paths)
    base = np.array(ensemble.states[:n], dtype=np.float64)
    worst = 0.0
    for j in steps:
        cut = j + 1 - lag_steps
        if cut < 0:
            continue
        ref = np.asarray(fn(j, base))
        tampered = base.copy()
        tampered[:, cut:] += 1.0 + rng.standard_normal(tampered[:, cut:].shape)
        out = np.asarray(fn(j, tampered))
        worst = max(worst, float(np.max(np.abs(out - ref))) if out.size else 0.0)
    return worst


@dataclass(frozen=True)
class CharacteristicsEstimate:
    """Per-probe regression estimates of drift and alpha on a feature basis."""

    step: int
    t: float
    feature_names: list
    drift_coef: np.ndarray      # [p, d]
    drift_se: np.ndarray        # [p, d]
    alpha_coef: np.ndarray      # [p, d, d]
    alpha_se: np.ndarray        # [p, d, d]
    drift_residual_std: np.ndarray  # [d]


def _wls(phi, y, w):
    """Weighted least squares with coefficient standard errors."""
    n, p = phi.shape
    sw = np.sqrt(w) if w is not None else None
    a = phi if sw is None else phi * sw[:, None]
    b = y if sw is None else y * sw[:, None]
    g = a.T @ a
    cond = np.linalg.cond(g)
    if not np.isfinite(cond) or cond > 1e12:
        raise RankDeficiencyError(
            f"singular normal equations (cond={cond:.3g}); shrink the feature set")
    ginv = np.linalg.inv(g)
    coef = ginv @ (a.T @ b)
    resid = b - a @ coef
    dof = max(n - p, 1)
    sigma2 = np.sum(resid ** 2, axis=0) / dof
    se = np.sqrt(np.outer(np.diag(ginv), sigma2))
    return coef, se, np.sqrt(sigma2)


def estimate_characteristics(ensemble: PathEnsemble, feature_map,
                             probe_steps: Sequence[int], min_paths: int = 1000):
    """Regress increments on prefix features at each probe step.

    ``feature_map(ensemble, j)`` returns ``(features [n, p], names)``.  The
    drift regression targets ``dW/dt`` and the covariance regression targets
    ``dW dW^T / dt``; both return coefficients with standard errors.
    """
    if ensemble.n_paths < min_paths:
        raise ValueError(f"need at least {min_paths} paths for regression")
    dt = ensemble.grid.dt
    d = ensemble.dim
    out = []
    for j in probe_steps:
        phi, names = feature_map(ensemble, j)
        phi = np.asarray(phi, dtype=np.float64)
        dw = (ensemble.states[:, j + 1] - ensemble.states[:, j]) / dt
        c_v, se_v, rs = _wls(phi, dw, ensemble.weights)
        outer = np.einsum("ni,nj->nij", ensemble.states[:, j + 1] - ensemble.states[:, j],
                          ensemble.states[:, j + 1] - ensemble.states[:, j]) / dt
        c_a, se_a, _ = _wls(phi, outer.reshape(ensemble.n_paths, d * d),
                            ensemble.weights)
        out.append(CharacteristicsEstimate(
            step=j, t=j * dt, feature_names=list(names),
            drift_coef=c_v, drift_se=se_v,
            alpha_coef=c_a.reshape(-1, d, d), alpha_se=se_a.reshape(-1, d, d),
            drift_residual_std=rs))
    return out


# -- binary container ---------------------------------------------------------

_MAGIC = b"ACTLAB-ENSEMBLE1"          # 16 bytes
_HEADER = struct.Struct("<QQQqB7x")   # m, n_paths, dim, seed, has_weights, pad


def save_ensemble(ensemble: PathEnsemble, path) -> None:
    """Write the little-endian binary container (16-byte magic + header + arrays)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(ensemble.grid.m, ensemble.n_paths, ensemble.dim,
                              ensemble.seed, 1 if ensemble.weights is not None else 0))
        for arr in (ensemble.states, ensemble.drifts, ensemble.diffusions):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if ensemble.weights is not None:
            fh.write(np.ascontiguousarray(ensemble.weights, dtype="<f8").tobytes())


def load_ensemble(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        magic = fh.read(16)
        if magic != _MAGIC:
            raise ValueError("not an ensemble container (bad magic)")
        m, n, d, seed, has_w = _HEADER.unpack(fh.read(_HEADER.size))
        m, n, d = int(m), int(n), int(d)

        def read(shape):
            count = int(np.prod(shape))
            buf = fh.read(count * 8)
            return _freeze(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())

        states = read((n, m + 1, d))
        drifts = read((n, m, d))
        diffusions = read((n, m, d, d))
        weights = read((n,)) if has_w else None
    return PathEnsemble(grid=TimeGrid(m), states=states, drifts=drifts,
                        diffusions=diffusions, seed=int(seed), weights=weights)


def export_paths_csv(ensemble: PathEnsemble, path, max_paths: int = 20,
                     stride: int = 1) -> None:
    """Plot-ready CSV of a thinned path sample: t, then one column per path/coord."""
    n = min(ensemble.n_paths, max_paths)
    d = ensemble.dim
    times = ensemble.grid.times[::stride]
    cols = ["t"] + [f"path{i}_x{k}" for i in range(n) for k in range(d)]
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    sel = ensemble.states[:n, ::stride]
    for row_j, t in enumerate(times):
        vals = [repr(float(t))]
        vals += [repr(float(sel[i, row_j, k])) for i in range(n) for k in range(d)]
        buf.write(",".join(vals) + "\n")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue().encode())


def summarize_terminal(ensemble: PathEnsemble):
    """Weighted mean and stderr of W_1 and of each coordinate's square."""
    x = ensemble.states[:, -1]
    mean, se = weighted_mean_stderr(x, ensemble.weights)
    mean2, se2 = weighted_mean_stderr(x ** 2, ensemble.weights)
    return (mean, se), (mean2, se2)
