"""Pluggable Lagrangians, the Monte Carlo action, and gradient checks.

A Lagrangian evaluates L(t, x, v, a) together with its gradients in x, v and
the matrix argument a.  All callables are vectorized: x, v carry shape
[..., d], a carries [..., d, d], and values come back with the leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._accum import weighted_mean_stderr
from .paths import PathEnsemble

__all__ = [
    "Lagrangian",
    "ActionEstimate",
    "action",
    "path_actions",
    "el_process",
    "grad_check",
    "GradCheckReport",
]


@dataclass(frozen=True)
class Lagrangian:
    """L(t, x, v, a) with gradients; evaluators must be thread-safe."""

    name: str
    value: Callable
    grad_x: Callable
    grad_v: Callable
    grad_a: Callable


@dataclass(frozen=True)
class ActionEstimate:
    mean: float
    stderr: float
    n_paths: int
    m: int

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("stderr must be nonnegative")


def _step_alpha(ensemble: PathEnsemble, j: int) -> np.ndarray:
    s = ensemble.diffusions[:, j]
    return np.einsum("nik,njk->nij", s, s)


def path_actions(ensemble: PathEnsemble, lagrangian: Lagrangian,
                 t_max: float = 1.0) -> np.ndarray:
    """Per-path left-rectangle sums of L over steps with t_j < t_max, shape [n]."""
    if not 0.0 < t_max <= 1.0:
        raise ValueError("t_max must lie in (0, 1]")
    grid = ensemble.grid
    total = np.zeros(ensemble.n_paths)
    for j in range(grid.m):
        t = j * grid.dt
        if t >= t_max:
            break
        val = lagrangian.value(t, ensemble.states[:, j], ensemble.drifts[:, j],
                               _step_alpha(ensemble, j))
        total += np.asarray(val, dtype=np.float64) * grid.dt
    return total


def action(ensemble: PathEnsemble, lagrangian: Lagrangian,
           t_max: float = 1.0) -> ActionEstimate:
    """Monte Carlo estimate of the expected pathwise action."""
    per_path = path_actions(ensemble, lagrangian, t_max)
    mean, se = weighted_mean_stderr(per_path, ensemble.weights)
    return ActionEstimate(mean=mean, stderr=se, n_paths=ensemble.n_paths,
                          m=ensemble.grid.m)


def el_process(ensemble: PathEnsemble, lagrangian: Lagrangian) -> np.ndarray:
    """Sampled process N_j = grad_v L(t_j) - sum_{k<j} grad_x L(t_k) dt, [n, m, d].

    A law satisfies the Euler-Lagrange condition exactly when this process is
    a martingale; ``diagnostics.el_certify`` runs that test.
    """
    grid = ensemble.grid
    n, m, d = ensemble.drifts.shape
    out = np.empty((n, m, d))
    cum = np.zeros((n, d))
    for j in range(m):
        t = j * grid.dt
        x, v = ensemble.states[:, j], ensemble.drifts[:, j]
        a = _step_alpha(ensemble, j)
        out[:, j] = np.asarray(lagrangian.grad_v(t, x, v, a), dtype=np.float64) - cum
        cum = cum + np.asarray(lagrangian.grad_x(t, x, v, a), dtype=np.float64) * grid.dt
    return out


@dataclass(frozen=True)
class GradCheckReport:
    worst_x: float
    worst_v: float
    worst_a: float
    epsilon: dict

    @property
    def worst(self) -> float:
        return max(self.worst_x, self.worst_v, self.worst_a)


def grad_check(lagrangian: Lagrangian, sample_points: Sequence,
               eps_list: Sequence[float] = (1e-4, 1e-5, 1e-6)) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``sample_points`` is an iterable of (t, x, v, a) tuples.  For every block
    the report carries the worst relative error at the epsilon that minimizes
    it (the smallest stable epsilon of the list).
    """
    errs = {"x": {}, "v": {}, "a": {}}
    for eps in eps_list:
        worst = {"x": 0.0, "v": 0.0, "a": 0.0}
        for t, x, v, a in sample_points:
            x = np.asarray(x, dtype=np.float64)
            v = np.asarray(v, dtype=np.float64)
            a = np.asarray(a, dtype=np.float64)
            d = x.shape[0]
            gx = np.asarray(lagrangian.grad_x(t, x, v, a), dtype=np.float64)
            gv = np.asarray(lagrangian.grad_v(t, x, v, a), dtype=np.float64)
            ga = np.asarray(lagrangian.grad_a(t, x, v, a), dtype=np.float64)
            for k in range(d):
                e = np.zeros(d)
                e[k] = eps
                fd = (lagrangian.value(t, x + e, v, a)
                      - lagrangian.value(t, x - e, v, a)) / (2 * eps)
                worst["x"] = max(worst["x"], abs(fd - gx[k]) / max(1.0, abs(gx[k])))
                fd = (lagrangian.value(t, x, v + e, a)
                      - lagrangian.value(t, x, v - e, a)) / (2 * eps)
                worst["v"] = max(worst["v"], abs(fd - gv[k]) / max(1.0, abs(gv[k])))
            for i in range(d):
                for k in range(d):
                    em = np.zeros((d, d))
                    em[i, k] = eps
                    fd = (lagrangian.value(t, x, v, a + em)
                          - lagrangian.value(t, x, v, a - em)) / (2 * eps)
                    worst["a"] = max(worst["a"],
                                     abs(fd - ga[i, k]) / max(1.0, abs(ga[i, k])))
        for key in errs:
            errs[key][eps] = worst[key]
    best = {key: min(errs[key], key=errs[key].get) for key in errs}
    return GradCheckReport(worst_x=errs["x"][best["x"]],
                           worst_v=errs["v"][best["v"]],
                           worst_a=errs["a"][best["a"]],
                           epsilon=best)
