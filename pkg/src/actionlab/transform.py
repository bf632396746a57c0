"""Pushforward of ensembles by adapted shifts and by space-time maps.

``push_shift`` translates every path by epsilon times a materialized shift;
the drift records gain epsilon * hdot and the diffusion records are carried
unchanged.  ``lift`` applies a pointwise map y = h(t, x) to the paths and
transforms the recorded characteristics by the Ito rule: the new drift is
dt_h + (v . grad) h + (1/2) sum alpha_ij d2_ij h and the new diffusion factor
is (grad h) sigma.  ``harmonic_check`` evaluates the generator residual of a
space-time function along the paths and cross-checks it against a direct
martingale test of the composed process.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .paths import PathEnsemble
from .shifts import MaterializedShift

__all__ = [
    "SpaceTimeMap",
    "push_shift",
    "lift",
    "harmonic_check",
    "HarmonicReport",
    "homeomorphism_defect",
]


@dataclass(frozen=True)
class SpaceTimeMap:
    """A map h(t, x) with spatial derivatives and (optionally) an inverse.

    map_fn(t, x[n,d]) -> [n,d]; jacobian -> [n,d,d] (or constant [d,d]);
    hessian -> [n,d,d,d] with axes (path, output, i, j), or None for affine
    maps; dt_fn -> [n,d] or None when the map is time-independent.  inverse
    is required for maps registered as path-space transformations and may be
    None for scalar fields used only in ``harmonic_check``.
    """

    name: str
    map_fn: Callable
    jacobian: Callable
    hessian: Optional[Callable] = None
    dt_fn: Optional[Callable] = None
    inverse: Optional[Callable] = None


def homeomorphism_defect(m: SpaceTimeMap, times: Sequence[float],
                         points: np.ndarray) -> float:
    """Max |inverse(t, map(t, x)) - x| over the sampled (t, x)."""
    if m.inverse is None:
        raise ValueError(f"map '{m.name}' has no inverse")
    worst = 0.0
    pts = np.asarray(points, dtype=np.float64)
    for t in times:
        y = np.asarray(m.map_fn(t, pts))
        back = np.asarray(m.inverse(t, y))
        worst = max(worst, float(np.max(np.abs(back - pts))))
    return worst


def push_shift(ensemble: PathEnsemble, shift: MaterializedShift,
               epsilon: float) -> PathEnsemble:
    """Image law under identity + epsilon * shift.

    States move by epsilon * h, drift records by epsilon * hdot, and the
    diffusion records are unchanged; weights carry over.
    """
    if shift.ensemble is not ensemble:
        raise ValueError("shift is not bound to this ensemble")
    states = ensemble.states + epsilon * shift.h
    drifts = ensemble.drifts + epsilon * shift.hdot
    states.setflags(write=False)
    drifts.setflags(write=False)
    return replace(ensemble, states=states, drifts=drifts,
                   label=f"{ensemble.label}+{epsilon}*{shift.name}")


def _jac(m: SpaceTimeMap, t, x, n, d):
    j = np.asarray(m.jacobian(t, x), dtype=np.float64)
    return np.broadcast_to(j, (n, d, d))


def lift(ensemble: PathEnsemble, m: SpaceTimeMap) -> PathEnsemble:
    """Image law under the pathwise application of the space-time map."""
    grid = ensemble.grid
    n, steps, d = ensemble.drifts.shape
    states = np.empty_like(ensemble.states)
    drifts = np.empty_like(ensemble.drifts)
    diffusions = np.empty((n, steps, d, d))
    for j in range(steps + 1):
        t = j * grid.dt
        states[:, j] = m.map_fn(t, ensemble.states[:, j])
    for j in range(steps):
        t = j * grid.dt
        x = ensemble.states[:, j]
        v = ensemble.drifts[:, j]
        sig = ensemble.diffusions[:, j]
        alpha = np.einsum("nik,njk->nij", sig, sig)
        jac = _jac(m, t, x, n, d)
        new_v = np.einsum("nij,nj->ni", jac, v)
        if m.dt_fn is not None:
            new_v = new_v + np.asarray(m.dt_fn(t, x), dtype=np.float64)
        if m.hessian is not None:
            hess = np.asarray(m.hessian(t, x), dtype=np.float64)
            hess = np.broadcast_to(hess, (n, d, d, d))
            new_v = new_v + 0.5 * np.einsum("nij,nkij->nk", alpha, hess)
        drifts[:, j] = new_v
        diffusions[:, j] = np.einsum("nij,njk->nik", jac, sig)
    if not (np.isfinite(states).all() and np.isfinite(drifts).all()):
        raise ValueError(f"map '{m.name}' produced non-finite values")
    for arr in (states, drifts, diffusions):
        arr.setflags(write=False)
    return replace(ensemble, states=states, drifts=drifts, diffusions=diffusions,
                   label=f"{m.name}*{ensemble.label}")


@dataclass(frozen=True)
class HarmonicReport:
    residual_max: float
    residual_mean: float
    residual_zero: bool
    martingale_report: object
    agree: bool


def harmonic_check(ensemble: PathEnsemble, field: SpaceTimeMap,
                   probe_fractions: Sequence[float] = (0.1, 0.25, 0.5, 0.75, 0.9),
                   threshold: float = 4.0, residual_tol: float = 1e-8):
    """Generator residual of ``field`` along the paths versus a martingale test.

    The residual at (t_j, W_j) is dt_u + (v . grad) u + (1/2) alpha : hess u;
    it vanishes identically iff u(t, W_t) has no finite-variation part.  The
    function reports both the pointwise residual and the martingale verdict on
    the composed process, plus whether the two diagnostics agree.
    """
    from .diagnostics import martingale_test

    grid = ensemble.grid
    n, steps, d = ensemble.drifts.shape
    worst = 0.0
    acc = 0.0
    for j in range(steps):
        t = j * grid.dt
        if t >= ensemble.t_max:
            break
        x = ensemble.states[:, j]
        v = ensemble.drifts[:, j]
        sig = ensemble.diffusions[:, j]
        alpha = np.einsum("nik,njk->nij", sig, sig)
        jac = _jac(field, t, x, n, d)
        res = np.einsum("nij,nj->ni", jac, v)
        if field.dt_fn is not None:
            res = res + np.asarray(field.dt_fn(t, x), dtype=np.float64)
        if field.hessian is not None:
            hess = np.broadcast_to(np.asarray(field.hessian(t, x), dtype=np.float64),
                                   (n, d, d, d))
            res = res + 0.5 * np.einsum("nij,nkij->nk", alpha, hess)
        worst = max(worst, float(np.max(np.abs(res))))
        acc += float(np.mean(np.abs(res)))
    mean_abs = acc / max(1, min(steps, int(np.ceil(ensemble.t_max / grid.dt))))

    idx = grid.probe_indices(probe_fractions, ensemble.t_max)
    composed = np.stack([np.asarray(field.map_fn(j * grid.dt, ensemble.states[:, j]))
                         for j in idx], axis=1)
    report = martingale_test(composed, ensemble, idx, threshold=threshold)
    residual_zero = worst <= residual_tol
    return HarmonicReport(residual_max=worst, residual_mean=mean_abs,
                          residual_zero=residual_zero,
                          martingale_report=report,
                          agree=(residual_zero == report.verdict))
