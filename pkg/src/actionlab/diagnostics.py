"""Statistical certification: martingale tests, the variational derivative two
ways, the averaged Euler-Lagrange check, the drift-representation check, and
the symmetry invariant.

The workhorse is :func:`martingale_test`: for consecutive probe times s < t
and bounded prefix functions phi, the normalized statistic

    z = mean_i [ w_i (X_t - X_s) phi_i(s) ] / stderr

is approximately standard normal when X is a martingale.  A report passes
when max |z| stays below the threshold (default 4.0, sized so that a family
of up to ~50 statistics has a false-failure probability below one percent
under normality).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ._accum import weighted_mean_stderr, zscores
from .lagrangians import Lagrangian, el_process, path_actions
from .paths import PathEnsemble
from .shifts import EndpointError, MaterializedShift
from .transform import SpaceTimeMap, push_shift

__all__ = [
    "MartingaleReport",
    "PowerError",
    "martingale_test",
    "default_test_functions",
    "el_certify",
    "averaged_el",
    "AveragedElTable",
    "variational_derivative",
    "VariationalResult",
    "drift_representation_check",
    "DriftRepresentationReport",
    "NoetherFamily",
    "noether_invariant",
]

DEFAULT_PROBE_FRACTIONS = (0.1, 0.25, 0.5, 0.75, 0.9)
DEFAULT_THRESHOLD = 4.0
MIN_PATHS = 1000


class PowerError(ValueError):
    """Too few paths for the test to have meaningful power."""


@dataclass(frozen=True)
class MartingaleReport:
    """Normalized increment statistics per probe pair and test function."""

    probe_pairs: list            # [(s, t), ...]
    test_names: list             # column labels: feature x process coordinate
    statistics: np.ndarray       # [n_pairs, n_columns]
    threshold: float

    @property
    def max_abs_statistic(self) -> float:
        if self.statistics.size == 0:
            return 0.0
        return float(np.max(np.abs(self.statistics)))

    @property
    def verdict(self) -> bool:
        return self.max_abs_statistic <= self.threshold

    def rows(self):
        """(s, t, column, z) tuples for CSV serialization."""
        for (s, t), row in zip(self.probe_pairs, self.statistics):
            for name, z in zip(self.test_names, row):
                yield s, t, name, float(z)


def default_test_functions(ensemble: PathEnsemble, j: int,
                           clip_quantile: float = 0.995):
    """Bounded prefix features at probe step j: 1, W, clip(W^2).

    The state features are clipped at a high quantile of their absolute value
    so the statistics stay well behaved for heavy-tailed laws.
    """
    x = ensemble.states[:, j]
    d = x.shape[1]
    feats = [np.ones(x.shape[0])]
    names = ["1"]
    for k in range(d):
        c = np.quantile(np.abs(x[:, k]), clip_quantile)
        feats.append(np.clip(x[:, k], -c, c) if c > 0 else x[:, k])
        names.append(f"W[{k}]")
    for k in range(d):
        sq = x[:, k] ** 2
        c = np.quantile(sq, clip_quantile)
        feats.append(np.clip(sq, 0.0, c) if c > 0 else sq)
        names.append(f"W[{k}]^2")
    return np.stack(feats, axis=1), names


def martingale_test(process: np.ndarray, ensemble: PathEnsemble,
                    probe_indices: Sequence[int],
                    test_functions: Optional[Callable] = None,
                    threshold: float = DEFAULT_THRESHOLD) -> MartingaleReport:
    """Test that a process sampled at the probe steps is a martingale.

    ``process`` has shape [n, P] or [n, P, d_proc] with P = len(probe_indices);
    the statistic matrix has one row per consecutive probe pair and one column
    per (test function, process coordinate).
    """
    if ensemble.n_paths < MIN_PATHS:
        raise PowerError(f"martingale test needs >= {MIN_PATHS} paths")
    proc = np.asarray(process, dtype=np.float64)
    if proc.ndim == 2:
        proc = proc[:, :, None]
    n, p, dproc = proc.shape
    if p != len(probe_indices):
        raise ValueError("process probe axis does not match probe_indices")
    if test_functions is None:
        test_functions = default_test_functions
    dt = ensemble.grid.dt
    pairs, stats, names = [], [], None
    for a in range(p - 1):
        ja, jb = probe_indices[a], probe_indices[a + 1]
        feats, feat_names = test_functions(ensemble, ja)
        inc = proc[:, a + 1] - proc[:, a]                     # [n, dproc]
        prod = inc[:, None, :] * feats[:, :, None]            # [n, k, dproc]
        mean, se = weighted_mean_stderr(prod.reshape(n, -1), ensemble.weights)
        stats.append(zscores(mean, se))
        pairs.append((ja * dt, jb * dt))
        if names is None:
            names = [f"{f}|x{c}" if dproc > 1 else f
                     for f in feat_names for c in range(dproc)]
    return MartingaleReport(probe_pairs=pairs, test_names=names or [],
                            statistics=np.array(stats), threshold=threshold)


def el_certify(ensemble: PathEnsemble, lagrangian: Lagrangian,
               probe_fractions: Sequence[float] = DEFAULT_PROBE_FRACTIONS,
               threshold: float = DEFAULT_THRESHOLD,
               test_functions: Optional[Callable] = None) -> MartingaleReport:
    """Martingale test of the Euler-Lagrange process; the laboratory's verdict."""
    idx = ensemble.grid.probe_indices(probe_fractions, ensemble.t_max)
    n_proc = el_process(ensemble, lagrangian)
    return martingale_test(n_proc[:, idx], ensemble, idx,
                           test_functions=test_functions, threshold=threshold)


@dataclass(frozen=True)
class AveragedElTable:
    """Interval table for the averaged Euler-Lagrange identity.

    Each row compares the finite difference in time of E[grad_v L] with the
    interval average of E[grad_x L], using per-path differencing so the two
    sides share the same noise.
    """

    intervals: list              # [(s, t), ...]
    discrepancy: np.ndarray      # [rows, d]
    stderr: np.ndarray           # [rows, d]

    @property
    def statistics(self) -> np.ndarray:
        return zscores(self.discrepancy, self.stderr)

    @property
    def max_abs_statistic(self) -> float:
        return float(np.max(np.abs(self.statistics))) if self.discrepancy.size else 0.0

    def passed(self, threshold: float = DEFAULT_THRESHOLD) -> bool:
        return self.max_abs_statistic <= threshold


def averaged_el(ensemble: PathEnsemble, lagrangian: Lagrangian,
                probe_fractions: Sequence[float] = DEFAULT_PROBE_FRACTIONS) -> AveragedElTable:
    """Check d/dt E[grad_v L] = E[grad_x L] on probe intervals."""
    grid = ensemble.grid
    idx = grid.probe_indices(probe_fractions, ensemble.t_max)
    n, _, d = ensemble.drifts.shape

    def gv(j):
        return np.asarray(lagrangian.grad_v(
            j * grid.dt, ensemble.states[:, j], ensemble.drifts[:, j],
            np.einsum("nik,njk->nij", ensemble.diffusions[:, j],
                      ensemble.diffusions[:, j])), dtype=np.float64)

    def gx(j):
        return np.asarray(lagrangian.grad_x(
            j * grid.dt, ensemble.states[:, j], ensemble.drifts[:, j],
            np.einsum("nik,njk->nij", ensemble.diffusions[:, j],
                      ensemble.diffusions[:, j])), dtype=np.float64)

    intervals, disc, ses = [], [], []
    for a in range(len(idx) - 1):
        ja, jb = idx[a], idx[a + 1]
        span = (jb - ja) * grid.dt
        momentum_rate = (gv(jb) - gv(ja)) / span
        avg = np.zeros((n, d))
        for j in range(ja, jb):
            avg += gx(j) * grid.dt
        per_path = momentum_rate - avg / span
        mean, se = weighted_mean_stderr(per_path, ensemble.weights)
        # floor at rounding scale so exactly-cancelling laws read as zero
        ref = float(np.mean(np.abs(momentum_rate)) + np.mean(np.abs(avg / span)))
        se = np.maximum(se, 1e-12 * max(1.0, ref))
        intervals.append((ja * grid.dt, jb * grid.dt))
        disc.append(mean)
        ses.append(se)
    return AveragedElTable(intervals=intervals,
                           discrepancy=np.array(disc).reshape(len(idx) - 1, d),
                           stderr=np.array(ses).reshape(len(idx) - 1, d))


@dataclass(frozen=True)
class VariationalResult:
    """Finite-difference action derivative versus the inner-product formula."""

    fd: float
    fd_se: float
    formula: float
    formula_se: float
    diff: float
    diff_se: float
    allowance: float
    epsilon: float

    @property
    def agree(self) -> bool:
        return abs(self.diff) <= 4.0 * self.diff_se + self.allowance

    def critical(self, k: float = 4.0) -> bool:
        return (abs(self.formula) <= k * self.formula_se + self.allowance
                and abs(self.fd) <= k * max(self.fd_se, self.formula_se) + self.allowance)


def variational_derivative(ensemble: PathEnsemble, lagrangian: Lagrangian,
                           shift: MaterializedShift,
                           eps_list: Sequence[float] = (1e-2, 1e-3),
                           t_max: float = 1.0,
                           allowance: Optional[float] = None) -> VariationalResult:
    """Derivative of the action along the pushforward curve, two ways.

    The finite difference uses common random numbers (the same ensemble is
    pushed at +-epsilon), differenced per path against the formula value
    <xi, h>_H with xi the Euler-Lagrange process, so the comparison noise is
    the noise of the difference.  ``allowance`` defaults to 2/m and absorbs
    the left-rectangle discretization mismatch.
    """
    if not shift.is_endpoint_zero():
        raise EndpointError("variational_derivative requires an endpoint-zero shift")
    if allowance is None:
        allowance = 2.0 / ensemble.grid.m
    dt = ensemble.grid.dt

    xi = el_process(ensemble, lagrangian)
    formula_pp = np.einsum("nmd,nmd->n", xi, shift.hdot) * dt
    del xi

    fd_by_eps = {}
    for eps in eps_list:
        plus = path_actions(push_shift(ensemble, shift, +eps), lagrangian, t_max)
        minus = path_actions(push_shift(ensemble, shift, -eps), lagrangian, t_max)
        fd_by_eps[eps] = (plus - minus) / (2 * eps)
    eps_sorted = sorted(fd_by_eps, reverse=True)
    if len(eps_sorted) == 1:
        eps_star = eps_sorted[0]
    else:
        gaps = {}
        for a, b in zip(eps_sorted[:-1], eps_sorted[1:]):
            gaps[b] = abs(float(np.mean(fd_by_eps[a] - fd_by_eps[b])))
        eps_star = min(gaps, key=gaps.get)
    fd_pp = fd_by_eps[eps_star]

    fd, fd_se = weighted_mean_stderr(fd_pp, ensemble.weights)
    formula, formula_se = weighted_mean_stderr(formula_pp, ensemble.weights)
    diff, diff_se = weighted_mean_stderr(fd_pp - formula_pp, ensemble.weights)
    return VariationalResult(fd=fd, fd_se=fd_se, formula=formula,
                             formula_se=formula_se, diff=diff, diff_se=diff_se,
                             allowance=allowance, epsilon=eps_star)


@dataclass(frozen=True)
class DriftRepresentationReport:
    """Orthogonality statistics of (xi^V_t - v_t) against prefix features."""

    probe_times: list
    feature_names: list
    statistics: np.ndarray       # [n_probes, k * d]
    threshold: float

    @property
    def max_abs_statistic(self) -> float:
        return float(np.max(np.abs(self.statistics))) if self.statistics.size else 0.0

    @property
    def verdict(self) -> bool:
        return self.max_abs_statistic <= self.threshold


def drift_representation_check(ensemble: PathEnsemble,
                               grad_potential: Optional[Callable] = None,
                               probe_fractions: Sequence[float] = (0.6, 0.75, 0.9),
                               test_functions: Optional[Callable] = None,
                               threshold: float = DEFAULT_THRESHOLD) -> DriftRepresentationReport:
    """Check that the recorded drift is the conditional mean of the pull-to-
    endpoint variable xi^V_t = (W_1 - W_t)/(1-t) + int_t^1 ((1-s)/(1-t)) grad V ds.

    Under the Euler-Lagrange condition E[xi^V_t | prefix] equals the drift, so
    (xi^V_t - v_t) must be orthogonal to every bounded prefix feature; the
    report normalizes those inner products by their standard errors.
    """
    grid = ensemble.grid
    n, m, d = ensemble.drifts.shape
    dt = grid.dt
    if test_functions is None:
        test_functions = default_test_functions
    idx = grid.probe_indices(probe_fractions, 1.0)

    grad_term = np.zeros((n, m + 1, d))
    if grad_potential is not None:
        # backward left-rectangle sums of (1-s) grad V(W_s)
        acc = np.zeros((n, d))
        for j in range(m - 1, -1, -1):
            t = j * dt
            acc = acc + (1.0 - t) * np.asarray(
                grad_potential(t, ensemble.states[:, j]), dtype=np.float64) * dt
            grad_term[:, j] = acc

    stats, names, times = [], None, []
    terminal = ensemble.states[:, m]
    for j in idx:
        t = j * dt
        xi = (terminal - ensemble.states[:, j]) / (1.0 - t)
        if grad_potential is not None:
            xi = xi + grad_term[:, j] / (1.0 - t)
        resid = xi - ensemble.drifts[:, j]
        feats, feat_names = test_functions(ensemble, j)
        prod = resid[:, None, :] * feats[:, :, None]
        mean, se = weighted_mean_stderr(prod.reshape(n, -1), ensemble.weights)
        stats.append(zscores(mean, se))
        times.append(t)
        if names is None:
            names = [f"{f}|x{c}" if d > 1 else f
                     for f in feat_names for c in range(d)]
    return DriftRepresentationReport(probe_times=times, feature_names=names or [],
                                     statistics=np.array(stats), threshold=threshold)


@dataclass(frozen=True)
class NoetherFamily:
    """A one-parameter family of space maps with identity at parameter zero.

    ``generator(t, x)`` is the parameter-derivative of the family at zero and
    ``grad_generator(t, x)`` its spatial Jacobian [.., d, d]; ``maps`` builds
    the finite-parameter map for spot checks of the family itself.
    """

    name: str
    generator: Callable
    grad_generator: Callable
    maps: Optional[Callable[[float], SpaceTimeMap]] = None


def noether_invariant(ensemble: PathEnsemble, lagrangian: Lagrangian,
                      family: NoetherFamily,
                      probe_fractions: Sequence[float] = DEFAULT_PROBE_FRACTIONS,
                      threshold: float = DEFAULT_THRESHOLD,
                      test_functions: Optional[Callable] = None):
    """Assemble the symmetry invariant and run the martingale test on it.

    I_t = <u~(t, W_t), p_t> - sum_i [u~^i, p^i]_t + int_0^t theta_s ds, with
    p the momentum grad_v L, the bracket the realized covariation on the
    simulation grid, theta = sum_ij kappa_ij dL/da_ij and
    kappa = alpha grad_u~^T + grad_u~ alpha.  Returns (I at probes, report).
    """
    grid = ensemble.grid
    n, m, d = ensemble.drifts.shape
    dt = grid.dt
    idx = grid.probe_indices(probe_fractions, ensemble.t_max)

    # momentum and generator along the paths
    p = np.empty((n, m, d))
    theta = np.empty((n, m))
    gen = np.empty((n, m + 1, d))
    for j in range(m + 1):
        gen[:, j] = np.asarray(family.generator(j * dt, ensemble.states[:, j]),
                               dtype=np.float64)
    for j in range(m):
        t = j * dt
        x, v = ensemble.states[:, j], ensemble.drifts[:, j]
        sig = ensemble.diffusions[:, j]
        alpha = np.einsum("nik,njk->nij", sig, sig)
        p[:, j] = np.asarray(lagrangian.grad_v(t, x, v, alpha), dtype=np.float64)
        gu = np.broadcast_to(np.asarray(family.grad_generator(t, x),
                                        dtype=np.float64), (n, d, d))
        kappa = np.einsum("nik,njk->nij", alpha, gu) + np.einsum("nik,nkj->nij", gu, alpha)
        ga = np.asarray(lagrangian.grad_a(t, x, v, alpha), dtype=np.float64)
        theta[:, j] = np.einsum("nij,nij->n", kappa, np.broadcast_to(ga, (n, d, d)))

    # realized covariation sum_i [gen^i, p^i] and the theta integral
    dgen = gen[:, 1:m] - gen[:, : m - 1]         # [n, m-1, d]
    dp = p[:, 1:] - p[:, :-1]                    # [n, m-1, d]
    cov_steps = np.einsum("nmd,nmd->nm", dgen, dp)
    cov_cum = np.concatenate([np.zeros((n, 1)), np.cumsum(cov_steps, axis=1)], axis=1)
    theta_cum = np.concatenate([np.zeros((n, 1)), np.cumsum(theta, axis=1) * dt], axis=1)

    inv = np.empty((n, len(idx)))
    for a, j in enumerate(idx):
        inv[:, a] = (np.einsum("nd,nd->n", gen[:, j], p[:, j])
                     - cov_cum[:, min(j, m - 1)] + theta_cum[:, j])
    report = martingale_test(inv, ensemble, idx, test_functions=test_functions,
                             threshold=threshold)
    return inv, report
