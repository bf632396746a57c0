"""Deterministic reductions shared by every estimator in the package.

All Monte Carlo summaries (means, inner products, test statistics) must be
bit-identical across reruns and across worker-thread counts.  Reductions here
run over a fixed chunk order with Neumaier-compensated accumulation, so the
result depends only on the array contents.
"""

from __future__ import annotations

import numpy as np

_CHUNK = 4096


def csum(x: np.ndarray) -> float:
    """Compensated sum of a 1-d array in fixed chunk order."""
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    total = 0.0
    comp = 0.0
    for start in range(0, x.size, _CHUNK):
        block = float(np.sum(x[start : start + _CHUNK]))
        t = total + block
        if abs(total) >= abs(block):
            comp += (total - t) + block
        else:
            comp += (block - t) + total
        total = t
    return total + comp


def csum_cols(x: np.ndarray) -> np.ndarray:
    """Column-wise compensated sums of a 2-d array [n, k]."""
    x = np.asarray(x, dtype=np.float64)
    return np.array([csum(x[:, k]) for k in range(x.shape[1])])


def weighted_mean_stderr(values, weights=None):
    """Weighted sample mean and standard error of per-path values.

    ``values`` has shape [n] or [n, ...]; weights (if given) are per-path,
    normalized to mean one by the caller.  With mean-one weights the
    estimator is mean(w*v) and its standard error is std(w*v)/sqrt(n).
    Returns ``(mean, stderr)`` with the trailing shape of ``values``.
    """
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[0]
    tail = v.shape[1:]
    flat = v.reshape(n, -1)
    if weights is not None:
        flat = flat * np.asarray(weights, dtype=np.float64)[:, None]
    means = csum_cols(flat) / n
    if n > 1:
        var = csum_cols((flat - means) ** 2) / (n * (n - 1))
        se = np.sqrt(var)
    else:
        se = np.zeros_like(means)
    if tail == ():
        return float(means[0]), float(se[0])
    return means.reshape(tail), se.reshape(tail)


def zscores(mean, se):
    """Normalized statistics mean/se with 0/0 -> 0 and x/0 -> +-inf."""
    mean = np.asarray(mean, dtype=np.float64)
    se = np.asarray(se, dtype=np.float64)
    out = np.zeros(np.broadcast_shapes(mean.shape, se.shape))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(se > 0.0, mean / np.where(se > 0.0, se, 1.0),
                       np.where(mean == 0.0, 0.0, np.sign(mean) * np.inf))
    return out
