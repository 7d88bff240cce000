"""Rank and linear correlation with asymptotic p-values.

Pearson and Spearman significance uses the Student-t transform
t = r * sqrt((n-2) / (1-r^2)); Kendall uses the tie-corrected normal
approximation of the concordant-minus-discordant statistic.  Inputs with
zero variance produce a degenerate report (undefined coefficient, no
p-value) instead of NaNs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, stdtr

METHODS = ("pearson", "spearman", "kendall")


@dataclass(frozen=True)
class CorrelationReport:
    method: str
    coefficient: float | None
    p_value: float | None
    n: int
    degenerate: bool

    def __post_init__(self):
        if self.degenerate:
            if self.coefficient is not None or self.p_value is not None:
                raise ValueError("degenerate reports carry no coefficient/p-value")
        else:
            if self.coefficient is None or self.p_value is None:
                raise ValueError("non-degenerate reports need both values")
            if not -1.0 <= self.coefficient <= 1.0:
                raise ValueError("coefficient must lie in [-1, 1]")
            if not 0.0 <= self.p_value <= 1.0:
                raise ValueError("p-value must lie in [0, 1]")


def _validated(xs, ys) -> tuple[np.ndarray, np.ndarray, int]:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("inputs must be 1-d sequences")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 3:
        raise ValueError("need at least 3 observations")
    return x, y, x.shape[0]


def _pearson_r(x: np.ndarray, y: np.ndarray) -> float | None:
    # Exact constancy check: mean subtraction alone can leave ~1e-16 noise
    # on a constant series, which must still count as zero variance.
    if np.all(x == x[0]) or np.all(y == y[0]):
        return None
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(xc @ xc)
    sy = float(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        return None
    r = float(xc @ yc) / math.sqrt(sx * sy)
    return min(1.0, max(-1.0, r))


def _t_pvalue(r: float, n: int) -> float:
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return 2.0 * float(stdtr(n - 2, -abs(t)))


def pearson(xs, ys) -> CorrelationReport:
    """Sample linear correlation with a two-sided Student-t p-value."""
    x, y, n = _validated(xs, ys)
    r = _pearson_r(x, y)
    if r is None:
        return CorrelationReport("pearson", None, None, n, True)
    return CorrelationReport("pearson", r, _t_pvalue(r, n), n, False)


def midranks(values) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their rank range."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.shape[0])
    sorted_v = v[order]
    i = 0
    while i < v.shape[0]:
        j = i
        while j + 1 < v.shape[0] and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> CorrelationReport:
    """Pearson correlation of midranks, with the same t-transform p-value."""
    x, y, n = _validated(xs, ys)
    r = _pearson_r(midranks(x), midranks(y))
    if r is None:
        return CorrelationReport("spearman", None, None, n, True)
    return CorrelationReport("spearman", r, _t_pvalue(r, n), n, False)


def kendall_counts(xs, ys) -> tuple[int, int, int]:
    """(concordant, discordant, tied) pair counts; they sum to n(n-1)/2."""
    x, y, n = _validated(xs, ys)
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    prod = dx * dy
    upper = np.triu_indices(n, k=1)
    vals = prod[upper]
    concordant = int(np.sum(vals > 0))
    discordant = int(np.sum(vals < 0))
    tied = int(vals.shape[0] - concordant - discordant)
    return concordant, discordant, tied


def _tie_group_sizes(v: np.ndarray) -> np.ndarray:
    _, counts = np.unique(v, return_counts=True)
    return counts[counts > 1].astype(np.float64)


def kendall(xs, ys) -> CorrelationReport:
    """Tie-corrected tau-b with a normal approximation for the p-value."""
    x, y, n = _validated(xs, ys)
    concordant, discordant, _ = kendall_counts(x, y)
    s = concordant - discordant
    n0 = n * (n - 1) / 2.0
    tx = _tie_group_sizes(x)
    ty = _tie_group_sizes(y)
    t_x = float((tx * (tx - 1) / 2.0).sum())
    t_y = float((ty * (ty - 1) / 2.0).sum())
    denom_x = n0 - t_x
    denom_y = n0 - t_y
    if denom_x == 0.0 or denom_y == 0.0:
        return CorrelationReport("kendall", None, None, n, True)
    tau = s / math.sqrt(denom_x * denom_y)
    tau = min(1.0, max(-1.0, tau))

    v0 = n * (n - 1) * (2 * n + 5)
    vt = float((tx * (tx - 1) * (2 * tx + 5)).sum())
    vu = float((ty * (ty - 1) * (2 * ty + 5)).sum())
    v1 = float((tx * (tx - 1)).sum()) * float((ty * (ty - 1)).sum()) \
        / (2.0 * n * (n - 1))
    v2 = 0.0
    if n > 2:
        v2 = float((tx * (tx - 1) * (tx - 2)).sum()) \
            * float((ty * (ty - 1) * (ty - 2)).sum()) \
            / (9.0 * n * (n - 1) * (n - 2))
    var_s = (v0 - vt - vu) / 18.0 + v1 + v2
    if var_s <= 0.0:
        p = 1.0 if s == 0 else 0.0
    else:
        z = s / math.sqrt(var_s)
        p = 2.0 * float(ndtr(-abs(z)))
    return CorrelationReport("kendall", tau, min(1.0, p), n, False)


def correlation_suite(evenness_values, robustness_values) -> list[CorrelationReport]:
    """All three coefficients for one aligned pair of per-sample series."""
    return [pearson(evenness_values, robustness_values),
            spearman(evenness_values, robustness_values),
            kendall(evenness_values, robustness_values)]


def permutation_pvalue(xs, ys, method: str = "spearman", n_perm: int = 1000,
                       seed: int = 0) -> float:
    """Two-sided permutation p-value for tiny samples where asymptotics are rough."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    fn = {"pearson": pearson, "spearman": spearman, "kendall": kendall}[method]
    observed = fn(xs, ys)
    if observed.degenerate:
        raise ValueError("permutation test is undefined for degenerate inputs")
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perm):
        rep = fn(x, rng.permutation(y))
        if rep.degenerate or abs(rep.coefficient) >= abs(observed.coefficient):
            hits += 1
    return (hits + 1) / (n_perm + 1)
