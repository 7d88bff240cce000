"""Sparse feature-addition evasion.

The gradient attack runs two projected-descent passes that share one
best-feasible-iterate tracker.  The first iterates on the projected binary
point itself, re-evaluating the gradient after every accepted flip; the
second descends a box-clipped real-relaxed shadow whose accumulated gradient
pressure lets weakly-graded coordinates cross the binarization threshold.
Each step applies the composite projection (clip into the box, binarize at
0.5, keep the epsilon largest moves), so every iterate is feasible, and the
best-scoring feasible point ever seen is returned because the stopping rule
can halt past the optimum.  For linear models an exact greedy oracle exists:
additions are independent, so adding absent features in ascending weight
order is optimal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .featurespace import SparseBinaryVector
from .models import LinearModel, TrainedModel, score

NOT_EVADABLE: float = math.inf


@dataclass(frozen=True)
class AttackConfig:
    """Budget and descent settings.

    eta=None picks an adaptive step each iteration, normalized by the largest
    gradient component that can still move: big enough to flip the steepest
    coordinate on the binary-iterate pass, 0.1 of that on the shadow pass.
    """

    epsilon: int
    eta: float | None = None
    tol: float = 1e-6
    max_iters: int = 1000
    addition_only: bool = True

    def __post_init__(self):
        if self.epsilon < 1:
            raise ValueError("epsilon must be >= 1")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def with_epsilon(self, epsilon: int) -> "AttackConfig":
        return AttackConfig(epsilon, self.eta, self.tol, self.max_iters,
                            self.addition_only)


@dataclass(frozen=True)
class AttackResult:
    adversarial: SparseBinaryVector
    added_indices: tuple[int, ...]
    score_trace: tuple[float, ...]
    evaded: bool
    iterations: int

    @property
    def score_after(self) -> float:
        return self.score_trace[-1]


@dataclass(frozen=True)
class SecurityCurve:
    """Detection rate at a fixed threshold as the addition budget grows."""

    epsilons: tuple[int, ...]
    detection_rates: tuple[float, ...]
    fpr: float
    n_samples: int

    def __post_init__(self):
        if len(self.epsilons) != len(self.detection_rates):
            raise ValueError("epsilons and detection_rates lengths differ")
        for r in self.detection_rates:
            if not 0.0 <= r <= 1.0:
                raise ValueError("detection rates must lie in [0, 1]")

    def area(self) -> float:
        """Mean detection rate over the grid (higher = harder to evade)."""
        return float(np.mean(self.detection_rates))


def _check_result(result: AttackResult, x: SparseBinaryVector,
                  cfg: AttackConfig) -> AttackResult:
    # Feasibility is asserted on every result handed back to a caller.
    assert len(result.added_indices) <= cfg.epsilon
    if cfg.addition_only:
        assert set(x.indices).issubset(result.adversarial.indices)
        assert set(result.adversarial.indices) - set(x.indices) == set(
            result.added_indices)
    return result


def project(x_cont: np.ndarray, x_orig: SparseBinaryVector,
            cfg: AttackConfig) -> SparseBinaryVector:
    """Composite projection of a real vector onto the attack's feasible set.

    Clips into the box ([x_orig, 1] in addition-only mode), binarizes at 0.5,
    then reverts all but the epsilon largest |x_cont - x_orig| changes (ties
    broken toward the lower feature index).
    """
    v = np.asarray(x_cont, dtype=np.float64)
    if v.shape != (x_orig.dim,):
        raise ValueError(f"vector shape {v.shape} does not match d={x_orig.dim}")
    x0 = x_orig.to_dense()
    lb = x0 if cfg.addition_only else np.zeros_like(x0)
    v = np.clip(v, lb, 1.0)
    x0b = x0.astype(bool)
    binary = _project_clipped_batch(v[None], x0b[None], cfg.epsilon)[0]
    return SparseBinaryVector(tuple(int(i) for i in np.flatnonzero(binary)),
                              x_orig.dim)


def _project_clipped_batch(V: np.ndarray, X0b: np.ndarray,
                           epsilon: int) -> np.ndarray:
    """Binarize already-clipped rows and enforce the change budget rowwise."""
    XB = V >= 0.5
    changed = XB != X0b
    counts = changed.sum(axis=1)
    over = counts > epsilon
    if not over.any():
        return XB
    D = np.where(changed, np.abs(V - X0b), -1.0)
    kth = -np.partition(-D, epsilon - 1, axis=1)[:, epsilon - 1]
    greater = D > kth[:, None]
    equal = (D == kth[:, None]) & changed
    quota = epsilon - greater.sum(axis=1)
    keep_equal = equal & (np.cumsum(equal, axis=1) <= quota[:, None])
    keep = greater | keep_equal
    capped = np.where(keep, XB, X0b)
    return np.where(over[:, None], capped, XB)


def _movable_eta(g: np.ndarray, cur: np.ndarray, lb: np.ndarray,
                 scale: float) -> np.ndarray:
    """Adaptive step: scale / max |g_i| over coordinates the step can move.

    A coordinate can move only if the negative gradient points inside its box
    slack; normalizing by the largest movable component guarantees the step
    changes something whenever a feasible descent direction exists.
    """
    movable = ((g < 0.0) & (cur < 1.0)) | ((g > 0.0) & (cur > lb))
    gmax = np.abs(np.where(movable, g, 0.0)).max(axis=1)
    return np.where(gmax > 0.0, scale / np.maximum(gmax, 1e-300), 0.0)


def _descent_pass(model: TrainedModel, X0b: np.ndarray, cfg: AttackConfig,
                  threshold: float, mode: str, best_scores: np.ndarray,
                  best_points: np.ndarray, stop_on_evasion: bool,
                  traces) -> np.ndarray:
    """One batched descent pass; updates best_scores / best_points in place.

    mode "binary" re-evaluates the gradient at the projected binary iterate
    each step (the iterate hops between feasible points, with enough step to
    flip at least one coordinate).  mode "shadow" descends a box-clipped real
    relaxation that accumulates gradient pressure, so weakly-graded
    coordinates can still cross the binarization threshold over time.
    """
    B, d = X0b.shape
    X0 = X0b.astype(np.float64)
    lb = X0 if cfg.addition_only else np.zeros_like(X0)
    cur = X0.copy()
    prev_obj = model.decision_batch(cur)
    active = prev_obj >= threshold  # already-benign samples are left alone
    if stop_on_evasion:
        active &= ~(best_scores < threshold)
    iterations = np.zeros(B, dtype=np.int64)
    eta_scale = 0.5005 if mode == "binary" else 0.1

    for it in range(1, cfg.max_iters + 1):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        _, g = model.decision_and_gradient_batch(cur[rows])
        if cfg.eta is None:
            eta = _movable_eta(g, cur[rows], lb[rows], eta_scale)
        else:
            eta = np.full(rows.size, cfg.eta)
        stepped = np.clip(cur[rows] - eta[:, None] * g, lb[rows], 1.0)
        binary = _project_clipped_batch(stepped, X0b[rows], cfg.epsilon)
        bin_scores = model.decision_batch(binary.astype(np.float64))
        improved = bin_scores < best_scores[rows]
        upd = rows[improved]
        best_scores[upd] = bin_scores[improved]
        best_points[upd] = binary[improved]

        if mode == "binary":
            cur[rows] = binary.astype(np.float64)
            obj = bin_scores
        else:
            cur[rows] = stepped
            obj = model.decision_batch(stepped)
        converged = np.abs(obj - prev_obj[rows]) <= cfg.tol
        prev_obj[rows] = obj
        iterations[rows] = it
        done = converged
        if stop_on_evasion:
            done = done | (best_scores[rows] < threshold)
        active[rows[done]] = False
        if traces is not None:
            for r in rows:
                traces[r].append(float(best_scores[r]))
    return iterations


def _pgd_core(model: TrainedModel, X0b: np.ndarray, cfg: AttackConfig,
              threshold: float, stop_on_evasion: bool = False,
              record_trace: bool = False):
    """Shared batched attack: a binary-iterate pass then a shadow pass.

    Both passes share the best-feasible-iterate bookkeeping, so the returned
    point is the best either scheme ever visited.  On a linear model with the
    adaptive step, the binary pass already flips absent features in exact
    descending-weight order (the gradient is constant), which is the optimal
    addition schedule, so the shadow pass is skipped.
    """
    scores0 = model.decision_batch(X0b.astype(np.float64))
    best_scores = scores0.copy()
    best_points = X0b.copy()
    traces = [[float(s)] for s in best_scores] if record_trace else None

    iterations = _descent_pass(model, X0b, cfg, threshold, "binary",
                               best_scores, best_points, stop_on_evasion,
                               traces)
    if not (isinstance(model, LinearModel) and cfg.eta is None):
        iterations = iterations + _descent_pass(
            model, X0b, cfg, threshold, "shadow", best_scores, best_points,
            stop_on_evasion, traces)
    evaded = best_scores < threshold
    return best_scores, best_points, evaded, iterations, traces


def epsilon_min_batch(model: TrainedModel, samples, eps_max: int,
                      method: str = "greedy", cfg: AttackConfig | None = None,
                      threshold: float = 0.0) -> np.ndarray:
    """epsilon_min for many samples at once; NOT_EVADABLE where none works.

    The descent search walks the budgets in ascending order and drops samples
    as soon as they evade, so the cost is dominated by the unresolved ones.
    """
    samples = list(samples)
    if eps_max < 1:
        raise ValueError("eps_max must be >= 1")
    d = model.d
    X0b = np.zeros((len(samples), d), dtype=bool)
    for row, x in enumerate(samples):
        if x.dim != d:
            raise ValueError("sample dimensionality does not match the model")
        if x.indices:
            X0b[row, list(x.indices)] = True
    scores0 = model.decision_batch(X0b.astype(np.float64))
    out = np.full(len(samples), NOT_EVADABLE)
    out[scores0 < threshold] = 0

    if method == "greedy":
        if not isinstance(model, LinearModel):
            raise TypeError("greedy attack requires a linear model")
        _, _, path_scores, path_counts = _greedy_addition_paths(
            model, X0b, scores0)
        if path_scores.shape[1] == 0:
            return out
        for row in np.flatnonzero(out != 0):
            hit = np.flatnonzero(path_scores[row] < threshold)
            if hit.size and path_counts[row, hit[0]] <= eps_max:
                out[row] = path_counts[row, hit[0]]
        return out
    if method != "pgd":
        raise ValueError(f"unknown attack method {method!r}")

    base = cfg if cfg is not None else AttackConfig(1)
    pending = np.flatnonzero(out != 0)
    for eps in range(1, eps_max + 1):
        if pending.size == 0:
            break
        _, _, evaded, _, _ = _pgd_core(model, X0b[pending],
                                       base.with_epsilon(eps), threshold,
                                       stop_on_evasion=True)
        out[pending[evaded]] = eps
        pending = pending[~evaded]
    return out


def pgd_evasion(model: TrainedModel, x: SparseBinaryVector, cfg: AttackConfig,
                threshold: float = 0.0) -> AttackResult:
    """Gradient-descent evasion of one sample under the addition budget."""
    if x.dim != model.d:
        raise ValueError(f"sample dim {x.dim} does not match model d={model.d}")
    X0b = x.to_dense().astype(bool)[None]
    best_scores, best_points, evaded, iterations, traces = _pgd_core(
        model, X0b, cfg, threshold, record_trace=True)
    adv = SparseBinaryVector(
        tuple(int(i) for i in np.flatnonzero(best_points[0])), x.dim)
    added = tuple(sorted(set(adv.indices) - set(x.indices)))
    result = AttackResult(adv, added, tuple(traces[0]), bool(evaded[0]),
                          int(iterations[0]))
    return _check_result(result, x, cfg)


def greedy_linear_evasion(model: LinearModel, x: SparseBinaryVector,
                          epsilon: int, threshold: float = 0.0) -> AttackResult:
    """Exact feature-addition attack on a linear model.

    Absent negative-weight features are added from most to least negative,
    stopping as soon as the score drops below the threshold or the budget is
    spent.
    """
    if not isinstance(model, LinearModel):
        raise TypeError("greedy_linear_evasion requires a linear model")
    if x.dim != model.d:
        raise ValueError(f"sample dim {x.dim} does not match model d={model.d}")
    if epsilon < 1:
        raise ValueError("epsilon must be >= 1")
    s = score(model, x)
    trace = [s]
    if s < threshold:
        result = AttackResult(x, (), tuple(trace), True, 0)
        return _check_result(result, x, AttackConfig(epsilon))

    w = model.weights
    present = np.zeros(model.d, dtype=bool)
    if x.indices:
        present[list(x.indices)] = True
    candidates = np.flatnonzero(~present & (w < 0.0))
    candidates = candidates[np.argsort(w[candidates], kind="stable")]

    added: list[int] = []
    evaded = False
    for idx in candidates[:epsilon]:
        added.append(int(idx))
        s += float(w[idx])
        trace.append(s)
        if s < threshold:
            evaded = True
            break
    adv = SparseBinaryVector.from_indices(list(x.indices) + added, x.dim)
    result = AttackResult(adv, tuple(sorted(added)), tuple(trace), evaded,
                          len(added))
    return _check_result(result, x, AttackConfig(epsilon))


def epsilon_min(model: TrainedModel, x: SparseBinaryVector, eps_max: int,
                method: str = "greedy", cfg: AttackConfig | None = None,
                threshold: float = 0.0) -> float:
    """Smallest addition budget in [1, eps_max] that evades; NOT_EVADABLE if none.

    Samples already scored below the threshold get 0 by convention.
    """
    if eps_max < 1:
        raise ValueError("eps_max must be >= 1")
    if score(model, x) < threshold:
        return 0
    if method == "greedy":
        result = greedy_linear_evasion(model, x, eps_max, threshold)
        return len(result.added_indices) if result.evaded else NOT_EVADABLE
    if method != "pgd":
        raise ValueError(f"unknown attack method {method!r}")
    base = cfg if cfg is not None else AttackConfig(1)
    X0b = x.to_dense().astype(bool)[None]
    for eps in range(1, eps_max + 1):
        _, _, evaded, _, _ = _pgd_core(
            model, X0b, base.with_epsilon(eps), threshold, stop_on_evasion=True)
        if evaded[0]:
            return eps
    return NOT_EVADABLE


def _greedy_addition_paths(model: LinearModel, X0b: np.ndarray,
                           scores0: np.ndarray):
    """Per-sample cumulative greedy scores over the shared candidate ordering.

    Returns (path_scores, path_counts): entry j holds the score and number of
    additions after considering the j-th most negative weight, restricted to
    features absent from each sample.
    """
    w = model.weights
    order = np.flatnonzero(w < 0.0)
    order = order[np.argsort(w[order], kind="stable")]
    absent = ~X0b[:, order]
    contrib = np.where(absent, w[order][None, :], 0.0)
    path_scores = scores0[:, None] + np.cumsum(contrib, axis=1)
    path_counts = np.cumsum(absent, axis=1)
    return order, absent, path_scores, path_counts


def attack_scores_over_grid(model: TrainedModel, samples, eps_grid,
                            threshold: float, cfg: AttackConfig | None = None,
                            method: str = "auto") -> np.ndarray:
    """Score of every sample after attacking at each budget: (n, len(grid)).

    A grid entry of 0 means no perturbation.  Greedy keeps its early-stop
    semantics (it quits adding once the threshold is crossed); the descent
    attack minimizes within the budget.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to attack")
    eps_grid = [int(e) for e in eps_grid]
    if any(e < 0 for e in eps_grid):
        raise ValueError("budgets must be non-negative")
    if method == "auto":
        method = "greedy" if isinstance(model, LinearModel) else "pgd"
    if method == "greedy" and not isinstance(model, LinearModel):
        raise TypeError("greedy attack requires a linear model")

    d = model.d
    for x in samples:
        if x.dim != d:
            raise ValueError("sample dimensionality does not match the model")
    X0b = np.zeros((len(samples), d), dtype=bool)
    for row, x in enumerate(samples):
        if x.indices:
            X0b[row, list(x.indices)] = True
    scores0 = model.decision_batch(X0b.astype(np.float64))

    out = np.empty((len(samples), len(eps_grid)))
    if method == "greedy":
        _, _, path_scores, path_counts = _greedy_addition_paths(
            model, X0b, scores0)
        n, k = path_scores.shape
        if k == 0:
            for col, eps in enumerate(eps_grid):
                out[:, col] = scores0
            return out
        rows = np.arange(n)
        attackable = scores0 >= threshold
        crossing = path_scores < threshold
        any_cross = crossing.any(axis=1)
        first_cross = np.where(any_cross, np.argmax(crossing, axis=1), 0)
        cross_scores = path_scores[rows, first_cross]
        cross_counts = np.where(any_cross, path_counts[rows, first_cross],
                                np.inf)
        for col, eps in enumerate(eps_grid):
            if eps == 0:
                out[:, col] = scores0
                continue
            last = np.sum(path_counts <= eps, axis=1) - 1
            budget_scores = np.where(last >= 0,
                                     path_scores[rows, np.maximum(last, 0)],
                                     scores0)
            use_cross = any_cross & (cross_counts <= eps)
            res = np.where(use_cross, cross_scores, budget_scores)
            out[:, col] = np.where(attackable, res, scores0)
        return out

    base = cfg if cfg is not None else AttackConfig(1)
    for col, eps in enumerate(eps_grid):
        if eps == 0:
            out[:, col] = scores0
            continue
        best_scores, _, _, _, _ = _pgd_core(
            model, X0b, base.with_epsilon(eps), threshold)
        out[:, col] = best_scores
    return out


def security_evaluation(model: TrainedModel, malware_samples, eps_grid,
                        threshold: float, cfg: AttackConfig | None = None,
                        method: str = "auto",
                        fpr: float = float("nan")) -> SecurityCurve:
    """Detection rate at the fixed threshold after attacking at each budget."""
    eps_grid = [int(e) for e in eps_grid]
    scores = attack_scores_over_grid(model, malware_samples, eps_grid,
                                     threshold, cfg, method)
    rates = tuple(float(np.mean(scores[:, c] >= threshold))
                  for c in range(len(eps_grid)))
    return SecurityCurve(tuple(eps_grid), rates, fpr, scores.shape[0])
