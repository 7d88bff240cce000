"""Adversarial robustness: mean exp(-loss) over attacked samples, per budget.

The per-budget value lives in (0, 1]; it is 1 exactly when every adversarial
sample still meets its margin.  The headline number averages the per-budget
values over an explicit integer grid of addition budgets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attack import AttackConfig, attack_scores_over_grid
from .featurespace import LabeledDataset
from .models import TrainedModel

ROBUSTNESS_LOSSES = ("hinge", "logistic")


def adversarial_loss(y: int, score: float, loss: str = "hinge") -> float:
    """Classification loss of one (label, score) pair; non-negative."""
    if y not in (-1, 1):
        raise ValueError(f"label must be -1 or +1, got {y}")
    margin = y * score
    if loss == "hinge":
        return max(0.0, 1.0 - margin)
    if loss == "logistic":
        return float(np.logaddexp(0.0, -margin))
    raise ValueError(f"unknown loss {loss!r}; expected one of {ROBUSTNESS_LOSSES}")


def _loss_matrix(labels: np.ndarray, scores: np.ndarray, loss: str) -> np.ndarray:
    margins = labels[:, None] * scores if scores.ndim == 2 else labels * scores
    if loss == "hinge":
        return np.maximum(0.0, 1.0 - margins)
    if loss == "logistic":
        return np.logaddexp(0.0, -margins)
    raise ValueError(f"unknown loss {loss!r}; expected one of {ROBUSTNESS_LOSSES}")


def per_eps_robustness(model: TrainedModel, adv_set: LabeledDataset,
                       loss: str = "hinge") -> float:
    """Mean of exp(-loss) over an already-attacked sample set."""
    if adv_set.n == 0:
        raise ValueError("adversarial set is empty")
    scores = model.decision_batch(adv_set.to_dense_matrix())
    losses = _loss_matrix(adv_set.labels_array(), scores, loss)
    return math.fsum(np.exp(-losses)) / adv_set.n


@dataclass(frozen=True, eq=False)
class RobustnessScore:
    """Per-budget values, their grid average, and per-sample aggregates."""

    per_eps: dict[int, float]
    aggregate: float
    loss: str
    eps_grid: tuple[int, ...]
    per_sample: np.ndarray

    def __post_init__(self):
        for value in self.per_eps.values():
            if not 0.0 < value <= 1.0:
                raise ValueError("per-budget robustness must lie in (0, 1]")


def robustness_from_scores(adv_scores: np.ndarray, eps_grid,
                           loss: str = "hinge") -> RobustnessScore:
    """Build the score from an (n_samples, n_budgets) post-attack score matrix.

    Attacked samples keep their malicious label (+1) whether or not the
    attack succeeded.  The per-sample vector holds each sample's mean of
    exp(-loss) over the grid, for scatter and correlation use.
    """
    eps_grid = tuple(int(e) for e in eps_grid)
    if not eps_grid:
        raise ValueError("eps_grid must be non-empty")
    scores = np.asarray(adv_scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != len(eps_grid):
        raise ValueError("score matrix must be (n_samples, len(eps_grid))")
    if scores.shape[0] == 0:
        raise ValueError("adversarial set is empty")
    labels = np.ones(scores.shape[0])
    expneg = np.exp(-_loss_matrix(labels, scores, loss))
    per_eps = {eps: math.fsum(expneg[:, col]) / expneg.shape[0]
               for col, eps in enumerate(eps_grid)}
    aggregate = math.fsum(per_eps.values()) / len(eps_grid)
    per_sample = expneg.mean(axis=1)
    return RobustnessScore(per_eps, aggregate, loss, eps_grid, per_sample)


def aggregate_robustness(model: TrainedModel, malware_samples, eps_grid,
                         cfg: AttackConfig | None = None, loss: str = "hinge",
                         threshold: float = 0.0,
                         method: str = "auto") -> RobustnessScore:
    """Attack every sample at each budget and average exp(-loss)."""
    eps_grid = tuple(int(e) for e in eps_grid)
    if not eps_grid:
        raise ValueError("eps_grid must be non-empty")
    scores = attack_scores_over_grid(model, malware_samples, eps_grid,
                                     threshold, cfg, method)
    return robustness_from_scores(scores, eps_grid, loss)
