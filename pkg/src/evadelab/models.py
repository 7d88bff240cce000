"""Differentiable decision functions and their stochastic subgradient trainers.

All trainers share one seeded SGD loop so that the box-constrained variant is
literally the unconstrained one plus a per-step clip.  Models score and
differentiate at arbitrary real-valued points, which the attack and the
path-integral attribution both rely on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .featurespace import LabeledDataset, SparseBinaryVector

MODEL_FORMAT_VERSION = 1
LOSSES = ("hinge", "logistic", "squared")


class ModelFormatError(ValueError):
    """A model file that is missing, corrupt, or of an unsupported version."""


@dataclass(frozen=True, eq=False)
class LinearModel:
    """f(x) = w.x + b."""

    weights: np.ndarray
    bias: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError("weights must be a 1-d vector")
        if not np.all(np.isfinite(w)) or not math.isfinite(self.bias):
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def d(self) -> int:
        return int(self.weights.shape[0])

    def decision_batch(self, points: np.ndarray) -> np.ndarray:
        return points @ self.weights + self.bias

    def gradient_batch(self, points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.weights, points.shape)

    def decision_and_gradient_batch(self, points):
        return self.decision_batch(points), self.gradient_batch(points)


@dataclass(frozen=True, eq=False)
class KernelModel:
    """RBF expansion f(x) = sum_i c_i exp(-gamma ||x - s_i||^2) + b.

    The coefficients already carry the label sign (alpha_i * y_i).
    """

    support_vectors: tuple[SparseBinaryVector, ...]
    dual_coeffs: np.ndarray
    bias: float
    gamma: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        coeffs = np.asarray(self.dual_coeffs, dtype=np.float64)
        object.__setattr__(self, "support_vectors", tuple(self.support_vectors))
        object.__setattr__(self, "dual_coeffs", coeffs)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "gamma", float(self.gamma))
        if len(self.support_vectors) != coeffs.shape[0]:
            raise ValueError("support_vectors and dual_coeffs lengths differ")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError("gamma must be finite and positive")
        if not self.support_vectors:
            raise ValueError("kernel model needs at least one support vector")
        dims = {sv.dim for sv in self.support_vectors}
        if len(dims) != 1:
            raise ValueError("support vectors must share one dimensionality")

    @property
    def d(self) -> int:
        return self.support_vectors[0].dim

    @cached_property
    def _sv_matrix(self) -> np.ndarray:
        return np.stack([sv.to_dense() for sv in self.support_vectors])

    @cached_property
    def _sv_sqnorms(self) -> np.ndarray:
        return (self._sv_matrix * self._sv_matrix).sum(axis=1)

    def _kernel_weights(self, points: np.ndarray) -> np.ndarray:
        sq = ((points * points).sum(axis=1)[:, None]
              + self._sv_sqnorms[None, :]
              - 2.0 * points @ self._sv_matrix.T)
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-self.gamma * sq) * self.dual_coeffs[None, :]

    def decision_batch(self, points: np.ndarray) -> np.ndarray:
        return self._kernel_weights(points).sum(axis=1) + self.bias

    def gradient_batch(self, points: np.ndarray) -> np.ndarray:
        w = self._kernel_weights(points)
        return -2.0 * self.gamma * (points * w.sum(axis=1)[:, None]
                                    - w @ self._sv_matrix)

    def decision_and_gradient_batch(self, points):
        w = self._kernel_weights(points)
        totals = w.sum(axis=1)
        grad = -2.0 * self.gamma * (points * totals[:, None] - w @ self._sv_matrix)
        return totals + self.bias, grad


TrainedModel = LinearModel | KernelModel


def _check_dim(model: TrainedModel, x: SparseBinaryVector) -> None:
    if x.dim != model.d:
        raise ValueError(f"sample dim {x.dim} does not match model d={model.d}")


def score(model: TrainedModel, x: SparseBinaryVector) -> float:
    """Decision value f(x) at a binary point."""
    _check_dim(model, x)
    if isinstance(model, LinearModel):
        if not x.indices:
            return float(model.bias)
        return float(model.weights[list(x.indices)].sum() + model.bias)
    return float(model.decision_batch(x.to_dense()[None])[0])


def input_gradient(model: TrainedModel, x: SparseBinaryVector) -> np.ndarray:
    """Gradient of f evaluated at x treated as a point of R^d."""
    _check_dim(model, x)
    if isinstance(model, LinearModel):
        return model.weights.copy()
    return model.gradient_batch(x.to_dense()[None])[0]


@dataclass(frozen=True)
class Prediction:
    score: float
    label: int

    @classmethod
    def from_score(cls, value: float, threshold: float = 0.0) -> "Prediction":
        return cls(float(value), 1 if value >= threshold else -1)


@dataclass
class TrainConfig:
    """Shared SGD settings.

    ``reg`` is the C of the hinge/logistic objectives and the alpha of the
    squared (ridge) one.  The step decays as eta0 / (1 + t / decay_steps),
    with decay_steps defaulting to the number of training samples.
    """

    loss: str = "hinge"
    reg: float = 1.0
    epochs: int = 10
    learning_rate: float = 0.1
    decay_steps: float | None = None
    seed: int = 0
    weight_lb: float | np.ndarray | None = None
    weight_ub: float | np.ndarray | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.reg <= 0:
            raise ValueError("reg must be positive")

    def resolved_bounds(self, d: int) -> tuple[np.ndarray, np.ndarray] | None:
        if self.weight_lb is None and self.weight_ub is None:
            return None
        if self.weight_lb is None or self.weight_ub is None:
            raise ValueError("weight_lb and weight_ub must be given together")
        lb = np.broadcast_to(np.asarray(self.weight_lb, dtype=np.float64), (d,)).copy()
        ub = np.broadcast_to(np.asarray(self.weight_ub, dtype=np.float64), (d,)).copy()
        if np.any(lb > 0) or np.any(ub < 0):
            raise ValueError("weight bounds must satisfy lb <= 0 <= ub elementwise")
        if np.any(lb > ub):
            raise ValueError("weight_lb must be <= weight_ub elementwise")
        return lb, ub


def _require_both_classes(ds: LabeledDataset) -> None:
    labels = set(ds.labels)
    if labels != {-1, 1}:
        raise ValueError("training data must contain both classes")


def _objective(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float,
               loss: str, reg: float) -> float:
    f = X @ w + b
    margins = y * f
    if loss == "hinge":
        return 0.5 * float(w @ w) + reg * float(np.maximum(0.0, 1.0 - margins).sum())
    if loss == "logistic":
        return 0.5 * float(w @ w) + reg * float(np.logaddexp(0.0, -margins).sum())
    return reg * float(w @ w) + float(((1.0 - margins) ** 2).sum())


def _sgd_linear(train: LabeledDataset, cfg: TrainConfig,
                bounds: tuple[np.ndarray, np.ndarray] | None) -> LinearModel:
    _require_both_classes(train)
    X = train.to_dense_matrix()
    y = train.labels_array()
    n, d = X.shape
    # Mean-form objective: (lam/2)||w||^2 + mean loss, so a sampled step is
    # w <- w - eta (lam w + grad loss_i).
    if cfg.loss == "squared":
        lam = 2.0 * cfg.reg / n
    else:
        lam = 1.0 / (n * cfg.reg)
    decay = cfg.decay_steps if cfg.decay_steps is not None else float(n)

    rng = np.random.default_rng(cfg.seed)
    w = np.zeros(d)
    b = 0.0
    t = 0
    epoch_objective = []
    for _ in range(cfg.epochs):
        for i in rng.permutation(n):
            t += 1
            eta = cfg.learning_rate / (1.0 + t / decay)
            xi = X[i]
            f = xi @ w + b
            if cfg.loss == "hinge":
                if y[i] * f < 1.0:
                    w += eta * (y[i] * xi - lam * w)
                    b += eta * y[i]
                else:
                    w -= eta * lam * w
            elif cfg.loss == "logistic":
                sig = 1.0 / (1.0 + math.exp(min(50.0, max(-50.0, y[i] * f))))
                w += eta * (sig * y[i] * xi - lam * w)
                b += eta * sig * y[i]
            else:  # squared
                # Normalized step (NLMS): plain least-squares SGD diverges
                # once eta * ||x_i||^2 exceeds 1, which dense samples hit at
                # any usable base rate.
                resid = f - y[i]
                step = eta / max(1.0, xi @ xi)
                w -= step * (2.0 * resid * xi + lam * w)
                b -= step * 2.0 * resid
            if bounds is not None:
                np.clip(w, bounds[0], bounds[1], out=w)
        epoch_objective.append(_objective(X, y, w, b, cfg.loss, cfg.reg))

    meta = {
        "kind": "linear",
        "loss": cfg.loss,
        "reg": cfg.reg,
        "epochs": cfg.epochs,
        "eta0": cfg.learning_rate,
        "decay_steps": decay,
        "seed": cfg.seed,
        "epoch_objective": epoch_objective,
    }
    if bounds is not None:
        meta["weight_lb"] = bounds[0].tolist()
        meta["weight_ub"] = bounds[1].tolist()
    return LinearModel(w, b, meta)


def train_linear(train: LabeledDataset, cfg: TrainConfig) -> LinearModel:
    """Regularized hinge / logistic / squared loss via seeded SGD."""
    return _sgd_linear(train, cfg, bounds=None)


def train_secsvm(train: LabeledDataset, cfg: TrainConfig) -> LinearModel:
    """Hinge SGD with every weight clipped into its box after each update."""
    bounds = cfg.resolved_bounds(train.d)
    if bounds is None:
        raise ValueError("train_secsvm requires weight_lb and weight_ub")
    if cfg.loss != "hinge":
        raise ValueError("the box-constrained trainer uses the hinge loss")
    return _sgd_linear(train, cfg, bounds=bounds)


def train_rbf_svm(train: LabeledDataset, C: float, gamma: float,
                  cfg: TrainConfig) -> KernelModel:
    """Hinge-loss RBF machine trained in expansion form (per-point coefficients).

    Every training point owns a coefficient; regularization shrinks them all
    each step and a margin violation bumps the sampled one.  Points whose
    coefficient is still exactly zero on exit are pruned.
    """
    _require_both_classes(train)
    if C <= 0 or gamma <= 0:
        raise ValueError("C and gamma must be positive")
    X = train.to_dense_matrix()
    y = train.labels_array()
    n = X.shape[0]
    norms = (X * X).sum(axis=1)
    sq = norms[:, None] + norms[None, :] - 2.0 * X @ X.T
    np.maximum(sq, 0.0, out=sq)
    K = np.exp(-gamma * sq)

    lam = 1.0 / (n * C)
    decay = cfg.decay_steps if cfg.decay_steps is not None else float(n)
    rng = np.random.default_rng(cfg.seed)
    beta = np.zeros(n)
    b = 0.0
    t = 0
    for _ in range(cfg.epochs):
        for i in rng.permutation(n):
            t += 1
            eta = cfg.learning_rate / (1.0 + t / decay)
            f = K[i] @ beta + b
            beta *= 1.0 - eta * lam
            if y[i] * f < 1.0:
                beta[i] += eta * y[i]
                b += eta * y[i]

    keep = np.flatnonzero(beta != 0.0)
    if keep.size == 0:
        # No margin violation ever fired; keep one zero-weight expansion point
        # so the model stays well-formed (f is then the constant bias).
        keep = np.asarray([0])
    meta = {
        "kind": "rbf",
        "loss": "hinge",
        "reg": C,
        "gamma": gamma,
        "epochs": cfg.epochs,
        "eta0": cfg.learning_rate,
        "decay_steps": decay,
        "seed": cfg.seed,
    }
    return KernelModel(
        tuple(train.samples[int(i)] for i in keep), beta[keep], b, gamma, meta)


def _dataset_scores(model: TrainedModel, ds: LabeledDataset) -> np.ndarray:
    return model.decision_batch(ds.to_dense_matrix())


def detection_rate_at_fpr(model: TrainedModel, ds: LabeledDataset,
                          fpr_target: float) -> tuple[float, float]:
    """Detection rate at a benign false-positive budget, plus the threshold used.

    The threshold is the smallest candidate value t with
    #{benign score >= t} <= floor(fpr_target * n_benign); candidates are the
    benign scores themselves plus max(benign) + 1 when nothing else fits
    (scores equal to the threshold count as positive).
    """
    if not 0.0 <= fpr_target <= 1.0:
        raise ValueError("fpr_target must lie in [0, 1]")
    scores = _dataset_scores(model, ds)
    y = ds.labels_array()
    benign = np.sort(scores[y == -1])
    malware = scores[y == 1]
    if benign.size == 0:
        raise ValueError("dataset has no benign samples to fix the threshold")
    if malware.size == 0:
        raise ValueError("dataset has no malware samples to measure the rate")

    n = benign.size
    k_max = int(math.floor(fpr_target * n))
    p = n - k_max
    if p <= 0:
        threshold = float(benign[0])
    elif p >= n:
        threshold = float(benign[-1]) + 1.0
    else:
        first = int(np.searchsorted(benign, benign[p], side="left"))
        if first >= p:
            threshold = float(benign[p])
        else:
            nxt = int(np.searchsorted(benign, benign[p], side="right"))
            threshold = float(benign[nxt]) if nxt < n else float(benign[-1]) + 1.0
    rate = float(np.mean(malware >= threshold))
    return rate, threshold


def roc_curve(model: TrainedModel, ds: LabeledDataset) -> list[tuple[float, float]]:
    """(fpr, tpr) points from a sweep over the distinct scores; starts at (0,0)."""
    scores = _dataset_scores(model, ds)
    y = ds.labels_array()
    benign = scores[y == -1]
    malware = scores[y == 1]
    if benign.size == 0 or malware.size == 0:
        raise ValueError("ROC needs both classes present")
    points = [(0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        fpr = float(np.mean(benign >= t))
        tpr = float(np.mean(malware >= t))
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def auc(points: list[tuple[float, float]]) -> float:
    """Trapezoidal area under an ROC point list sorted by fpr."""
    arr = np.asarray(points, dtype=np.float64)
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    arr = arr[order]
    return float(np.trapezoid(arr[:, 1], arr[:, 0]))


def save_model(model: TrainedModel, path) -> None:
    """Serialize to a JSON document (sparse weights for the linear kind)."""
    if isinstance(model, LinearModel):
        nz = np.flatnonzero(model.weights)
        doc = {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": "linear",
            "d": model.d,
            "bias": model.bias,
            "weights": [[int(i), float(model.weights[i])] for i in nz],
            "training": model.meta,
        }
    elif isinstance(model, KernelModel):
        doc = {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": "rbf",
            "d": model.d,
            "bias": model.bias,
            "gamma": model.gamma,
            "support_vectors": [list(sv.indices) for sv in model.support_vectors],
            "dual_coeffs": [float(c) for c in model.dual_coeffs],
            "training": model.meta,
        }
    else:
        raise TypeError(f"cannot save model of type {type(model).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path) -> TrainedModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {version!r} "
            f"(expected {MODEL_FORMAT_VERSION})")
    try:
        kind = doc["kind"]
        d = int(doc["d"])
        bias = float(doc["bias"])
        if kind == "linear":
            w = np.zeros(d)
            for idx, value in doc["weights"]:
                w[int(idx)] = float(value)
            return LinearModel(w, bias, doc.get("training", {}))
        if kind == "rbf":
            svs = tuple(SparseBinaryVector(tuple(int(i) for i in ix), d)
                        for ix in doc["support_vectors"])
            coeffs = np.asarray(doc["dual_coeffs"], dtype=np.float64)
            return KernelModel(svs, coeffs, bias, float(doc["gamma"]),
                               doc.get("training", {}))
        raise ModelFormatError(f"unknown model kind {kind!r}")
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from exc
