"""Logistic-regression confidence score for a final caption."""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_is_fitted, check_vector
from .tensor import ops
from .tensor.ops import ShapeError
from .tensor.serialize import load_checkpoint, save_checkpoint

QUALITY_LABELS = ("excellent", "good", "bad", "embarrassing")
_BINARY = {"excellent": 1, "good": 1, "bad": 0, "embarrassing": 0}
N_SCALARS = 5
SCALAR_NAMES = ("lm_score", "caption_length", "lm_score_per_word", "log_tag_coverage", "dmsm_score")


def binarize_label(label):
    """``excellent``/``good`` -> 1, ``bad``/``embarrassing`` -> 0."""
    try:
        return _BINARY[label]
    except KeyError:
        raise ValueError(f"unknown quality label {label!r}; expected one of {QUALITY_LABELS}") from None


@dataclass(frozen=True)
class ConfidenceFeatures:
    dmsm_vision_vec: np.ndarray
    dmsm_caption_vec: np.ndarray
    lm_score: float
    caption_length: int
    lm_score_per_word: float
    log_tag_coverage: float
    dmsm_score: float

    def to_vector(self):
        scalars = [
            self.lm_score,
            self.caption_length,
            self.lm_score_per_word,
            self.log_tag_coverage,
            self.dmsm_score,
        ]
        return np.concatenate([self.dmsm_vision_vec, self.dmsm_caption_vec, scalars])

    def __len__(self):
        return 2 * self.dmsm_vision_vec.shape[0] + N_SCALARS


def assemble_features(image_embedding, caption_embedding, lm_score, caption, covered_tags, dmsm_score):
    """Confidence inputs for one caption.

    ``caption`` is the final word list (end marker excluded); its length
    normalizes ``lm_score``.  Tag coverage enters as ``ln(1 + k)``.
    """
    words = caption.split() if isinstance(caption, str) else list(caption)
    if not words:
        raise ValueError("caption must contain at least one word")
    vision = np.asarray(getattr(image_embedding, "vector", image_embedding), dtype=np.float64)
    text = np.asarray(getattr(caption_embedding, "vector", caption_embedding), dtype=np.float64)
    if vision.shape != text.shape or vision.ndim != 1:
        raise ShapeError(f"vision {vision.shape} and caption {text.shape} vectors must be equal-length 1-D")
    n = len(words)
    return ConfidenceFeatures(
        vision,
        text,
        float(lm_score),
        n,
        float(lm_score) / n,
        math.log1p(len(covered_tags)),
        float(dmsm_score),
    )


@dataclass
class ConfidenceModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("standardization std entries must be positive")
        if not (self.weights.shape == self.mean.shape == self.std.shape):
            raise ShapeError("weights, mean and std must share one length")

    @property
    def n_features(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return (self.n_features - N_SCALARS) // 2

    def standardize(self, X):
        return (X - self.mean) / self.std

    def decision_function(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ShapeError(f"feature dimension {X.shape[1]} != model dimension {self.n_features}")
        return self.standardize(X) @ self.weights + self.bias

    def save(self, path):
        meta = {"kind": "confidence", "dim": self.dim, "mean": self.mean.tolist(), "std": self.std.tolist()}
        save_checkpoint(path, {"weights": self.weights, "bias": np.array([self.bias])}, meta)

    @classmethod
    def load(cls, path):
        t, meta = load_checkpoint(path)
        return cls(t["weights"], float(t["bias"][0]), np.array(meta["mean"]), np.array(meta["std"]))


def confidence_score(model, features):
    """Probability in (0, 1) that the caption is good."""
    x = features.to_vector() if isinstance(features, ConfidenceFeatures) else check_vector(features)
    return float(ops.sigmoid(model.decision_function(x[None]))[0])


@dataclass
class ConfidenceConfig:
    l2: float = 1e-2
    max_iter: int = 20000
    tol: float = 1e-6


def logistic_objective(theta, Xs, y, l2):
    """Mean logistic loss plus ``l2/2 * |w|^2`` (bias unpenalized), and its gradient.

    ``theta`` is ``[w, b]`` over standardized features ``Xs``.
    """
    w, b = theta[:-1], theta[-1]
    loss, cache = ops.logistic_loss_forward(Xs @ w + b, y)
    (dz,) = ops.logistic_loss_backward(1.0, cache)
    grad = np.concatenate([Xs.T @ dz + l2 * w, [dz.sum()]])
    return loss + 0.5 * l2 * (w @ w), grad


def _lipschitz(Xs, l2, rng):
    v = rng.normal(size=Xs.shape[1])
    for _ in range(100):
        v = Xs.T @ (Xs @ v)
        v /= np.linalg.norm(v)
    top = np.linalg.norm(Xs @ v) ** 2
    return 1.1 * (top / (4 * len(Xs)) + 0.25 + l2)


def train_confidence(X, labels, config=None):
    """Fit by accelerated gradient descent until ``|grad| <= tol`` or ``max_iter``.

    ``labels`` may be quality strings or 0/1.  Returns ``(model, final_loss)``.
    """
    config = config or ConfidenceConfig()
    X = np.atleast_2d(np.asarray([f.to_vector() if isinstance(f, ConfidenceFeatures) else f for f in X], dtype=np.float64))
    y = np.array([binarize_label(l) if isinstance(l, str) else int(l) for l in labels], dtype=np.float64)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} feature rows but {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise ValueError("training data needs both positive and negative examples after binarization")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Xs = (X - mean) / std

    step = 1.0 / _lipschitz(Xs, config.l2, np.random.default_rng(0))
    theta = np.zeros(X.shape[1] + 1)
    f, g = logistic_objective(theta, Xs, y, config.l2)
    momentum_point, t = theta.copy(), 1.0
    for _ in range(config.max_iter):
        if np.linalg.norm(g) <= config.tol:
            break
        _, g_m = logistic_objective(momentum_point, Xs, y, config.l2)
        new_theta = momentum_point - step * g_m
        new_f, new_g = logistic_objective(new_theta, Xs, y, config.l2)
        if new_f > f:
            # restart momentum on any increase
            momentum_point, t = theta.copy(), 1.0
            continue
        t_next = (1 + math.sqrt(1 + 4 * t * t)) / 2
        momentum_point = new_theta + ((t - 1) / t_next) * (new_theta - theta)
        theta, f, g, t = new_theta, new_f, new_g, t_next
    model = ConfidenceModel(theta[:-1].copy(), float(theta[-1]), mean, std)
    return model, float(f)


class ConfidenceEstimator(ClassifierMixin, BaseEstimator):
    """Binary caption-quality classifier over confidence feature vectors."""

    def __init__(self, l2=1e-2, max_iter=20000, tol=1e-6):
        self.l2 = l2
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        cfg = ConfidenceConfig(l2=self.l2, max_iter=self.max_iter, tol=self.tol)
        self.model_, self.final_loss_ = train_confidence(X, y, cfg)
        self.classes_ = np.array([0, 1])
        return self

    @classmethod
    def from_model(cls, model):
        est = cls()
        est.model_ = model
        est.classes_ = np.array([0, 1])
        return est

    def _matrix(self, X):
        return np.atleast_2d(
            np.asarray([f.to_vector() if isinstance(f, ConfidenceFeatures) else f for f in X], dtype=np.float64)
        )

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(self._matrix(X))

    def predict_proba(self, X):
        p = ops.sigmoid(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(int)

    def score(self, X, y):
        y = np.array([binarize_label(l) if isinstance(l, str) else int(l) for l in y])
        return float(np.mean(self.predict(X) == y))

    def save(self, path):
        check_is_fitted(self, "model_")
        self.model_.save(path)

    @classmethod
    def load(cls, path):
        return cls.from_model(ConfidenceModel.load(path))
