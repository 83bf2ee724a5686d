"""Image-guided weather routing: a small depthwise-separable classifier, top-K routing,
and the point-feature gate used as a baseline router."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nncore as nn
from ._validation import check_images, check_labels
from .nncore import Rng

N_CLASSES = 7


@dataclass(frozen=True)
class RoutingDecision:
    probs: np.ndarray
    selected: tuple

    @property
    def weights(self) -> dict:
        return {int(w): float(self.probs[w]) for w in self.selected}

    @property
    def top(self) -> int:
        return int(self.selected[0])


def top_k(probs: np.ndarray, k: int) -> tuple:
    """Indices of the k largest entries, descending; ties go to the lower index."""
    probs = np.asarray(probs)
    order = np.lexsort((np.arange(len(probs)), -probs))
    return tuple(int(i) for i in order[:k])


def route(z, k: int = 1) -> RoutingDecision:
    """Softmax the logits and select the top-k experts."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if not 1 <= k <= len(z):
        raise ValueError(f"K must be in [1, {len(z)}], got {k}")
    p = nn.softmax(z)
    return RoutingDecision(p, top_k(p, k))


def _iterate_minibatches(n: int, batch_size: int, rng: Rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


class WeatherClassifier(BaseEstimator, ClassifierMixin):
    """Stem conv, four depthwise-separable blocks, global pooling, linear head.

    All strides are 2. The head starts at zero, so an untrained model emits
    all-zero logits.
    """

    def __init__(self, widths=(16, 24, 32, 48, 64), n_classes=N_CLASSES, lr=0.1, momentum=0.9,
                 epochs=30, batch_size=16, seed=0, image_shape=(3, 64, 96)):
        self.widths = widths
        self.n_classes = n_classes
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.image_shape = image_shape

    def _build(self) -> nn.Sequential:
        rng = Rng(nn.derive_seed(self.seed, 0xC1A5))
        w = list(self.widths)
        layers = [nn.Conv2d(self.image_shape[0], w[0], 3, 2, 1, rng=rng), nn.ReLU()]
        for cin, cout in zip(w[:-1], w[1:]):
            layers.append(nn.DepthwiseSeparableBlock(cin, cout, stride=2, rng=rng))
        layers += [nn.GlobalAvgPool(), nn.Linear(w[-1], self.n_classes)]
        return nn.Sequential(*layers)

    def initialize(self) -> "WeatherClassifier":
        self.net_ = self._build()
        self.classes_ = np.arange(self.n_classes)
        self.loss_curve_ = []
        return self

    @property
    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.net_.params().values()))

    def trunk(self, n_blocks: int = 2) -> nn.Sequential:
        """Stem plus the first ``n_blocks`` blocks, shared with the camera branch as an image backbone."""
        check_is_fitted(self, "net_")
        return nn.Sequential(*self.net_.layers[:2 + n_blocks])

    def fit(self, X, y):
        X = check_images(X, self.image_shape)
        y = check_labels(y, self.n_classes, len(X))
        if len(X) == 0:
            raise ValueError("cannot train the weather classifier on an empty set")
        self.initialize()
        rng = Rng(nn.derive_seed(self.seed, 0x7EA1))
        params = list(self.net_.params().values())
        for epoch in range(self.epochs):
            total, count = 0.0, 0
            lr = self.lr * (0.1 if epoch >= max(1, int(0.8 * self.epochs)) and self.epochs > 2 else 1.0)
            for idx in _iterate_minibatches(len(X), self.batch_size, rng):
                self.net_.zero_grad()
                logits = self.net_.forward(X[idx])
                loss, g = nn.cross_entropy_loss(logits, y[idx])
                self.net_.backward(g)
                nn.sgd_step(params, lr, self.momentum)
                total += loss * len(idx)
                count += len(idx)
            self.loss_curve_.append(total / count)
        self.net_.clear()
        return self

    def decision_function(self, X, batch_size: int = 64) -> np.ndarray:
        """Logits (N, n_classes). Evaluation uses a fresh graph, so the model is never mutated."""
        check_is_fitted(self, "net_")
        X = check_images(X, self.image_shape)
        out = []
        for i in range(0, len(X), batch_size):
            out.append(nn.detached(self.net_).forward(X[i:i + batch_size]))
        return np.concatenate(out) if out else np.zeros((0, self.n_classes), nn.DTYPE)

    def predict_proba(self, X) -> np.ndarray:
        return nn.softmax(self.decision_function(X).astype(np.float64), axis=1)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def classify(self, image) -> np.ndarray:
        """Logits for one 3xHxW image."""
        return self.decision_function(np.asarray(image)[None])[0]

    def route(self, image, k: int = 1) -> RoutingDecision:
        return route(self.classify(image), k)

    def to_tensors(self) -> dict:
        check_is_fitted(self, "net_")
        return nn.state_dict(self.net_, "classifier.")

    def load_tensors(self, tensors) -> "WeatherClassifier":
        self.initialize()
        nn.load_state(self.net_, tensors, "classifier.")
        return self

    def save(self, path) -> None:
        nn.save_tensors(path, self.to_tensors())

    @classmethod
    def load(cls, path, **params) -> "WeatherClassifier":
        return cls(**params).load_tensors(nn.read_tensors(path))


def train_classifier(frames, config=None, rng: Rng | None = None) -> WeatherClassifier:
    """Fit a WeatherClassifier on frame images and their weather tags."""
    if len(frames) == 0:
        raise ValueError("cannot train the weather classifier on an empty set")
    params = dict(config or {})
    if rng is not None:
        params.setdefault("seed", rng.seed)
    X = np.stack([f.image for f in frames])
    y = np.array([int(f.weather) for f in frames])
    params.setdefault("image_shape", X.shape[1:])
    return WeatherClassifier(**params).fit(X, y)


class PointFeatureRouter(BaseEstimator, ClassifierMixin):
    """Baseline gate: pooled BEV feature -> standardize -> linear -> softmax."""

    def __init__(self, n_classes=N_CLASSES, lr=0.1, momentum=0.9, epochs=60, batch_size=32, seed=0):
        self.n_classes = n_classes
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    @staticmethod
    def pool(X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X.mean(axis=(2, 3)) if X.ndim == 4 else X.reshape(len(X), -1)

    def initialize(self, n_features: int, mean=None, scale=None) -> "PointFeatureRouter":
        self.gate_ = nn.Linear(n_features, self.n_classes).astype(np.float64)
        self.mean_ = np.zeros(n_features) if mean is None else mean
        self.scale_ = np.ones(n_features) if scale is None else scale
        self.classes_ = np.arange(self.n_classes)
        return self

    def fit(self, X, y):
        F = self.pool(X)
        y = check_labels(y, self.n_classes, len(F))
        if len(F) == 0:
            raise ValueError("cannot train the gate on an empty set")
        sd = F.std(axis=0)
        self.initialize(F.shape[1], F.mean(axis=0), np.where(sd > 1e-8, sd, 1.0))
        Z = (F - self.mean_) / self.scale_
        rng = Rng(nn.derive_seed(self.seed, 0x9F12))
        params = list(self.gate_.params().values())
        self.loss_curve_ = []
        for _ in range(self.epochs):
            total = 0.0
            for idx in _iterate_minibatches(len(Z), self.batch_size, rng):
                self.gate_.zero_grad()
                loss, g = nn.cross_entropy_loss(self.gate_.forward(Z[idx]), y[idx])
                self.gate_.backward(g)
                nn.sgd_step(params, self.lr, self.momentum)
                total += loss * len(idx)
            self.loss_curve_.append(total / len(Z))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "gate_")
        Z = (self.pool(X) - self.mean_) / self.scale_
        return Z @ self.gate_.weight.value.T + self.gate_.bias.value

    def predict_proba(self, X):
        return nn.softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def pfr_route(self, feature, k: int = 1) -> RoutingDecision:
        """Route one shared BEV feature map (C, H, W) or pooled vector."""
        f = np.asarray(feature)
        f = f[None] if f.ndim in (1, 3) else f
        return route(self.decision_function(f)[0], k)
