"""Hand-differentiated finite-option classifiers over a flat coordinate vector."""

from dataclasses import dataclass

import numpy as np

from ._validation import InvalidInputError
from .core_risk import softmax_rows


def n_coordinates(kind, feature_dim, K, hidden=0):
    if kind == "linear":
        return K * feature_dim + K
    if kind == "mlp1":
        return hidden * feature_dim + hidden + K * hidden + K
    raise InvalidInputError(f"unknown model kind {kind!r}")


@dataclass
class ToyModel:
    """Linear (``s = W x + b``) or one-hidden-layer tanh classifier.

    ``weights`` is the flat trainable coordinate vector. Linear layout is
    ``[W (K x d, row-major), b (K)]``; mlp1 layout is
    ``[W1 (H x d), b1 (H), W2 (K x H), b2 (K)]``.
    """

    kind: str
    weights: np.ndarray
    feature_dim: int
    K: int
    hidden: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        expected = n_coordinates(self.kind, self.feature_dim, self.K, self.hidden)
        if self.weights.shape[0] != expected:
            raise InvalidInputError(
                f"{self.kind} model with d={self.feature_dim}, K={self.K}, H={self.hidden} "
                f"needs {expected} coordinates, got {self.weights.shape[0]}"
            )
        if not np.all(np.isfinite(self.weights)):
            raise InvalidInputError("model coordinates must be finite")

    @classmethod
    def zeros(cls, kind, feature_dim, K, hidden=0):
        return cls(kind, np.zeros(n_coordinates(kind, feature_dim, K, hidden)), feature_dim, K, hidden)

    @classmethod
    def random(cls, kind, feature_dim, K, hidden=0, scale=0.1, rng=None):
        rng = np.random.default_rng(rng)
        d = n_coordinates(kind, feature_dim, K, hidden)
        return cls(kind, scale * rng.standard_normal(d), feature_dim, K, hidden)

    @property
    def d_train(self):
        return self.weights.shape[0]

    def with_weights(self, weights):
        return ToyModel(self.kind, weights, self.feature_dim, self.K, self.hidden)

    def unpack(self, weights=None):
        w = self.weights if weights is None else weights
        d, K, H = self.feature_dim, self.K, self.hidden
        if self.kind == "linear":
            return w[: K * d].reshape(K, d), w[K * d:]
        i = 0
        W1 = w[i: i + H * d].reshape(H, d); i += H * d
        b1 = w[i: i + H]; i += H
        W2 = w[i: i + K * H].reshape(K, H); i += K * H
        b2 = w[i: i + K]
        return W1, b1, W2, b2

    def _check_inputs(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.feature_dim:
            raise InvalidInputError(
                f"expected {self.feature_dim} features, got {X.shape[1]}"
            )
        return X

    def scores(self, X):
        """Score matrix ``(n, K)`` for the rows of ``X``."""
        X = self._check_inputs(X)
        if self.kind == "linear":
            W, b = self.unpack()
            return X @ W.T + b
        W1, b1, W2, b2 = self.unpack()
        return np.tanh(X @ W1.T + b1) @ W2.T + b2

    def backward(self, X, G):
        """Pull per-row score gradients ``G (n, K)`` back to coordinates (summed over rows)."""
        X = self._check_inputs(X)
        if self.kind == "linear":
            return np.concatenate([(G.T @ X).ravel(), G.sum(axis=0)])
        W1, b1, W2, b2 = self.unpack()
        h = np.tanh(X @ W1.T + b1)
        Gh = (G @ W2) * (1.0 - h * h)
        return np.concatenate([(Gh.T @ X).ravel(), Gh.sum(axis=0), (G.T @ h).ravel(), G.sum(axis=0)])

    def score_jacobian(self, x):
        """``d s / d w`` for one input, shape ``(K, d_train)``."""
        x = self._check_inputs(x)
        J = np.empty((self.K, self.d_train))
        for k in range(self.K):
            G = np.zeros((1, self.K))
            G[0, k] = 1.0
            J[k] = self.backward(x, G)
        return J

    def input_gradient(self, X, y):
        """Gradient of per-row cross-entropy with respect to each input row."""
        X = self._check_inputs(X)
        y = np.asarray(y, dtype=np.int64)
        P = softmax_rows(self.scores(X))
        P[np.arange(X.shape[0]), y] -= 1.0
        if self.kind == "linear":
            W, _ = self.unpack()
            return P @ W
        W1, b1, W2, _ = self.unpack()
        h = np.tanh(X @ W1.T + b1)
        return ((P @ W2) * (1.0 - h * h)) @ W1

    def predict(self, X):
        return np.argmax(self.scores(X), axis=1)

    def to_dict(self):
        return {
            "kind": self.kind,
            "feature_dim": self.feature_dim,
            "K": self.K,
            "hidden": self.hidden,
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], np.asarray(d["weights"]), d["feature_dim"], d["K"], d.get("hidden", 0))


def forward(model, x):
    """Score vector of one input."""
    return model.scores(np.asarray(x, dtype=float)[None, :])[0]
