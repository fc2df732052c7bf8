"""Small classifiers with hand-written gradients.

Parameters are always one flat float vector so they can be normalized,
transmitted and zero-padded like any other model update.
"""

from __future__ import annotations

import numpy as np


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.shape[0]
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    return float(loss), dlogits / n


class SoftmaxRegression:
    """Multinomial logistic regression, ``logits = X W^T + b``."""

    kind = "logistic"

    def __init__(self, n_features: int, n_classes: int, l2: float = 0.0):
        self.n_features = n_features
        self.n_classes = n_classes
        self.l2 = l2

    @property
    def dim(self) -> int:
        return self.n_classes * (self.n_features + 1)

    def unpack(self, v: np.ndarray):
        c, f = self.n_classes, self.n_features
        return v[: c * f].reshape(c, f), v[c * f: c * (f + 1)]

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.dim)

    def logits(self, v: np.ndarray, x: np.ndarray) -> np.ndarray:
        w, b = self.unpack(v)
        return x @ w.T + b

    def loss_and_grad(self, v: np.ndarray, x: np.ndarray, y: np.ndarray):
        w, b = self.unpack(v)
        loss, dlogits = _softmax_xent(x @ w.T + b, y)
        gw = dlogits.T @ x
        if self.l2:
            loss += 0.5 * self.l2 * float(np.sum(w * w))
            gw = gw + self.l2 * w
        return loss, np.concatenate([gw.ravel(), dlogits.sum(axis=0)])

    def loss(self, v, x, y) -> float:
        return self.loss_and_grad(v, x, y)[0]

    def grad(self, v, x, y) -> np.ndarray:
        return self.loss_and_grad(v, x, y)[1]

    def predict(self, v: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.logits(v, x).argmax(axis=1)


class MLP:
    """One hidden tanh layer followed by a softmax output."""

    kind = "mlp"

    def __init__(self, n_features: int, n_classes: int, hidden: int = 16, l2: float = 0.0):
        self.n_features = n_features
        self.n_classes = n_classes
        self.hidden = hidden
        self.l2 = l2

    @property
    def dim(self) -> int:
        f, h, c = self.n_features, self.hidden, self.n_classes
        return h * f + h + c * h + c

    def unpack(self, v: np.ndarray):
        f, h, c = self.n_features, self.hidden, self.n_classes
        i = 0
        w1 = v[i:i + h * f].reshape(h, f)
        i += h * f
        b1 = v[i:i + h]
        i += h
        w2 = v[i:i + c * h].reshape(c, h)
        i += c * h
        return w1, b1, w2, v[i:i + c]

    def init(self, rng: np.random.Generator) -> np.ndarray:
        f, h, c = self.n_features, self.hidden, self.n_classes
        w1 = rng.standard_normal((h, f)) / np.sqrt(f)
        w2 = rng.standard_normal((c, h)) / np.sqrt(h)
        return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(c)])

    def logits(self, v: np.ndarray, x: np.ndarray) -> np.ndarray:
        w1, b1, w2, b2 = self.unpack(v)
        return np.tanh(x @ w1.T + b1) @ w2.T + b2

    def loss_and_grad(self, v: np.ndarray, x: np.ndarray, y: np.ndarray):
        w1, b1, w2, b2 = self.unpack(v)
        a = np.tanh(x @ w1.T + b1)
        loss, dlogits = _softmax_xent(a @ w2.T + b2, y)
        gw2 = dlogits.T @ a
        gb2 = dlogits.sum(axis=0)
        dz = (dlogits @ w2) * (1 - a * a)
        gw1 = dz.T @ x
        gb1 = dz.sum(axis=0)
        if self.l2:
            loss += 0.5 * self.l2 * float(np.sum(w1 * w1) + np.sum(w2 * w2))
            gw1 = gw1 + self.l2 * w1
            gw2 = gw2 + self.l2 * w2
        return loss, np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])

    def loss(self, v, x, y) -> float:
        return self.loss_and_grad(v, x, y)[0]

    def grad(self, v, x, y) -> np.ndarray:
        return self.loss_and_grad(v, x, y)[1]

    def predict(self, v: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.logits(v, x).argmax(axis=1)


def build_model(kind: str, n_features: int, n_classes: int, hidden: int = 16, l2: float = 0.0):
    if kind == "logistic":
        return SoftmaxRegression(n_features, n_classes, l2)
    if kind == "mlp":
        return MLP(n_features, n_classes, hidden, l2)
    raise ValueError(f"unknown model kind {kind!r}")


def finite_difference_grad(fun, v: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    v = np.array(v, dtype=float)
    out = np.empty_like(v)
    for k in range(v.size):
        orig = v[k]
        v[k] = orig + eps
        up = fun(v)
        v[k] = orig - eps
        down = fun(v)
        v[k] = orig
        out[k] = (up - down) / (2 * eps)
    return out
