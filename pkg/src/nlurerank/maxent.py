"""Multinomial maximum-entropy classifier over sparse binary n-gram features."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

BOS, EOS = "<s>", "</s>"


class DegenerateTrainingError(ValueError):
    """Training data cannot identify a model (e.g. a single label)."""


class NotTrainedError(RuntimeError):
    pass


def ngram_features(tokens: Sequence[str]) -> list[str]:
    """Unigrams plus bigrams over the sentinel-padded token sequence."""
    padded = [BOS, *tokens, EOS]
    feats = [f"u={t}" for t in tokens]
    feats += [f"b={a}_{b}" for a, b in zip(padded, padded[1:])]
    return feats


def token_features(tokens: Sequence[str], i: int) -> list[str]:
    """Window n-grams around position ``i`` for per-token tagging."""
    padded = [BOS, *tokens, EOS]
    prev, cur, nxt = padded[i], padded[i + 1], padded[i + 2]
    return [f"w={cur}", f"p={prev}", f"n={nxt}", f"pw={prev}_{cur}", f"wn={cur}_{nxt}"]


class FeatureIndex:
    def __init__(self, names: Sequence[str] = ()):
        self.names = list(names)
        self.index = {n: i for i, n in enumerate(self.names)}

    @classmethod
    def fit(cls, bags: Sequence[Sequence[str]]) -> "FeatureIndex":
        names: dict[str, None] = {}
        for bag in bags:
            for f in bag:
                names.setdefault(f, None)
        return cls(list(names))

    def __len__(self):
        return len(self.names)

    def transform(self, bags: Sequence[Sequence[str]]) -> sp.csr_matrix:
        """Binary bag-of-features rows scaled by 1/sqrt(bag size).

        Unknown features count toward the bag size but get no column, so an
        input made of unseen n-grams yields small logits instead of confident
        extrapolation from its few known features.
        """
        indptr = [0]
        indices: list[int] = []
        data: list[float] = []
        for bag in bags:
            distinct = set(bag)
            cols = sorted(self.index[f] for f in distinct if f in self.index)
            if cols:
                v = 1.0 / np.sqrt(len(distinct))
                indices.extend(cols)
                data.extend([v] * len(cols))
            indptr.append(len(indices))
        return sp.csr_matrix(
            (np.array(data, dtype=float), np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)),
            shape=(len(bags), len(self.names)),
        )


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def nll_and_grad(W: np.ndarray, b: np.ndarray, X, y: np.ndarray, l2: float):
    """Mean negative log-likelihood + (l2/2)||W||^2 and its gradients.

    The intercept ``b`` is not penalized.
    """
    n = X.shape[0]
    logp = log_softmax(X @ W + b)
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * float(np.sum(W * W))
    resid = np.exp(logp)
    resid[np.arange(n), y] -= 1.0
    resid /= n
    gW = np.asarray(X.T @ resid) + l2 * W
    gb = resid.sum(axis=0)
    return loss, gW, gb


@dataclass
class MaxEntModel:
    labels: list
    features: FeatureIndex
    W: np.ndarray
    b: np.ndarray
    loss_history: list[float] = field(default_factory=list)

    def logits(self, bags: Sequence[Sequence[str]]) -> np.ndarray:
        if self.W is None:
            raise NotTrainedError("model has no weights")
        return self.features.transform(bags) @ self.W + self.b

    def log_proba(self, bags: Sequence[Sequence[str]], temperature: float = 1.0) -> np.ndarray:
        return log_softmax(self.logits(bags) / temperature)

    def predict(self, bags: Sequence[Sequence[str]]) -> list:
        return [self.labels[k] for k in self.logits(bags).argmax(axis=1)]

    def label_index(self, label: Hashable) -> int:
        return self.labels.index(label)


def train_maxent(
    examples: Sequence[tuple[Sequence[str], Hashable]],
    l2: float = 0.0,
    epochs: int = 200,
    step: float = 0.5,
    labels: Sequence[Hashable] | None = None,
    optimizer: str = "lbfgs",
) -> MaxEntModel:
    """Fit on the regularized mean NLL.

    ``optimizer="gd"`` runs ``epochs`` full-batch gradient steps of size
    ``step``; rows are unit-normalized, which bounds the loss curvature by
    ``1 + l2``, and a step that would still raise the loss is halved first.
    ``optimizer="lbfgs"`` runs at most ``epochs`` L-BFGS iterations.
    ``loss_history`` holds the loss after every iteration.
    """
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    if optimizer not in ("gd", "lbfgs"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if labels is None:
        labels = sorted({lab for _, lab in examples}, key=str)
    labels = list(labels)
    if len({lab for _, lab in examples}) < 2:
        raise DegenerateTrainingError("need at least two distinct labels to train a classifier")
    bags = [bag for bag, _ in examples]
    index = FeatureIndex.fit(bags)
    X = index.transform(bags)
    lab_idx = {lab: k for k, lab in enumerate(labels)}
    y = np.array([lab_idx[lab] for _, lab in examples])
    F, K = len(index), len(labels)

    if optimizer == "lbfgs":
        W, b, history = _fit_lbfgs(X, y, F, K, l2, epochs)
    else:
        W, b, history = _fit_gd(X, y, F, K, l2, epochs, step)
    return MaxEntModel(labels=labels, features=index, W=W, b=b, loss_history=history)


def _fit_gd(X, y, F, K, l2, epochs, step):
    W = np.zeros((F, K))
    b = np.zeros(K)
    loss, gW, gb = nll_and_grad(W, b, X, y, l2)
    history = [loss]
    lr = step
    for _ in range(epochs):
        while True:
            W_new, b_new = W - lr * gW, b - lr * gb
            new_loss, new_gW, new_gb = nll_and_grad(W_new, b_new, X, y, l2)
            if new_loss <= loss or lr < 1e-12:
                break
            lr *= 0.5
        W, b, loss, gW, gb = W_new, b_new, new_loss, new_gW, new_gb
        history.append(loss)
    return W, b, history


def _fit_lbfgs(X, y, F, K, l2, maxiter):
    def fun(theta):
        loss, gW, gb = nll_and_grad(theta[: F * K].reshape(F, K), theta[F * K:], X, y, l2)
        return loss, np.concatenate([gW.ravel(), gb])

    theta0 = np.zeros(F * K + K)
    history = [fun(theta0)[0]]
    res = minimize(
        fun, theta0, jac=True, method="L-BFGS-B",
        callback=lambda xk: history.append(fun(xk)[0]),
        options={"maxiter": maxiter, "gtol": 1e-8, "ftol": 1e-12},
    )
    return res.x[: F * K].reshape(F, K), res.x[F * K:], history
