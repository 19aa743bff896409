"""MLP flow classifier, prediction and ACC/F1 metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn

INPUT_DIM = 34
HIDDEN = (64, 32)


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    label: int


class Detector:
    """Perceptron ``in -> 64 -> 32 -> 2`` with ReLU between layers; emits logits."""

    def __init__(self, input_dim: int = INPUT_DIM, hidden: Sequence[int] = HIDDEN, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else nn.make_rng(0)
        self.widths = (input_dim, *hidden, 2)
        self.store = nn.ParamStore()
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self.store.add(f"mlp.{i}.W", nn.glorot(rng, a, b, (a, b)))
            self.store.add(f"mlp.{i}.b", np.zeros(b))

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    def forward(self, x) -> nn.Tensor:
        h = x if isinstance(x, nn.Tensor) else nn.Tensor(x)
        if h.value.ndim != 2 or h.value.shape[1] != self.input_dim:
            raise nn.ShapeError(f"detector expects (N, {self.input_dim}) inputs, got {h.value.shape}")
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            h = nn.linear_forward(h, self.store[f"mlp.{i}.W"], self.store[f"mlp.{i}.b"])
            if i < n_layers - 1:
                h = nn.relu(h)
        return h

    def logits(self, X: np.ndarray) -> np.ndarray:
        """Forward pass on plain arrays; reads parameters only, safe across threads."""
        h = np.asarray(X, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise nn.ShapeError(f"detector expects (N, {self.input_dim}) inputs, got {h.shape}")
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            h = h @ self.store[f"mlp.{i}.W"].value + self.store[f"mlp.{i}.b"].value
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
        return h


def labels_from_logits(logits: np.ndarray) -> np.ndarray:
    # ties go to benign (0)
    return (logits[:, 1] > logits[:, 0]).astype(np.int64)


def predict(model: Detector, x: np.ndarray) -> Prediction:
    z = model.logits(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]
    return Prediction(z, nn.softmax(z), int(z[1] > z[0]))


def predict_batch(model: Detector, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (logits, probabilities, labels) for a batch."""
    z = model.logits(X)
    return z, nn.softmax(z, axis=1), labels_from_logits(z)


def pretrain(
    model: Detector,
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    lr: float = 1e-3,
    batch_size: int = 64,
    epochs: int = 30,
) -> list[float]:
    """Supervised cross-entropy training; returns the per-epoch mean loss."""
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("pretrain: no samples")
    if len(np.unique(y)) < 2:
        raise ValueError("pretrain needs both benign and malicious samples")
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            loss = nn.cross_entropy(model.forward(X[idx]), y[idx])
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            total += loss.item() * len(idx)
            nn.backward(loss)
            nn.adam_step(model.store, lr)
        curve.append(total / len(X))
    return curve


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def as_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1,
        }


def compute_metrics(predicted, truth) -> MetricsReport:
    """Confusion counts with malicious (1) as the positive class."""
    p = np.asarray(predicted, dtype=np.int64)
    t = np.asarray(truth, dtype=np.int64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("compute_metrics on empty input")
    return MetricsReport(
        tp=int(((p == 1) & (t == 1)).sum()),
        fp=int(((p == 1) & (t == 0)).sum()),
        tn=int(((p == 0) & (t == 0)).sum()),
        fn=int(((p == 0) & (t == 1)).sum()),
    )
