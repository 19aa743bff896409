"""Replay-based incremental updates with the anti-forgetting composite loss.

Per step on a minibatch of new flows, with two independent draws from the
replay memory (x', y', z') and (x'', y'', z''):

    total = CE(f(x), y)                               # l_ce
          + alpha * mean ||z' - f(x')||^2             # l_il (logit distillation)
          + k * alpha * mean CE(f(x''), y'')          # k * l_lb
    k     = 0.5 + sigmoid(gamma * l_il)

The squared-logit distance stands in for KL(softmax(z') || softmax(f(x'))):
for nearby distributions the KL divergence is, to second order, a weighted
squared Euclidean distance. :func:`second_order_residual` measures how good that
approximation is.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .buffer import Batch, ReservoirBuffer
from .detector import Detector

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    FULL_LOSS = "etguard"
    FINETUNE_ONLY = "etguard-v"
    JOINT = "full"


@dataclass(frozen=True)
class LearnConfig:
    alpha: float = 0.5
    gamma: float = 10.0
    lr: float = 1e-3
    batch_size: int = 64
    epochs_per_round: int = 20
    buffer_batch: int = 64
    mode: Mode = Mode.FULL_LOSS

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.batch_size < 1 or self.buffer_batch < 0 or self.epochs_per_round < 1:
            raise ValueError("batch_size and epochs_per_round must be >= 1, buffer_batch >= 0")
        object.__setattr__(self, "mode", Mode(self.mode))


@dataclass(frozen=True)
class LossBreakdown:
    l_ce: float
    l_il: float
    l_lb: float  # alpha * buffer cross-entropy
    k: float
    total: float
    epoch: int = -1
    step: int = -1
    replay: int = 0  # replayed samples per draw this step; 0 when the buffer was not used

    CSV_HEADER = ("epoch", "step", "replay", "l_ce", "l_il", "l_lb", "k", "total")

    def csv_row(self) -> str:
        head = [str(self.epoch), str(self.step), str(self.replay)]
        return ",".join(head + [repr(v) for v in (self.l_ce, self.l_il, self.l_lb, self.k, self.total)])


# -- divergences --------------------------------------------------------------------


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("p and q must have the same shape")
    if (p <= 0).any() or (q <= 0).any():
        raise ValueError("KL divergence needs strictly positive probabilities")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("inputs must sum to 1")
    return float(np.sum(p * np.log(p / q)))


def second_order_residual(p, delta, eps: float) -> tuple[float, float, float]:
    """(KL(p || p + eps*delta), (eps^2 / 2) * sum(delta^2 / p), their difference).

    ``delta`` must sum to zero so the perturbed vector stays on the simplex.
    """
    p = np.asarray(p, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if abs(delta.sum()) > 1e-9:
        raise ValueError("perturbation must sum to zero")
    q = p + eps * delta
    if (q <= 0).any():
        raise ValueError("perturbation leaves the probability simplex")
    # log1p keeps precision when eps*delta/p is tiny
    kl = float(-np.sum(p * np.log1p(eps * delta / p)))
    weighted = 0.5 * eps**2 * float(np.sum(delta**2 / p))
    return kl, weighted, kl - weighted


# -- loss terms ---------------------------------------------------------------------


def distillation_loss(batch: Batch, detector: Detector, alpha: float) -> nn.Tensor:
    """alpha * mean squared L2 distance between stored and current logits."""
    if len(batch) == 0:
        return nn.Tensor(0.0)
    return nn.mse_loss(detector.forward(batch.x), batch.z) * alpha


def buffer_ce_loss(batch: Batch, detector: Detector) -> nn.Tensor:
    if len(batch) == 0:
        return nn.Tensor(0.0)
    return nn.cross_entropy(detector.forward(batch.x), batch.y)


def balance_coefficient(l_il: float, gamma: float) -> float:
    """0.5 + logistic(gamma * l_il), always in (0.5, 1.5)."""
    return 0.5 + float(nn.sigmoid(gamma * l_il))


def total_loss(
    x: np.ndarray,
    y: np.ndarray,
    replay_il: Batch,
    replay_lb: Batch,
    detector: Detector,
    config: LearnConfig,
    k: float | None = None,
) -> tuple[nn.Tensor, LossBreakdown]:
    """Composite loss for one step; ``k`` is a constant w.r.t. differentiation.

    Passing ``k`` pins the coefficient (used when probing gradients by finite
    differences); otherwise it is computed from the current l_il.
    """
    l_ce = nn.cross_entropy(detector.forward(x), y)
    if config.mode is not Mode.FULL_LOSS:
        kk = balance_coefficient(0.0, config.gamma) if k is None else k
        return l_ce, LossBreakdown(l_ce.item(), 0.0, 0.0, kk, l_ce.item())
    l_il = distillation_loss(replay_il, detector, config.alpha)
    l_lb = buffer_ce_loss(replay_lb, detector) * config.alpha
    kk = balance_coefficient(l_il.item(), config.gamma) if k is None else k
    total = l_ce + l_il + l_lb * kk
    return total, LossBreakdown(l_ce.item(), l_il.item(), l_lb.item(), kk, total.item())


# -- rounds -------------------------------------------------------------------------


@dataclass
class RoundLog:
    steps: list[LossBreakdown] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [",".join(LossBreakdown.CSV_HEADER)] + [s.csv_row() for s in self.steps]
        return "\n".join(lines) + "\n"


def incremental_round(
    detector: Detector,
    buffer: ReservoirBuffer,
    X: np.ndarray,
    y: np.ndarray,
    config: LearnConfig,
    rng: np.random.Generator,
) -> RoundLog:
    """Train ``detector`` in place on one round of new data.

    Each minibatch step draws two fresh replay batches (FULL_LOSS only),
    takes one Adam step, and during the final epoch offers every sample of
    the minibatch to the reservoir with its post-step logits, so each new
    sample is streamed to the buffer exactly once per round.
    """
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("incremental_round: no new data")
    out = RoundLog()
    use_replay = config.mode is Mode.FULL_LOSS
    for epoch in range(config.epochs_per_round):
        order = rng.permutation(len(y))
        last_epoch = epoch == config.epochs_per_round - 1
        for step, i in enumerate(range(0, len(order), config.batch_size)):
            idx = order[i : i + config.batch_size]
            if use_replay and len(buffer):
                k = min(config.buffer_batch, len(idx))
                b_il, b_lb = buffer.sample_two_batches(k, rng)
            else:
                b_il = b_lb = Batch.empty(X.shape[1])
            loss, parts = total_loss(X[idx], y[idx], b_il, b_lb, detector, config)
            if not math.isfinite(parts.total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step}: {parts}")
            nn.backward(loss)
            nn.adam_step(detector.store, config.lr)
            out.steps.append(replace(parts, epoch=epoch, step=step, replay=len(b_il)))
            if last_epoch:
                buffer.offer_batch(X[idx], y[idx], detector.logits(X[idx]), rng)
    return out
