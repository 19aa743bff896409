"""Bi-GRU sequence autoencoder over packet-length buckets.

Encoder: bucket embedding -> stacked bidirectional GRU; the concatenated
final states (2 * layers * hidden values) are the flow's feature vector.
Decoder: the same kind of stack fed the feature vector at every step,
followed by a per-step two-layer perceptron scoring the length buckets.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .ingest import N_BUCKETS, N_HEAD, NormalizedSequence

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AEConfig:
    n_steps: int = N_HEAD
    n_buckets: int = N_BUCKETS
    embed_dim: int = 32
    hidden: int = 8
    layers: int = 2
    head_hidden: int = 32

    def __post_init__(self):
        if self.embed_dim != 2 * self.layers * self.hidden:
            raise ValueError(
                f"embed_dim ({self.embed_dim}) must equal 2*layers*hidden ({2 * self.layers * self.hidden})"
            )

    @property
    def feature_dim(self) -> int:
        return 2 * self.layers * self.hidden


class AutoEncoder:
    def __init__(self, config: AEConfig = AEConfig(), rng: np.random.Generator | None = None):
        self.config = c = config
        rng = rng if rng is not None else nn.make_rng(0)
        self.store = s = nn.ParamStore()
        # row n_buckets is the padding sentinel
        s.add("embed", rng.normal(0.0, 0.1, size=(c.n_buckets + 1, c.embed_dim)))
        nn.init_bi_gru_stack(s, "enc", c.embed_dim, c.hidden, c.layers, rng)
        nn.init_bi_gru_stack(s, "dec", c.feature_dim, c.hidden, c.layers, rng)
        s.add("head.W1", nn.glorot(rng, 2 * c.hidden, c.head_hidden, (2 * c.hidden, c.head_hidden)))
        s.add("head.b1", np.zeros(c.head_hidden))
        s.add("head.W2", nn.glorot(rng, c.head_hidden, c.n_buckets, (c.head_hidden, c.n_buckets)))
        s.add("head.b2", np.zeros(c.n_buckets))

    def encoder_forward(self, buckets: np.ndarray, mask: np.ndarray) -> nn.Tensor:
        emb = nn.embedding(self.store["embed"], buckets)
        _, final = nn.bi_gru_stack_forward(emb, mask, self.store, "enc", self.config.layers)
        return final

    def forward(self, buckets: np.ndarray, mask: np.ndarray) -> tuple[nn.Tensor, nn.Tensor]:
        """Returns (features (N, feature_dim), bucket scores (N, T, n_buckets))."""
        c, s = self.config, self.store
        feat = self.encoder_forward(buckets, mask)
        N, T = buckets.shape
        dec_in = nn.repeat_steps(feat, T)
        dec_out, _ = nn.bi_gru_stack_forward(dec_in, mask, s, "dec", c.layers)
        flat = nn.reshape(dec_out, (N * T, 2 * c.hidden))
        hid = nn.relu(nn.linear_forward(flat, s["head.W1"], s["head.b1"]))
        scores = nn.linear_forward(hid, s["head.W2"], s["head.b2"])
        return feat, nn.reshape(scores, (N, T, c.n_buckets))


def stack_sequences(seqs: Sequence[NormalizedSequence]) -> tuple[np.ndarray, np.ndarray]:
    buckets = np.array([s.buckets for s in seqs], dtype=np.int64)
    mask = np.array([s.mask for s in seqs], dtype=bool)
    return buckets, mask


def reconstruction_loss(scores: nn.Tensor, buckets: np.ndarray, mask: np.ndarray) -> nn.Tensor:
    """Mean per-step cross-entropy of bucket scores over valid (unmasked) steps."""
    N, T, C = scores.value.shape
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("reconstruction_loss: no valid steps")
    targets = np.where(mask, buckets, 0).reshape(-1)
    return nn.cross_entropy(nn.reshape(scores, (N * T, C)), targets, mask.reshape(-1))


def encode(model: AutoEncoder, seq: NormalizedSequence) -> np.ndarray:
    return encode_batch(model, [seq])[0]


def encode_batch(model: AutoEncoder, seqs: Sequence[NormalizedSequence], chunk: int = 256) -> np.ndarray:
    out = np.zeros((len(seqs), model.config.feature_dim))
    for i in range(0, len(seqs), chunk):
        b, m = stack_sequences(seqs[i : i + chunk])
        out[i : i + len(b)] = model.encoder_forward(b, m).value
    return out


def reconstruct(model: AutoEncoder, seq: NormalizedSequence) -> np.ndarray:
    b, m = stack_sequences([seq])
    return model.forward(b, m)[1].value[0]


def train_autoencoder(
    dataset: Sequence[NormalizedSequence],
    epochs: int,
    rng: np.random.Generator,
    config: AEConfig = AEConfig(),
    lr: float = 1e-3,
    batch_size: int = 64,
    model: AutoEncoder | None = None,
) -> tuple[AutoEncoder, list[float]]:
    """Fit the autoencoder by minimising reconstruction loss.

    Returns the model and the per-epoch mean training loss.
    """
    if not dataset:
        raise ValueError("train_autoencoder: empty dataset")
    if model is None:
        model = AutoEncoder(config, rng)
    buckets, mask = stack_sequences(dataset)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for step, i in enumerate(range(0, len(order), batch_size)):
            idx = order[i : i + batch_size]
            _, scores = model.forward(buckets[idx], mask[idx])
            loss = reconstruction_loss(scores, buckets[idx], mask[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite reconstruction loss at epoch {epoch} step {step}")
            nn.backward(loss)
            nn.adam_step(model.store, lr)
            total += value * len(idx)
            count += len(idx)
        curve.append(total / count)
        log.debug("autoencoder epoch %d loss %.5f", epoch, curve[-1])
    return model, curve


def extract_features(model: AutoEncoder, seqs: Sequence[NormalizedSequence]) -> np.ndarray:
    """Detector inputs: encoder features followed by (d_norm, t_m_norm), one row per flow."""
    if not seqs:
        return np.zeros((0, model.config.feature_dim + 2))
    timing = np.array([[s.d_norm, s.t_m_norm] for s in seqs])
    return np.concatenate([encode_batch(model, seqs), timing], axis=1)
