"""Stateful detection pipeline: frozen extractor, detector, replay memory, RNG."""
from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .autoencoder import AutoEncoder, extract_features, train_autoencoder
from .buffer import ReservoirBuffer
from .config import PipelineConfig
from .detector import Detector, predict_batch, pretrain
from .incremental import Mode, RoundLog, incremental_round
from .ingest import FlowSequence, NormalizedSequence, derive_raw_sequence, normalize_sequence

log = logging.getLogger(__name__)


def normalize_flows(flows: Sequence[FlowSequence], config: PipelineConfig) -> list[NormalizedSequence]:
    return [
        normalize_sequence(derive_raw_sequence(f, config.n_head), config.n_head, config.n_buckets, config.bucket_width)
        for f in flows
    ]


def flow_labels(flows: Sequence[FlowSequence]) -> np.ndarray:
    missing = sum(f.label is None for f in flows)
    if missing:
        raise ValueError(f"{missing} flow(s) carry no label")
    return np.array([f.label for f in flows], dtype=np.int64)


@dataclass
class PretrainReport:
    ae_curve: list[float]
    detector_curve: list[float]
    n_flows: int
    buffer_size: int


@dataclass
class Engine:
    config: PipelineConfig
    detector: Detector
    buffer: ReservoirBuffer
    rng: np.random.Generator
    extractor: AutoEncoder | None = None
    rounds_done: int = 0
    history: list[str] = field(default_factory=list)

    @classmethod
    def create(cls, config: PipelineConfig) -> "Engine":
        rng = nn.make_rng(config.seed)
        extractor = AutoEncoder(config.ae_config(), rng)
        detector = Detector(config.embed_dim + 2, rng=rng)
        return cls(config, detector, ReservoirBuffer(config.buffer_capacity), rng, extractor)

    def clone(self) -> "Engine":
        return copy.deepcopy(self)

    def featurize(self, flows: Sequence[FlowSequence]) -> np.ndarray:
        if self.extractor is None:
            raise RuntimeError("no trained feature extractor; run pretrain first")
        return extract_features(self.extractor, normalize_flows(flows, self.config))

    def pretrain(self, flows: Sequence[FlowSequence]) -> PretrainReport:
        """Fit the extractor (unsupervised), then the detector, then seed the replay memory."""
        y = flow_labels(flows)
        if len(np.unique(y)) < 2:
            raise ValueError("pretraining needs both benign and malicious flows")
        c = self.config
        seqs = normalize_flows(flows, c)
        self.extractor, ae_curve = train_autoencoder(
            seqs, c.ae_epochs, self.rng, c.ae_config(), c.ae_lr, c.batch_size, model=self.extractor
        )
        X = extract_features(self.extractor, seqs)
        det_curve = pretrain(self.detector, X, y, self.rng, c.lr, c.batch_size, c.detector_epochs)
        self.buffer.offer_batch(X, y, self.detector.logits(X), self.rng)
        self.history.append("pretrain")
        return PretrainReport(ae_curve, det_curve, len(flows), len(self.buffer))

    def update(self, flows: Sequence[FlowSequence], mode: Mode | str | None = None) -> RoundLog:
        """One incremental round on labelled flows (for JOINT mode: everything seen so far)."""
        if not flows:
            raise ValueError("update needs at least one flow")
        lc = self.config.learn_config()
        if mode is not None:
            lc = dataclasses.replace(lc, mode=Mode(mode))
        X = self.featurize(flows)
        out = incremental_round(self.detector, self.buffer, X, flow_labels(flows), lc, self.rng)
        self.rounds_done += 1
        self.history.append(f"update:{lc.mode.value}")
        return out

    def update_features(self, X: np.ndarray, y: np.ndarray, mode: Mode | str | None = None) -> RoundLog:
        lc = self.config.learn_config()
        if mode is not None:
            lc = dataclasses.replace(lc, mode=Mode(mode))
        out = incremental_round(self.detector, self.buffer, X, y, lc, self.rng)
        self.rounds_done += 1
        self.history.append(f"update:{lc.mode.value}")
        return out

    def detect(self, flows: Sequence[FlowSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not flows:
            return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
        return predict_batch(self.detector, self.featurize(flows))
