"""Cumulative-round evaluation: pretrain on round 0, update on rounds 1..K.

After every round the detector is scored on the union of the held-out test
splits of rounds 0..i, overall (ACC/F1) and per family. Modes share the
pretrained starting point and diverge only in how they update.
"""
from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .checkpoint import dumps, loads
from .config import PipelineConfig
from .detector import compute_metrics, labels_from_logits
from .engine import Engine, flow_labels
from .incremental import Mode, RoundLog
from .ingest import FlowSequence
from .synth import FamilySpec, _Addresses, generate_family

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoundSpec:
    families: tuple[FamilySpec, ...]
    rounds: tuple[dict, ...]  # per round: family name -> number of flows
    test_fraction: float = 0.3

    def __post_init__(self):
        names = {f.name for f in self.families}
        if len(names) != len(self.families):
            raise ValueError("family names must be unique")
        if len(self.rounds) < 2:
            raise ValueError("need at least two rounds")
        for i, r in enumerate(self.rounds):
            unknown = set(r) - names
            if unknown:
                raise ValueError(f"round {i} names unknown families {sorted(unknown)}")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")

    def family(self, name: str) -> FamilySpec:
        return next(f for f in self.families if f.name == name)

    @classmethod
    def from_dict(cls, d: dict) -> "RoundSpec":
        try:
            return cls(
                tuple(FamilySpec.from_dict(f) for f in d["families"]),
                tuple({str(k): int(v) for k, v in r.items()} for r in d["rounds"]),
                float(d.get("test_fraction", 0.3)),
            )
        except (KeyError, TypeError, AttributeError) as e:
            raise ValueError(f"malformed round spec: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "RoundSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ValueError(f"malformed round spec {path}: {e}") from e

    def as_dict(self) -> dict:
        return {"test_fraction": self.test_fraction, "families": [f.as_dict() for f in self.families],
                "rounds": [dict(r) for r in self.rounds]}


@dataclass
class RoundData:
    train: list[FlowSequence]
    test: list[FlowSequence]


def build_rounds(spec: RoundSpec, rng: np.random.Generator) -> list[RoundData]:
    """Synthesise each round and split every family's flows into train/test."""
    addresses = _Addresses()
    index = {f.name: i for i, f in enumerate(spec.families)}
    out = []
    for r in spec.rounds:
        train, test = [], []
        for name, count in r.items():
            flows = generate_family(spec.family(name), count, rng, addresses, index[name])
            perm = rng.permutation(len(flows))
            n_test = int(round(spec.test_fraction * len(flows)))
            test += [flows[j] for j in perm[:n_test]]
            train += [flows[j] for j in perm[n_test:]]
        out.append(RoundData(train, test))
    return out


@dataclass(frozen=True)
class RoundRow:
    mode: str
    round: int
    n_test: int
    accuracy: float
    f1: float
    family_accuracy: dict


@dataclass
class EvalResult:
    seed: int
    rows: list[RoundRow] = field(default_factory=list)
    logs: dict[str, list[RoundLog]] = field(default_factory=dict)

    def row(self, mode: str, rnd: int) -> RoundRow:
        return next(r for r in self.rows if r.mode == mode and r.round == rnd)

    def to_csv(self, families: Sequence[str]) -> str:
        buf = io.StringIO()
        buf.write(",".join(["seed", "mode", "round", "n_test", "accuracy", "f1"] + [f"acc_{f}" for f in families]) + "\n")
        for r in self.rows:
            fam = ["" if f not in r.family_accuracy else repr(r.family_accuracy[f]) for f in families]
            buf.write(",".join([str(self.seed), r.mode, str(r.round), str(r.n_test), repr(r.accuracy), repr(r.f1)] + fam) + "\n")
        return buf.getvalue()


def _introduced_by(spec: RoundSpec, i: int) -> set[str]:
    return {name for r in spec.rounds[: i + 1] for name, n in r.items() if n > 0}


def evaluate(engine: Engine, X: np.ndarray, flows: Sequence[FlowSequence], mode: str, rnd: int) -> RoundRow:
    y = flow_labels(flows)
    pred = labels_from_logits(engine.detector.logits(X))
    m = compute_metrics(pred, y)
    fams = np.array([f.family for f in flows])
    per = {str(name): float((pred[fams == name] == y[fams == name]).mean()) for name in dict.fromkeys(fams)}
    return RoundRow(mode, rnd, len(y), m.accuracy, m.f1, per)


def run_rounds(spec: RoundSpec, config: PipelineConfig, modes: Sequence[Mode | str] = tuple(Mode),
               seed: int | None = None, roundtrip_after: int | None = None) -> EvalResult:
    """Run every mode over all rounds of ``spec``.

    With ``roundtrip_after=i`` each mode's engine is serialised to checkpoint
    bytes and reloaded after round ``i``, as if the run had been stopped and
    resumed there.
    """
    seed = config.seed if seed is None else seed
    config = config.replace(seed=seed)
    modes = [Mode(m) for m in modes]
    data = build_rounds(spec, nn.make_rng([seed, 1]))
    base = Engine.create(config)
    base.pretrain(data[0].train)
    X_train = [base.featurize(d.train) for d in data]
    y_train = [flow_labels(d.train) for d in data]
    X_test = [base.featurize(d.test) for d in data]

    result = EvalResult(seed)
    for mode in modes:
        engine = base.clone()
        result.logs[mode.value] = []
        for i in range(len(data)):
            if i > 0:
                if mode is Mode.JOINT:
                    X, y = np.concatenate(X_train[: i + 1]), np.concatenate(y_train[: i + 1])
                else:
                    X, y = X_train[i], y_train[i]
                result.logs[mode.value].append(engine.update_features(X, y, mode))
            test_flows = [f for d in data[: i + 1] for f in d.test]
            stray = {f.family for f in test_flows} - _introduced_by(spec, i)
            if stray:
                raise AssertionError(f"round {i} test set contains families from later rounds: {stray}")
            row = evaluate(engine, np.concatenate(X_test[: i + 1]), test_flows, mode.value, i)
            result.rows.append(row)
            if roundtrip_after == i:
                engine = loads(dumps(engine))
            log.info("seed %d %s round %d: acc %.4f f1 %.4f", seed, mode.value, i, row.accuracy, row.f1)
    return result


def comparison_table(results: Sequence[EvalResult]) -> str:
    """Plain-text accuracy table: one line per (seed, round), one column per mode."""
    lines = []
    for res in results:
        modes = list(dict.fromkeys(r.mode for r in res.rows))
        rounds = sorted({r.round for r in res.rows})
        lines.append(f"seed {res.seed}: " + "  ".join(f"{m:>10}" for m in modes))
        for i in rounds:
            lines.append(f"  round {i}: " + "  ".join(f"{res.row(m, i).accuracy:10.4f}" for m in modes))
    return "\n".join(lines) + "\n"


def default_round_spec(flows_per_family: int = 300) -> RoundSpec:
    """Benign traffic in every round plus one new attack family per round.

    ``fam0`` shares the benign length profile and differs only in its much
    tighter packet timing, so it is the family most easily overwritten by
    later rounds. ``fam1`` is bulky and ``fam2`` small-packet and long-lived.
    """
    n = flows_per_family
    families = (
        FamilySpec("benign", 0, packets_mean=12, lengths=((1.0, 650.0, 120.0),), gap_mean=1.0),
        FamilySpec("fam0", 1, packets_mean=12, lengths=((1.0, 650.0, 120.0),), gap_mean=0.05),
        FamilySpec("fam1", 1, packets_mean=16, lengths=((1.0, 1350.0, 80.0),), gap_mean=1.0),
        FamilySpec("fam2", 1, packets_mean=30, lengths=((1.0, 120.0, 40.0),), gap_mean=1.0),
    )
    rounds = ({"benign": n, "fam0": n}, {"benign": n, "fam1": n}, {"benign": n, "fam2": n})
    return RoundSpec(families, rounds)
