"""Parameterised synthetic flows for desk-scale experiments.

Each family draws, per flow: a packet count from a geometric distribution,
packet lengths from a Gaussian mixture (rounded, clamped to [0, 1514]) and
inter-arrival gaps from an exponential distribution.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import FlowKey, FlowSequence, PacketRecord, Protocol, write_jsonl_packets

MAX_LEN = 1514


@dataclass(frozen=True)
class FamilySpec:
    name: str
    label: int
    packets_mean: float
    lengths: tuple[tuple[float, float, float], ...]  # (weight, mean, std) per component
    gap_mean: float
    count: int = 0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"{self.name}: label must be 0 or 1")
        if self.packets_mean < 1:
            raise ValueError(f"{self.name}: packets_mean must be >= 1")
        if self.gap_mean <= 0:
            raise ValueError(f"{self.name}: gap_mean must be > 0")
        if not self.lengths:
            raise ValueError(f"{self.name}: need at least one length component")
        for w, _mu, sd in self.lengths:
            if w <= 0 or sd < 0:
                raise ValueError(f"{self.name}: component weights must be > 0 and std >= 0")
        if self.count < 0:
            raise ValueError(f"{self.name}: count must be >= 0")

    @property
    def mean_length(self) -> float:
        w = np.array([c[0] for c in self.lengths])
        mu = np.array([c[1] for c in self.lengths])
        return float((w * mu).sum() / w.sum())

    @classmethod
    def from_dict(cls, d: dict) -> "FamilySpec":
        try:
            return cls(
                name=str(d["name"]),
                label=int(d["label"]),
                packets_mean=float(d["packets_mean"]),
                lengths=tuple(tuple(float(v) for v in c) for c in d["lengths"]),
                gap_mean=float(d["gap_mean"]),
                count=int(d.get("count", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"bad family spec {d!r}: {e}") from e

    def as_dict(self) -> dict:
        return {
            "name": self.name, "label": self.label, "packets_mean": self.packets_mean,
            "lengths": [list(c) for c in self.lengths], "gap_mean": self.gap_mean, "count": self.count,
        }


class _Addresses:
    """Hands out a distinct five-tuple per synthetic flow."""

    def __init__(self, start: int = 0):
        self.n = start

    def next(self, family_index: int) -> FlowKey:
        i = self.n
        self.n += 1
        src = f"10.{(i >> 16) & 255}.{(i >> 8) & 255}.{i & 255}"
        return FlowKey(src, f"172.16.{family_index & 255}.1", 1024 + i % 60000, 443, Protocol.TCP)


def generate_family(spec: FamilySpec, count: int, rng: np.random.Generator, addresses: _Addresses,
                    family_index: int = 0, t0: float = 0.0) -> list[FlowSequence]:
    w = np.array([c[0] for c in spec.lengths])
    w = w / w.sum()
    mus = np.array([c[1] for c in spec.lengths])
    sds = np.array([c[2] for c in spec.lengths])
    flows = []
    for _ in range(count):
        n = int(rng.geometric(1.0 / spec.packets_mean))
        comp = rng.choice(len(w), size=n, p=w)
        lengths = np.clip(np.rint(rng.normal(mus[comp], sds[comp])), 0, MAX_LEN).astype(int)
        start = t0 + float(rng.uniform(0.0, 3600.0))
        gaps = rng.exponential(spec.gap_mean, size=n - 1)
        times = start + np.concatenate([[0.0], np.cumsum(gaps)])
        key = addresses.next(family_index)
        pkts = tuple(
            PacketRecord(float(t), key.src_ip, key.dst_ip, key.src_port, key.dst_port, key.protocol,
                         int(ln), spec.label, spec.name)
            for t, ln in zip(times, lengths)
        )
        flows.append(FlowSequence(key, pkts, spec.label, spec.name))
    return flows


def generate(families: Sequence[FamilySpec], rng: np.random.Generator, counts: dict[str, int] | None = None,
             addresses: _Addresses | None = None) -> list[FlowSequence]:
    """Flows for every family (``count`` each unless overridden), family by family."""
    if not any(f.label == 0 for f in families) or not any(f.label == 1 for f in families):
        raise ValueError("need at least one benign and one attack family")
    addresses = addresses if addresses is not None else _Addresses()
    out = []
    for i, fam in enumerate(families):
        n = fam.count if counts is None else counts.get(fam.name, 0)
        out += generate_family(fam, n, rng, addresses, i)
    return out


def interleave(flows: Iterable[FlowSequence]) -> list[PacketRecord]:
    """All packets ordered by timestamp, as a capture would list them."""
    pkts = [p for f in flows for p in f.packets]
    return sorted(pkts, key=lambda p: p.timestamp)


def load_family_specs(path: str | Path) -> list[FamilySpec]:
    data = json.loads(Path(path).read_text())
    items = data["families"] if isinstance(data, dict) else data
    return [FamilySpec.from_dict(d) for d in items]


def write_dataset(flows: Sequence[FlowSequence], path: str | Path) -> None:
    with open(path, "w") as fh:
        write_jsonl_packets(interleave(flows), fh)
