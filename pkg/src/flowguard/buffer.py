"""Reservoir-sampled replay memory of (features, label, logits) triples."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BufferError(ValueError):
    pass


@dataclass(frozen=True)
class BufferEntry:
    x: np.ndarray
    y: int
    z: np.ndarray  # detector logits when the entry was offered

    def __post_init__(self):
        if self.z.shape != (2,):
            raise BufferError(f"logits must have length 2, got shape {self.z.shape}")
        if not (np.isfinite(self.x).all() and np.isfinite(self.z).all()):
            raise BufferError("non-finite buffer entry")
        if self.y not in (0, 1):
            raise BufferError(f"label must be 0 or 1, got {self.y!r}")


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __len__(self):
        return len(self.y)

    @classmethod
    def empty(cls, dim: int = 0) -> "Batch":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros((0, 2)))


@dataclass
class ReservoirBuffer:
    capacity: int
    entries: list[BufferEntry] = field(default_factory=list)
    seen: int = 0

    def __post_init__(self):
        if self.capacity < 0:
            raise BufferError("capacity must be >= 0")

    def __len__(self):
        return len(self.entries)

    def offer(self, entry: BufferEntry, rng: np.random.Generator) -> bool:
        """Reservoir step: keeps each of the ``seen`` items with probability capacity/seen."""
        accepted = False
        if self.seen < self.capacity:
            self.entries.append(entry)
            accepted = True
        else:
            j = int(rng.integers(0, self.seen + 1))
            if j < self.capacity:
                self.entries[j] = entry
                accepted = True
        self.seen += 1
        return accepted

    def offer_batch(self, X: np.ndarray, y: np.ndarray, Z: np.ndarray, rng: np.random.Generator) -> int:
        return sum(self.offer(BufferEntry(X[i].copy(), int(y[i]), Z[i].copy()), rng) for i in range(len(y)))

    def sample(self, k: int, rng: np.random.Generator) -> Batch:
        """``k`` entries drawn uniformly with replacement."""
        if not self.entries or k <= 0:
            return Batch.empty(self.entries[0].x.size if self.entries else 0)
        idx = rng.integers(0, len(self.entries), size=k)
        return Batch(
            np.stack([self.entries[i].x for i in idx]),
            np.array([self.entries[i].y for i in idx], dtype=np.int64),
            np.stack([self.entries[i].z for i in idx]),
        )

    def sample_two_batches(self, k: int, rng: np.random.Generator) -> tuple[Batch, Batch]:
        return self.sample(k, rng), self.sample(k, rng)

    def snapshot(self) -> dict:
        dim = self.entries[0].x.size if self.entries else 0
        return {
            "capacity": self.capacity,
            "seen": self.seen,
            "x": np.array([e.x for e in self.entries], dtype=np.float64).reshape(len(self.entries), dim),
            "y": np.array([e.y for e in self.entries], dtype=np.float64),
            "z": np.array([e.z for e in self.entries], dtype=np.float64).reshape(len(self.entries), 2),
        }

    @classmethod
    def restore(cls, snap: dict) -> "ReservoirBuffer":
        try:
            capacity, seen = int(snap["capacity"]), int(snap["seen"])
            x, y, z = (np.asarray(snap[k], dtype=np.float64) for k in ("x", "y", "z"))
        except (KeyError, TypeError, ValueError) as e:
            raise BufferError(f"corrupt buffer snapshot: {e}") from e
        n = len(y)
        if x.ndim != 2 or x.shape[0] != n or z.shape != (n, 2):
            raise BufferError("corrupt buffer snapshot: array shapes disagree")
        if n != min(capacity, seen):
            raise BufferError(f"corrupt buffer snapshot: {n} entries for capacity {capacity}, seen {seen}")
        if not np.isin(y, (0.0, 1.0)).all():
            raise BufferError("corrupt buffer snapshot: labels outside {0, 1}")
        entries = [BufferEntry(x[i].copy(), int(y[i]), z[i].copy()) for i in range(n)]
        return cls(capacity, entries, seen)
