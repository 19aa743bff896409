"""Pipeline configuration and its flat ``key = value`` text format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .autoencoder import AEConfig
from .incremental import LearnConfig, Mode


class ConfigError(ValueError):
    pass


# fields that fix parameter shapes; a checkpoint only loads under matching values
STRUCTURAL = ("n_head", "n_buckets", "embed_dim", "hidden", "layers", "head_hidden")


@dataclass(frozen=True)
class PipelineConfig:
    # feature extraction
    n_head: int = 50
    n_buckets: int = 64
    bucket_width: int = 24
    embed_dim: int = 32
    hidden: int = 8
    layers: int = 2
    head_hidden: int = 32
    # incremental learning
    alpha: float = 0.5
    gamma: float = 10.0
    # optimisation
    lr: float = 1e-3
    ae_lr: float = 3e-3
    batch_size: int = 64
    ae_epochs: int = 30
    detector_epochs: int = 30
    epochs_per_round: int = 20
    buffer_capacity: int = 500
    buffer_batch: int = 64
    seed: int = 0
    mode: str = Mode.FULL_LOSS.value

    def __post_init__(self):
        try:
            Mode(self.mode)
        except ValueError:
            raise ConfigError(f"mode must be one of {[m.value for m in Mode]}, got {self.mode!r}") from None
        positive = ("n_head", "n_buckets", "bucket_width", "hidden", "layers", "head_hidden",
                    "batch_size", "epochs_per_round")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("ae_epochs", "detector_epochs", "buffer_capacity", "buffer_batch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr <= 0 or self.ae_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.alpha < 0 or self.gamma <= 0:
            raise ConfigError("need alpha >= 0 and gamma > 0")
        if self.embed_dim != 2 * self.layers * self.hidden:
            raise ConfigError(f"embed_dim must equal 2*layers*hidden = {2 * self.layers * self.hidden}")

    def ae_config(self) -> AEConfig:
        return AEConfig(self.n_head, self.n_buckets, self.embed_dim, self.hidden, self.layers, self.head_hidden)

    def learn_config(self) -> LearnConfig:
        return LearnConfig(self.alpha, self.gamma, self.lr, self.batch_size, self.epochs_per_round,
                           self.buffer_batch, Mode(self.mode))

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.as_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = {"int": int, "float": float, "str": str}[types[key]](value)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text())

    def structural_mismatch(self, other: "PipelineConfig") -> list[str]:
        return [f"{k}: {getattr(self, k)} != {getattr(other, k)}" for k in STRUCTURAL if getattr(self, k) != getattr(other, k)]
