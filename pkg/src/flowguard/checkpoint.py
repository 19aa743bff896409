"""Versioned binary checkpoint for an :class:`Engine`.

Layout::

    b"FGCKPT\\0\\0"           8 bytes
    format version           uint32 little-endian
    manifest length          uint64 little-endian
    manifest                 UTF-8 JSON
    blob                     float64 little-endian arrays, back to back

The manifest lists every array's name, shape and offset (in values) plus
the config echo, RNG state, optimiser step counters, buffer counters and a
CRC-32 of the blob.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import nn
from .autoencoder import AutoEncoder
from .buffer import BufferError, ReservoirBuffer
from .config import ConfigError, PipelineConfig
from .detector import Detector
from .engine import Engine

MAGIC = b"FGCKPT\0\0"
VERSION = 1
_HEAD = struct.Struct("<IQ")


class CheckpointError(ValueError):
    pass


def _collect(engine: Engine) -> dict[str, np.ndarray]:
    arrays = {}
    if engine.extractor is not None:
        arrays.update({f"extractor/{k}": v for k, v in engine.extractor.store.arrays().items()})
    arrays.update({f"detector/{k}": v for k, v in engine.detector.store.arrays().items()})
    snap = engine.buffer.snapshot()
    for k in ("x", "y", "z"):
        arrays[f"buffer/{k}"] = snap[k]
    return arrays


def dumps(engine: Engine) -> bytes:
    arrays = _collect(engine)
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    blob = b"".join(chunks)
    manifest = {
        "format_version": VERSION,
        "config": engine.config.as_dict(),
        "rng_state": nn.rng_state(engine.rng),
        "has_extractor": engine.extractor is not None,
        "extractor_step": engine.extractor.store.step if engine.extractor is not None else 0,
        "detector_step": engine.detector.store.step,
        "buffer": {"capacity": engine.buffer.capacity, "seen": engine.buffer.seen},
        "rounds_done": engine.rounds_done,
        "history": engine.history,
        "arrays": entries,
        "blob_values": offset,
        "blob_crc32": zlib.crc32(blob),
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + _HEAD.pack(VERSION, len(mbytes)) + mbytes + blob


def save_checkpoint(engine: Engine, path: str | Path) -> None:
    data = dumps(engine)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def loads(data: bytes, expected: PipelineConfig | None = None) -> Engine:
    """Rebuild an engine; with ``expected``, refuse checkpoints of a different shape."""
    if len(data) < len(MAGIC) + _HEAD.size or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated header)")
    version, mlen = _HEAD.unpack_from(data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {VERSION}")
    start = len(MAGIC) + _HEAD.size
    if start + mlen > len(data):
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(data[start : start + mlen].decode("utf-8"))
        config = PipelineConfig.from_dict(manifest["config"])
        entries = manifest["arrays"]
        n_values = int(manifest["blob_values"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, ConfigError) as e:
        raise CheckpointError(f"corrupt manifest: {e}") from e
    blob = data[start + mlen :]
    if len(blob) != 8 * n_values:
        raise CheckpointError(f"blob holds {len(blob)} bytes, manifest expects {8 * n_values}")
    if zlib.crc32(blob) != manifest.get("blob_crc32"):
        raise CheckpointError("blob checksum mismatch")
    if expected is not None:
        bad = expected.structural_mismatch(config)
        if bad:
            raise CheckpointError("checkpoint does not match config: " + "; ".join(bad))
    values = np.frombuffer(blob, dtype="<f8")
    arrays = {}
    try:
        for e in entries:
            shape = tuple(int(s) for s in e["shape"])
            size = int(np.prod(shape)) if shape else 1
            off = int(e["offset"])
            if off < 0 or off + size > n_values:
                raise CheckpointError(f"array {e['name']} overruns the blob")
            arrays[e["name"]] = values[off : off + size].reshape(shape).astype(np.float64)
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError(f"corrupt manifest entry: {err}") from err

    def part(prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    try:
        extractor = None
        if manifest["has_extractor"]:
            extractor = AutoEncoder(config.ae_config())
            extractor.store.load_arrays(part("extractor/"), manifest["extractor_step"])
        detector = Detector(config.embed_dim + 2)
        detector.store.load_arrays(part("detector/"), manifest["detector_step"])
        buf = manifest["buffer"]
        buffer = ReservoirBuffer.restore({
            "capacity": buf["capacity"], "seen": buf["seen"],
            "x": arrays["buffer/x"], "y": arrays["buffer/y"], "z": arrays["buffer/z"],
        })
        rng = nn.rng_from_state(manifest["rng_state"])
    except (KeyError, TypeError, ValueError, BufferError) as e:
        raise CheckpointError(f"checkpoint contents do not fit the model: {e}") from e
    return Engine(config, detector, buffer, rng, extractor, int(manifest.get("rounds_done", 0)),
                  list(manifest.get("history", [])))


def load_checkpoint(path: str | Path, expected: PipelineConfig | None = None) -> Engine:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return loads(data, expected)
