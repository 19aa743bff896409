"""Packet log parsing, five-tuple flow assembly and (l, d, t_m) sequences."""
from __future__ import annotations

import enum
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable

log = logging.getLogger(__name__)

N_HEAD = 50
N_BUCKETS = 64
BUCKET_WIDTH = 24
DURATION_CAP = 3600.0
GAP_CAP = 60.0


class ParseError(ValueError):
    pass


class Protocol(str, enum.Enum):
    TCP = "tcp"
    UDP = "udp"


@dataclass(frozen=True)
class PacketRecord:
    timestamp: float
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: Protocol
    length: int
    # optional annotations carried by labelled JSONL logs
    label: int | None = None
    family: str | None = None

    def __post_init__(self):
        if not (math.isfinite(self.timestamp) and self.timestamp >= 0):
            raise ValueError(f"bad timestamp {self.timestamp!r}")
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 65535:
                raise ValueError(f"port out of range: {port}")
        if not 0 <= self.length <= 65535:
            raise ValueError(f"length out of range: {self.length}")
        if self.label not in (None, 0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    @property
    def key(self) -> "FlowKey":
        return FlowKey(self.src_ip, self.dst_ip, self.src_port, self.dst_port, self.protocol)


@dataclass(frozen=True)
class FlowKey:
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: Protocol

    def as_dict(self) -> dict:
        return {
            "src": self.src_ip,
            "dst": self.dst_ip,
            "sport": self.src_port,
            "dport": self.dst_port,
            "proto": self.protocol.value,
        }


@dataclass(frozen=True)
class FlowSequence:
    key: FlowKey
    packets: tuple[PacketRecord, ...]
    label: int | None = None
    family: str | None = None

    def __post_init__(self):
        if not self.packets:
            raise ValueError("a flow needs at least one packet")


@dataclass(frozen=True)
class RawSequence:
    lengths: tuple[int, ...]
    duration: float
    mean_interval: float


@dataclass(frozen=True)
class NormalizedSequence:
    buckets: tuple[int, ...]
    mask: tuple[bool, ...]
    d_norm: float
    t_m_norm: float

    @property
    def n_valid(self) -> int:
        return sum(self.mask)


@dataclass
class PacketLog:
    """Parsed records plus what was dropped on the way."""

    packets: list[PacketRecord] = field(default_factory=list)
    skipped: list[tuple[int, str]] = field(default_factory=list)  # (line or byte offset, reason)
    ignored: int = 0  # well-formed but not IPv4 TCP/UDP

    def __len__(self):
        return len(self.packets)


# -- parsing ------------------------------------------------------------------------


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, Path)):
        try:
            return Path(source).read_bytes()
        except OSError as e:
            raise ParseError(f"cannot read {source}: {e}") from e
    try:
        return source.read()
    except (OSError, AttributeError) as e:
        raise ParseError(f"unreadable source: {e}") from e


def parse_packet_log(source: bytes | str | Path | BinaryIO, fmt: str = "jsonl", strict: bool = False) -> PacketLog:
    """Parse a JSONL or classic PCAP packet log.

    Malformed JSONL lines are skipped and reported in ``PacketLog.skipped``
    (or raise ``ParseError`` when ``strict``). Non TCP/UDP packets are
    counted in ``ignored``.
    """
    data = _read_bytes(source)
    fmt = fmt.lower()
    if fmt == "jsonl":
        out = _parse_jsonl(data, strict)
    elif fmt == "pcap":
        out = _parse_pcap(data, strict)
    else:
        raise ValueError(f"unknown packet log format {fmt!r}")
    if out.skipped:
        log.warning("skipped %d malformed record(s); first at %s: %s", len(out.skipped), *out.skipped[0])
    return out


def _jsonl_record(obj) -> PacketRecord | None:
    proto = str(obj["proto"]).lower()
    if proto not in ("tcp", "udp"):
        return None
    for k in ("sport", "dport", "len"):
        if isinstance(obj[k], bool) or not isinstance(obj[k], int):
            raise ValueError(f"{k} must be an integer")
    ts = obj["ts"]
    if isinstance(ts, bool) or not isinstance(ts, (int, float)):
        raise ValueError("ts must be a number")
    label = obj.get("label")
    if label is not None and (isinstance(label, bool) or not isinstance(label, int)):
        raise ValueError("label must be an integer")
    family = obj.get("family")
    return PacketRecord(
        timestamp=float(ts),
        src_ip=str(obj["src"]),
        dst_ip=str(obj["dst"]),
        src_port=obj["sport"],
        dst_port=obj["dport"],
        protocol=Protocol(proto),
        length=obj["len"],
        label=label,
        family=None if family is None else str(family),
    )


def _parse_jsonl(data: bytes, strict: bool) -> PacketLog:
    out = PacketLog()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(f"JSONL input is not UTF-8: {e}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("not a JSON object")
            rec = _jsonl_record(obj)
        except (ValueError, KeyError, TypeError) as e:
            reason = f"{type(e).__name__}: {e}"
            if strict:
                raise ParseError(f"line {lineno}: {reason}") from e
            out.skipped.append((lineno, reason))
            continue
        if rec is None:
            out.ignored += 1
        else:
            out.packets.append(rec)
    return out


_PCAP_MAGIC = {
    b"\xd4\xc3\xb2\xa1": ("<", 1e-6),
    b"\xa1\xb2\xc3\xd4": (">", 1e-6),
    b"\x4d\x3c\xb2\xa1": ("<", 1e-9),
    b"\xa1\xb2\x3c\x4d": (">", 1e-9),
}
_LINKTYPE_ETHERNET = 1


def _ipv4(b: int) -> str:
    return ".".join(str(x) for x in b.to_bytes(4, "big"))


def _parse_pcap(data: bytes, strict: bool) -> PacketLog:
    out = PacketLog()
    if not data:
        return out
    if len(data) < 24 or data[:4] not in _PCAP_MAGIC:
        raise ParseError(f"not a classic pcap file (magic {data[:4].hex()})")
    endian, tick = _PCAP_MAGIC[data[:4]]
    linktype = struct.unpack(endian + "I", data[20:24])[0]
    if linktype != _LINKTYPE_ETHERNET:
        raise ParseError(f"unsupported link type {linktype}; only Ethernet is handled")
    rec_hdr = struct.Struct(endian + "IIII")
    off = 24
    while off < len(data):
        if off + 16 > len(data):
            out.skipped.append((off, "truncated record header"))
            break
        sec, frac, incl, _orig = rec_hdr.unpack_from(data, off)
        start = off + 16
        if start + incl > len(data):
            if strict:
                raise ParseError(f"offset {off}: truncated packet body")
            out.skipped.append((off, "truncated packet body"))
            break
        frame = data[start : start + incl]
        try:
            rec = _decode_frame(frame, sec + frac * tick)
        except (struct.error, ValueError) as e:
            if strict:
                raise ParseError(f"offset {off}: {e}") from e
            out.skipped.append((off, str(e)))
            rec = False
        if rec is None:
            out.ignored += 1
        elif rec:
            out.packets.append(rec)
        off = start + incl
    return out


def _decode_frame(frame: bytes, ts: float) -> PacketRecord | None:
    if len(frame) < 14:
        raise ValueError("short ethernet frame")
    ethertype = struct.unpack_from("!H", frame, 12)[0]
    p = 14
    while ethertype in (0x8100, 0x88A8):  # VLAN tags
        ethertype = struct.unpack_from("!H", frame, p + 2)[0]
        p += 4
    if ethertype != 0x0800:
        return None
    ver_ihl, _tos, total_len, _ident, frag, _ttl, proto, _csum, src, dst = struct.unpack_from("!BBHHHBBHII", frame, p)
    if ver_ihl >> 4 != 4:
        raise ValueError("IPv4 header with wrong version")
    ihl = (ver_ihl & 0x0F) * 4
    if frag & 0x1FFF:
        return None  # later fragment: no transport header
    t = p + ihl
    if proto == 6:
        sport, dport = struct.unpack_from("!HH", frame, t)
        doff = (frame[t + 12] >> 4) * 4
        length = total_len - ihl - doff
        protocol = Protocol.TCP
    elif proto == 17:
        sport, dport, ulen = struct.unpack_from("!HHH", frame, t)
        length = ulen - 8
        protocol = Protocol.UDP
    else:
        return None
    if length < 0:
        raise ValueError("negative payload length")
    return PacketRecord(ts, _ipv4(src), _ipv4(dst), sport, dport, protocol, length)


# -- flows and sequences ------------------------------------------------------------


def assemble_flows(packets: Iterable[PacketRecord]) -> list[FlowSequence]:
    """Group by directional five-tuple; flows in order of first appearance.

    Within a flow packets are sorted by timestamp, stable on ties. The flow
    takes its label/family from its earliest-listed annotated packet.
    """
    groups: dict[FlowKey, list[PacketRecord]] = {}
    for pkt in packets:
        groups.setdefault(pkt.key, []).append(pkt)
    flows = []
    for key, pkts in groups.items():
        label = next((p.label for p in pkts if p.label is not None), None)
        family = next((p.family for p in pkts if p.family is not None), None)
        ordered = tuple(sorted(pkts, key=lambda p: p.timestamp))
        flows.append(FlowSequence(key, ordered, label, family))
    return flows


def derive_raw_sequence(flow: FlowSequence, n_head: int = N_HEAD) -> RawSequence:
    head = flow.packets[:n_head]
    if not head:
        raise ValueError("empty flow")
    duration = head[-1].timestamp - head[0].timestamp
    gap = duration / (len(head) - 1) if len(head) > 1 else 0.0
    return RawSequence(tuple(p.length for p in head), duration, gap)


def normalize_sequence(
    raw: RawSequence,
    n_steps: int = N_HEAD,
    n_buckets: int = N_BUCKETS,
    bucket_width: int = BUCKET_WIDTH,
) -> NormalizedSequence:
    """Bucketise lengths, pad to ``n_steps`` with sentinel ``n_buckets``, log-scale timing."""
    lengths = raw.lengths[:n_steps]
    pad = n_steps - len(lengths)
    buckets = tuple(min(n_buckets - 1, ln // bucket_width) for ln in lengths) + (n_buckets,) * pad
    mask = (True,) * len(lengths) + (False,) * pad
    d_norm = math.log1p(max(raw.duration, 0.0)) / math.log1p(DURATION_CAP)
    t_m_norm = math.log1p(max(raw.mean_interval, 0.0)) / math.log1p(GAP_CAP)
    return NormalizedSequence(buckets, mask, d_norm, t_m_norm)


def flows_from_log(source, fmt: str = "jsonl") -> tuple[list[FlowSequence], PacketLog]:
    parsed = parse_packet_log(source, fmt)
    return assemble_flows(parsed.packets), parsed


def write_jsonl_packets(packets: Iterable[PacketRecord], stream: io.TextIOBase) -> None:
    for p in packets:
        obj = {
            "ts": p.timestamp,
            "src": p.src_ip,
            "dst": p.dst_ip,
            "sport": p.src_port,
            "dport": p.dst_port,
            "proto": p.protocol.value,
            "len": p.length,
        }
        if p.label is not None:
            obj["label"] = p.label
        if p.family is not None:
            obj["family"] = p.family
        stream.write(json.dumps(obj, separators=(",", ":")) + "\n")
