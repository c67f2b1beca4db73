"""Flow assembly: turn packets into fixed-length, masked, normalized samples.

Each flow contributes at most one sample built from its first ``n`` packets.
Every packet is trimmed (or zero padded) to ``l`` bytes with MAC and IP
address bytes zeroed, and each byte is mapped to ``b / 255``.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .pcap import LINKTYPE_ETHERNET, PROTO_TCP, FlowKey, FrameError, PacketRecord, dissect

log = logging.getLogger(__name__)

# b -> b/255 as float32, computed once so every path maps bytes identically.
BYTE_SCALE = (np.arange(256, dtype=np.float64) / 255.0).astype(np.float32)


@dataclass(frozen=True)
class IngestConfig:
    n: int = 2
    l: int = 100
    timeout_s: float = 120.0
    mode: str = "flow"
    pad_incomplete: bool = False

    def __post_init__(self) -> None:
        if self.n < 1 or self.l < 1:
            raise ValueError("n and l must be positive")
        if self.mode not in ("flow", "session"):
            raise ValueError(f"mode must be 'flow' or 'session', got {self.mode!r}")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")

    @property
    def w(self) -> int:
        return self.n * self.l


class FlowState(enum.Enum):
    ACTIVE = "active"
    TERMINATED_FIN = "terminated_fin"
    TERMINATED_TIMEOUT = "terminated_timeout"
    EMITTED = "emitted"


class Disposition(enum.Enum):
    EMITTED_EARLIER = "emitted-earlier"
    DISCARDED = "discarded"
    PADDED = "padded"


@dataclass
class FlowSample:
    values: np.ndarray
    key: FlowKey
    first_ts: float
    label: int | None = None


@dataclass
class FlowBuffer:
    key: FlowKey
    first_ts: float
    last_seen: float
    packets: list[np.ndarray] = field(default_factory=list)
    state: FlowState = FlowState.ACTIVE
    fin_from: set[tuple[str, int]] = field(default_factory=set)


@dataclass(frozen=True)
class Finalized:
    key: FlowKey
    disposition: Disposition
    sample: FlowSample | None = None


@dataclass
class FlowTable:
    """Active flows keyed by 5-tuple, plus flows finalized since the last flush."""

    flows: dict[FlowKey, FlowBuffer] = field(default_factory=dict)
    pending: list[Finalized] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.flows)


def _trim(frame: bytes, spans: Iterable[tuple[int, int]], l: int) -> np.ndarray:
    buf = bytearray(frame[:l])
    for start, end in spans:
        if start < l:
            buf[start:min(end, l)] = bytes(min(end, l) - start)
    if len(buf) < l:
        buf.extend(bytes(l - len(buf)))
    return BYTE_SCALE[np.frombuffer(bytes(buf), dtype=np.uint8)]


def anonymize_and_trim(frame: bytes, l: int = 100, linktype: int = LINKTYPE_ETHERNET) -> np.ndarray:
    """Mask MAC/IP address bytes, cut or zero-pad to ``l`` bytes, scale to [0, 1].

    Address offsets come from the parsed headers, so VLAN tags and IPv6 are
    handled. Raises FrameError if the frame is not IP or is too short to
    hold its IP header.
    """
    info = dissect(frame, linktype)
    if info is None:
        raise FrameError("frame does not carry an IP packet")
    return _trim(frame, info.address_spans, l)


def _finalize(buf: FlowBuffer, cfg: IngestConfig) -> Finalized:
    if buf.state is FlowState.EMITTED:
        return Finalized(buf.key, Disposition.EMITTED_EARLIER)
    if cfg.pad_incomplete and buf.packets:
        pad = [np.zeros(cfg.l, dtype=np.float32)] * (cfg.n - len(buf.packets))
        values = np.concatenate(buf.packets + pad)
        buf.state = FlowState.EMITTED
        return Finalized(buf.key, Disposition.PADDED, FlowSample(values, buf.key, buf.first_ts))
    return Finalized(buf.key, Disposition.DISCARDED)


def ingest_packet(packet: PacketRecord, table: FlowTable, cfg: IngestConfig) -> FlowSample | None:
    """Add one packet to its flow; return the flow's sample when it completes.

    A flow that has been idle for more than ``cfg.timeout_s`` (capture clock)
    is finalized and the packet starts a fresh flow under the same key. TCP
    FIN ends a flow (session mode: once FIN was sent by both endpoints).
    Flows finalized here are queued on ``table.pending`` for ``flush``.
    """
    key = packet.five_tuple.canonical() if cfg.mode == "session" else packet.five_tuple
    ts = packet.timestamp
    buf = table.flows.get(key)
    if buf is not None and ts - buf.last_seen > cfg.timeout_s:
        if buf.state is not FlowState.EMITTED:
            buf.state = FlowState.TERMINATED_TIMEOUT
        table.pending.append(_finalize(buf, cfg))
        del table.flows[key]
        buf = None
    if buf is None:
        buf = table.flows[key] = FlowBuffer(key, ts, ts)
    buf.last_seen = ts

    sample = None
    if buf.state is FlowState.ACTIVE:
        buf.packets.append(_trim(packet.link_bytes, packet.address_spans, cfg.l))
        if len(buf.packets) == cfg.n:
            sample = FlowSample(np.concatenate(buf.packets), key, buf.first_ts)
            buf.state = FlowState.EMITTED
            buf.packets = []

    if packet.five_tuple.protocol == PROTO_TCP and packet.fin:
        buf.fin_from.add((packet.five_tuple.src_ip, packet.five_tuple.src_port))
        if cfg.mode == "flow" or len(buf.fin_from) >= 2:
            if buf.state is FlowState.ACTIVE:
                buf.state = FlowState.TERMINATED_FIN
            table.pending.append(_finalize(buf, cfg))
            del table.flows[key]
    return sample


def flush(table: FlowTable, now: float, cfg: IngestConfig) -> list[Finalized]:
    """Finalize flows idle past the timeout at capture time ``now``.

    Also returns everything ``ingest_packet`` finalized since the previous
    call. Incomplete flows are discarded unless ``cfg.pad_incomplete``, in
    which case they carry a zero-padded sample. Pass ``now=math.inf`` at end
    of capture to finalize every flow.
    """
    out, table.pending = table.pending, []
    expired = [k for k, b in table.flows.items() if now - b.last_seen > cfg.timeout_s]
    for key in expired:
        buf = table.flows.pop(key)
        if buf.state is not FlowState.EMITTED:
            buf.state = FlowState.TERMINATED_TIMEOUT
        out.append(_finalize(buf, cfg))
    return out


def iter_samples(packets: Iterable[PacketRecord], cfg: IngestConfig) -> Iterator[FlowSample]:
    """Stream samples from packets in capture order.

    Idle flows are swept once per ``timeout_s`` of capture time, and every
    remaining flow is finalized when the packets run out.
    """
    table = FlowTable()
    next_sweep = None
    for pkt in packets:
        if next_sweep is None:
            next_sweep = pkt.timestamp + cfg.timeout_s
        sample = ingest_packet(pkt, table, cfg)
        if sample is not None:
            yield sample
        if table.pending or pkt.timestamp >= next_sweep:
            sweep_now = pkt.timestamp if pkt.timestamp >= next_sweep else -math.inf
            for fin in flush(table, sweep_now, cfg):
                if fin.sample is not None:
                    yield fin.sample
            if pkt.timestamp >= next_sweep:
                next_sweep = pkt.timestamp + cfg.timeout_s
    for fin in flush(table, math.inf, cfg):
        if fin.sample is not None:
            yield fin.sample


def preprocess_capture(source, cfg: IngestConfig, label: int | None = None):
    """Read a capture and collect its flow samples into a SampleSet.

    Returns ``(samples, reader)``; the reader carries the packet counters.
    """
    from .arcd import SampleSet
    from .pcap import parse_capture

    reader = parse_capture(source)
    rows = [s.values for s in iter_samples(reader, cfg)]
    values = np.stack(rows) if rows else np.zeros((0, cfg.w), dtype=np.float32)
    labels = None if label is None else np.full(len(rows), label, dtype=np.uint8)
    if reader.truncated:
        log.warning("capture was truncated; %d samples recovered", len(rows))
    return SampleSet(values, cfg.n, cfg.l, labels), reader
