"""Synthetic labeled traffic for desk-scale experiments.

Normal flows come from a few protocol-like templates (HTTP, DNS, SSH, TLS)
with bounded per-field jitter. Anomalies use templates of their own:
``random_payload`` (uniform random application bytes) and ``flood_repeat``
(one bare SYN repeated verbatim). Frames are real Ethernet/IPv4 packets that
go through the regular flow-assembly path, so samples obey every ingest
invariant (masked addresses, b/255 values, one sample per flow).
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .arcd import SampleSet, write_arcd
from .ingest import IngestConfig, iter_samples
from .pcap import FlowKey, dissect, parse_capture, write_pcap

NORMAL = 0
RANDOM_PAYLOAD = 1
FLOOD_REPEAT = 2
ANOMALY_CLASSES = {"random_payload": RANDOM_PAYLOAD, "flood_repeat": FLOOD_REPEAT}

TCP_FIN, TCP_SYN, TCP_PSH, TCP_ACK = 0x01, 0x02, 0x08, 0x10


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_normal_flows: int = 2000
    n_anomaly_flows: int = 400
    n: int = 2
    l: int = 100
    anomaly_mix: dict = field(default_factory=lambda: {"random_payload": 0.5, "flood_repeat": 0.5})
    normal_templates: tuple[str, ...] = ("http", "dns", "ssh", "tls")
    extra_packets: int = 3  # flows carry n .. n + extra_packets packets

    def __post_init__(self) -> None:
        if self.n_normal_flows < 0 or self.n_anomaly_flows < 0:
            raise ValueError("flow counts must be non-negative")
        if self.n_normal_flows + self.n_anomaly_flows == 0:
            raise ValueError("nothing to generate: both flow counts are zero")
        unknown = set(self.anomaly_mix) - set(ANOMALY_CLASSES)
        if unknown:
            raise ValueError(f"unknown anomaly kinds {sorted(unknown)}")
        if self.n_anomaly_flows and sum(self.anomaly_mix.values()) <= 0:
            raise ValueError("anomaly_mix weights must sum to a positive value")
        unknown = set(self.normal_templates) - set(_NORMAL_BUILDERS)
        if unknown or not self.normal_templates:
            raise ValueError(f"bad normal templates {self.normal_templates}")


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


@dataclass
class _Endpoints:
    src_mac: bytes
    dst_mac: bytes
    src_ip: bytes
    dst_ip: bytes
    sport: int
    dport: int


def _frame(ep: _Endpoints, proto: int, l4: bytes, ttl: int, ip_id: int, df: bool = True) -> bytes:
    total = 20 + len(l4)
    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, ip_id & 0xFFFF, 0x4000 if df else 0,
                      ttl, proto, 0, ep.src_ip, ep.dst_ip)
    hdr = hdr[:10] + struct.pack("!H", _checksum(hdr)) + hdr[12:]
    frame = ep.dst_mac + ep.src_mac + b"\x08\x00" + hdr + l4
    return frame + bytes(max(0, 60 - len(frame)))  # Ethernet minimum frame size


def _tcp(ep: _Endpoints, seq: int, ack: int, flags: int, window: int, payload: bytes = b"",
         options: bytes = b"") -> bytes:
    offset = (20 + len(options)) // 4
    seg = struct.pack("!HHIIHHHH", ep.sport, ep.dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                      (offset << 12) | flags, window, 0, 0) + options + payload
    pseudo = ep.src_ip + ep.dst_ip + struct.pack("!BBH", 0, 6, len(seg))
    csum = _checksum(pseudo + seg)
    return seg[:16] + struct.pack("!H", csum) + seg[18:]


def _udp(ep: _Endpoints, payload: bytes) -> bytes:
    seg = struct.pack("!HHHH", ep.sport, ep.dport, 8 + len(payload), 0) + payload
    pseudo = ep.src_ip + ep.dst_ip + struct.pack("!BBH", 0, 17, len(seg))
    csum = _checksum(pseudo + seg) or 0xFFFF
    return seg[:6] + struct.pack("!H", csum) + seg[8:]


_SYN_OPTIONS = bytes.fromhex("020405b40402080a") + b"\x00" * 8 + bytes.fromhex("01030307")
_HTTP_PATHS = ["/", "/index.html", "/api/v1/items", "/static/app.js", "/login", "/img/logo.png"]
_HTTP_HOSTS = ["example.com", "intranet.local", "news.example.org", "cdn.example.net"]
_DNS_NAMES = ["example.com", "mail.example.org", "updates.vendor.net", "time.local", "api.service.io"]
_SSH_BANNERS = [b"SSH-2.0-OpenSSH_8.9p1 Ubuntu-3\r\n", b"SSH-2.0-OpenSSH_9.3\r\n", b"SSH-2.0-PuTTY_Release_0.78\r\n"]


def _tcp_session(ep, rng, count, ttl, window, payloads):
    """SYN, ACK, then data segments cycling through ``payloads``."""
    seq = int(rng.integers(0, 2 ** 32))
    ack = int(rng.integers(0, 2 ** 32))
    ip_id = int(rng.integers(0, 2 ** 16))
    frames = [_frame(ep, 6, _tcp(ep, seq, 0, TCP_SYN, window, options=_SYN_OPTIONS), ttl, ip_id)]
    seq += 1
    if count > 1:
        frames.append(_frame(ep, 6, _tcp(ep, seq, ack + 1, TCP_ACK, window), ttl, ip_id + 1))
    for i in range(count - 2):
        data = payloads[i % len(payloads)]
        frames.append(_frame(ep, 6, _tcp(ep, seq, ack + 1, TCP_ACK | TCP_PSH, window, data), ttl, ip_id + 2 + i))
        seq += len(data)
    return frames


def _http(ep, rng, count):
    ep.dport = 80
    path = _HTTP_PATHS[rng.integers(len(_HTTP_PATHS))]
    host = _HTTP_HOSTS[rng.integers(len(_HTTP_HOSTS))]
    req = f"GET {path} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: Mozilla/5.0\r\nAccept: */*\r\n\r\n".encode()
    return _tcp_session(ep, rng, count, 64, int(rng.choice([64240, 65535])), [req])


def _ssh(ep, rng, count):
    ep.dport = 22
    banner = _SSH_BANNERS[rng.integers(len(_SSH_BANNERS))]
    return _tcp_session(ep, rng, count, 64, 64240, [banner, b"\x00\x00\x05\xdc\x06\x14" + bytes(26)])


def _tls(ep, rng, count):
    ep.dport = 443
    hello = bytes.fromhex("1603010200010001fc0303") + rng.integers(0, 256, 32, dtype=np.uint8).tobytes()
    return _tcp_session(ep, rng, count, 128, 65535, [hello + b"\x20" + bytes(8)])


def _dns(ep, rng, count):
    ep.dport = 53
    frames = []
    ip_id = int(rng.integers(0, 2 ** 16))
    for i in range(count):
        qid = int(rng.integers(0, 2 ** 16))
        name = _DNS_NAMES[rng.integers(len(_DNS_NAMES))]
        qname = b"".join(bytes([len(p)]) + p.encode() for p in name.split(".")) + b"\x00"
        qtype = 1 if rng.random() < 0.7 else 28
        msg = struct.pack("!HHHHHH", qid, 0x0100, 1, 0, 0, 0) + qname + struct.pack("!HH", qtype, 1)
        frames.append(_frame(ep, 17, _udp(ep, msg), 64, ip_id + i, df=False))
    return frames


_NORMAL_BUILDERS = {"http": _http, "dns": _dns, "ssh": _ssh, "tls": _tls}


def _random_payload(ep, rng, count):
    ep.dport = int(rng.choice([4444, 6667, 31337, 1337]))
    ttl = int(rng.integers(30, 255))
    frames = []
    for i in range(count):
        data = rng.integers(0, 256, int(rng.integers(30, 120)), dtype=np.uint8).tobytes()
        seg = _tcp(ep, int(rng.integers(0, 2 ** 32)), int(rng.integers(0, 2 ** 32)),
                   TCP_ACK | TCP_PSH, int(rng.integers(0, 2 ** 16)), data)
        frames.append(_frame(ep, 6, seg, ttl, int(rng.integers(0, 2 ** 16)), df=False))
    return frames


def _flood_repeat(ep, rng, count):
    ep.dport = int(rng.choice([80, 443, 22, 53]))
    seg = _tcp(ep, int(rng.integers(0, 2 ** 32)), 0, TCP_SYN, 512)
    frame = _frame(ep, 6, seg, 255, int(rng.integers(0, 2 ** 16)), df=False)
    return [frame] * count


_ANOMALY_BUILDERS = {"random_payload": _random_payload, "flood_repeat": _flood_repeat}


def _allocate(total: int, weights: np.ndarray) -> list[int]:
    """Split ``total`` by ``weights`` with largest-remainder rounding."""
    share = weights / weights.sum() * total
    counts = np.floor(share).astype(int)
    for i in np.argsort(-(share - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def generate_frames(cfg: SynthConfig) -> tuple[list[tuple[float, bytes]], dict[FlowKey, int]]:
    """Interleaved (timestamp, frame) stream plus the label of each flow's 5-tuple."""
    rng = np.random.default_rng(cfg.seed)
    kinds = list(cfg.anomaly_mix)
    weights = np.array([cfg.anomaly_mix[k] for k in kinds], dtype=np.float64)
    plan = [("normal", None)] * cfg.n_normal_flows
    if cfg.n_anomaly_flows:
        for kind, count in zip(kinds, _allocate(cfg.n_anomaly_flows, weights)):
            plan += [("anomaly", kind)] * count
    order = rng.permutation(len(plan))

    events: list[tuple[float, int, int, bytes]] = []
    labels: dict[FlowKey, int] = {}
    for slot, idx in enumerate(order):
        kind, anomaly = plan[idx]
        ep = _Endpoints(
            src_mac=rng.integers(0, 256, 6, dtype=np.uint8).tobytes(),
            dst_mac=rng.integers(0, 256, 6, dtype=np.uint8).tobytes(),
            # unique source address per flow keeps 5-tuples distinct
            src_ip=bytes([10, (slot >> 16) & 0xFF, (slot >> 8) & 0xFF, slot & 0xFF]),
            dst_ip=bytes([192, 168, int(rng.integers(0, 4)), int(rng.integers(1, 255))]),
            sport=int(rng.integers(49152, 65536)),
            dport=0,
        )
        count = cfg.n + int(rng.integers(0, cfg.extra_packets + 1))
        if kind == "normal":
            template = cfg.normal_templates[rng.integers(len(cfg.normal_templates))]
            frames = _NORMAL_BUILDERS[template](ep, rng, count)
            label = NORMAL
        else:
            frames = _ANOMALY_BUILDERS[anomaly](ep, rng, count)
            label = ANOMALY_CLASSES[anomaly]
        start = slot * 0.01
        for k, frame in enumerate(frames):
            events.append((start + k * 0.05, slot, k, frame))
        labels[dissect(frames[0]).five_tuple] = label
    events.sort(key=lambda e: (e[0], e[1], e[2]))
    return [(ts, frame) for ts, _, _, frame in events], labels


def synth_generate(cfg: SynthConfig, out: str | os.PathLike | None = None,
                   pcap_out: str | os.PathLike | None = None) -> SampleSet:
    """Generate labeled samples; optionally write them as ARCD and the frames as pcap."""
    frames, labels = generate_frames(cfg)
    if pcap_out is not None:
        write_pcap(pcap_out, frames)
    ingest = IngestConfig(n=cfg.n, l=cfg.l)
    rows, ys = [], []
    for sample in iter_samples(parse_capture(frames), ingest):
        rows.append(sample.values)
        ys.append(labels[sample.key])
    values = np.stack(rows) if rows else np.zeros((0, cfg.n * cfg.l), dtype=np.float32)
    samples = SampleSet(values, cfg.n, cfg.l, np.asarray(ys, dtype=np.uint8))
    if out is not None:
        write_arcd(out, samples)
    return samples
