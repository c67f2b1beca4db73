"""Packet capture reading (pcap / pcapng) and minimal L2-L4 header dissection.

Only what flow assembly needs is decoded: the 5-tuple, TCP flags, and the
byte spans holding MAC and IP addresses (so they can be masked later).
"""
from __future__ import annotations

import io
import logging
import os
import socket
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, NamedTuple

log = logging.getLogger(__name__)

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229
SUPPORTED_LINKTYPES = (LINKTYPE_ETHERNET, LINKTYPE_RAW, LINKTYPE_IPV4, LINKTYPE_IPV6)

ETH_TYPE_IPV4 = 0x0800
ETH_TYPE_IPV6 = 0x86DD
VLAN_TPIDS = (0x8100, 0x88A8, 0x9100)

PROTO_TCP = 6
PROTO_UDP = 17
TCP_FIN = 0x01

# IPv6 extension headers walked to find the transport header.
_IPV6_EXT = {0, 43, 60}
_IPV6_FRAG = 44

_PCAP_MAGICS = {
    b"\xd4\xc3\xb2\xa1": ("<", 1e-6),
    b"\xa1\xb2\xc3\xd4": (">", 1e-6),
    b"\x4d\x3c\xb2\xa1": ("<", 1e-9),
    b"\xa1\xb2\x3c\x4d": (">", 1e-9),
}
_PCAPNG_SHB = 0x0A0D0D0A


class CaptureError(ValueError):
    """Raised when a capture container is malformed beyond recovery."""


class FrameError(ValueError):
    """Raised for an IP frame too short to carry its IP header."""


class FlowKey(NamedTuple):
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int

    def reversed(self) -> "FlowKey":
        return FlowKey(self.dst_ip, self.src_ip, self.dst_port, self.src_port, self.protocol)

    def canonical(self) -> "FlowKey":
        """Direction-independent key: endpoints ordered lexicographically."""
        if (self.src_ip, self.src_port) <= (self.dst_ip, self.dst_port):
            return self
        return self.reversed()


@dataclass(frozen=True)
class Dissection:
    five_tuple: FlowKey
    tcp_flags: int | None
    address_spans: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class PacketRecord:
    timestamp: float
    link_bytes: bytes
    five_tuple: FlowKey
    tcp_flags: int | None = None
    address_spans: tuple[tuple[int, int], ...] = ()
    linktype: int = LINKTYPE_ETHERNET

    @property
    def fin(self) -> bool:
        return self.tcp_flags is not None and bool(self.tcp_flags & TCP_FIN)


def _ip_offset(frame: bytes, linktype: int) -> tuple[int, int, list[tuple[int, int]]] | None:
    """Return (ip_offset, ip_version, mac_spans) or None for non-IP frames."""
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            return None
        off = 12
        ethertype = int.from_bytes(frame[off:off + 2], "big")
        while ethertype in VLAN_TPIDS:
            off += 4
            if len(frame) < off + 2:
                return None
            ethertype = int.from_bytes(frame[off:off + 2], "big")
        off += 2
        spans = [(0, 12)]
        if ethertype == ETH_TYPE_IPV4:
            return off, 4, spans
        if ethertype == ETH_TYPE_IPV6:
            return off, 6, spans
        return None
    if not frame:
        return None
    version = frame[0] >> 4
    if linktype == LINKTYPE_IPV4 or (linktype == LINKTYPE_RAW and version == 4):
        return 0, 4, []
    if linktype == LINKTYPE_IPV6 or (linktype == LINKTYPE_RAW and version == 6):
        return 0, 6, []
    return None


def dissect(frame: bytes, linktype: int = LINKTYPE_ETHERNET) -> Dissection | None:
    """Decode the parts of ``frame`` relevant to flow assembly.

    Returns None for non-IP frames. Raises FrameError when the frame claims
    to be IP but cannot hold the fixed IP header.
    """
    located = _ip_offset(frame, linktype)
    if located is None:
        return None
    ip, version, spans = located

    if version == 4:
        if len(frame) < ip + 20:
            raise FrameError(f"frame of {len(frame)} bytes too short for IPv4 header at offset {ip}")
        ihl = (frame[ip] & 0x0F) * 4
        if ihl < 20:
            raise FrameError(f"invalid IPv4 header length {ihl}")
        proto = frame[ip + 9]
        src = socket.inet_ntop(socket.AF_INET, frame[ip + 12:ip + 16])
        dst = socket.inet_ntop(socket.AF_INET, frame[ip + 16:ip + 20])
        spans.append((ip + 12, ip + 20))
        frag_offset = int.from_bytes(frame[ip + 6:ip + 8], "big") & 0x1FFF
        transport = ip + ihl if frag_offset == 0 else None
    else:
        if len(frame) < ip + 40:
            raise FrameError(f"frame of {len(frame)} bytes too short for IPv6 header at offset {ip}")
        proto = frame[ip + 6]
        src = socket.inet_ntop(socket.AF_INET6, frame[ip + 8:ip + 24])
        dst = socket.inet_ntop(socket.AF_INET6, frame[ip + 24:ip + 40])
        spans.append((ip + 8, ip + 40))
        transport: int | None = ip + 40
        while proto in _IPV6_EXT or proto == _IPV6_FRAG:
            if len(frame) < transport + 8:
                transport = None
                break
            if proto == _IPV6_FRAG:
                frag_offset = int.from_bytes(frame[transport + 2:transport + 4], "big") >> 3
                proto = frame[transport]
                transport = transport + 8 if frag_offset == 0 else None
                break
            nxt = frame[transport]
            transport += (frame[transport + 1] + 1) * 8
            proto = nxt

    sport = dport = 0
    flags = None
    if transport is not None and proto in (PROTO_TCP, PROTO_UDP) and len(frame) >= transport + 4:
        sport, dport = struct.unpack_from(">HH", frame, transport)
        if proto == PROTO_TCP and len(frame) >= transport + 14:
            flags = frame[transport + 13]
    return Dissection(FlowKey(src, dst, sport, dport, proto), flags, tuple(spans))


@dataclass
class CaptureReader:
    """Iterator of PacketRecord over a pcap/pcapng stream.

    Counters are updated as iteration proceeds: ``skipped`` counts non-IP
    frames, ``rejected`` IP frames too short to dissect, ``truncated`` is set
    when the capture ends mid-record.
    """

    stream: BinaryIO
    packets: int = 0
    skipped: int = 0
    rejected: int = 0
    truncated: bool = False
    _records: Iterator[tuple[float, bytes, int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        head = self.stream.read(4)
        if len(head) < 4:
            raise CaptureError("capture shorter than its magic number")
        if head in _PCAP_MAGICS:
            self._records = self._read_pcap(*self._pcap_header(head))
        elif struct.unpack("<I", head)[0] == _PCAPNG_SHB:
            self._records = self._read_pcapng(self._section_header())
        else:
            raise CaptureError(f"unknown capture magic {head.hex()}")

    def __iter__(self) -> "CaptureReader":
        return self

    def __next__(self) -> PacketRecord:
        for ts, frame, linktype in self._records:
            try:
                info = dissect(frame, linktype)
            except FrameError as exc:
                self.rejected += 1
                log.debug("dropping frame: %s", exc)
                continue
            if info is None:
                self.skipped += 1
                continue
            self.packets += 1
            return PacketRecord(ts, frame, info.five_tuple, info.tcp_flags, info.address_spans, linktype)
        raise StopIteration

    def _truncated(self, what: str) -> None:
        self.truncated = True
        log.warning("capture truncated inside %s; stopping", what)

    def _pcap_header(self, magic: bytes) -> tuple[str, float, int]:
        endian, resolution = _PCAP_MAGICS[magic]
        rest = self.stream.read(20)
        if len(rest) < 20:
            raise CaptureError("truncated pcap global header")
        linktype = struct.unpack(endian + "HHiIII", rest)[5] & 0xFFFF
        if linktype not in SUPPORTED_LINKTYPES:
            raise CaptureError(f"unsupported link type {linktype}")
        return endian, resolution, linktype

    def _read_pcap(self, endian: str, resolution: float, linktype: int) -> Iterator[tuple[float, bytes, int]]:
        rec = struct.Struct(endian + "IIII")
        while True:
            hdr = self.stream.read(16)
            if not hdr:
                return
            if len(hdr) < 16:
                self._truncated("record header")
                return
            sec, frac, incl, _ = rec.unpack(hdr)
            data = self.stream.read(incl)
            if len(data) < incl:
                self._truncated("packet data")
                return
            yield sec + frac * resolution, data, linktype

    def _section_header(self, length_raw: bytes = b"") -> str:
        """Consume the rest of a section header block; return its byte order."""
        raw = length_raw + self.stream.read(8 - len(length_raw))
        if len(raw) < 8:
            raise CaptureError("truncated pcapng section header")
        bom = raw[4:8]
        if bom == b"\x4d\x3c\x2b\x1a":
            endian = "<"
        elif bom == b"\x1a\x2b\x3c\x4d":
            endian = ">"
        else:
            raise CaptureError("bad pcapng byte-order magic")
        total = struct.unpack(endian + "I", raw[:4])[0]
        if total < 28 or total % 4:
            raise CaptureError(f"bad section header length {total}")
        if len(self.stream.read(total - 12)) < total - 12:
            raise CaptureError("truncated pcapng section header")
        return endian

    def _read_pcapng(self, endian: str) -> Iterator[tuple[float, bytes, int]]:
        interfaces: list[tuple[int, float]] = []
        while True:
            hdr = self.stream.read(8)
            if not hdr:
                return
            if len(hdr) < 8:
                self._truncated("block header")
                return
            if struct.unpack("<I", hdr[:4])[0] == _PCAPNG_SHB:
                try:
                    endian = self._section_header(hdr[4:])
                except CaptureError:
                    self._truncated("section header")
                    return
                interfaces = []
                continue
            btype, total = struct.unpack(endian + "II", hdr)
            if total < 12 or total % 4:
                raise CaptureError(f"bad pcapng block length {total}")
            body = self.stream.read(total - 8)
            if len(body) < total - 8:
                self._truncated("block body")
                return
            body = body[:-4]
            if btype == 1:
                linktype = struct.unpack_from(endian + "H", body, 0)[0]
                if linktype not in SUPPORTED_LINKTYPES:
                    raise CaptureError(f"unsupported link type {linktype}")
                interfaces.append((linktype, _if_tsresol(body[8:], endian)))
            elif btype == 6:
                iface, hi, lo, cap, _ = struct.unpack_from(endian + "IIIII", body, 0)
                linktype, res = interfaces[iface]
                yield ((hi << 32) | lo) * res, bytes(body[20:20 + cap]), linktype
            elif btype == 3:
                orig = struct.unpack_from(endian + "I", body, 0)[0]
                linktype, _ = interfaces[0]
                yield 0.0, bytes(body[4:4 + min(orig, len(body) - 4)]), linktype
            elif btype == 2:
                iface, _, hi, lo, cap, _ = struct.unpack_from(endian + "HHIIII", body, 0)
                linktype, res = interfaces[iface]
                yield ((hi << 32) | lo) * res, bytes(body[20:20 + cap]), linktype


def _if_tsresol(options: bytes, endian: str) -> float:
    pos = 0
    while pos + 4 <= len(options):
        code, length = struct.unpack_from(endian + "HH", options, pos)
        if code == 0:
            break
        if code == 9 and length >= 1:
            v = options[pos + 4]
            return 2.0 ** -(v & 0x7F) if v & 0x80 else 10.0 ** -v
        pos += 4 + (length + 3) // 4 * 4
    return 1e-6


class _LiveSource:
    """Adapts an iterable of (timestamp, frame) pairs, e.g. a live sniffer."""

    def __init__(self, frames: Iterable[tuple[float, bytes]], linktype: int) -> None:
        self.frames = iter(frames)
        self.linktype = linktype
        self.packets = self.skipped = self.rejected = 0
        self.truncated = False

    def __iter__(self) -> "_LiveSource":
        return self

    def __next__(self) -> PacketRecord:
        for ts, frame in self.frames:
            try:
                info = dissect(frame, self.linktype)
            except FrameError:
                self.rejected += 1
                continue
            if info is None:
                self.skipped += 1
                continue
            self.packets += 1
            return PacketRecord(float(ts), bytes(frame), info.five_tuple, info.tcp_flags,
                                info.address_spans, self.linktype)
        raise StopIteration


def parse_capture(source, linktype: int = LINKTYPE_ETHERNET):
    """Open a capture and return an iterator of PacketRecord in capture order.

    ``source`` may be a path, raw capture bytes, a binary file object, or an
    iterable of ``(timestamp, frame)`` pairs from a live capture (``linktype``
    applies only to the latter).
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return CaptureReader(io.BytesIO(fh.read()))
    if isinstance(source, (bytes, bytearray, memoryview)):
        return CaptureReader(io.BytesIO(bytes(source)))
    if hasattr(source, "read"):
        return CaptureReader(source)
    return _LiveSource(source, linktype)


def write_pcap(path_or_stream, frames: Iterable[tuple[float, bytes]],
               linktype: int = LINKTYPE_ETHERNET, snaplen: int = 65535) -> None:
    """Write a classic little-endian microsecond pcap."""
    own = isinstance(path_or_stream, (str, os.PathLike))
    fh = open(path_or_stream, "wb") if own else path_or_stream
    try:
        fh.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, snaplen, linktype))
        for ts, frame in frames:
            usec_total = round(ts * 1_000_000)
            sec, usec = divmod(usec_total, 1_000_000)
            fh.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
            fh.write(frame)
    finally:
        if own:
            fh.close()
