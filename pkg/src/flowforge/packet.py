"""Frame decoding, the directional 5-tuple and its canonical (direction-folded) key.

Only Ethernet/IPv4 is decoded, with at most one 802.1Q tag. Anything else is
reported as :class:`NotIpv4`; broken IPv4 headers raise :class:`MalformedHeader`.
Both are still forwarded by the pipeline, they just never touch the flow table.
"""

import ipaddress
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ETH_HLEN = 14
VLAN_HLEN = 4
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_VLAN = 0x8100
PROTO_TCP = 6
PROTO_UDP = 17

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1


class PacketError(Exception):
    """Base class for frames that produce no flow update."""


class NotIpv4(PacketError):
    pass


class MalformedHeader(PacketError):
    pass


class PcapError(Exception):
    pass


@dataclass(frozen=True)
class ParsedPacket:
    ts_micros: int
    wire_len: int
    ip_total_len: int
    ttl: int
    protocol: int
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    tcp_flags: int
    tcp_window: int

    @property
    def five_tuple(self):
        return FiveTuple(self.src_ip, self.dst_ip, self.src_port, self.dst_port, self.protocol)


class FiveTuple(NamedTuple):
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    protocol: int

    def reverse(self):
        return FiveTuple(self.dst_ip, self.src_ip, self.dst_port, self.src_port, self.protocol)


class CanonicalKey(NamedTuple):
    endpoint_a: tuple
    endpoint_b: tuple
    protocol: int

    def to_bytes(self):
        """13-byte big-endian serialization hashed into the flow id."""
        (a_ip, a_port), (b_ip, b_port) = self.endpoint_a, self.endpoint_b
        return struct.pack(">IHIHB", a_ip, a_port, b_ip, b_port, self.protocol)


def canonicalize(t):
    """Fold a 5-tuple so both directions of a connection share one key.

    Returns ``(key, is_forward)``; ``is_forward`` is true when the tuple's
    source is the lexicographically smaller endpoint.
    """
    src = (t.src_ip, t.src_port)
    dst = (t.dst_ip, t.dst_port)
    if src <= dst:
        return CanonicalKey(src, dst, t.protocol), True
    return CanonicalKey(dst, src, t.protocol), False


def parse_packet(frame, ts_micros=0, wire_len=None):
    """Decode one Ethernet frame.

    Raises NotIpv4 for non-IPv4 ethertypes and MalformedHeader when the frame
    is too short for its declared headers or the IPv4 header is invalid.
    """
    frame = bytes(frame)
    n = len(frame)
    if n < ETH_HLEN:
        raise MalformedHeader(f"frame of {n} bytes is shorter than an Ethernet header")
    ethertype = (frame[12] << 8) | frame[13]
    l3 = ETH_HLEN
    if ethertype == ETHERTYPE_VLAN:
        if n < ETH_HLEN + VLAN_HLEN:
            raise MalformedHeader("truncated 802.1Q tag")
        ethertype = (frame[16] << 8) | frame[17]
        l3 += VLAN_HLEN
    if ethertype != ETHERTYPE_IPV4:
        raise NotIpv4(f"ethertype 0x{ethertype:04x}")
    if n < l3 + 20:
        raise MalformedHeader("truncated IPv4 header")
    version, ihl = frame[l3] >> 4, frame[l3] & 0x0F
    if ihl < 5:
        raise MalformedHeader(f"IPv4 IHL {ihl} < 5")
    if version != 4:
        raise MalformedHeader(f"IP version {version} under ethertype 0x0800")
    l4 = l3 + ihl * 4
    if n < l4:
        raise MalformedHeader("frame shorter than IPv4 IHL")
    total_len, ttl, proto, src, dst = struct.unpack_from(">2xH4xBB2xII", frame, l3)

    sport = dport = flags = window = 0
    if proto == PROTO_TCP:
        if n < l4 + 20:
            raise MalformedHeader("truncated TCP header")
        sport, dport = struct.unpack_from(">HH", frame, l4)
        flags = frame[l4 + 13]
        (window,) = struct.unpack_from(">H", frame, l4 + 14)
    elif proto == PROTO_UDP:
        if n < l4 + 8:
            raise MalformedHeader("truncated UDP header")
        sport, dport = struct.unpack_from(">HH", frame, l4)

    if wire_len is None:
        wire_len = n
    return ParsedPacket(int(ts_micros), min(int(wire_len), 0xFFFF), total_len, ttl,
                        proto, src, dst, sport, dport, flags, window)


def ip_to_int(s):
    return int(ipaddress.IPv4Address(s))


def int_to_ip(v):
    return str(ipaddress.IPv4Address(int(v)))


@dataclass
class FrameStream:
    """Frames packed back to back in one byte buffer.

    ``lengths`` are captured lengths; ``wire_lens`` the original on-wire sizes.
    """

    buf: np.ndarray
    offsets: np.ndarray
    lengths: np.ndarray
    wire_lens: np.ndarray
    ts: np.ndarray

    def __len__(self):
        return len(self.offsets)

    def frame(self, i):
        o = int(self.offsets[i])
        return self.buf[o:o + int(self.lengths[i])].tobytes()

    def __iter__(self):
        for i in range(len(self)):
            yield self.frame(i), int(self.ts[i]), int(self.wire_lens[i])

    @property
    def total_wire_bytes(self):
        return int(self.wire_lens.sum())

    @classmethod
    def from_frames(cls, frames, ts=None):
        frames = [bytes(f) for f in frames]
        lengths = np.array([len(f) for f in frames], dtype=np.int64)
        offsets = np.zeros(len(frames), dtype=np.int64)
        if len(frames):
            offsets[1:] = np.cumsum(lengths)[:-1]
        buf = np.frombuffer(b"".join(frames), dtype=np.uint8).copy()
        if ts is None:
            ts = np.arange(len(frames), dtype=np.uint64)
        return cls(buf, offsets, lengths, lengths.copy(), np.asarray(ts, dtype=np.uint64))

    def slice(self, start, stop):
        offsets = self.offsets[start:stop]
        lengths = self.lengths[start:stop]
        if len(offsets) == 0:
            return FrameStream(self.buf[:0].copy(), offsets.copy(), lengths.copy(),
                               self.wire_lens[start:stop].copy(), self.ts[start:stop].copy())
        lo = int(offsets[0])
        hi = int(offsets[-1] + lengths[-1])
        return FrameStream(self.buf[lo:hi], offsets - lo, lengths,
                           self.wire_lens[start:stop], self.ts[start:stop])


def read_pcap(path):
    """Load a classic libpcap file (micro- or nanosecond, either byte order)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 24:
        raise PcapError(f"{path}: too short for a pcap global header")
    magic_le = struct.unpack_from("<I", data, 0)[0]
    if magic_le in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
        endian = "<"
    elif struct.unpack_from(">I", data, 0)[0] in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
        endian = ">"
    else:
        raise PcapError(f"{path}: bad pcap magic 0x{magic_le:08x}")
    nano = struct.unpack_from(endian + "I", data, 0)[0] == PCAP_MAGIC_NS
    linktype = struct.unpack_from(endian + "I", data, 20)[0]
    if linktype != LINKTYPE_ETHERNET:
        raise PcapError(f"{path}: unsupported link type {linktype}")

    rec = struct.Struct(endian + "IIII")
    offsets, lengths, wire, ts = [], [], [], []
    pos = 24
    while pos + 16 <= len(data):
        sec, frac, incl, orig = rec.unpack_from(data, pos)
        pos += 16
        if pos + incl > len(data):
            raise PcapError(f"{path}: truncated record at byte {pos - 16}")
        offsets.append(pos)
        lengths.append(incl)
        wire.append(orig)
        ts.append(sec * 1_000_000 + (frac // 1000 if nano else frac))
        pos += incl
    buf = np.frombuffer(data, dtype=np.uint8)
    return FrameStream(buf, np.array(offsets, dtype=np.int64), np.array(lengths, dtype=np.int64),
                       np.array(wire, dtype=np.int64), np.array(ts, dtype=np.uint64))


def write_pcap(path, stream, snaplen=65535):
    """Write a microsecond, little-endian Ethernet pcap."""
    rec = struct.Struct("<IIII")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", PCAP_MAGIC_US, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))
        buf = stream.buf
        for i in range(len(stream)):
            t = int(stream.ts[i])
            o, n = int(stream.offsets[i]), int(stream.lengths[i])
            fh.write(rec.pack(t // 1_000_000, t % 1_000_000, n, int(stream.wire_lens[i])))
            fh.write(buf[o:o + n].tobytes())
