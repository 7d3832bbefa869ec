import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scapy.layers.inet import ICMP, IP, TCP, UDP
from scapy.layers.inet6 import IPv6
from scapy.layers.l2 import ARP, Dot1Q, Ether
from scapy.utils import wrpcap

from flowforge import kernels as K
from flowforge.packet import (
    CanonicalKey, FiveTuple, FrameStream, MalformedHeader, NotIpv4, ParsedPacket, canonicalize,
    ip_to_int, parse_packet, read_pcap, write_pcap,
)
from oracles import dissect

A, B = ip_to_int("10.0.0.1"), ip_to_int("10.0.0.2")


def pad(frame, n=64):
    raw = bytes(frame)
    return raw + b"\x00" * (n - len(raw))


def test_syn_frame_matches_dissector():
    frame = pad(Ether() / IP(src="10.0.0.1", dst="10.0.0.2", ttl=64) /
                TCP(sport=1234, dport=80, flags="S", window=8192))
    assert len(frame) == 64
    p = parse_packet(frame, ts_micros=5)
    assert (p.protocol, p.src_port, p.dst_port, p.tcp_flags) == (6, 1234, 80, 0x02)
    ref = dissect(frame)
    assert (p.src_ip, p.dst_ip, p.ttl, p.ip_total_len, p.tcp_window) == (
        ref["src"], ref["dst"], ref["ttl"], ref["ip_len"], ref["win"])
    assert p.wire_len == 64 and p.ts_micros == 5


def test_arp_is_not_ipv4():
    with pytest.raises(NotIpv4):
        parse_packet(bytes(Ether() / ARP()))


def test_ipv6_is_not_ipv4():
    with pytest.raises(NotIpv4):
        parse_packet(bytes(Ether() / IPv6() / UDP()))


def test_ihl_below_five_is_malformed():
    frame = bytearray(pad(Ether() / IP(src="10.0.0.1", dst="10.0.0.2") / UDP()))
    frame[14] = 0x44
    with pytest.raises(MalformedHeader):
        parse_packet(bytes(frame))


def test_truncated_tcp_header_is_malformed():
    frame = bytes(Ether() / IP() / TCP())[:14 + 20 + 10]
    with pytest.raises(MalformedHeader):
        parse_packet(frame)


def test_short_frame_is_malformed():
    with pytest.raises(MalformedHeader):
        parse_packet(b"\x00" * 13)


def test_single_vlan_tag_is_skipped():
    frame = bytes(Ether() / Dot1Q(vlan=7) / IP(src="10.0.0.1", dst="10.0.0.2") /
                  UDP(sport=53, dport=5353))
    p = parse_packet(frame)
    assert (p.protocol, p.src_port, p.dst_port, p.src_ip) == (17, 53, 5353, A)


def test_non_tcp_udp_has_zero_ports_flags_window():
    p = parse_packet(bytes(Ether() / IP(src="10.0.0.1", dst="10.0.0.2") / ICMP()))
    assert (p.protocol, p.src_port, p.dst_port, p.tcp_flags, p.tcp_window) == (1, 0, 0, 0, 0)


def test_ip_total_len_taken_verbatim():
    frame = bytearray(pad(Ether() / IP() / UDP()))
    frame[16:18] = struct.pack(">H", 9000)
    assert parse_packet(bytes(frame)).ip_total_len == 9000


def test_canonicalize_examples():
    fwd = FiveTuple(A, B, 1234, 80, 6)
    key, is_fwd = canonicalize(fwd)
    assert key == CanonicalKey((A, 1234), (B, 80), 6) and is_fwd
    key2, is_fwd2 = canonicalize(fwd.reverse())
    assert key2 == key and not is_fwd2
    key3, is_fwd3 = canonicalize(FiveTuple(A, A, 9, 7, 17))
    assert key3 == CanonicalKey((A, 7), (A, 9), 17) and not is_fwd3


u32 = st.integers(0, 2**32 - 1)
u16 = st.integers(0, 2**16 - 1)


@given(u32, u32, u16, u16, st.integers(0, 255))
def test_canonicalize_folds_both_directions(s, d, sp, dp, proto):
    t = FiveTuple(s, d, sp, dp, proto)
    (k1, f1), (k2, f2) = canonicalize(t), canonicalize(t.reverse())
    assert k1 == k2
    assert k1.endpoint_a <= k1.endpoint_b
    if (s, sp) != (d, dp):
        assert f1 != f2


def _classify_frame(frame):
    try:
        return parse_packet(frame)
    except (NotIpv4, MalformedHeader) as exc:
        return type(exc)


STATUS = {ParsedPacket: K.ST_OK, NotIpv4: K.ST_NOT_IPV4, MalformedHeader: K.ST_MALFORMED}

ipv4_prefix = st.sampled_from([b"\x08\x00", b"\x81\x00\x00\x01\x08\x00", b"\x08\x06", b"\x86\xdd"])


@given(st.binary(max_size=12), ipv4_prefix, st.binary(max_size=80))
def test_parsing_is_total_and_kernel_agrees(mac, ethertype, rest):
    frame = mac.ljust(12, b"\x00") + ethertype + rest
    for f in (frame, frame[:len(mac)]):
        out = _classify_frame(f)
        kind = type(out) if isinstance(out, ParsedPacket) else out
        assert kind in STATUS
        stream = FrameStream.from_frames([f])
        cols = np.empty((1, K.N_COLS), dtype=np.int64)
        K.parse_frames(stream.buf, stream.offsets, stream.lengths, stream.wire_lens, cols)
        assert cols[0, K.C_STATUS] == STATUS[kind]
        if kind is ParsedPacket:
            assert tuple(cols[0, 1:]) == (out.wire_len, out.ip_total_len, out.ttl, out.protocol,
                                          out.src_ip, out.dst_ip, out.src_port, out.dst_port,
                                          out.tcp_flags, out.tcp_window)


def _reserialize(frame, p):
    """Write the parsed fields back over a copy of the frame at their fixed offsets."""
    out = bytearray(frame)
    l3 = 18 if frame[12:14] == b"\x81\x00" else 14
    l4 = l3 + (frame[l3] & 0x0F) * 4
    struct.pack_into(">H", out, l3 + 2, p.ip_total_len)
    out[l3 + 8], out[l3 + 9] = p.ttl, p.protocol
    struct.pack_into(">II", out, l3 + 12, p.src_ip, p.dst_ip)
    if p.protocol in (6, 17):
        struct.pack_into(">HH", out, l4, p.src_port, p.dst_port)
    if p.protocol == 6:
        out[l4 + 13] = p.tcp_flags
        struct.pack_into(">H", out, l4 + 14, p.tcp_window)
    return bytes(out)


def random_ip(rng):
    return ".".join(str(int(x)) for x in rng.integers(0, 256, size=4))


def test_reserialization_matches_1000_fuzzed_frames():
    rng = np.random.default_rng(11)
    for i in range(1000):
        ip = IP(src=str(random_ip(rng)), dst=str(random_ip(rng)), ttl=int(rng.integers(1, 256)),
                options=[] if rng.random() < 0.7 else b"\x01" * 4 * int(rng.integers(1, 5)))
        kind = rng.integers(0, 3)
        if kind == 0:
            l4 = TCP(sport=int(rng.integers(0, 65536)), dport=int(rng.integers(0, 65536)),
                     flags=int(rng.integers(0, 256)), window=int(rng.integers(0, 65536)))
        elif kind == 1:
            l4 = UDP(sport=int(rng.integers(0, 65536)), dport=int(rng.integers(0, 65536)))
        else:
            l4 = ICMP()
        l2 = Ether() / Dot1Q(vlan=int(rng.integers(1, 4095))) if rng.random() < 0.2 else Ether()
        frame = bytes(l2 / ip / l4 / (b"x" * int(rng.integers(0, 200))))
        p = parse_packet(frame)
        assert _reserialize(frame, p) == frame
        ref = dissect(frame)
        assert (p.src_ip, p.dst_ip, p.src_port, p.dst_port, p.protocol, p.ttl, p.ip_total_len,
                p.tcp_flags, p.tcp_window) == (ref["src"], ref["dst"], ref["sport"], ref["dport"],
                                               ref["proto"], ref["ttl"], ref["ip_len"],
                                               ref["flags"], ref["win"])


def test_pcap_written_by_scapy_is_read(tmp_path):
    pkts = [Ether() / IP(src="10.0.0.1", dst="10.0.0.2") / TCP(sport=1, dport=2),
            Ether() / IP(src="10.0.0.2", dst="10.0.0.1") / UDP(sport=3, dport=4)]
    pkts[0].time, pkts[1].time = 1.5, 2.25
    path = tmp_path / "s.pcap"
    wrpcap(str(path), pkts)
    stream = read_pcap(path)
    assert [stream.frame(i) for i in range(2)] == [bytes(p) for p in pkts]
    assert list(stream.ts) == [1_500_000, 2_250_000]


def test_pcap_big_endian_and_roundtrip(tmp_path):
    frames = [pad(Ether() / IP() / UDP()), pad(Ether() / IP() / TCP(), 80)]
    stream = FrameStream.from_frames(frames, ts=[10, 2_000_001])
    path = tmp_path / "rt.pcap"
    write_pcap(path, stream)
    back = read_pcap(path)
    assert [back.frame(i) for i in range(2)] == frames and list(back.ts) == [10, 2_000_001]

    be = struct.pack(">IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)
    for f, t in zip(frames, (10, 2_000_001)):
        be += struct.pack(">IIII", t // 1_000_000, t % 1_000_000, len(f), len(f)) + f
    path.write_bytes(be)
    back = read_pcap(path)
    assert [back.frame(i) for i in range(2)] == frames and list(back.ts) == [10, 2_000_001]
