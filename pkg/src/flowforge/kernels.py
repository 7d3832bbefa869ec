"""Per-packet hot loops.

All arithmetic is done on explicit int64/uint64 scalars so the kernels give
the same answers compiled or interpreted (see ``_jit``).
"""

import numpy as np

from ._jit import njit
from .catalog import (
    F_B1514, F_B128, F_DST_ADDR, F_DST_PORT, F_DURATION, F_IN_BYTES, F_IN_PKTS,
    F_MAX_LEN, F_MAX_TTL, F_MIN_LEN, F_MIN_TTL, F_OUT_BYTES, F_OUT_PKTS,
    F_PROTOCOL, F_SRC_ADDR, F_SRC_PORT, F_TCP_FLAGS, F_WIN_IN, F_WIN_OUT,
    R16_DST_PORT, R16_KEY_A_PORT, R16_KEY_B_PORT,
    R16_MAX_LEN, R16_MIN_LEN, R16_SRC_PORT, R16_WIN_IN, R16_WIN_OUT,
    R32_B128, R32_DST_ADDR, R32_DURATION, R32_IN_PKTS, R32_KEY_A_IP,
    R32_KEY_B_IP, R32_OUT_PKTS, R32_SRC_ADDR, R64_FIRST_TS, R64_IN_BYTES,
    R64_LAST_TS, R64_OUT_BYTES, R8_INIT_IS_A, R8_KEY_PROTO, R8_MALICIOUS,
    R8_MAX_TTL, R8_MIN_TTL, R8_OCCUPIED, R8_PROTOCOL, R8_TCP_FLAGS,
)

# Columns of the packet-major ``(packets, N_COLS)`` matrix filled by parse_frames.
(C_STATUS, C_WIRE_LEN, C_IP_LEN, C_TTL, C_PROTO, C_SRC, C_DST, C_SPORT,
 C_DPORT, C_FLAGS, C_WIN) = range(11)
N_COLS = 11

ST_OK, ST_NOT_IPV4, ST_MALFORMED = 0, 1, 2

V_SKIPPED, V_CREATED, V_UPDATED, V_EVICTED = 0, 1, 2, 3

U64_MAX = np.uint64(0xFFFFFFFFFFFFFFFF)
U32_MAX = 0xFFFFFFFF
U16_MAX = 0xFFFF
U8_MAX = 0xFF


def _make_crc_table():
    table = np.zeros(256, dtype=np.int64)
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ 0xEDB88320 if c & 1 else c >> 1
        table[i] = c
    return table


CRC_TABLE = _make_crc_table()


@njit
def _be16(buf, pos):
    return (np.int64(buf[pos]) << 8) | np.int64(buf[pos + 1])


@njit
def _be32(buf, pos):
    return (_be16(buf, pos) << 16) | _be16(buf, pos + 2)


@njit
def parse_frames(buf, offsets, lengths, wire_lens, cols):
    for i in range(offsets.shape[0]):
        o = offsets[i]
        m = lengths[i]
        for c in range(N_COLS):
            cols[i, c] = 0
        cols[i, C_WIRE_LEN] = min(wire_lens[i], U16_MAX)
        if m < 14:
            cols[i, C_STATUS] = ST_MALFORMED
            continue
        et = _be16(buf, o + 12)
        l3 = 14
        if et == 0x8100:
            if m < 18:
                cols[i, C_STATUS] = ST_MALFORMED
                continue
            et = _be16(buf, o + 16)
            l3 = 18
        if et != 0x0800:
            cols[i, C_STATUS] = ST_NOT_IPV4
            continue
        if m < l3 + 20:
            cols[i, C_STATUS] = ST_MALFORMED
            continue
        vihl = np.int64(buf[o + l3])
        ihl = vihl & 0x0F
        if ihl < 5 or (vihl >> 4) != 4:
            cols[i, C_STATUS] = ST_MALFORMED
            continue
        l4 = l3 + ihl * 4
        if m < l4:
            cols[i, C_STATUS] = ST_MALFORMED
            continue
        proto = np.int64(buf[o + l3 + 9])
        if proto == 6:
            if m < l4 + 20:
                cols[i, C_STATUS] = ST_MALFORMED
                continue
            cols[i, C_SPORT] = _be16(buf, o + l4)
            cols[i, C_DPORT] = _be16(buf, o + l4 + 2)
            cols[i, C_FLAGS] = np.int64(buf[o + l4 + 13])
            cols[i, C_WIN] = _be16(buf, o + l4 + 14)
        elif proto == 17:
            if m < l4 + 8:
                cols[i, C_STATUS] = ST_MALFORMED
                continue
            cols[i, C_SPORT] = _be16(buf, o + l4)
            cols[i, C_DPORT] = _be16(buf, o + l4 + 2)
        cols[i, C_IP_LEN] = _be16(buf, o + l3 + 2)
        cols[i, C_TTL] = np.int64(buf[o + l3 + 8])
        cols[i, C_PROTO] = proto
        cols[i, C_SRC] = _be32(buf, o + l3 + 12)
        cols[i, C_DST] = _be32(buf, o + l3 + 16)


@njit
def _crc_update(crc, value, nbytes):
    for k in range(nbytes - 1, -1, -1):
        b = (value >> (8 * k)) & 0xFF
        crc = CRC_TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc


@njit
def crc32_key(a_ip, a_port, b_ip, b_port, proto):
    """CRC-32 (IEEE, reflected) over the 13-byte big-endian canonical key."""
    crc = np.int64(0xFFFFFFFF)
    crc = _crc_update(crc, np.int64(a_ip), 4)
    crc = _crc_update(crc, np.int64(a_port), 2)
    crc = _crc_update(crc, np.int64(b_ip), 4)
    crc = _crc_update(crc, np.int64(b_port), 2)
    crc = _crc_update(crc, np.int64(proto), 1)
    return crc ^ 0xFFFFFFFF


@njit
def _canonical(src, sport, dst, dport):
    """Returns (a_ip, a_port, b_ip, b_port, is_forward)."""
    if src < dst or (src == dst and sport <= dport):
        return src, sport, dst, dport, 1
    return dst, dport, src, sport, 0


@njit
def flow_ids(cols, index_bits, out):
    mask = (np.int64(1) << index_bits) - 1
    for i in range(cols.shape[0]):
        if cols[i, C_STATUS] != ST_OK:
            out[i] = -1
            continue
        a_ip, a_port, b_ip, b_port, _ = _canonical(cols[i, C_SRC], cols[i, C_SPORT],
                                                  cols[i, C_DST], cols[i, C_DPORT])
        out[i] = crc32_key(a_ip, a_port, b_ip, b_port, cols[i, C_PROTO]) & mask


@njit
def _bucket(ip_len):
    if ip_len <= 128:
        return 0
    if ip_len <= 256:
        return 1
    if ip_len <= 512:
        return 2
    if ip_len <= 1024:
        return 3
    return 4


@njit
def _inc32(r32, row, slot):
    v = np.int64(r32[slot, row])
    if v < U32_MAX:
        r32[slot, row] = v + 1


@njit
def _add64(r64, row, slot, inc):
    cur = r64[slot, row]
    d = np.uint64(inc)
    if cur > U64_MAX - d:
        r64[slot, row] = U64_MAX
    else:
        r64[slot, row] = cur + d


@njit
def _init_slot(r64, r32, r16, r8, slot, a_ip, a_port, b_ip, b_port, proto, fwd,
               ts, cols, p, fl):
    for row in range(r64.shape[1]):
        r64[slot, row] = 0
    for row in range(r32.shape[1]):
        r32[slot, row] = 0
    for row in range(r16.shape[1]):
        r16[slot, row] = 0
    for row in range(r8.shape[1]):
        r8[slot, row] = 0
    r8[slot, R8_OCCUPIED] = 1
    r8[slot, R8_INIT_IS_A] = fwd
    r8[slot, R8_KEY_PROTO] = proto
    r32[slot, R32_KEY_A_IP] = a_ip
    r32[slot, R32_KEY_B_IP] = b_ip
    r16[slot, R16_KEY_A_PORT] = a_port
    r16[slot, R16_KEY_B_PORT] = b_port
    r64[slot, R64_FIRST_TS] = ts
    r64[slot, R64_LAST_TS] = ts

    ip_len = cols[p, C_IP_LEN]
    ttl = cols[p, C_TTL]
    if fl[F_SRC_ADDR]:
        r32[slot, R32_SRC_ADDR] = cols[p, C_SRC]
    if fl[F_DST_ADDR]:
        r32[slot, R32_DST_ADDR] = cols[p, C_DST]
    if fl[F_SRC_PORT]:
        r16[slot, R16_SRC_PORT] = cols[p, C_SPORT]
    if fl[F_DST_PORT]:
        r16[slot, R16_DST_PORT] = cols[p, C_DPORT]
    if fl[F_PROTOCOL]:
        r8[slot, R8_PROTOCOL] = proto
    if fl[F_IN_PKTS]:
        r32[slot, R32_IN_PKTS] = 1
    if fl[F_IN_BYTES]:
        r64[slot, R64_IN_BYTES] = np.uint64(ip_len)
    if fl[F_TCP_FLAGS]:
        r8[slot, R8_TCP_FLAGS] = cols[p, C_FLAGS]
    if fl[F_MIN_TTL]:
        r8[slot, R8_MIN_TTL] = ttl
    if fl[F_MAX_TTL]:
        r8[slot, R8_MAX_TTL] = ttl
    if fl[F_MIN_LEN]:
        r16[slot, R16_MIN_LEN] = ip_len
    if fl[F_MAX_LEN]:
        r16[slot, R16_MAX_LEN] = ip_len
    if fl[F_WIN_IN]:
        r16[slot, R16_WIN_IN] = cols[p, C_WIN]
    b = _bucket(ip_len)
    if fl[F_B128 + b]:
        r32[slot, R32_B128 + b] = 1


@njit
def _update_slot(r64, r32, r16, r8, slot, fwd, ts, cols, p, fl):
    is_in = fwd == np.int64(r8[slot, R8_INIT_IS_A])
    ip_len = cols[p, C_IP_LEN]
    ttl = cols[p, C_TTL]
    win = cols[p, C_WIN]
    if is_in:
        if fl[F_IN_PKTS]:
            _inc32(r32, R32_IN_PKTS, slot)
        if fl[F_IN_BYTES]:
            _add64(r64, R64_IN_BYTES, slot, ip_len)
        if fl[F_WIN_IN] and win > np.int64(r16[slot, R16_WIN_IN]):
            r16[slot, R16_WIN_IN] = win
    else:
        if fl[F_OUT_PKTS]:
            _inc32(r32, R32_OUT_PKTS, slot)
        if fl[F_OUT_BYTES]:
            _add64(r64, R64_OUT_BYTES, slot, ip_len)
        if fl[F_WIN_OUT] and win > np.int64(r16[slot, R16_WIN_OUT]):
            r16[slot, R16_WIN_OUT] = win
    if fl[F_TCP_FLAGS]:
        r8[slot, R8_TCP_FLAGS] = np.int64(r8[slot, R8_TCP_FLAGS]) | cols[p, C_FLAGS]
    if fl[F_MIN_TTL] and ttl < np.int64(r8[slot, R8_MIN_TTL]):
        r8[slot, R8_MIN_TTL] = ttl
    if fl[F_MAX_TTL] and ttl > np.int64(r8[slot, R8_MAX_TTL]):
        r8[slot, R8_MAX_TTL] = ttl
    if fl[F_MIN_LEN] and ip_len < np.int64(r16[slot, R16_MIN_LEN]):
        r16[slot, R16_MIN_LEN] = ip_len
    if fl[F_MAX_LEN] and ip_len > np.int64(r16[slot, R16_MAX_LEN]):
        r16[slot, R16_MAX_LEN] = ip_len
    b = _bucket(ip_len)
    if fl[F_B128 + b]:
        _inc32(r32, R32_B128 + b, slot)
    if ts > r64[slot, R64_LAST_TS]:
        r64[slot, R64_LAST_TS] = ts
    if fl[F_DURATION]:
        dur = (r64[slot, R64_LAST_TS] - r64[slot, R64_FIRST_TS]) // np.uint64(1000)
        if dur > np.uint64(U32_MAX):
            dur = np.uint64(U32_MAX)
        r32[slot, R32_DURATION] = dur


@njit
def process_packets(r64, r32, r16, r8, index_bits, cols, ts, order, start, fl, walk,
                    e64, e32, e16, e8, e_slot, n_evicted, verdicts):
    """Fold ``order[start:]`` into the register banks.

    ``walk`` is a compiled model (``walk(r64, r32, r16, r8, slot) -> label``)
    run after every update, or None for plain flow accounting.

    A collision copies the resident record into the eviction buffer ``e*``.
    Stops early when that buffer is full and returns ``(next_i, n_evicted)``
    so the caller can drain it and resume.
    """
    mask = (np.int64(1) << index_bits) - 1
    cap = e_slot.shape[0]
    ne = n_evicted
    i = start
    while i < order.shape[0]:
        p = order[i]
        if cols[p, C_STATUS] != ST_OK:
            verdicts[p] = V_SKIPPED
            i += 1
            continue
        a_ip, a_port, b_ip, b_port, fwd = _canonical(cols[p, C_SRC], cols[p, C_SPORT],
                                                     cols[p, C_DST], cols[p, C_DPORT])
        proto = cols[p, C_PROTO]
        slot = crc32_key(a_ip, a_port, b_ip, b_port, proto) & mask
        t = ts[p]
        if r8[slot, R8_OCCUPIED] != 0:
            same = (np.int64(r32[slot, R32_KEY_A_IP]) == a_ip
                    and np.int64(r32[slot, R32_KEY_B_IP]) == b_ip
                    and np.int64(r16[slot, R16_KEY_A_PORT]) == a_port
                    and np.int64(r16[slot, R16_KEY_B_PORT]) == b_port
                    and np.int64(r8[slot, R8_KEY_PROTO]) == proto)
            if same:
                _update_slot(r64, r32, r16, r8, slot, fwd, t, cols, p, fl)
                v = V_UPDATED
            else:
                if ne == cap:
                    return i, ne
                for row in range(r64.shape[1]):
                    e64[ne, row] = r64[slot, row]
                for row in range(r32.shape[1]):
                    e32[ne, row] = r32[slot, row]
                for row in range(r16.shape[1]):
                    e16[ne, row] = r16[slot, row]
                for row in range(r8.shape[1]):
                    e8[ne, row] = r8[slot, row]
                e_slot[ne] = slot
                ne += 1
                _init_slot(r64, r32, r16, r8, slot, a_ip, a_port, b_ip, b_port, proto,
                           fwd, t, cols, p, fl)
                v = V_EVICTED
        else:
            _init_slot(r64, r32, r16, r8, slot, a_ip, a_port, b_ip, b_port, proto,
                       fwd, t, cols, p, fl)
            v = V_CREATED
        if walk is not None:
            r8[slot, R8_MALICIOUS] = walk(r64, r32, r16, r8, slot)
        verdicts[p] = v
        i += 1
    return i, ne


@njit
def count_frames(cols, wire_lens):
    """Forwarding-only pass: tally packets and wire bytes."""
    pkts = 0
    nbytes = 0
    for i in range(cols.shape[0]):
        pkts += 1
        nbytes += wire_lens[i]
    return pkts, nbytes
