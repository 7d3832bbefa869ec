"""Hashed register-array flow table.

Flows are indexed by the low ``index_bits`` of a CRC-32 over the canonical
key. Each feature is one register (see :mod:`flowforge.catalog`) and a slot
is one row of each bank, so a flow's fields share a few cache lines. The
resident key is stored too, so a colliding flow evicts the old record instead
of silently merging into it.
"""

import enum
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .catalog import (
    BANK_DTYPES, BANK_OF, BANK_ROWS, FEATURES, FULL_MASK, ROW, parse_mask,
)
from .packet import CanonicalKey, FrameStream, canonicalize

DEFAULT_INDEX_BITS = 20
DEFAULT_IDLE_TIMEOUT_S = 30
DEFAULT_ACTIVE_TIMEOUT_S = 120


class SlotVerdict(enum.IntEnum):
    SKIPPED = K.V_SKIPPED
    CREATED = K.V_CREATED
    UPDATED = K.V_UPDATED
    COLLISION_EVICTED = K.V_EVICTED


def flow_id(key, index_bits):
    """Slot index of a canonical key: CRC-32 of its 13-byte form, low bits kept."""
    if not 8 <= index_bits <= 24:
        raise ValueError(f"index_bits must be in [8, 24], got {index_bits}")
    (a_ip, a_port), (b_ip, b_port) = key.endpoint_a, key.endpoint_b
    crc = K.crc32_key(a_ip, a_port, b_ip, b_port, key.protocol)
    return int(crc) & ((1 << index_bits) - 1)


@dataclass
class FlowRecord:
    """Snapshot of one slot. ``features`` always holds all 22 catalog names;
    fields outside the table's mask read 0."""

    features: dict
    first_ts: int = 0
    last_ts: int = 0
    slot: int = -1
    malicious_flag: int = 0
    key: CanonicalKey = None
    initiator: tuple = None
    occupied: bool = True

    def __getitem__(self, name):
        return self.features[name]

    def restricted(self, mask):
        mask = parse_mask(mask)
        return {f: self.features[f] for f in mask.fields}


def _alloc_banks(n):
    return [np.zeros((n, len(rows)), dtype=dt) for rows, dt in zip(BANK_ROWS, BANK_DTYPES)]


def _record_from_banks(banks, col, slot):
    def reg(name):
        return int(banks[BANK_OF[name]][col, ROW[name]])

    key = CanonicalKey((reg("KEY_A_IP"), reg("KEY_A_PORT")),
                       (reg("KEY_B_IP"), reg("KEY_B_PORT")), reg("KEY_PROTO"))
    initiator = key.endpoint_a if reg("INIT_IS_A") else key.endpoint_b
    return FlowRecord(
        features={f: reg(f) for f in FEATURES},
        first_ts=reg("FIRST_TS"), last_ts=reg("LAST_TS"), slot=slot,
        malicious_flag=reg("MALICIOUS"), key=key, initiator=initiator,
    )


@dataclass
class ParsedBatch:
    """A decoded frame stream: one row per packet, columns ``kernels.C_*``."""

    cols: np.ndarray
    ts: np.ndarray
    wire_lens: np.ndarray

    def __len__(self):
        return self.cols.shape[0]


def parse_stream(stream: FrameStream) -> ParsedBatch:
    n = len(stream)
    cols = np.empty((n, K.N_COLS), dtype=np.int64)
    K.parse_frames(stream.buf, stream.offsets, stream.lengths, stream.wire_lens, cols)
    return ParsedBatch(cols, stream.ts, stream.wire_lens)


def batch_from_packets(packets):
    """Columns for already-parsed packets (ParsedPacket instances)."""
    n = len(packets)
    cols = np.zeros((n, K.N_COLS), dtype=np.int64)
    ts = np.zeros(n, dtype=np.uint64)
    for i, p in enumerate(packets):
        cols[i] = (K.ST_OK, p.wire_len, p.ip_total_len, p.ttl, p.protocol, p.src_ip,
                   p.dst_ip, p.src_port, p.dst_port, p.tcp_flags, p.tcp_window)
        ts[i] = p.ts_micros
    return ParsedBatch(cols, ts, cols[:, K.C_WIRE_LEN].copy())


@dataclass
class FlowTable:
    index_bits: int = DEFAULT_INDEX_BITS
    feature_mask: object = FULL_MASK
    evict_capacity: int = 1024
    collisions: int = 0
    evictions: int = 0

    def __post_init__(self):
        if not 8 <= self.index_bits <= 24:
            raise ValueError(f"index_bits must be in [8, 24], got {self.index_bits}")
        self.feature_mask = parse_mask(self.feature_mask)
        self._flags = self.feature_mask.flags
        self.banks = _alloc_banks(self.size)
        self._ebanks = _alloc_banks(self.evict_capacity)
        self._eslots = np.zeros(self.evict_capacity, dtype=np.int64)
        self._lock = threading.Lock()
        self._evicted = []
        self._pending = []  # raw eviction-buffer copies, turned into records on access

    @property
    def size(self):
        return 1 << self.index_bits

    @property
    def occupied(self):
        return self.banks[BANK_OF["OCCUPIED"]][:, ROW["OCCUPIED"]]

    def prefault(self):
        """Touch every register page so timing runs do not pay first-touch faults."""
        for b in self.banks:
            b.fill(0)

    def __len__(self):
        return int(np.count_nonzero(self.occupied))

    def record(self, slot):
        return _record_from_banks(self.banks, slot, slot)

    def register_column(self, name):
        return self.banks[BANK_OF[name]][:, ROW[name]]

    def register(self, name, slot):
        return int(self.banks[BANK_OF[name]][slot, ROW[name]])

    def process(self, batch, model=None, order=None, workers=1):
        """Fold a ParsedBatch into the table; returns per-packet SlotVerdict codes.

        With ``model`` each updated flow is classified in-line and its
        MALICIOUS register written. ``workers > 1`` partitions packets by the
        top bits of their flow id; each worker owns a disjoint slot range.
        """
        n = len(batch)
        verdicts = np.zeros(n, dtype=np.int8)
        walk = model.walker if model is not None else None
        order = np.arange(n, dtype=np.int64) if order is None else np.asarray(order, np.int64)
        if workers <= 1:
            self._run(batch, order, walk, verdicts, self._ebanks, self._eslots)
            return verdicts

        ids = np.empty(n, dtype=np.int64)
        K.flow_ids(batch.cols, self.index_bits, ids)
        shard_bits = max(1, int(workers - 1).bit_length())
        part = (np.where(ids >= 0, ids >> (self.index_bits - shard_bits), 0) % workers)[order]
        orders = [order[part == w] for w in range(workers)]
        buffers = [(_alloc_banks(self.evict_capacity), np.zeros(self.evict_capacity, np.int64))
                   for _ in range(workers)]
        with ThreadPoolExecutor(workers) as pool:
            futs = [pool.submit(self._run, batch, o, walk, verdicts, eb, es)
                    for o, (eb, es) in zip(orders, buffers)]
            for f in futs:
                f.result()
        return verdicts

    def _run(self, batch, order, walk, verdicts, ebanks, eslots):
        r64, r32, r16, r8 = self.banks
        e64, e32, e16, e8 = ebanks
        i = 0
        while True:
            i, ne = K.process_packets(r64, r32, r16, r8, self.index_bits, batch.cols, batch.ts,
                                      order, i, self._flags, walk,
                                      e64, e32, e16, e8, eslots, 0, verdicts)
            self._drain(ebanks, eslots, int(ne))
            if i >= len(order):
                return

    def _drain(self, ebanks, eslots, ne):
        if not ne:
            return
        chunk = ([b[:ne].copy() for b in ebanks], eslots[:ne].copy())
        with self._lock:
            self._pending.append(chunk)
            self.collisions += ne
            self.evictions += ne

    @property
    def evicted(self):
        """Records pushed out by collisions, oldest first."""
        with self._lock:
            for banks, slots in self._pending:
                self._evicted.extend(_record_from_banks(banks, j, int(s))
                                     for j, s in enumerate(slots))
            self._pending.clear()
        return self._evicted

    def clear_slots(self, slots):
        for b in self.banks:
            b[slots, :] = 0

    def drain_evicted(self):
        out = self.evicted
        self._evicted = []
        return out


def update_flow(table, pkt, key=None, is_forward=None):
    """Apply one parsed packet; returns the SlotVerdict for its slot."""
    if key is not None or is_forward is not None:
        expect = canonicalize(pkt.five_tuple)
        if (key, is_forward) != expect:
            raise ValueError(f"key/direction {key!r}/{is_forward} disagree with packet {expect!r}")
    return SlotVerdict(int(table.process(batch_from_packets([pkt]))[0]))


def snapshot(table):
    """Copies of all occupied records, in slot order. The table is not modified."""
    return [table.record(int(s)) for s in np.flatnonzero(table.occupied)]


def expire_flows(table, now_micros, idle_timeout_s=DEFAULT_IDLE_TIMEOUT_S,
                 active_timeout_s=DEFAULT_ACTIVE_TIMEOUT_S):
    """Remove and return every record idle or active longer than its timeout."""
    occ = table.occupied != 0
    first = table.banks[BANK_OF["FIRST_TS"]][:, ROW["FIRST_TS"]].astype(np.int64)
    last = table.banks[BANK_OF["LAST_TS"]][:, ROW["LAST_TS"]].astype(np.int64)
    now = int(now_micros)
    idle = np.maximum(now - last, 0) > int(idle_timeout_s * 1_000_000)
    active = np.maximum(now - first, 0) > int(active_timeout_s * 1_000_000)
    slots = np.flatnonzero(occ & (idle | active))
    out = [table.record(int(s)) for s in slots]
    table.clear_slots(slots)
    table.evictions += len(out)
    return out


def flush(table):
    """Remove and return every occupied record (end of capture)."""
    slots = np.flatnonzero(table.occupied)
    out = [table.record(int(s)) for s in slots]
    table.clear_slots(slots)
    return out


def export_flows(table, batch, model=None, idle_timeout_s=DEFAULT_IDLE_TIMEOUT_S,
                 active_timeout_s=DEFAULT_ACTIVE_TIMEOUT_S, tick_s=1.0, workers=1):
    """Run a capture through the table the way a live exporter would.

    Packets are folded in timestamp order, ``tick_s`` of capture time at a
    time, with an expiry pass at the end of each tick. Returns every finished
    record: collision evictions, expiries, and the final flush.
    """
    order = np.argsort(batch.ts, kind="stable").astype(np.int64)
    ts = batch.ts[order].astype(np.int64)
    tick = max(1, int(tick_s * 1_000_000))
    out = []
    i = 0
    while i < len(order):
        end = (ts[i] // tick + 1) * tick
        j = int(np.searchsorted(ts, end, side="left"))
        table.process(batch, model=model, order=order[i:j], workers=workers)
        out.extend(table.drain_evicted())
        out.extend(expire_flows(table, end, idle_timeout_s, active_timeout_s))
        i = j
    out.extend(table.drain_evicted())
    out.extend(flush(table))
    return out
