"""Desk-scale pipeline benchmark.

Three scenarios over the same in-memory frame stream:

* ``forwarding`` -- parse every frame and count it,
* ``netflow``    -- plus fold each packet into the flow table,
* ``nids``       -- plus classify the updated flow on every packet.

Work (packet, flow, collision and verdict counts) is reproducible for a given
profile and seed; only wall-clock figures vary between runs.
"""

import csv
import gc
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from ._jit import BACKEND
from .flowtable import DEFAULT_INDEX_BITS, FlowTable, ParsedBatch, parse_stream
from .catalog import BANK_OF, ROW, parse_mask
from .nids import FeatureNotEnabled
from .packet import FrameStream, read_pcap

SCENARIOS = ("forwarding", "netflow", "nids")
REPORT_COLUMNS = ("scenario", "mask", "packets_offered", "packets_processed", "duration_s",
                  "pps", "gbps", "collisions", "evictions", "rep")
PLOT_COLUMNS = ("offered_pps", "achieved_pps")
EPOCH_MICROS = 1_700_000_000 * 1_000_000
PROTOCOLS = {"tcp": 6, "udp": 17, "icmp": 1}


class PcapNotFound(FileNotFoundError):
    pass


class EmptyProfile(ValueError):
    pass


class ModelRequired(ValueError):
    pass


class IoFailure(OSError):
    pass


@dataclass
class TrafficProfile:
    flow_count: int = 1000
    packets_per_flow: int = 10
    packet_size_bytes: object = 64  # int, or (lo, hi) drawn per packet
    protocol_mix: dict = field(default_factory=lambda: {"tcp": 0.8, "udp": 0.15, "icmp": 0.05})
    seed: int = 7
    reverse_fraction: float = 0.4
    span_s: float = 60.0
    pcap: str = None
    offered_load_pps: float = None  # None: unpaced


def _put(buf, pos, values, nbytes):
    values = values.astype(np.int64)
    for k in range(nbytes):
        buf[pos + k] = (values >> (8 * (nbytes - 1 - k))) & 0xFF


def generate_traffic(profile):
    """A reproducible FrameStream: a pcap's frames, or synthetic flows.

    Synthetic flows draw unique sources from 10/8 and destinations from
    172.16/12, so every flow has a distinct canonical key. The first packet of
    a flow travels initiator -> responder; later ones are reversed with
    probability ``reverse_fraction``.
    """
    if profile.pcap is not None:
        if not os.path.exists(profile.pcap):
            raise PcapNotFound(profile.pcap)
        return read_pcap(profile.pcap)
    nf, ppf = int(profile.flow_count), int(profile.packets_per_flow)
    if nf <= 0 or ppf <= 0:
        raise EmptyProfile("synthetic profile needs flow_count > 0 and packets_per_flow > 0")
    if nf > 1 << 20:
        raise ValueError("at most 2^20 synthetic flows")
    rng = np.random.default_rng(profile.seed)

    src_ip = 0x0A000000 + rng.choice(1 << 24, size=nf, replace=False).astype(np.int64)
    dst_ip = 0xAC100000 + rng.integers(0, 1 << 20, size=nf, dtype=np.int64)
    sport = rng.integers(1024, 65536, size=nf, dtype=np.int64)
    dport = rng.choice(np.array([22, 53, 80, 123, 443, 445, 3389, 8080]), size=nf)
    names = list(profile.protocol_mix)
    weights = np.array([profile.protocol_mix[n] for n in names], dtype=float)
    proto = np.array([PROTOCOLS[n] for n in names])[
        rng.choice(len(names), size=nf, p=weights / weights.sum())]
    base_ttl = rng.choice(np.array([64, 128, 255]), size=(2, nf))
    start = rng.uniform(0, profile.span_s / 2, size=nf)
    gap = rng.uniform(0.0005, profile.span_s / 2 / max(ppf, 1), size=nf)

    n = nf * ppf
    flow = np.repeat(np.arange(nf), ppf)
    k = np.tile(np.arange(ppf), nf)
    ts = EPOCH_MICROS + ((start[flow] + k * gap[flow]) * 1e6).astype(np.int64)
    rev = (rng.random(n) < profile.reverse_fraction) & (k > 0)
    order = np.lexsort((k, flow, ts))
    flow, k, ts, rev = flow[order], k[order], ts[order], rev[order]

    size = profile.packet_size_bytes
    if isinstance(size, (tuple, list)):
        lo, hi = int(size[0]), int(size[1])
        frame_len = rng.integers(lo, hi + 1, size=n, dtype=np.int64)
    else:
        lo = hi = int(size)
        frame_len = np.full(n, lo, dtype=np.int64)
    if lo < 64 or hi > 1514:
        raise ValueError("packet sizes must lie in [64, 1514] bytes")

    p = proto[flow]
    s_ip = np.where(rev, dst_ip[flow], src_ip[flow])
    d_ip = np.where(rev, src_ip[flow], dst_ip[flow])
    s_port = np.where(rev, dport[flow], sport[flow])
    d_port = np.where(rev, sport[flow], dport[flow])
    ttl = base_ttl[rev.astype(np.int64), flow] - rng.integers(0, 4, size=n)
    win = rng.integers(0, 65536, size=n, dtype=np.int64)
    flags = np.where(k == 0, 0x02, np.where(k == ppf - 1, 0x11,
                                             rng.choice(np.array([0x10, 0x18]), size=n)))
    ip_len = frame_len - 14

    offsets = np.zeros(n, dtype=np.int64)
    offsets[1:] = np.cumsum(frame_len)[:-1]
    buf = np.zeros(int(frame_len.sum()), dtype=np.uint8)
    _put(buf, offsets, np.full(n, 0x020000000002), 6)
    _put(buf, offsets + 6, np.full(n, 0x020000000001), 6)
    _put(buf, offsets + 12, np.full(n, 0x0800), 2)
    ip = offsets + 14
    ident = np.arange(n, dtype=np.int64) & 0xFFFF
    words = [np.full(n, 0x4500), ip_len, ident, np.full(n, 0x4000), (ttl << 8) | p,
             s_ip >> 16, s_ip & 0xFFFF, d_ip >> 16, d_ip & 0xFFFF]
    csum = sum(w.astype(np.int64) for w in words)
    csum = (csum & 0xFFFF) + (csum >> 16)
    csum = (csum & 0xFFFF) + (csum >> 16)
    _put(buf, ip, np.full(n, 0x4500), 2)
    _put(buf, ip + 2, ip_len, 2)
    _put(buf, ip + 4, ident, 2)
    _put(buf, ip + 6, np.full(n, 0x4000), 2)
    _put(buf, ip + 8, ttl, 1)
    _put(buf, ip + 9, p, 1)
    _put(buf, ip + 10, ~csum & 0xFFFF, 2)
    _put(buf, ip + 12, s_ip, 4)
    _put(buf, ip + 16, d_ip, 4)
    l4 = ip + 20
    tcp, udp, icmp = p == 6, p == 17, p == 1
    _put(buf, l4[tcp | udp], s_port[tcp | udp], 2)
    _put(buf, l4[tcp | udp] + 2, d_port[tcp | udp], 2)
    _put(buf, l4[tcp] + 4, rng.integers(0, 1 << 32, size=int(tcp.sum()), dtype=np.int64), 4)
    _put(buf, l4[tcp] + 12, np.full(int(tcp.sum()), 0x50), 1)
    _put(buf, l4[tcp] + 13, flags[tcp], 1)
    _put(buf, l4[tcp] + 14, win[tcp], 2)
    _put(buf, l4[udp] + 4, ip_len[udp] - 20, 2)
    _put(buf, l4[icmp], np.full(int(icmp.sum()), 0x0800), 2)
    return FrameStream(buf, offsets, frame_len, frame_len.copy(), ts.astype(np.uint64))


@dataclass
class BenchReport:
    scenario: str
    mask: str
    packets_offered: int
    packets_processed: int
    duration_s: float
    pps: float
    gbps: float
    collisions: int = 0
    evictions: int = 0
    rep: int = 0
    flows: int = 0
    malicious: int = 0
    backend: str = BACKEND
    series: list = field(default_factory=list)  # (offered_pps, achieved_pps)
    table: object = field(default=None, repr=False, compare=False)

    @classmethod
    def measured(cls, scenario, mask, offered, processed, nbytes, duration, **kw):
        duration = max(duration, 1e-9)
        return cls(scenario, mask, int(offered), int(processed), duration,
                   processed / duration, nbytes * 8 / duration / 1e9, **kw)


_warm_batch = None


def warmup(model=None):
    """Compile the kernels (and ``model``'s walker) on a tiny input.

    Every timed region calls this first so none of them pays for JIT.
    """
    global _warm_batch
    if _warm_batch is None:
        stream = generate_traffic(TrafficProfile(flow_count=4, packets_per_flow=3, seed=0))
        _warm_batch = parse_stream(stream)
        K.count_frames(_warm_batch.cols, _warm_batch.wire_lens)
        FlowTable(index_bits=8, evict_capacity=1).process(_warm_batch)
    if model is not None:
        FlowTable(index_bits=8, evict_capacity=1).process(_warm_batch, model=model)


def _check_model(scenario, model, mask):
    if scenario == "nids":
        if model is None:
            raise ModelRequired("the nids scenario needs a decision-tree model")
        missing = [f for f in model.features if f not in mask]
        if missing:
            raise FeatureNotEnabled(f"model reads {missing} which mask {mask.name} disables")


def run_scenario(name, profile=None, feature_mask="22", model=None, *, stream=None,
                 index_bits=DEFAULT_INDEX_BITS, rep=0, workers=1, cols=None):
    """Time one pass of ``name`` over the stream; returns a BenchReport.

    The report carries the final table (``report.table``) for inspection.
    """
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    mask = parse_mask(feature_mask)
    _check_model(name, model, mask)
    if stream is None:
        stream = generate_traffic(profile)
    warmup(model if name == "nids" else None)
    n = len(stream)
    if cols is None:
        cols = np.empty((n, K.N_COLS), dtype=np.int64)
    table = None
    if name != "forwarding":
        table = FlowTable(index_bits=index_bits, feature_mask=mask)
        table.prefault()

    # keep collector pauses out of the timed region
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        t0 = time.perf_counter()
        K.parse_frames(stream.buf, stream.offsets, stream.lengths, stream.wire_lens, cols)
        batch = ParsedBatch(cols, stream.ts, stream.wire_lens)
        if table is None:
            processed, nbytes = K.count_frames(cols, stream.wire_lens)
        else:
            table.process(batch, model=model if name == "nids" else None, workers=workers)
            processed, nbytes = n, stream.total_wire_bytes
        elapsed = time.perf_counter() - t0
    finally:
        if was_enabled:
            gc.enable()

    kw = {"rep": rep}
    if table is not None:
        occ = table.occupied != 0
        mal = table.register_column("MALICIOUS")
        kw.update(collisions=table.collisions, evictions=table.evictions,
                  flows=int(occ.sum()), malicious=int((mal[occ] != 0).sum()), table=table)
    return BenchReport.measured(name, mask.name, n, processed, nbytes, elapsed, **kw)


def summarize(reports):
    """Median/min/max pps per (scenario, mask), in first-seen order."""
    groups = {}
    for r in reports:
        groups.setdefault((r.scenario, r.mask), []).append(r.pps)
    return {k: {"median_pps": statistics.median(v), "min_pps": min(v), "max_pps": max(v),
                "repetitions": len(v)} for k, v in groups.items()}


def compare_scenarios(profile=None, model=None, feature_mask="22", repetitions=5, *,
                      stream=None, index_bits=DEFAULT_INDEX_BITS, scenarios=SCENARIOS, workers=1):
    """Interleaved repetitions of each scenario over one stream.

    Returns ``(reports, summary)``; the summary maps scenario name to
    median/min/max pps and, when both ran, adds ``nids_drop_pct`` (nids vs
    netflow) and ``netflow_drop_pct`` (netflow vs forwarding).
    """
    if stream is None:
        stream = generate_traffic(profile)
    cols = np.empty((len(stream), K.N_COLS), dtype=np.int64)
    reports = []
    for rep in range(repetitions):
        for sc in scenarios:
            r = run_scenario(sc, None, feature_mask, model, stream=stream, index_bits=index_bits,
                             rep=rep, cols=cols, workers=workers)
            r.table = None
            reports.append(r)
    summary = {sc: v for (sc, _), v in summarize(reports).items()}
    if "netflow" in summary and "nids" in summary:
        summary["nids_drop_pct"] = _drop(summary["netflow"], summary["nids"])
    if "forwarding" in summary and "netflow" in summary:
        summary["netflow_drop_pct"] = _drop(summary["forwarding"], summary["netflow"])
    return reports, summary


def _drop(base, other):
    return 100.0 * (base["median_pps"] - other["median_pps"]) / base["median_pps"]


def feature_sweep(profile=None, masks=("7", "22"), repetitions=5, *, stream=None,
                  scenario="netflow", model=None, index_bits=DEFAULT_INDEX_BITS, workers=1):
    """Throughput per feature mask plus the drop relative to the smallest mask.

    Returns ``(reports, summary)`` where ``summary[mask]`` holds median/min/max
    pps and ``drop_pct`` against the mask with the fewest fields.
    """
    if len(masks) < 2:
        raise ValueError("a sweep needs at least two masks")
    masks = [parse_mask(m) for m in masks]
    if stream is None:
        stream = generate_traffic(profile)
    cols = np.empty((len(stream), K.N_COLS), dtype=np.int64)
    reports = []
    for rep in range(repetitions):
        for m in masks:
            r = run_scenario(scenario, None, m, model, stream=stream, index_bits=index_bits,
                             rep=rep, cols=cols, workers=workers)
            r.table = None
            reports.append(r)
    stats = {m: v for (_, m), v in summarize(reports).items()}
    base = stats[min(masks, key=len).name]
    for v in stats.values():
        v["drop_pct"] = _drop(base, v)
    return reports, stats


def offered_load_sweep(profile=None, loads_pps=(1e4, 1e5, 1e6), scenario="netflow", model=None,
                       feature_mask="22", *, stream=None, duration_s=0.25,
                       index_bits=DEFAULT_INDEX_BITS, queue_packets=4096, chunk=256):
    """Token-bucket pacing of the stream at each offered rate.

    Packets become eligible at ``i / rate`` seconds. When the backlog exceeds
    ``queue_packets`` the oldest waiting packets are dropped, as a full NIC
    ring would. Each report's ``series`` is ``[(offered_pps, achieved_pps)]``.
    """
    mask = parse_mask(feature_mask)
    _check_model(scenario, model, mask)
    if stream is None:
        stream = generate_traffic(profile)
    warmup(model if scenario == "nids" else None)
    reports = []
    for rate in loads_pps:
        n = max(1, min(len(stream), int(rate * duration_s)))
        table = None if scenario == "forwarding" else FlowTable(index_bits=index_bits,
                                                                feature_mask=mask)
        if table is not None:
            table.prefault()
        processed = dropped = nbytes = 0
        i = 0
        t0 = time.perf_counter()
        while i < n:
            now = time.perf_counter() - t0
            arrived = min(n, int(now * rate) + 1)
            backlog = arrived - i
            if backlog <= 0:
                time.sleep(max(0.0, i / rate - now))
                continue
            if backlog > queue_packets:
                dropped += backlog - queue_packets
                i += backlog - queue_packets
            j = min(i + chunk, arrived)
            part = stream.slice(i, j)
            batch = parse_stream(part)
            if table is None:
                K.count_frames(batch.cols, batch.wire_lens)
            else:
                table.process(batch, model=model if scenario == "nids" else None)
            processed += j - i
            nbytes += int(part.wire_lens.sum())
            i = j
        elapsed = time.perf_counter() - t0
        r = BenchReport.measured(scenario, mask.name, n, processed, nbytes, elapsed,
                                 collisions=table.collisions if table else 0,
                                 evictions=table.evictions if table else 0)
        r.series = [(float(rate), r.pps)]
        reports.append(r)
    return reports


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def emit_report(reports, path):
    """Write the report CSV at ``path`` and ``<stem>.plot.dat`` beside it.

    Returns the two paths.
    """
    stem, _ = os.path.splitext(str(path))
    plot_path = stem + ".plot.dat"
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in reports:
                w.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
        with open(plot_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PLOT_COLUMNS)
            for r in reports:
                for offered, achieved in r.series:
                    w.writerow([_fmt(float(offered)), _fmt(float(achieved))])
    except OSError as exc:
        raise IoFailure(f"cannot write report: {exc}") from exc
    return path, plot_path


def read_report(path):
    types = {"packets_offered": int, "packets_processed": int, "collisions": int,
             "evictions": int, "rep": int, "duration_s": float, "pps": float, "gbps": float}
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [BenchReport(**{c: types.get(c, str)(row[c]) for c in REPORT_COLUMNS}) for row in rows]


def read_plot_data(path):
    with open(path, newline="") as fh:
        return [(float(r["offered_pps"]), float(r["achieved_pps"])) for r in csv.DictReader(fh)]
