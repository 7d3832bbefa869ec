import numpy as np
import pytest
from scapy.layers.inet import IP
from scapy.layers.l2 import Ether

from flowforge import bench
from flowforge.bench import (
    BenchReport, EmptyProfile, ModelRequired, PcapNotFound, TrafficProfile, emit_report,
    feature_sweep, generate_traffic, offered_load_sweep, read_plot_data, read_report, run_scenario,
)
from flowforge.catalog import FEATURES
from flowforge.flowtable import snapshot
from flowforge.nids import load_model
from flowforge.packet import write_pcap
from oracles import BUCKETS, dissect, fold_stream

TEN_K = TrafficProfile(flow_count=1000, packets_per_flow=10)


@pytest.fixture(scope="module")
def stream():
    return generate_traffic(TEN_K)


def test_one_flow_one_packet():
    s = generate_traffic(TrafficProfile(flow_count=1, packets_per_flow=1, packet_size_bytes=64,
                                        seed=7))
    assert len(s) == 1 and len(s.frame(0)) == 64


def test_same_profile_same_bytes(stream):
    again = generate_traffic(TEN_K)
    assert np.array_equal(stream.buf, again.buf) and np.array_equal(stream.ts, again.ts)
    other = generate_traffic(TrafficProfile(flow_count=1000, packets_per_flow=10, seed=8))
    assert not np.array_equal(stream.buf, other.buf)


def test_distinct_keys_counted_by_dissector(stream):
    assert len(stream) == 10_000
    keys = set()
    for i in range(len(stream)):
        p = dissect(stream.frame(i))
        a, b = (p["src"], p["sport"]), (p["dst"], p["dport"])
        keys.add((min(a, b), max(a, b), p["proto"]))
    assert len(keys) == 1000


def test_frames_are_valid_ipv4():
    s = generate_traffic(TrafficProfile(flow_count=50, packets_per_flow=4,
                                        packet_size_bytes=(64, 1514)))
    sizes = s.lengths
    assert sizes.min() >= 64 and sizes.max() <= 1514 and len(set(sizes.tolist())) > 10
    for i in range(len(s)):
        pkt = Ether(s.frame(i))
        ip = pkt[IP]
        assert ip.len == len(s.frame(i)) - 14
        given = ip.chksum
        del ip.chksum
        assert IP(bytes(ip)).chksum == given


def test_profile_errors(tmp_path):
    with pytest.raises(EmptyProfile):
        generate_traffic(TrafficProfile(flow_count=0))
    with pytest.raises(PcapNotFound):
        generate_traffic(TrafficProfile(pcap=str(tmp_path / "nope.pcap")))
    with pytest.raises(ValueError):
        generate_traffic(TrafficProfile(packet_size_bytes=40))


def test_pcap_profile(tmp_path, stream):
    path = tmp_path / "t.pcap"
    write_pcap(path, stream)
    back = generate_traffic(TrafficProfile(pcap=str(path)))
    assert np.array_equal(back.ts, stream.ts)
    assert all(back.frame(i) == stream.frame(i) for i in range(0, len(stream), 97))


def test_forwarding_counts_every_frame(stream):
    r = run_scenario("forwarding", stream=stream)
    assert r.packets_processed == r.packets_offered == 10_000
    assert r.pps == pytest.approx(r.packets_processed / r.duration_s)
    assert r.gbps == pytest.approx(stream.total_wire_bytes * 8 / r.duration_s / 1e9)


def test_netflow_table_matches_oracle(stream):
    r = run_scenario("netflow", stream=stream)
    recs = snapshot(r.table)
    assert r.flows == len(recs) == 1000 and r.collisions == 0
    ref = fold_stream(stream)
    for rec in recs:
        e = ref[(rec.key.endpoint_a, rec.key.endpoint_b, rec.key.protocol)]
        assert sum(rec[b] for b in BUCKETS) == rec["IN_PKTS"] + rec["OUT_PKTS"]
        assert all(rec[f] == e[f] for f in FEATURES)


def test_nids_single_leaf(stream):
    for label in (0, 1):
        r = run_scenario("nids", stream=stream, model=load_model(f'{{"label": {label}}}'))
        assert r.malicious == (r.flows if label else 0)
        assert {x.malicious_flag for x in snapshot(r.table)} == {label}


def test_nids_requires_model(stream):
    with pytest.raises(ModelRequired):
        run_scenario("nids", stream=stream)
    with pytest.raises(ValueError):
        run_scenario("teleport", stream=stream)


def test_work_is_reproducible(stream, fragment):
    a = run_scenario("nids", stream=stream, model=fragment, index_bits=12)
    b = run_scenario("nids", stream=generate_traffic(TEN_K), model=fragment, index_bits=12)
    assert a.collisions > 0
    assert (a.flows, a.collisions, a.evictions, a.malicious) == (
        b.flows, b.collisions, b.evictions, b.malicious)
    assert all((x == y).all() for x, y in zip(a.table.banks, b.table.banks))


def test_feature_sweep_shapes(stream):
    reports, summary = feature_sweep(masks=("7", "22"), repetitions=5, stream=stream)
    assert len(reports) == 10
    assert set(summary) == {"7", "22"} and summary["7"]["drop_pct"] == 0.0
    for s in summary.values():
        assert s["min_pps"] <= s["median_pps"] <= s["max_pps"] and s["repetitions"] == 5
    _, same = feature_sweep(masks=("7", "7"), repetitions=1, stream=stream)
    assert same["7"]["drop_pct"] == 0.0
    with pytest.raises(ValueError):
        feature_sweep(masks=("7",), stream=stream)


def test_offered_load_sweep(stream):
    reports = offered_load_sweep(loads_pps=(2e4, 1e9), stream=stream, duration_s=0.1)
    assert [r.series[0][0] for r in reports] == [2e4, 1e9]
    for r in reports:
        assert r.packets_processed <= r.packets_offered
    assert reports[0].packets_processed == reports[0].packets_offered == 2000


def test_emit_report_roundtrip(tmp_path, stream):
    path = tmp_path / "empty.csv"
    _, plot = emit_report([], path)
    assert path.read_text().splitlines() == [",".join(bench.REPORT_COLUMNS)]
    assert read_plot_data(plot) == []
    reports = [run_scenario(s, stream=stream) for s in ("forwarding", "netflow", "netflow")]
    reports[2].series = [(1000.0, 999.5)]
    path = tmp_path / "r.csv"
    _, plot = emit_report(reports, path)
    back = read_report(path)
    assert len(back) == 3
    for a, b in zip(reports, back):
        assert all(getattr(a, c) == getattr(b, c) for c in bench.REPORT_COLUMNS)
    assert read_plot_data(plot) == [(1000.0, 999.5)]


def test_emit_report_io_failure(tmp_path):
    with pytest.raises(bench.IoFailure):
        emit_report([], tmp_path / "missing" / "r.csv")


def test_measured_report_invariant():
    r = BenchReport.measured("netflow", "22", 10, 10, 640, 0.5)
    assert r.pps == 20.0 and r.gbps == 640 * 8 / 0.5 / 1e9
