import json
import os
import socket
import subprocess
import sys

import pytest

from flowforge import export
from flowforge.cli import main
from flowforge.config import KEYS
from flowforge.packet import read_pcap
from oracles import fold_stream

ENV = dict(os.environ)


def run(capsys, *argv):
    code = main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


def error(err):
    return json.loads(err.strip().splitlines()[-1])


def test_no_arguments_prints_usage_exit_1():
    proc = subprocess.run([sys.executable, "-m", "flowforge"], capture_output=True, text=True,
                          env=ENV)
    assert proc.returncode == 1
    assert "usage: flowforge" in proc.stderr
    assert error(proc.stderr)["error"] == "usage"


def test_help_lists_every_config_key():
    for argv in ([], ["run"], ["bench"], ["collect"]):
        proc = subprocess.run([sys.executable, "-m", "flowforge", *argv, "--help"],
                              capture_output=True, text=True, env=ENV)
        assert proc.returncode == 0
        for key in KEYS:
            assert f"  {key}  " in proc.stdout or f"  {key} " in proc.stdout, key
            if argv:
                assert "--" + key.replace("_", "-") in proc.stdout


def test_compile_fragment_golden(capsys, tmp_path, fixtures):
    out = tmp_path / "tree.p4"
    code, _, _ = run(capsys, "compile", "--model", fixtures / "tree_fragment.dtm", "--out", out)
    assert code == 0
    assert out.read_text() == (fixtures / "tree_fragment.p4").read_text()


def test_compile_mask_excludes_feature(capsys, fixtures):
    code, _, err = run(capsys, "compile", "--model", fixtures / "tree_fragment.dtm",
                       "--feature-mask", "IN_PKTS")
    assert code == 1 and error(err)["flag"] == "--feature-mask"


def test_bench_nids_without_model(capsys):
    code, _, err = run(capsys, "bench", "--scenario", "nids")
    assert code == 1 and error(err)["flag"] == "--model"


def test_bad_config_value_names_flag(capsys):
    code, _, err = run(capsys, "gen", "--out", "x.pcap", "--index-bits", "99")
    assert code == 1 and error(err)["flag"] == "--index-bits"


def test_unknown_config_key(capsys, tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("frobnicate = 1\n")
    code, _, err = run(capsys, "gen", "--out", tmp_path / "x.pcap", "--config", conf)
    assert code == 1 and error(err)["flag"] == "--config"


def test_unknown_flag(capsys):
    code, _, err = run(capsys, "gen", "--out", "x.pcap", "--frobnicate", "1")
    assert code == 1 and error(err)["flag"] == "--frobnicate"


def test_missing_pcap_is_runtime_error(capsys, tmp_path):
    code, _, err = run(capsys, "run", "--pcap", tmp_path / "none.pcap")
    assert code == 2 and error(err)["flag"] == "--pcap"


@pytest.fixture()
def capture(capsys, tmp_path):
    path = tmp_path / "g.pcap"
    code, out, _ = run(capsys, "gen", "--out", path, "--flow-count", 300, "--packets-per-flow", 8,
                       "--packet-size-bytes", "64-1514", "--seed", 3)
    assert code == 0 and json.loads(out)["frames"] == 2400
    return path


def test_gen_run_matches_oracle(capsys, capture, tmp_path):
    csv_path = tmp_path / "flows.csv"
    code, out, _ = run(capsys, "run", "--pcap", capture, "--csv", csv_path, "--index-bits", 22)
    summary = json.loads(out)
    assert code == 0 and summary["collisions"] == 0 and summary["flows"] == 300
    records, _ = export.read_csv(csv_path.read_text())
    ref = fold_stream(read_pcap(capture))
    expect = {(r["IPV4_SRC_ADDR"], r["L4_SRC_PORT"], r["IPV4_DST_ADDR"], r["L4_DST_PORT"],
               r["PROTOCOL"]): r for r in ref.values()}
    for rec in records:
        e = expect[(rec["IPV4_SRC_ADDR"], rec["L4_SRC_PORT"], rec["IPV4_DST_ADDR"],
                    rec["L4_DST_PORT"], rec["PROTOCOL"])]
        assert all(rec[f] == e[f] for f in rec.features)


def test_run_is_reproducible_and_v9_matches_csv(capsys, capture, tmp_path):
    outs = []
    for i in range(2):
        csv_path, v9 = tmp_path / f"f{i}.csv", tmp_path / f"f{i}.v9"
        assert run(capsys, "run", "--pcap", capture, "--csv", csv_path, "--v9", v9,
                   "--feature-mask", "12", "--seed", 7)[0] == 0
        outs.append((csv_path.read_bytes(), v9.read_bytes()))
    assert outs[0] == outs[1]
    cache = export.TemplateCache()
    decoded = [r for dg in export.read_datagrams(tmp_path / "f0.v9")
               for r in export.decode_v9(dg, cache)]
    records, _ = export.read_csv(outs[0][0].decode())
    assert sorted(tuple(sorted(d.items())) for d in decoded) == sorted(
        tuple(sorted(r.restricted("12").items())) for r in records)


def test_run_classify_writes_flag(capsys, capture, fixtures):
    code, out, _ = run(capsys, "run", "--pcap", capture, "--classify", "--model",
                       fixtures / "tree_fragment.dtm")
    assert code == 0
    header = out.splitlines()[0].split(",")
    assert header[-1] == "MALICIOUS_FLAG"


def test_classify_hand_checked_fixture(capsys, tmp_path, fixtures):
    out_path = tmp_path / "pred.csv"
    code, out, _ = run(capsys, "classify", "--model", fixtures / "tree_fragment.dtm",
                       "--csv", fixtures / "labeled_10.csv", "--out", out_path)
    assert code == 0
    res = json.loads(out)
    assert res["rows"] == 10 and res["predicted_malicious"] == 4 and res["accuracy"] == 0.7
    c0, c1 = res["classes"]["0"], res["classes"]["1"]
    assert (c1["precision"], c1["recall"], c1["support"]) == (0.75, 0.6, 5)
    assert c1["f1"] == pytest.approx(2 / 3, abs=1e-15)
    assert (c0["recall"], c0["support"]) == (0.8, 5)
    assert c0["precision"] == pytest.approx(2 / 3, abs=1e-15)
    assert c0["f1"] == pytest.approx(8 / 11, abs=1e-15)
    rows = out_path.read_text().splitlines()
    assert rows[0] == "row,prediction,label" and [r.split(",")[1] for r in rows[1:]] == list(
        "1111000000")


def test_export_collect_loopback(capsys, tmp_path, fixtures):
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    out_csv = tmp_path / "collected.csv"
    collector = subprocess.Popen(
        [sys.executable, "-m", "flowforge", "collect", "--collector", f"127.0.0.1:{port}",
         "--out", out_csv, "--timeout", "5"], stderr=subprocess.PIPE, text=True, env=ENV)
    try:
        assert "listening" in collector.stderr.readline()
        v9 = tmp_path / "d.v9"
        code, out, _ = run(capsys, "export", "--csv", fixtures / "labeled_flows.csv", "--out", v9,
                           "--send", "--collector", f"127.0.0.1:{port}")
        assert code == 0 and json.loads(out)["records"] == 600
        collector.wait(timeout=30)
    finally:
        collector.kill()
    assert collector.returncode == 0
    sent, _ = export.read_csv((fixtures / "labeled_flows.csv").read_text())
    got, _ = export.read_csv(out_csv.read_text())
    assert [r.features for r in got] == [r.features for r in sent]


def test_export_needs_destination(capsys, fixtures):
    code, _, err = run(capsys, "export", "--csv", fixtures / "labeled_10.csv")
    assert code == 1 and error(err)["flag"] == "--out"


def test_bench_small_run(capsys, tmp_path, fixtures):
    report = tmp_path / "b.csv"
    code, out, _ = run(capsys, "bench", "--flow-count", 200, "--packets-per-flow", 5,
                       "--repetitions", 2, "--model", fixtures / "tree_fragment.dtm",
                       "--sweep", "7,22", "--loads", "1e4,1e5", "--out", report)
    assert code == 0
    summary = json.loads(out)
    assert set(summary["scenarios"]) >= {"forwarding", "netflow", "nids", "nids_drop_pct"}
    assert set(summary["sweep"]) == {"7", "22"}
    lines = report.read_text().splitlines()
    assert len(lines) == 1 + 2 * 3 + 2 * 2 + 2
    assert (tmp_path / "b.plot.dat").read_text().count("\n") == 3
