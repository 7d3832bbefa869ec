"""Compiled kernels vs the interpreted fallback, on the same synthetic stream.

Each backend runs in its own interpreter because FLOWFORGE_DISABLE_JIT is read
at import time. Both must produce the same flow table; only speed differs.

    python benchmarks/compare_backends.py --flows 500 --packets-per-flow 20
"""

import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import hashlib, json, sys, time
from flowforge import bench
from flowforge._jit import BACKEND
from flowforge.flowtable import FlowTable, parse_stream, snapshot
from flowforge.nids import load_model

flows, ppf, reps = map(int, sys.argv[1:4])
model = load_model(sys.argv[4]) if len(sys.argv) > 4 else None
stream = bench.generate_traffic(bench.TrafficProfile(flow_count=flows, packets_per_flow=ppf,
                                                     packet_size_bytes=(64, 1514)))
bench.warmup(model)
out = {"backend": BACKEND, "packets": len(stream)}
for name, m in (("netflow", None), ("nids", model)):
    if name == "nids" and m is None:
        continue
    times = []
    for _ in range(reps):
        table = FlowTable(index_bits=16)
        table.prefault()
        batch = parse_stream(stream)
        t0 = time.perf_counter()
        table.process(batch, model=m)
        times.append(time.perf_counter() - t0)
    digest = hashlib.sha256(repr([(r.slot, sorted(r.features.items()), r.malicious_flag)
                                  for r in snapshot(table)]).encode()).hexdigest()
    out[name] = {"best_s": min(times), "pps": len(stream) / min(times), "table_sha256": digest}
print(json.dumps(out))
"""

TREE_FRAGMENT = json.dumps({
    "format": "dtm-1", "root": 0,
    "nodes": [
        {"id": 0, "feature": "TCP_WIN_MAX_OUT", "threshold": 26865, "left": 1, "right": 2},
        {"id": 1, "feature": "NUM_PKTS_1024_TO_1514_BYTES", "threshold": 120, "left": 3, "right": 4},
        {"id": 3, "feature": "IN_PKTS", "threshold": 45, "left": 5, "right": 6},
        {"id": 5, "feature": "MIN_TTL", "threshold": 36, "left": 7, "right": 8},
        {"id": 7, "feature": "TCP_WIN_MAX_OUT", "threshold": 2, "left": 9, "right": 10},
    ],
    "leaves": [{"id": i, "label": int(i == 9)} for i in (2, 4, 6, 8, 9, 10)],
})


def run(disable_jit, flows, ppf, reps):
    env = dict(os.environ, FLOWFORGE_DISABLE_JIT="1" if disable_jit else "0")
    proc = subprocess.run([sys.executable, "-c", CHILD, str(flows), str(ppf), str(reps),
                           TREE_FRAGMENT], env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--flows", type=int, default=500)
    ap.add_argument("--packets-per-flow", type=int, default=20)
    ap.add_argument("--repetitions", type=int, default=3)
    args = ap.parse_args()

    results = [run(flag, args.flows, args.packets_per_flow, args.repetitions) for flag in (False, True)]
    fast, slow = results
    print(f"{'scenario':<10}{'backend':<10}{'pps':>14}{'speedup':>10}")
    for name in ("netflow", "nids"):
        for r in results:
            speedup = r[name]["pps"] / slow[name]["pps"]
            print(f"{name:<10}{r['backend']:<10}{r[name]['pps']:>14,.0f}{speedup:>9.1f}x")
        same = fast[name]["table_sha256"] == slow[name]["table_sha256"]
        print(f"{name:<10}tables identical: {same}")
        if not same:
            sys.exit(1)


if __name__ == "__main__":
    main()
