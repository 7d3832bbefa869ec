"""``flowforge`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime error. Errors are printed to
stderr as one JSON object naming the offending flag or config key.
"""

import argparse
import json
import sys

from . import bench, export, nids
from ._jit import BACKEND
from .catalog import parse_mask
from .config import KEYS, ConfigError, build_config, read_config_file
from .flowtable import FlowTable, export_flows, parse_stream
from .packet import read_pcap, write_pcap


class UsageError(Exception):
    def __init__(self, message, flag=None):
        super().__init__(message)
        self.flag = flag


class RuntimeFailure(Exception):
    def __init__(self, message, flag=None):
        super().__init__(message)
        self.flag = flag


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        flag = None
        for token in message.replace(",", " ").replace("/", " ").split():
            if token.startswith("-"):
                flag = token.strip("'\":")
                break
        raise UsageError(f"{self.prog}: {message}", flag)


def _flag(key):
    return "--" + key.replace("_", "-")


def _keys_epilog():
    width = max(len(k) for k in KEYS)
    lines = ["configuration keys (--config FILE with key = value lines, or --<key> flags;",
             "flags win over the file, the file over defaults):"]
    for name, f in KEYS.items():
        lines.append(f"  {name:<{width}}  {f.metadata['help']} (default: {f.default})")
    return "\n".join(lines)


def _config_parent():
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("configuration")
    group.add_argument("--config", metavar="FILE", help="flat key = value configuration file")
    for name, f in KEYS.items():
        group.add_argument(_flag(name), dest=name, default=None, metavar=name.upper(),
                           help=f.metadata["help"])
    return parent


def build_parser():
    parent = _config_parent()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="flowforge", formatter_class=fmt, epilog=_keys_epilog(),
                     description="Flow-table telemetry, decision-tree NIDS, NetFlow v9 export "
                                 "and pipeline benchmarks.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[parent], formatter_class=fmt,
                              epilog=_keys_epilog())

    p = add("run", "pcap -> flow records (CSV and/or NetFlow v9)")
    p.add_argument("--pcap", required=True, help="input capture (Ethernet link type)")
    p.add_argument("--csv", metavar="OUT", help="write records as CSV ('-' for stdout)")
    p.add_argument("--v9", metavar="OUT", help="write v9 datagrams (u16-length-prefixed file)")
    p.add_argument("--send", action="store_true", help="send v9 datagrams to the collector")
    p.add_argument("--classify", action="store_true", help="run --model on every update")
    p.add_argument("--model", help="dtm-1 decision-tree model")

    p = add("compile", "dtm model -> P4-16 source")
    p.add_argument("--model", required=True, help="dtm-1 decision-tree model")
    p.add_argument("--out", help="output file (default stdout)")

    p = add("classify", "flow-record CSV -> verdicts (+ precision/recall/F1 if labelled)")
    p.add_argument("--model", required=True, help="dtm-1 decision-tree model")
    p.add_argument("--csv", required=True, metavar="IN", help="flow records, optional Label column")
    p.add_argument("--out", help="write per-row verdict CSV here")

    p = add("export", "flow-record CSV -> NetFlow v9 datagrams")
    p.add_argument("--csv", required=True, metavar="IN", help="flow records")
    p.add_argument("--out", help="datagram file (u16-length-prefixed)")
    p.add_argument("--send", action="store_true", help="send to the collector")

    p = add("collect", "UDP NetFlow v9 listener -> CSV")
    p.add_argument("--out", help="CSV output (default stdout)")
    p.add_argument("--count", type=int, help="stop after this many datagrams")
    p.add_argument("--timeout", type=float, default=2.0, help="stop after this many idle seconds")

    p = add("bench", "scenario throughput, feature sweep, offered-load sweep")
    p.add_argument("--scenario", default="all", choices=("all",) + bench.SCENARIOS,
                   help="'all' runs forwarding and netflow, plus nids when --model is given")
    p.add_argument("--model", help="dtm-1 model for the nids scenario")
    p.add_argument("--pcap", help="replay a capture instead of synthetic traffic")
    p.add_argument("--sweep", metavar="MASKS", help="feature sweep over masks, e.g. 7,22")
    p.add_argument("--loads", metavar="PPS", help="offered-load sweep, e.g. 1e4,1e5,1e6")
    p.add_argument("--out", help="report CSV (a .plot.dat file is written beside it)")

    p = add("gen", "write a synthetic capture")
    p.add_argument("--out", required=True, help="output pcap")
    return parser


def _config(args):
    file_values = {}
    if args.config:
        try:
            file_values = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}", "--config") from None
        except ConfigError as exc:
            raise UsageError(str(exc), "--config") from None
    flags = {k: getattr(args, k) for k in KEYS}
    try:
        return build_config(file_values, flags)
    except ConfigError as exc:
        flag = _flag(exc.key) if flags.get(exc.key) is not None else "--config"
        raise UsageError(str(exc), flag) from None


def _load_model(path):
    try:
        with open(path) as fh:
            return nids.load_model(fh.read())
    except OSError as exc:
        raise RuntimeFailure(f"cannot read model: {exc}", "--model") from None
    except nids.ModelError as exc:
        raise RuntimeFailure(f"invalid model: {exc}", "--model") from None


def _read_text(path, flag):
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise RuntimeFailure(str(exc), flag) from None


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _exporter(cfg):
    return export.ExporterState(source_id=cfg.source_id,
                                refresh_datagrams=cfg.template_refresh_datagrams,
                                refresh_s=cfg.template_refresh_s)


def _profile(cfg, pcap=None):
    return bench.TrafficProfile(flow_count=cfg.flow_count, packets_per_flow=cfg.packets_per_flow,
                                packet_size_bytes=cfg.packet_size, seed=cfg.seed, pcap=pcap)


def cmd_run(args, cfg):
    if args.classify and not args.model:
        raise UsageError("--classify needs --model", "--model")
    model = _load_model(args.model) if args.model else None
    if model is not None:
        _check_mask(model, cfg)
    try:
        stream = read_pcap(args.pcap)
    except (OSError, ValueError) as exc:
        raise RuntimeFailure(str(exc), "--pcap") from None
    table = FlowTable(index_bits=cfg.index_bits, feature_mask=cfg.feature_mask)
    records = export_flows(table, parse_stream(stream), model if args.classify else None,
                           cfg.idle_timeout_s, cfg.active_timeout_s, workers=cfg.workers)
    mask = parse_mask(cfg.feature_mask)
    datagrams = []
    if args.v9 or args.send:
        datagrams = export.encode_v9(records, mask, cfg.template_id, _exporter(cfg))
        if args.v9:
            export.write_datagrams(args.v9, datagrams)
        if args.send:
            export.send_datagrams(datagrams, *cfg.collector_address)
    csv_out = args.csv if args.csv or args.v9 or args.send else "-"
    if csv_out:
        _write(csv_out, export.to_csv(records, mask, with_flag=args.classify))
    if csv_out != "-":
        _summary({"packets": len(stream), "flows": len(records), "collisions": table.collisions,
                  "datagrams": len(datagrams)})


def _check_mask(model, cfg):
    mask = parse_mask(cfg.feature_mask)
    missing = [f for f in model.features if f not in mask]
    if missing:
        raise UsageError(f"model reads {missing}, which feature_mask {mask.name} disables",
                         "--feature-mask")


def cmd_compile(args, cfg):
    model = _load_model(args.model)
    try:
        text = nids.compile_to_p4(model, cfg.feature_mask)
    except nids.FeatureNotEnabled as exc:
        raise UsageError(str(exc), "--feature-mask") from None
    _write(args.out, text)


def cmd_classify(args, cfg):
    model = _load_model(args.model)
    try:
        records, labels = export.read_csv(_read_text(args.csv, "--csv"))
    except ValueError as exc:
        raise RuntimeFailure(f"bad record CSV: {exc}", "--csv") from None
    predicted = [nids.classify(model, r).label for r in records]
    if args.out:
        rows = ["row,prediction" + (",label" if labels is not None else "")]
        for i, p in enumerate(predicted):
            rows.append(f"{i},{p}" + (f",{labels[i]}" if labels is not None else ""))
        _write(args.out, "\n".join(rows) + "\n")
    result = {"rows": len(records), "predicted_malicious": sum(predicted)}
    if labels is not None:
        report = nids.classification_report(labels, predicted)
        result["accuracy"] = report.pop("accuracy")
        result["classes"] = {str(c): v for c, v in report.items()}
    _summary(result)


def cmd_export(args, cfg):
    try:
        records, _ = export.read_csv(_read_text(args.csv, "--csv"))
    except ValueError as exc:
        raise RuntimeFailure(f"bad record CSV: {exc}", "--csv") from None
    if not args.out and not args.send:
        raise UsageError("export needs --out and/or --send", "--out")
    datagrams = export.encode_v9(records, cfg.feature_mask, cfg.template_id, _exporter(cfg))
    if args.out:
        export.write_datagrams(args.out, datagrams)
    if args.send:
        export.send_datagrams(datagrams, *cfg.collector_address)
    _summary({"records": len(records), "datagrams": len(datagrams)})


def cmd_collect(args, cfg):
    try:
        collector = export.Collector(*cfg.collector_address)
    except OSError as exc:
        raise RuntimeFailure(f"cannot listen: {exc}", "--collector") from None
    with collector:
        host, port = collector.address
        print(json.dumps({"listening": f"{host}:{port}"}), file=sys.stderr, flush=True)
        decoded = collector.receive(args.count, args.timeout)
    records = [export.decoded_to_record(r) for r in decoded]
    _write(args.out, export.to_csv(records, cfg.feature_mask))
    for exc in collector.errors:
        print(json.dumps({"warning": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def cmd_bench(args, cfg):
    model = _load_model(args.model) if args.model else None
    if args.scenario == "nids" and model is None:
        raise UsageError("the nids scenario needs --model", "--model")
    if model is not None:
        _check_mask(model, cfg)
    try:
        stream = bench.generate_traffic(_profile(cfg, args.pcap))
    except bench.PcapNotFound as exc:
        raise RuntimeFailure(str(exc), "--pcap") from None
    except bench.EmptyProfile as exc:
        raise UsageError(str(exc), "--flow-count") from None
    kw = {"stream": stream, "index_bits": cfg.index_bits}
    timed = dict(kw, workers=cfg.workers)
    reports = []
    summary = {"backend": BACKEND, "packets": len(stream)}
    if args.scenario == "all":
        scenarios = bench.SCENARIOS if model is not None else bench.SCENARIOS[:2]
    else:
        scenarios = (args.scenario,)
    r, summary["scenarios"] = bench.compare_scenarios(None, model, cfg.feature_mask,
                                                      cfg.repetitions, scenarios=scenarios, **timed)
    reports += r
    if args.sweep:
        masks = [m.strip() for m in args.sweep.split(";" if ";" in args.sweep else ",")]
        try:
            masks = [parse_mask(m) for m in masks]
        except ValueError as exc:
            raise UsageError(str(exc), "--sweep") from None
        scenario = "nids" if args.scenario == "nids" else "netflow"
        r, summary["sweep"] = bench.feature_sweep(None, masks, cfg.repetitions, scenario=scenario,
                                                  model=model, **timed)
        reports += r
    if args.loads:
        try:
            loads = [float(x) for x in args.loads.split(",")]
        except ValueError:
            raise UsageError(f"bad --loads {args.loads!r}", "--loads") from None
        scenario = "netflow" if args.scenario == "all" else args.scenario
        r = bench.offered_load_sweep(None, loads, scenario, model, cfg.feature_mask, **kw)
        summary["offered_load"] = [s for rep in r for s in rep.series]
        reports += r
    if args.out:
        bench.emit_report(reports, args.out)
    _summary(summary)


def cmd_gen(args, cfg):
    try:
        stream = bench.generate_traffic(_profile(cfg))
    except bench.EmptyProfile as exc:
        raise UsageError(str(exc), "--flow-count") from None
    write_pcap(args.out, stream)
    _summary({"frames": len(stream), "bytes": stream.total_wire_bytes})


def _summary(obj):
    print(json.dumps(obj, indent=1, sort_keys=True, default=str))


COMMANDS = {"run": cmd_run, "compile": cmd_compile, "classify": cmd_classify,
            "export": cmd_export, "collect": cmd_collect, "bench": cmd_bench, "gen": cmd_gen}


def _fail(kind, exc, code):
    err = {"error": kind, "message": str(exc)}
    if getattr(exc, "flag", None):
        err["flag"] = exc.flag
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("no command given")
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        return _fail("usage", exc, 1)
    except RuntimeFailure as exc:
        return _fail("runtime", exc, 2)
    except (OSError, ValueError) as exc:
        return _fail("runtime", exc, 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
