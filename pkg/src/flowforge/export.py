"""Flow export: CSV files and NetFlow v9 datagrams, plus the collector side.

v9 field ids. Standard ids are used where NetFlow v9 defines one; the rest
take ids from 40001 upward:

    ==========================  =====  =====
    field                       id     bytes
    ==========================  =====  =====
    IN_BYTES                    1      8
    IN_PKTS                     2      4
    PROTOCOL                    4      1
    TCP_FLAGS                   6      1
    L4_SRC_PORT                 7      2
    IPV4_SRC_ADDR               8      4
    L4_DST_PORT                 11     2
    IPV4_DST_ADDR               12     4
    OUT_BYTES                   23     8
    OUT_PKTS                    24     4
    MIN_IP_PKT_LEN              25     2
    MAX_IP_PKT_LEN              26     2
    MIN_TTL                     52     1
    MAX_TTL                     53     1
    FLOW_DURATION_MS            40001  4
    TCP_WIN_MAX_IN              40002  2
    TCP_WIN_MAX_OUT             40003  2
    NUM_PKTS_UP_TO_128_BYTES    40004  4
    NUM_PKTS_128_TO_256_BYTES   40005  4
    NUM_PKTS_256_TO_512_BYTES   40006  4
    NUM_PKTS_512_TO_1024_BYTES  40007  4
    NUM_PKTS_1024_TO_1514_BYTES 40008  4
    ==========================  =====  =====
"""

import csv
import io
import socket
import struct
from dataclasses import dataclass, field

from .catalog import FEATURES, WIDTHS, parse_mask
from .flowtable import FlowRecord
from .packet import int_to_ip, ip_to_int

V9_FIELD_IDS = {
    "IN_BYTES": 1, "IN_PKTS": 2, "PROTOCOL": 4, "TCP_FLAGS": 6, "L4_SRC_PORT": 7,
    "IPV4_SRC_ADDR": 8, "L4_DST_PORT": 11, "IPV4_DST_ADDR": 12, "OUT_BYTES": 23,
    "OUT_PKTS": 24, "MIN_IP_PKT_LEN": 25, "MAX_IP_PKT_LEN": 26, "MIN_TTL": 52,
    "MAX_TTL": 53, "FLOW_DURATION_MS": 40001, "TCP_WIN_MAX_IN": 40002,
    "TCP_WIN_MAX_OUT": 40003, "NUM_PKTS_UP_TO_128_BYTES": 40004,
    "NUM_PKTS_128_TO_256_BYTES": 40005, "NUM_PKTS_256_TO_512_BYTES": 40006,
    "NUM_PKTS_512_TO_1024_BYTES": 40007, "NUM_PKTS_1024_TO_1514_BYTES": 40008,
}
V9_FIELD_NAMES = {v: k for k, v in V9_FIELD_IDS.items()}

MAX_DATAGRAM = 1464  # 1500 MTU - IPv4 - UDP
HEADER = struct.Struct(">HHIIII")
FLOWSET_HDR = struct.Struct(">HH")
TEMPLATE_REFRESH_DATAGRAMS = 20
TEMPLATE_REFRESH_S = 600
IP_FIELDS = ("IPV4_SRC_ADDR", "IPV4_DST_ADDR")
LABEL_COLUMN = "Label"
FLAG_COLUMN = "MALICIOUS_FLAG"

_STRUCT_CODE = {8: "B", 16: "H", 32: "I", 64: "Q"}


class V9Error(ValueError):
    pass


class BadVersion(V9Error):
    pass


class TruncatedFlowSet(V9Error):
    pass


class NeedTemplate(V9Error):
    pass


class RecordTooLarge(V9Error):
    pass


def _sort_key(r):
    return (getattr(r, "first_ts", 0), getattr(r, "slot", 0))


def to_csv(records, feature_mask="22", with_flag=False):
    """Header of enabled fields (catalog order), then one row per record."""
    mask = parse_mask(feature_mask)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(list(mask.fields) + ([FLAG_COLUMN] if with_flag else []))
    for r in sorted(records, key=_sort_key):
        row = [int_to_ip(r[f]) if f in IP_FIELDS else str(int(r[f])) for f in mask.fields]
        if with_flag:
            row.append(str(int(r.malicious_flag)))
        w.writerow(row)
    return out.getvalue()


def read_csv(text):
    """Parse flow-record CSV. Returns ``(records, labels)``; labels is None
    unless a ``Label`` column is present. Absent catalog fields read 0."""
    reader = csv.DictReader(io.StringIO(text))
    unknown = [c for c in reader.fieldnames or []
               if c not in WIDTHS and c not in (LABEL_COLUMN, FLAG_COLUMN)]
    if unknown:
        raise ValueError(f"unknown CSV columns: {', '.join(unknown)}")
    has_label = LABEL_COLUMN in (reader.fieldnames or [])
    records, labels = [], []
    for row in reader:
        feats = {}
        for f in FEATURES:
            v = row.get(f, "0")
            feats[f] = ip_to_int(v) if (f in IP_FIELDS and "." in v) else int(v)
        records.append(FlowRecord(features=feats, malicious_flag=int(row.get(FLAG_COLUMN, 0) or 0)))
        if has_label:
            labels.append(int(row[LABEL_COLUMN]))
    return records, (labels if has_label else None)


def record_size(feature_mask):
    return sum(WIDTHS[f] // 8 for f in parse_mask(feature_mask).fields)


def _pad4(n):
    return (n + 3) & ~3


@dataclass
class ExporterState:
    """Sequence and template-refresh bookkeeping owned by one exporter."""

    source_id: int = 0
    sequence: int = 0
    boot_micros: int = 0
    refresh_datagrams: int = TEMPLATE_REFRESH_DATAGRAMS
    refresh_s: int = TEMPLATE_REFRESH_S
    since_template: int = None
    last_template_micros: int = 0

    def template_due(self, now_micros):
        return (self.since_template is None
                or self.since_template >= self.refresh_datagrams
                or now_micros - self.last_template_micros >= self.refresh_s * 1_000_000)


def template_flowset(template_id, feature_mask):
    mask = parse_mask(feature_mask)
    body = struct.pack(">HH", template_id, len(mask.fields))
    body += b"".join(struct.pack(">HH", V9_FIELD_IDS[f], WIDTHS[f] // 8) for f in mask.fields)
    return FLOWSET_HDR.pack(0, 4 + len(body)) + body


def encode_v9(records, feature_mask="22", template_id=256, state=None, now_micros=None):
    """Serialize records into v9 datagrams of at most MAX_DATAGRAM bytes.

    The template FlowSet leads the first datagram whenever the state says a
    refresh is due (always for a fresh state). ``now_micros`` defaults to the
    newest ``last_ts`` among the records so output depends on inputs only.
    """
    if template_id < 256:
        raise ValueError("data template ids start at 256")
    mask = parse_mask(feature_mask)
    state = state if state is not None else ExporterState()
    records = list(records)
    if now_micros is None:
        now_micros = max((getattr(r, "last_ts", 0) for r in records), default=state.boot_micros)
    rec_struct = struct.Struct(">" + "".join(_STRUCT_CODE[WIDTHS[f]] for f in mask.fields))
    rec_len = rec_struct.size
    if HEADER.size + FLOWSET_HDR.size + _pad4(rec_len) > MAX_DATAGRAM:
        raise RecordTooLarge(f"a {rec_len}-byte record cannot fit one datagram")
    tmpl = template_flowset(template_id, mask)
    unix_secs = (now_micros // 1_000_000) & 0xFFFFFFFF
    uptime = ((now_micros - state.boot_micros) // 1000) & 0xFFFFFFFF

    datagrams = []
    i = 0
    while True:
        parts = []
        count = 0
        with_template = state.template_due(now_micros)
        if with_template:
            parts.append(tmpl)
            count += 1
        elif i >= len(records):
            break
        room = MAX_DATAGRAM - HEADER.size - sum(len(p) for p in parts) - FLOWSET_HDR.size
        k = min(len(records) - i, max(0, room // rec_len))
        while k and _pad4(k * rec_len) > room:
            k -= 1
        if k:
            data = b"".join(rec_struct.pack(*(int(r[f]) for f in mask.fields))
                            for r in records[i:i + k])
            data += b"\x00" * (_pad4(len(data)) - len(data))
            parts.append(FLOWSET_HDR.pack(template_id, 4 + len(data)) + data)
            count += k
            i += k
        datagrams.append(HEADER.pack(9, count, uptime, unix_secs, state.sequence,
                                     state.source_id) + b"".join(parts))
        state.sequence = (state.sequence + 1) & 0xFFFFFFFF
        if with_template:
            state.since_template = 0
            state.last_template_micros = now_micros
        state.since_template += 1
        if i >= len(records):
            break
    return datagrams


@dataclass
class TemplateCache:
    """Collector-side templates keyed by (source_id, template_id).

    A datagram whose data precedes its template is parked and retried once,
    right after the next datagram that carries a template.
    """

    templates: dict = field(default_factory=dict)
    pending: list = field(default_factory=list)
    last_header: tuple = None


def _parse_flowsets(dg):
    if len(dg) < HEADER.size:
        raise TruncatedFlowSet(f"datagram of {len(dg)} bytes is shorter than the v9 header")
    header = HEADER.unpack_from(dg, 0)
    if header[0] != 9:
        raise BadVersion(f"version {header[0]}, expected 9")
    flowsets = []
    pos = HEADER.size
    while pos < len(dg):
        if len(dg) - pos < FLOWSET_HDR.size:
            raise TruncatedFlowSet(f"partial FlowSet header at byte {pos}")
        fid, flen = FLOWSET_HDR.unpack_from(dg, pos)
        if flen < FLOWSET_HDR.size or pos + flen > len(dg):
            raise TruncatedFlowSet(f"FlowSet {fid} at byte {pos} declares {flen} bytes, "
                                   f"{len(dg) - pos} available")
        flowsets.append((fid, dg[pos + 4:pos + flen]))
        pos += flen
    return header, flowsets


def _parse_templates(body):
    out = []
    pos = 0
    while len(body) - pos >= 4:
        tid, nfields = struct.unpack_from(">HH", body, pos)
        if tid == 0 and nfields == 0:  # padding
            break
        pos += 4
        if len(body) - pos < 4 * nfields:
            raise TruncatedFlowSet(f"template {tid} declares {nfields} fields past FlowSet end")
        fields = [struct.unpack_from(">HH", body, pos + 4 * j) for j in range(nfields)]
        pos += 4 * nfields
        out.append((tid, fields))
    return out


def _decode(dg, cache, park):
    header, flowsets = _parse_flowsets(dg)
    source_id = header[5]
    n_templates = 0
    checkable = True
    for fid, body in flowsets:
        if fid == 0:
            for tid, fields in _parse_templates(body):
                cache.templates[(source_id, tid)] = fields
                n_templates += 1
        elif fid < 256:
            checkable = False  # options templates etc. are skipped
    missing = sorted({fid for fid, _ in flowsets if fid >= 256 and (source_id, fid) not in cache.templates})
    if missing:
        if park:
            cache.pending.append(dg)
        raise NeedTemplate(f"no template {missing} for source {source_id}")

    data = []
    for fid, body in flowsets:
        if fid < 256:
            continue
        fields = cache.templates[(source_id, fid)]
        rec_len = sum(length for _, length in fields)
        if rec_len:
            data.append([body, fields, rec_len, len(body) // rec_len])
    # Records shorter than 4 bytes make FlowSet padding look like extra
    # records. Trust the header count for how many of those are real.
    excess = sum(d[3] for d in data) + n_templates - header[1]
    for d in reversed(data):
        if excess <= 0 or not checkable:
            break
        pad_only = min(excess, d[3] - -(-(len(d[0]) - 3) // d[2]))
        if pad_only > 0 and not any(d[0][(d[3] - pad_only) * d[2]:]):
            d[3] -= pad_only
            excess -= pad_only

    records = []
    for body, fields, rec_len, n in data:
        for start in range(0, n * rec_len, rec_len):
            rec = {}
            pos = start
            for ftype, length in fields:
                rec[V9_FIELD_NAMES.get(ftype, f"FIELD_{ftype}")] = int.from_bytes(
                    body[pos:pos + length], "big")
                pos += length
            records.append(rec)
    if checkable and n_templates + len(records) != header[1]:
        raise TruncatedFlowSet(f"header count {header[1]} but {n_templates} templates "
                               f"and {len(records)} data records present")
    cache.last_header = header
    return records, n_templates


def decode_v9(datagram, cache):
    """Decode one datagram into field-name -> int dicts.

    Raises NeedTemplate (after parking the datagram), BadVersion or
    TruncatedFlowSet. Parked datagrams that become decodable are appended to
    the result of the datagram that delivered their template.
    """
    records, n_templates = _decode(bytes(datagram), cache, park=True)
    if n_templates and cache.pending:
        parked, cache.pending = cache.pending, []
        for dg in parked:
            try:
                records.extend(_decode(dg, cache, park=False)[0])
            except V9Error:
                pass
    return records


def decoded_to_record(rec):
    return FlowRecord(features={f: int(rec.get(f, 0)) for f in FEATURES})


def write_datagrams(path, datagrams):
    """Length-prefixed (u16 big-endian) datagram file."""
    with open(path, "wb") as fh:
        for dg in datagrams:
            fh.write(struct.pack(">H", len(dg)) + dg)


def read_datagrams(path):
    with open(path, "rb") as fh:
        data = fh.read()
    out, pos = [], 0
    while pos + 2 <= len(data):
        (n,) = struct.unpack_from(">H", data, pos)
        out.append(data[pos + 2:pos + 2 + n])
        pos += 2 + n
    return out


def send_datagrams(datagrams, host, port):
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        for dg in datagrams:
            s.sendto(dg, (host, port))


class Collector:
    """Single-threaded UDP listener decoding v9 datagrams into records."""

    def __init__(self, host="127.0.0.1", port=2055):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.cache = TemplateCache()
        self.errors = []

    @property
    def address(self):
        return self.sock.getsockname()

    def receive(self, max_datagrams=None, timeout=1.0):
        """Collect until ``max_datagrams`` arrive or the socket idles for ``timeout`` s."""
        self.sock.settimeout(timeout)
        records = []
        seen = 0
        while max_datagrams is None or seen < max_datagrams:
            try:
                dg, _ = self.sock.recvfrom(65535)
            except socket.timeout:
                break
            seen += 1
            try:
                records.extend(decode_v9(dg, self.cache))
            except V9Error as exc:
                self.errors.append(exc)
        return records

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
