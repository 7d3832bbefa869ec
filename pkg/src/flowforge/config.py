"""Run configuration: defaults, a flat ``key = value`` file, and flag overrides.

Precedence is flags > file > defaults. Unknown keys are an error wherever
they appear.
"""

import dataclasses
from dataclasses import dataclass, field, fields

from .catalog import parse_mask


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def _key(default, help, **extra):
    return field(default=default, metadata={"help": help, **extra})


def _hostport(text):
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected host:port, got {text!r}")
    port = int(port)
    if not 0 <= port <= 65535:
        raise ValueError(f"port {port} out of range")
    return f"{host}:{port}"


def _size(text):
    lo, sep, hi = str(text).partition("-")
    lo = int(lo)
    hi = int(hi) if sep else lo
    if not 64 <= lo <= hi <= 1514:
        raise ValueError(f"packet size must be within 64..1514, got {text!r}")
    return f"{lo}-{hi}" if sep else str(lo)


@dataclass
class RunConfig:
    # flow table
    index_bits: int = _key(20, "flow-table size as a power of two (8..24)", lo=8, hi=24)
    idle_timeout_s: float = _key(30.0, "expire a flow after this many idle seconds", lo=0)
    active_timeout_s: float = _key(120.0, "expire a flow this long after its first packet", lo=0)
    feature_mask: str = _key("22", 'preset "7", "12", "22" or a comma list of fields')
    # export
    template_id: int = _key(256, "NetFlow v9 data template id", lo=256, hi=65535)
    source_id: int = _key(0, "NetFlow v9 source id", lo=0, hi=0xFFFFFFFF)
    collector: str = _key("127.0.0.1:2055", "collector address (host:port)")
    template_refresh_datagrams: int = _key(20, "re-send the template every N datagrams", lo=1)
    template_refresh_s: float = _key(600.0, "re-send the template every N seconds", lo=0)
    # bench / gen
    seed: int = _key(7, "traffic generator seed", lo=0)
    flow_count: int = _key(1000, "synthetic flows", lo=0)
    packets_per_flow: int = _key(10, "synthetic packets per flow", lo=0)
    packet_size_bytes: str = _key("64", "frame size, or lo-hi range (64..1514)")
    repetitions: int = _key(5, "benchmark repetitions (median reported)", lo=1)
    workers: int = _key(1, "flow-table worker threads (sharded by flow id)", lo=1)

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, _coerce(f, getattr(self, f.name)))

    @property
    def collector_address(self):
        host, _, port = self.collector.rpartition(":")
        return host, int(port)

    @property
    def packet_size(self):
        lo, sep, hi = self.packet_size_bytes.partition("-")
        return (int(lo), int(hi)) if sep else int(lo)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


KEYS = {f.name: f for f in fields(RunConfig)}


def _coerce(f, value):
    try:
        if f.type in ("int", int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"{value} is not an integer")
            value = int(value)
        elif f.type in ("float", float):
            value = float(value)
        else:
            value = str(value).strip()
        lo, hi = f.metadata.get("lo"), f.metadata.get("hi")
        if lo is not None and value < lo or hi is not None and value > hi:
            raise ValueError(f"{value} is outside [{lo}, {'inf' if hi is None else hi}]")
        if f.name == "feature_mask":
            parse_mask(value)
        elif f.name == "collector":
            value = _hostport(value)
        elif f.name == "packet_size_bytes":
            value = _size(value)
    except ValueError as exc:
        raise ConfigError(f"{f.name}: {exc}", f.name) from None
    return value


def read_config_file(path):
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key = value", key)
            if key not in KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}", key)
            values[key] = value.strip()
    return values


def build_config(file_values=None, flag_values=None):
    """Merge sources; ``None`` entries in ``flag_values`` mean "not given"."""
    merged = {}
    for source in (file_values or {}, flag_values or {}):
        for key, value in source.items():
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}", key)
            if value is not None:
                merged[key] = value
    return RunConfig(**merged)
