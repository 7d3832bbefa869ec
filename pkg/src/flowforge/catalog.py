"""The 22-field NetFlow feature catalog, feature-mask presets and register layout.

Every feature is its own register, indexed by flow slot. Registers are grouped
into four banks by bit width (64/32/16/8); a bank is a ``(slots, registers)``
array, so a kernel addresses any feature as ``bank[slot, row]`` and one flow's
fields sit in a handful of cache lines.
"""

from dataclasses import dataclass

import numpy as np

# (name, bit width) in catalog order.
CATALOG = (
    ("IPV4_SRC_ADDR", 32),
    ("IPV4_DST_ADDR", 32),
    ("L4_SRC_PORT", 16),
    ("L4_DST_PORT", 16),
    ("PROTOCOL", 8),
    ("IN_PKTS", 32),
    ("OUT_PKTS", 32),
    ("IN_BYTES", 64),
    ("OUT_BYTES", 64),
    ("FLOW_DURATION_MS", 32),
    ("TCP_FLAGS", 8),
    ("MIN_TTL", 8),
    ("MAX_TTL", 8),
    ("MIN_IP_PKT_LEN", 16),
    ("MAX_IP_PKT_LEN", 16),
    ("TCP_WIN_MAX_IN", 16),
    ("TCP_WIN_MAX_OUT", 16),
    ("NUM_PKTS_UP_TO_128_BYTES", 32),
    ("NUM_PKTS_128_TO_256_BYTES", 32),
    ("NUM_PKTS_256_TO_512_BYTES", 32),
    ("NUM_PKTS_512_TO_1024_BYTES", 32),
    ("NUM_PKTS_1024_TO_1514_BYTES", 32),
)

FEATURES = tuple(name for name, _ in CATALOG)
WIDTHS = dict(CATALOG)
INDEX = {name: i for i, name in enumerate(FEATURES)}
N_FEATURES = len(FEATURES)

(F_SRC_ADDR, F_DST_ADDR, F_SRC_PORT, F_DST_PORT, F_PROTOCOL, F_IN_PKTS,
 F_OUT_PKTS, F_IN_BYTES, F_OUT_BYTES, F_DURATION, F_TCP_FLAGS, F_MIN_TTL,
 F_MAX_TTL, F_MIN_LEN, F_MAX_LEN, F_WIN_IN, F_WIN_OUT, F_B128, F_B256,
 F_B512, F_B1024, F_B1514) = range(N_FEATURES)


def max_value(name):
    return (1 << WIDTHS[name]) - 1


# Register banks. Bookkeeping rows follow the feature rows of each bank.
BANK64, BANK32, BANK16, BANK8 = range(4)
_BANK_BY_WIDTH = {64: BANK64, 32: BANK32, 16: BANK16, 8: BANK8}
BANK_DTYPES = (np.uint64, np.uint32, np.uint16, np.uint8)

_rows = [[], [], [], []]
for _name, _width in CATALOG:
    _rows[_BANK_BY_WIDTH[_width]].append(_name)

_BOOKKEEPING = (
    (BANK64, "FIRST_TS"), (BANK64, "LAST_TS"),
    (BANK32, "KEY_A_IP"), (BANK32, "KEY_B_IP"),
    (BANK16, "KEY_A_PORT"), (BANK16, "KEY_B_PORT"),
    (BANK8, "KEY_PROTO"), (BANK8, "OCCUPIED"), (BANK8, "MALICIOUS"),
    (BANK8, "INIT_IS_A"),
)
for _bank, _name in _BOOKKEEPING:
    _rows[_bank].append(_name)

BANK_ROWS = tuple(tuple(r) for r in _rows)
ROW = {name: bank_rows.index(name) for bank_rows in BANK_ROWS for name in bank_rows}
BANK_OF = {name: b for b, bank_rows in enumerate(BANK_ROWS) for name in bank_rows}

FEATURE_BANK = np.array([BANK_OF[f] for f in FEATURES], dtype=np.int64)
FEATURE_ROW = np.array([ROW[f] for f in FEATURES], dtype=np.int64)

# Row constants for the kernels; numba freezes module globals at compile time.
R64_IN_BYTES, R64_OUT_BYTES = ROW["IN_BYTES"], ROW["OUT_BYTES"]
R64_FIRST_TS, R64_LAST_TS = ROW["FIRST_TS"], ROW["LAST_TS"]
R32_SRC_ADDR, R32_DST_ADDR = ROW["IPV4_SRC_ADDR"], ROW["IPV4_DST_ADDR"]
R32_IN_PKTS, R32_OUT_PKTS = ROW["IN_PKTS"], ROW["OUT_PKTS"]
R32_DURATION = ROW["FLOW_DURATION_MS"]
R32_B128 = ROW["NUM_PKTS_UP_TO_128_BYTES"]  # five consecutive bucket rows
R32_KEY_A_IP, R32_KEY_B_IP = ROW["KEY_A_IP"], ROW["KEY_B_IP"]
R16_SRC_PORT, R16_DST_PORT = ROW["L4_SRC_PORT"], ROW["L4_DST_PORT"]
R16_MIN_LEN, R16_MAX_LEN = ROW["MIN_IP_PKT_LEN"], ROW["MAX_IP_PKT_LEN"]
R16_WIN_IN, R16_WIN_OUT = ROW["TCP_WIN_MAX_IN"], ROW["TCP_WIN_MAX_OUT"]
R16_KEY_A_PORT, R16_KEY_B_PORT = ROW["KEY_A_PORT"], ROW["KEY_B_PORT"]
R8_PROTOCOL, R8_TCP_FLAGS = ROW["PROTOCOL"], ROW["TCP_FLAGS"]
R8_MIN_TTL, R8_MAX_TTL = ROW["MIN_TTL"], ROW["MAX_TTL"]
R8_KEY_PROTO, R8_OCCUPIED = ROW["KEY_PROTO"], ROW["OCCUPIED"]
R8_MALICIOUS, R8_INIT_IS_A = ROW["MALICIOUS"], ROW["INIT_IS_A"]
assert [ROW[f] for f in FEATURES[F_B128:F_B1514 + 1]] == list(range(R32_B128, R32_B128 + 5))

# Features visible in the hand-written tree: the smallest preset.
PRESETS = {
    "7": ("L4_SRC_PORT", "L4_DST_PORT", "IN_PKTS", "MIN_TTL", "MIN_IP_PKT_LEN",
          "TCP_WIN_MAX_OUT", "NUM_PKTS_1024_TO_1514_BYTES"),
    "12": ("IPV4_SRC_ADDR", "IPV4_DST_ADDR", "L4_SRC_PORT", "L4_DST_PORT",
           "PROTOCOL", "IN_PKTS", "OUT_PKTS", "IN_BYTES", "MIN_TTL",
           "MIN_IP_PKT_LEN", "TCP_WIN_MAX_OUT", "NUM_PKTS_1024_TO_1514_BYTES"),
    "22": FEATURES,
}


class UnknownFeature(ValueError):
    pass


@dataclass(frozen=True)
class FeatureMask:
    """An ordered subset of the catalog that is maintained and exported."""

    name: str
    fields: tuple

    @property
    def flags(self):
        out = np.zeros(N_FEATURES, dtype=np.uint8)
        for f in self.fields:
            out[INDEX[f]] = 1
        return out

    def __contains__(self, field):
        return field in self.fields

    def __len__(self):
        return len(self.fields)


def parse_mask(spec):
    """Build a mask from a preset name ("7", "12", "22"), a field list, or a mask.

    Explicit lists are re-ordered into catalog order.
    """
    if isinstance(spec, FeatureMask):
        return spec
    if isinstance(spec, int):
        spec = str(spec)
    if isinstance(spec, str):
        spec = spec.strip()
        if spec in PRESETS:
            return FeatureMask(spec, tuple(PRESETS[spec]))
        names = [s.strip() for s in spec.replace("|", ",").split(",") if s.strip()]
    else:
        names = list(spec)
    for n in names:
        if n not in INDEX:
            raise UnknownFeature(f"unknown feature {n!r}")
    fields = tuple(f for f in FEATURES if f in set(names))
    if not fields:
        raise ValueError("feature mask is empty")
    for preset, preset_fields in PRESETS.items():
        if fields == tuple(f for f in FEATURES if f in preset_fields):
            return FeatureMask(preset, fields)
    return FeatureMask("|".join(fields), fields)


FULL_MASK = parse_mask("22")
