"""Flow-table telemetry with an in-line decision-tree NIDS.

Packets are parsed, folded into a hashed register table of NetFlow features,
optionally classified per update by an integer decision tree, and exported as
CSV or NetFlow v9. Trees also compile to P4-16 source.
"""

from ._jit import BACKEND
from .catalog import FEATURES, PRESETS, FeatureMask, parse_mask
from .flowtable import FlowRecord, FlowTable, SlotVerdict, expire_flows, flow_id, update_flow
from .nids import DecisionTreeModel, classify, compile_to_p4, load_model
from .packet import CanonicalKey, FiveTuple, ParsedPacket, canonicalize, parse_packet

__all__ = [
    "BACKEND", "FEATURES", "PRESETS", "FeatureMask", "parse_mask", "FlowRecord", "FlowTable",
    "SlotVerdict", "expire_flows", "flow_id", "update_flow", "DecisionTreeModel", "classify",
    "compile_to_p4", "load_model", "CanonicalKey", "FiveTuple", "ParsedPacket", "canonicalize",
    "parse_packet",
]
