"""Integer decision-tree classifier over flow records, and its P4-16 emitter.

Model file (``dtm-1``)::

    {"format": "dtm-1", "root": 0,
     "nodes":  [{"id": 0, "feature": "TCP_WIN_MAX_OUT", "threshold": 26865,
                 "left": 1, "right": 2}, ...],
     "leaves": [{"id": 1, "label": 1}, ...]}

A node sends a record left iff ``record[feature] <= threshold``. Thresholds
are unsigned integers that fit the feature's width; a producer holding float
thresholds must floor them first (:func:`quantize_threshold`).
"""

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

from ._jit import njit
from .catalog import BANK_OF, FEATURES, INDEX, ROW, WIDTHS, parse_mask
from .flowtable import FlowRecord

FORMAT = "dtm-1"
MAX_DEPTH = 32


class ModelError(ValueError):
    def __init__(self, message, node_id=None):
        super().__init__(message if node_id is None else f"node {node_id}: {message}")
        self.node_id = node_id


class UnknownFeature(ModelError):
    pass


class ThresholdOverflow(ModelError):
    pass


class MalformedTree(ModelError):
    pass


class FeatureNotEnabled(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    feature: str
    threshold: int
    left: int
    right: int


@dataclass(frozen=True)
class Leaf:
    id: int
    label: int


@dataclass(frozen=True)
class Verdict:
    label: int
    leaf_id: int
    path: tuple = ()  # (feature, threshold, went_left) per visited node


@dataclass(frozen=True)
class DecisionTreeModel:
    nodes: dict
    root: int
    depth: int = field(default=0)

    @property
    def features(self):
        """Distinct features used, in catalog order."""
        used = {n.feature for n in self.nodes.values() if isinstance(n, Node)}
        return tuple(f for f in FEATURES if f in used)

    @cached_property
    def walker(self):
        """The tree compiled to ``walk(r64, r32, r16, r8, slot) -> label``.

        Each node becomes a literal register read and comparison, so the
        kernels pay no per-node table lookups. See :func:`walker_source`.
        """
        namespace = {}
        exec(walker_source(self), namespace)
        return njit(cache=False)(namespace["walk"])


def quantize_threshold(x):
    """Integer threshold equivalent to ``value <= x`` for unsigned integer values."""
    q = math.floor(x)
    if q < 0:
        raise ValueError(f"threshold {x} is below every unsigned value; prune the split instead")
    return q


def _as_int(v, what, nid):
    if isinstance(v, bool) or not isinstance(v, int):
        raise MalformedTree(f"{what} must be an integer, got {v!r}", nid)
    return v


def load_model(text):
    """Parse and validate a dtm-1 model. A bare ``{"label": L}`` is a single leaf."""
    try:
        doc = json.loads(text) if isinstance(text, (str, bytes)) else text
    except json.JSONDecodeError as exc:
        raise MalformedTree(f"not JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedTree("model must be a JSON object")
    if "label" in doc and "nodes" not in doc:
        doc = {"format": FORMAT, "root": 0, "nodes": [], "leaves": [{"id": 0, "label": doc["label"]}]}
    if doc.get("format") != FORMAT:
        raise MalformedTree(f"format must be {FORMAT!r}, got {doc.get('format')!r}")

    nodes = {}
    for raw in doc.get("nodes", []):
        nid = _as_int(raw.get("id"), "id", None)
        if nid in nodes:
            raise MalformedTree("duplicate id", nid)
        feat = raw.get("feature")
        if feat not in INDEX:
            raise UnknownFeature(f"unknown feature {feat!r}", nid)
        thr = raw.get("threshold")
        if isinstance(thr, float):
            raise MalformedTree(f"threshold {thr} is not an integer; quantize with floor", nid)
        thr = _as_int(thr, "threshold", nid)
        if not 0 <= thr < (1 << WIDTHS[feat]):
            raise ThresholdOverflow(f"threshold {thr} does not fit {feat} ({WIDTHS[feat]} bits)", nid)
        nodes[nid] = Node(nid, feat, thr, _as_int(raw.get("left"), "left", nid),
                          _as_int(raw.get("right"), "right", nid))
    for raw in doc.get("leaves", []):
        nid = _as_int(raw.get("id"), "id", None)
        if nid in nodes:
            raise MalformedTree("duplicate id", nid)
        label = raw.get("label")
        if label not in (0, 1) or isinstance(label, bool):
            raise MalformedTree(f"leaf label must be 0 or 1, got {label!r}", nid)
        nodes[nid] = Leaf(nid, label)

    root = _as_int(doc.get("root"), "root", None)
    if root not in nodes:
        raise MalformedTree("root does not exist", root)

    parents = {}
    for n in nodes.values():
        if isinstance(n, Node):
            for child in (n.left, n.right):
                if child not in nodes:
                    raise MalformedTree(f"dangling child {child}", n.id)
                if child == root or child in parents:
                    raise MalformedTree(f"child {child} has more than one parent (or a cycle)", n.id)
                parents[child] = n.id

    depth = 0
    seen = set()
    stack = [(root, 0)]
    while stack:
        nid, d = stack.pop()
        seen.add(nid)
        if d > MAX_DEPTH:
            raise MalformedTree(f"depth exceeds {MAX_DEPTH}", nid)
        depth = max(depth, d)
        n = nodes[nid]
        if isinstance(n, Node):
            stack.append((n.left, d + 1))
            stack.append((n.right, d + 1))
    unreachable = sorted(set(nodes) - seen)
    if unreachable:
        raise MalformedTree("unreachable from root (cycle or orphan)", unreachable[0])
    return DecisionTreeModel(nodes, root, depth)


def dump_model(model):
    nodes = [{"id": n.id, "feature": n.feature, "threshold": n.threshold,
              "left": n.left, "right": n.right}
             for n in sorted(model.nodes.values(), key=lambda n: n.id) if isinstance(n, Node)]
    leaves = [{"id": n.id, "label": n.label}
              for n in sorted(model.nodes.values(), key=lambda n: n.id) if isinstance(n, Leaf)]
    return json.dumps({"format": FORMAT, "root": model.root, "nodes": nodes, "leaves": leaves},
                      indent=1)


def classify(model, record):
    """Walk the tree for one record; also sets ``record.malicious_flag``."""
    path = []
    node = model.nodes[model.root]
    while isinstance(node, Node):
        went_left = int(record[node.feature]) <= node.threshold
        path.append((node.feature, node.threshold, went_left))
        node = model.nodes[node.left if went_left else node.right]
    if isinstance(record, FlowRecord):
        record.malicious_flag = node.label
    return Verdict(node.label, node.id, tuple(path))


def model_stats(model):
    node_count = len(model.nodes)
    distinct = len(model.features)
    return {"depth": model.depth, "node_count": node_count,
            "distinct_features": distinct, "register_reads": distinct}


# Register names for the fields the hand-written tree reads; the rest follow
# the <field>_register pattern.
REGISTER_NAMES = {
    "IN_PKTS": "received_packet_counter",
    "L4_DST_PORT": "dstport_register",
    "L4_SRC_PORT": "srcport_register",
}
FLAG_REGISTER = "malicious_flag_register"
INDENT = "    "


def register_name(feature):
    return REGISTER_NAMES.get(feature, f"{feature.lower()}_register")


def compile_to_p4(model, feature_mask="22"):
    """Emit the tree as P4-16 register reads plus nested if/else blocks."""
    mask = parse_mask(feature_mask)
    for f in model.features:
        if f not in mask:
            raise FeatureNotEnabled(f"feature {f} is used by the model but not in mask {mask.name}")
    lines = [f"bit<{WIDTHS[f]}> {f};" for f in model.features]
    lines += [f"{register_name(f)}.read({f},current_flow_id);" for f in model.features]

    def emit(nid, depth):
        pad = INDENT * depth
        n = model.nodes[nid]
        if isinstance(n, Leaf):
            lines.append(f"{pad}{FLAG_REGISTER}.write(current_flow_id,{n.label});")
            return
        lines.append(f"{pad}if({n.feature} <= {n.threshold}){{")
        emit(n.left, depth + 1)
        lines.append(f"{pad}}} else {{")
        emit(n.right, depth + 1)
        lines.append(f"{pad}}}")

    emit(model.root, 0)
    return "\n".join(lines) + "\n"


_BANK_ARGS = ("r64", "r32", "r16", "r8")
# Trees up to this many split nodes are evaluated branch-free.
FLAT_MAX_NODES = 48


def _read(n):
    return f"{_BANK_ARGS[BANK_OF[n.feature]]}[slot, {ROW[n.feature]}] <= {n.threshold}"


def walker_source(model):
    """Python source for ``walk(r64, r32, r16, r8, slot) -> label``.

    Small trees are flattened: every split is compared up front and the label
    is an OR over the paths to malicious leaves. That has no branches to
    mispredict when consecutive packets belong to unrelated flows. Larger
    trees become nested ifs.
    """
    splits = [n for n in model.nodes.values() if isinstance(n, Node)]
    lines = ["def walk(r64, r32, r16, r8, slot):"]
    if len(splits) <= FLAT_MAX_NODES:
        for n in sorted(splits, key=lambda n: n.id):
            lines.append(f"{INDENT}c{n.id} = int({_read(n)})")
        terms = []

        def paths(nid, conds):
            n = model.nodes[nid]
            if isinstance(n, Leaf):
                if n.label:
                    terms.append(" & ".join(conds) or "1")
                return
            paths(n.left, conds + [f"c{n.id}"])
            paths(n.right, conds + [f"(1 - c{n.id})"])

        paths(model.root, [])
        lines.append(f"{INDENT}return " + (" | ".join(f"({t})" for t in terms) or "0"))
        return "\n".join(lines) + "\n"

    def emit(nid, depth):
        pad = INDENT * depth
        n = model.nodes[nid]
        if isinstance(n, Leaf):
            lines.append(f"{pad}return {n.label}")
            return
        lines.append(f"{pad}if {_read(n)}:")
        emit(n.left, depth + 1)
        lines.append(f"{pad}else:")
        emit(n.right, depth + 1)

    emit(model.root, 1)
    return "\n".join(lines) + "\n"


def classification_report(y_true, y_pred, labels=(0, 1)):
    """Per-class precision/recall/F1/support; 0.0 where a ratio is undefined."""
    y_true = [int(y) for y in y_true]
    y_pred = [int(y) for y in y_pred]
    if len(y_true) != len(y_pred):
        raise ValueError("label and prediction counts differ")
    report = {}
    for c in labels:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        report[c] = {"precision": precision, "recall": recall, "f1": f1, "support": tp + fn}
    correct = sum(1 for t, p in zip(y_true, y_pred) if t == p)
    report["accuracy"] = correct / len(y_true) if y_true else 0.0
    return report


def random_model(rng, max_depth, features=FEATURES, leaf_prob=0.2):
    """A random valid model (for tests and benchmarks), ids assigned in DFS order.

    Thresholds are drawn near small magnitudes so both branches get traffic.
    """
    nodes = {}
    counter = [0]

    def build(d):
        nid = counter[0]
        counter[0] += 1
        if d == max_depth or (d > 0 and rng.random() < leaf_prob):
            nodes[nid] = Leaf(nid, int(rng.integers(0, 2)))
            return nid
        feat = features[int(rng.integers(0, len(features)))]
        hi = min((1 << WIDTHS[feat]) - 1, 2000)
        thr = int(rng.integers(0, hi + 1))
        left = build(d + 1)
        right = build(d + 1)
        nodes[nid] = Node(nid, feat, thr, left, right)
        return nid

    root = build(0)
    return load_model(dump_model(DecisionTreeModel(nodes, root)))
