"""Flow-graph data model and the canonical task envelope codec.

A task is described by a directed acyclic graph whose nodes each bind a
processing module (plus per-execution parameters and opaque extra data) and
whose links direct where a node's results are delivered. Tasks travel between
modules as a serialized ``TaskData`` envelope: the produced payload, the id of
the next node to execute, and the full graph.

All types are immutable value objects; every operation here is a pure
function, so values are safe to share across threads and processes.
"""

from __future__ import annotations

import base64
import binascii
import heapq
import json
import re
from dataclasses import dataclass

from vpe.errors import VpeError

TOKEN_RE = re.compile(r"^[A-Za-z][A-Za-z0-9-]*$")
UUID_RE = re.compile(r"^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$")

WIRE_VERSION = 1

# Payloads injected by the gateway (no producing node) carry this sentinel.
SOURCE_PRODUCER = -1

# A datatype is a token string such as "Frame" or "Pedestrian-Track"; it
# classifies payload records and names the per-module input topics.
DataType = str


def is_token(s: object) -> bool:
    return isinstance(s, str) and bool(TOKEN_RE.match(s))


def is_task_id(s: object) -> bool:
    return isinstance(s, str) and bool(UUID_RE.match(s))


@dataclass(frozen=True)
class FlowNode:
    """One graph node: which module runs, with what parameters and extra data."""

    node_id: int
    module_id: str
    params: tuple[tuple[str, str], ...] = ()
    extra_data: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "params", tuple((k, v) for k, v in self.params))

    def param(self, key: str, default: str | None = None) -> str | None:
        for k, v in self.params:
            if k == key:
                return v
        return default


@dataclass(frozen=True)
class FlowLink:
    """Deliver the head node's results to the tail node."""

    from_node: int
    to_node: int


@dataclass(frozen=True)
class FlowGraph:
    """Directed acyclic execution plan; node and link order is canonicalized."""

    nodes: tuple[FlowNode, ...]
    links: tuple[FlowLink, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: n.node_id)))
        object.__setattr__(
            self, "links", tuple(sorted(self.links, key=lambda l: (l.from_node, l.to_node)))
        )

    def node_ids(self) -> list[int]:
        return [n.node_id for n in self.nodes]

    def find_node(self, node_id: int) -> FlowNode | None:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        return None


@dataclass(frozen=True)
class Payload:
    """Result records of one node execution; record bytes are opaque here."""

    datatype: DataType
    records: tuple[bytes, ...] = ()
    producer_node: int = SOURCE_PRODUCER

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))


@dataclass(frozen=True)
class TaskData:
    """The per-message envelope: payload, next node to execute, full graph."""

    task_id: str
    nme: int
    graph: FlowGraph
    payload: Payload


@dataclass(frozen=True)
class ValidationReport:
    """Every violation found in a candidate graph; ok iff none."""

    ok: bool
    errors: tuple[tuple[str, str], ...] = ()

    @classmethod
    def from_errors(cls, errors: list[tuple[str, str]]) -> "ValidationReport":
        return cls(ok=not errors, errors=tuple(errors))

    def codes(self) -> set[str]:
        return {code for code, _ in self.errors}

    def to_json(self) -> dict:
        return {"ok": self.ok, "errors": [{"code": c, "detail": d} for c, d in self.errors]}


def graph_errors(graph: FlowGraph) -> list[tuple[str, str]]:
    """Structural violations of the graph invariants, all of them."""
    errors: list[tuple[str, str]] = []
    if not graph.nodes:
        errors.append(("EMPTY", "graph has no nodes"))
        return errors

    seen: set[int] = set()
    for n in graph.nodes:
        if not isinstance(n.node_id, int) or isinstance(n.node_id, bool) or n.node_id < 0:
            errors.append(("BAD_NODE_ID", f"node_id {n.node_id!r} is not a non-negative integer"))
            continue
        if n.node_id in seen:
            errors.append(("DUP_NODE", f"node_id {n.node_id} appears more than once"))
        seen.add(n.node_id)
        if not is_token(n.module_id):
            errors.append(("BAD_TOKEN", f"node {n.node_id}: module_id {n.module_id!r}"))

    link_counts: dict[tuple[int, int], int] = {}
    usable_links: list[FlowLink] = []
    for l in graph.links:
        pair = (l.from_node, l.to_node)
        link_counts[pair] = link_counts.get(pair, 0) + 1
        dangling = [e for e in pair if e not in seen]
        if dangling:
            errors.append(("DANGLING", f"link {pair} references missing node(s) {dangling}"))
            continue
        usable_links.append(l)
    for pair, count in sorted(link_counts.items()):
        if count > 1:
            errors.append(("DUP_LINK", f"link {pair} appears {count} times"))

    if _kahn_order(seen, usable_links) is None:
        errors.append(("CYCLE", "graph contains a cycle"))
    return errors


def validate_graph(graph: FlowGraph, known_modules: "set[str] | list[str] | tuple[str, ...]" = ()) -> ValidationReport:
    """Report every violation; the module-registry check is skipped when
    `known_modules` is empty."""
    errors = graph_errors(graph)
    known = set(known_modules)
    if known:
        for n in graph.nodes:
            if n.module_id not in known:
                errors.append(("UNKNOWN_MODULE", f"node {n.node_id}: module {n.module_id!r} is not registered"))
    return ValidationReport.from_errors(errors)


def _kahn_order(node_ids: set[int], links: list[FlowLink]) -> list[int] | None:
    """Topological order with ascending-node_id tie-break, or None on a cycle."""
    out: dict[int, list[int]] = {n: [] for n in node_ids}
    indeg: dict[int, int] = {n: 0 for n in node_ids}
    for l in links:
        out[l.from_node].append(l.to_node)
        indeg[l.to_node] += 1
    ready = [n for n in node_ids if indeg[n] == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for m in out[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(ready, m)
    return order if len(order) == len(node_ids) else None


def topo_order(graph: FlowGraph) -> list[int]:
    """Linear extension of the graph, ties broken by ascending node_id."""
    order = _kahn_order(set(graph.node_ids()), list(graph.links))
    if order is None:
        raise VpeError("CYCLE", "graph contains a cycle")
    return order


def predecessors(graph: FlowGraph, node_id: int) -> set[int]:
    if graph.find_node(node_id) is None:
        raise VpeError("NOT_FOUND", f"node {node_id} not in graph")
    return {l.from_node for l in graph.links if l.to_node == node_id}


def successors(graph: FlowGraph, node_id: int) -> set[int]:
    if graph.find_node(node_id) is None:
        raise VpeError("NOT_FOUND", f"node {node_id} not in graph")
    return {l.to_node for l in graph.links if l.from_node == node_id}


def locate_self(td: TaskData, module_id: str) -> FlowNode:
    """The node this message routes to, iff it names the caller's module.

    A mismatch signals a routing bug; the caller must dead-letter the message
    rather than drop it.
    """
    node = td.graph.find_node(td.nme)
    if node is None:
        raise VpeError("MISROUTED", f"nme {td.nme} not in graph of task {td.task_id}")
    if node.module_id != module_id:
        raise VpeError(
            "MISROUTED",
            f"nme {td.nme} binds module {node.module_id!r}, not caller {module_id!r}",
        )
    return node


def taskdata_errors(td: TaskData) -> list[tuple[str, str]]:
    """Every invariant violation in the envelope (graph included)."""
    errors: list[tuple[str, str]] = []
    if not is_task_id(td.task_id):
        errors.append(("BAD_TASK_ID", f"task_id {td.task_id!r} is not a lowercase UUID"))
    errors.extend(graph_errors(td.graph))
    if not errors:
        if td.graph.find_node(td.nme) is None:
            errors.append(("BAD_NME", f"nme {td.nme} not in graph"))
        else:
            preds = predecessors(td.graph, td.nme)
            p = td.payload.producer_node
            if p != SOURCE_PRODUCER and p not in preds:
                errors.append(("BAD_PRODUCER", f"producer_node {p} is not a predecessor of nme {td.nme}"))
    if not is_token(td.payload.datatype):
        errors.append(("BAD_TOKEN", f"payload datatype {td.payload.datatype!r}"))
    return errors


# --- canonical wire format ------------------------------------------------ #
#
# UTF-8 JSON with fixed field names and key order, opened by the versioned
# magic prefix {"v":1, — nodes sorted by id, links by (from,to), opaque bytes
# base64. Equal values encode to identical byte strings.


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def graph_to_json(graph: FlowGraph) -> dict:
    return {
        "nodes": [
            {"id": n.node_id, "module": n.module_id, "params": [[k, v] for k, v in n.params], "extra": _b64(n.extra_data)}
            for n in graph.nodes
        ],
        "links": [{"from": l.from_node, "to": l.to_node} for l in graph.links],
    }


def payload_to_json(payload: Payload) -> dict:
    return {
        "datatype": payload.datatype,
        "producer_node": payload.producer_node,
        "records": [_b64(r) for r in payload.records],
    }


def encode_taskdata(td: TaskData) -> bytes:
    errors = taskdata_errors(td)
    if errors:
        raise VpeError("ENCODE_INVALID", "; ".join(f"{c}: {d}" for c, d in errors))
    doc = {
        "v": WIRE_VERSION,
        "task_id": td.task_id,
        "nme": td.nme,
        "graph": graph_to_json(td.graph),
        "payload": payload_to_json(td.payload),
    }
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


class _Malformed(Exception):
    pass


def _need(obj: dict, key: str, kind: type):
    if not isinstance(obj, dict) or key not in obj:
        raise _Malformed(f"missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise _Malformed(f"field {key!r} has wrong type")
    return value


def _no_extras(obj: dict, allowed: set[str], where: str) -> None:
    extras = set(obj) - allowed
    if extras:
        raise _Malformed(f"unknown field(s) {sorted(extras)} in {where}")


def _unb64(s: object, where: str) -> bytes:
    if not isinstance(s, str):
        raise _Malformed(f"{where} is not a base64 string")
    try:
        return base64.b64decode(s.encode("ascii"), validate=True)
    except (binascii.Error, ValueError, UnicodeEncodeError):
        raise _Malformed(f"{where} is not valid base64")


def graph_from_json(obj: object) -> FlowGraph:
    """Parse the canonical graph fragment; raises _Malformed on shape errors."""
    if not isinstance(obj, dict):
        raise _Malformed("graph is not an object")
    _no_extras(obj, {"nodes", "links"}, "graph")
    nodes = []
    for i, n in enumerate(_need(obj, "nodes", list)):
        if not isinstance(n, dict):
            raise _Malformed(f"node #{i} is not an object")
        _no_extras(n, {"id", "module", "params", "extra"}, f"node #{i}")
        params = []
        for p in _need(n, "params", list):
            if not (isinstance(p, list) and len(p) == 2 and all(isinstance(x, str) for x in p)):
                raise _Malformed(f"node #{i} has a malformed params pair")
            params.append((p[0], p[1]))
        nodes.append(
            FlowNode(
                node_id=_need(n, "id", int),
                module_id=_need(n, "module", str),
                params=tuple(params),
                extra_data=_unb64(n.get("extra"), f"node #{i} extra"),
            )
        )
    links = []
    for i, l in enumerate(_need(obj, "links", list)):
        if not isinstance(l, dict):
            raise _Malformed(f"link #{i} is not an object")
        _no_extras(l, {"from", "to"}, f"link #{i}")
        links.append(FlowLink(_need(l, "from", int), _need(l, "to", int)))
    return FlowGraph(nodes=tuple(nodes), links=tuple(links))


def payload_from_json(obj: object) -> Payload:
    if not isinstance(obj, dict):
        raise _Malformed("payload is not an object")
    _no_extras(obj, {"datatype", "producer_node", "records"}, "payload")
    records = tuple(
        _unb64(r, f"record #{i}") for i, r in enumerate(_need(obj, "records", list))
    )
    return Payload(
        datatype=_need(obj, "datatype", str),
        producer_node=_need(obj, "producer_node", int),
        records=records,
    )


def decode_taskdata(data: bytes) -> TaskData:
    """Parse an envelope; field order is free, all invariants are re-checked.

    Raises ``DECODE_MALFORMED`` for bytes that do not parse as the canonical
    shape and ``DECODE_INVALID`` for well-formed envelopes that violate an
    invariant.
    """
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VpeError("DECODE_MALFORMED", str(e))
    try:
        if not isinstance(doc, dict):
            raise _Malformed("top level is not an object")
        _no_extras(doc, {"v", "task_id", "nme", "graph", "payload"}, "envelope")
        if _need(doc, "v", int) != WIRE_VERSION:
            raise _Malformed(f"unsupported version {doc['v']!r}")
        td = TaskData(
            task_id=_need(doc, "task_id", str),
            nme=_need(doc, "nme", int),
            graph=graph_from_json(doc.get("graph")),
            payload=payload_from_json(doc.get("payload")),
        )
    except _Malformed as e:
        raise VpeError("DECODE_MALFORMED", str(e))
    errors = taskdata_errors(td)
    if errors:
        raise VpeError("DECODE_INVALID", "; ".join(f"{c}: {d}" for c, d in errors))
    return td
