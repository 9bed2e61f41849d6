"""File formats and the network builder.

Formats:
  * model file          JSON {id, isLinking, vertices, edges}; external
                        endpoints written "graphId::vertexId"
  * type graph file     JSON {vertexTypes, edgeTypes, valueTypes}
  * assignment file     JSON {variables, tuples}
  * delta script        line-based, one delta per line ("+v id Type",
                        "-e id", "+t (v1,3)", ...); "@slot" lines group
                        deltas by target slot
  * network spec        JSON {typeGraphs, slots, ops}; op types name a
                        built-in operator family

Parsing and serialization round-trip by value, and serialization orders
everything deterministically so identical runs write identical bytes.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .model import (
    AssignmentSet,
    Content,
    DeltaSeq,
    Edge,
    EdgeAdd,
    EdgeRemove,
    ExternalRef,
    TupleAdd,
    TupleRemove,
    TypeGraph,
    TypedGraph,
    Variable,
    Vertex,
    VertexAdd,
    VertexRemove,
    endpoint_key,
    parse_endpoint,
)
from .network import (
    ASSIGNMENT,
    Egdn,
    MODEL,
    NetworkValidationError,
    OperationNode,
    Slot,
    Valuation,
    record_edit,
)
from .operators import (
    AntiJoin,
    Composite,
    EdgeInput,
    Expression,
    GroupCount,
    GroupExpression,
    GroupSum,
    Join,
    NodeInput,
    PatternMatch,
)
from .sync import SyncBi, SyncRuleSet, SyncUni
from .model import seed_deltas


class ParseError(ValueError):
    """Malformed input file; the message carries the location."""


# -- type graphs --------------------------------------------------------------


def parse_type_graph(data: Mapping) -> TypeGraph:
    return TypeGraph.of(
        data.get("vertexTypes", ()),
        [(e["name"], e["src"], e["tgt"]) for e in data.get("edgeTypes", ())],
        data.get("valueTypes", ()),
    )


def type_graph_to_json(tg: TypeGraph) -> dict:
    return {
        "vertexTypes": sorted(tg.vertex_types),
        "edgeTypes": [
            {"name": name, "src": src, "tgt": tgt}
            for name, (src, tgt) in sorted(tg.edge_types.items())
        ],
        "valueTypes": sorted(tg.value_types),
    }


# -- models -------------------------------------------------------------------


def parse_model(data: Mapping) -> TypedGraph:
    graph = TypedGraph(data.get("id", ""), bool(data.get("isLinking", False)))
    for v in data.get("vertices", ()):
        graph.add_vertex(Vertex(v["id"], v["type"], v.get("payload")))
    for e in data.get("edges", ()):
        graph.add_edge(
            Edge(e["id"], e["type"], parse_endpoint(e["src"]), parse_endpoint(e["tgt"]))
        )
    return graph


def model_to_json(graph: TypedGraph) -> dict:
    vertices = []
    for v in sorted(graph.vertices(), key=lambda v: v.id):
        entry = {"id": v.id, "type": v.type}
        if v.payload is not None:
            entry["payload"] = v.payload
        vertices.append(entry)
    edges = [
        {
            "id": e.id,
            "type": e.type,
            "src": endpoint_key(e.src),
            "tgt": endpoint_key(e.tgt),
        }
        for e in sorted(graph.edges(), key=lambda e: e.id)
    ]
    return {
        "id": graph.id,
        "isLinking": graph.is_linking,
        "vertices": vertices,
        "edges": edges,
    }


# -- assignment sets ----------------------------------------------------------


def parse_assignment(data: Mapping) -> AssignmentSet:
    out = AssignmentSet(
        Variable(v["name"], v["kind"]) for v in data.get("variables", ())
    )
    for row in data.get("tuples", ()):
        out.add(tuple(row))
    return out


def assignment_to_json(content: AssignmentSet) -> dict:
    return {
        "variables": [{"name": v.name, "kind": v.kind} for v in content.variables],
        "tuples": sorted((list(t) for t in content), key=json.dumps),
    }


def content_to_json(content: Content) -> dict:
    if isinstance(content, TypedGraph):
        return model_to_json(content)
    return assignment_to_json(content)


def parse_content(data: Mapping) -> Content:
    if "variables" in data:
        return parse_assignment(data)
    return parse_model(data)


# -- delta scripts ------------------------------------------------------------

_BARE_TOKEN = re.compile(r"[A-Za-z_][A-Za-z0-9_:.@~-]*")


def _format_value(value) -> str:
    if isinstance(value, str) and _BARE_TOKEN.fullmatch(value) and value not in (
        "true",
        "false",
        "null",
    ):
        return value
    return json.dumps(value)


def _parse_value(token: str):
    token = token.strip()
    try:
        return json.loads(token)
    except json.JSONDecodeError:
        return token


def _split_tuple(body: str) -> list[str]:
    parts, depth, quoted, current = [], 0, False, []
    for ch in body:
        if ch == '"' and (not current or current[-1] != "\\"):
            quoted = not quoted
        if ch == "," and not quoted and depth == 0:
            parts.append("".join(current))
            current = []
            continue
        current.append(ch)
    if current or parts:
        parts.append("".join(current))
    return parts


def parse_delta_script(text: str) -> list[tuple[Optional[str], DeltaSeq]]:
    """Groups of (target slot, deltas).  A line "@slot" starts a new
    group; deltas before any header form a group with slot None."""
    groups: list[tuple[Optional[str], DeltaSeq]] = []
    current_slot: Optional[str] = None
    current: DeltaSeq = []

    def flush():
        nonlocal current
        if current:
            groups.append((current_slot, current))
            current = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("@"):
            flush()
            current_slot = line[1:].strip()
            if not current_slot:
                raise ParseError(f"line {lineno}: empty slot header")
            continue
        fields = line.split(None, 1)
        op = fields[0]
        rest = fields[1] if len(fields) > 1 else ""
        try:
            if op == "+v":
                bits = rest.split(None, 2)
                payload = _parse_value(bits[2]) if len(bits) > 2 else None
                current.append(VertexAdd(bits[0], bits[1], payload))
            elif op == "-v":
                current.append(VertexRemove(rest.split()[0]))
            elif op == "+e":
                eid, etype, src, tgt = rest.split()
                current.append(EdgeAdd(eid, etype, parse_endpoint(src), parse_endpoint(tgt)))
            elif op == "-e":
                current.append(EdgeRemove(rest.split()[0]))
            elif op in ("+t", "-t"):
                body = rest.strip()
                if not (body.startswith("(") and body.endswith(")")):
                    raise ValueError("tuple deltas need a parenthesized value list")
                values = tuple(_parse_value(p) for p in _split_tuple(body[1:-1]))
                current.append(TupleAdd(values) if op == "+t" else TupleRemove(values))
            else:
                raise ValueError(f"unknown delta kind {op!r}")
        except (ValueError, IndexError) as exc:
            raise ParseError(f"line {lineno}: {raw.strip()!r}: {exc}") from None
    flush()
    return groups


def serialize_delta(delta) -> str:
    if isinstance(delta, VertexAdd):
        line = f"+v {delta.vertex_id} {delta.vertex_type}"
        if delta.payload is not None:
            line += f" {_format_value(delta.payload)}"
        return line
    if isinstance(delta, VertexRemove):
        return f"-v {delta.vertex_id}"
    if isinstance(delta, EdgeAdd):
        return (
            f"+e {delta.edge_id} {delta.edge_type}"
            f" {endpoint_key(delta.src)} {endpoint_key(delta.tgt)}"
        )
    if isinstance(delta, EdgeRemove):
        return f"-e {delta.edge_id}"
    if isinstance(delta, TupleAdd):
        return f"+t ({','.join(_format_value(v) for v in delta.values)})"
    if isinstance(delta, TupleRemove):
        return f"-t ({','.join(_format_value(v) for v in delta.values)})"
    raise ValueError(f"unknown delta {delta!r}")


def serialize_delta_script(groups: Iterable[tuple[Optional[str], DeltaSeq]]) -> str:
    lines = []
    for slot_id, deltas in groups:
        if slot_id is not None:
            lines.append(f"@{slot_id}")
        lines.extend(serialize_delta(d) for d in deltas)
    return "\n".join(lines) + "\n" if lines else ""


# -- network specs ------------------------------------------------------------


def parse_slots(data: Mapping, type_graphs: Mapping[str, TypeGraph]) -> list[Slot]:
    slots = []
    for entry in data.get("slots", ()):
        kind = entry.get("kind")
        if kind == MODEL:
            tg_name = entry.get("typeGraph")
            if tg_name is not None and tg_name not in type_graphs:
                raise ParseError(
                    f"slot {entry.get('id')!r}: unknown type graph {tg_name!r}"
                )
            slots.append(
                Slot(
                    id=entry["id"],
                    kind=MODEL,
                    type_graph=type_graphs.get(tg_name) if tg_name else None,
                    is_linking=bool(entry.get("isLinking", False)),
                )
            )
        elif kind == ASSIGNMENT:
            slots.append(
                Slot(
                    id=entry["id"],
                    kind=ASSIGNMENT,
                    variables=tuple(
                        Variable(v["name"], v["kind"]) for v in entry.get("variables", ())
                    ),
                )
            )
        else:
            raise ParseError(f"slot {entry.get('id')!r}: unknown kind {kind!r}")
    return slots


OperatorFactory = Callable[[str, Mapping, Sequence[Slot], Sequence[Slot]], OperationNode]


def _composite_factory(op_id, params, inputs, outputs):
    child_spec = params["spec"]

    def builder():
        return build_network(child_spec)

    return Composite(op_id, builder, params["expose"], inputs, outputs)


OPERATOR_FACTORIES: dict[str, OperatorFactory] = {
    "node_input": lambda o, p, i, out: NodeInput(o, p["type"], i, out),
    "edge_input": lambda o, p, i, out: EdgeInput(o, p["type"], i, out),
    "join": lambda o, p, i, out: Join(o, i, out),
    "anti_join": lambda o, p, i, out: AntiJoin(o, i, out),
    "pattern": lambda o, p, i, out: PatternMatch(o, p["pattern"], i, out),
    "expr": lambda o, p, i, out: Expression(o, p["expr"], i, out),
    "group_expr": lambda o, p, i, out: GroupExpression(o, p["by"], p["expr"], i, out),
    "group_count": lambda o, p, i, out: GroupCount(o, p["by"], i, out),
    "group_sum": lambda o, p, i, out: GroupSum(o, p["by"], p["over"], i, out),
    "sync_uni": lambda o, p, i, out: SyncUni(o, SyncRuleSet.from_json(p["rules"]), i, out),
    "sync_bi": lambda o, p, i, out: SyncBi(o, SyncRuleSet.from_json(p["rules"]), i, out),
    "composite": _composite_factory,
}


def build_network(
    spec: Mapping, initial_contents: Optional[Mapping[str, Content]] = None
) -> tuple[Egdn, Valuation]:
    """Construct and validate a network from a spec mapping, then
    initialize its valuation.

    Initial contents are installed by seeding creation deltas through
    `record_edit`, so adjacent operations see them as pending changes; a
    scheduler run brings the network to consistency.  All structural and
    wiring violations are reported together, before anything executes.
    """
    type_graphs = {
        name: parse_type_graph(tg)
        for name, tg in spec.get("typeGraphs", {}).items()
    }
    slots = parse_slots(spec, type_graphs)
    by_id = {s.id: s for s in slots}
    if len(by_id) != len(slots):
        raise NetworkValidationError(
            ["BipartitenessViolation: duplicate slot ids in spec"]
        )
    violations: list[str] = []
    ops: list[OperationNode] = []
    for entry in spec.get("ops", ()):
        op_id = entry.get("id", "?")
        op_type = entry.get("type")
        factory = OPERATOR_FACTORIES.get(op_type)
        if factory is None:
            violations.append(f"DomainMismatch: op {op_id!r} has unknown type {op_type!r}")
            continue
        try:
            in_slots = [by_id[s] for s in entry.get("inputs", ())]
            out_slots = [by_id[s] for s in entry.get("outputs", ())]
        except KeyError as exc:
            violations.append(
                f"BipartitenessViolation: op {op_id!r} wired to unknown slot {exc.args[0]!r}"
            )
            continue
        try:
            op = factory(op_id, entry.get("params", {}), in_slots, out_slots)
        except Exception as exc:
            message = str(exc)
            tags = ("ArityViolation", "DomainMismatch", "BipartitenessViolation",
                    "SharedOutputViolation")
            if not message.startswith(tags):
                message = f"DomainMismatch: op {op_id!r}: {message}"
            violations.append(message)
            continue
        declared = entry.get("class")
        if declared is not None and declared != op.node_class:
            violations.append(
                f"DomainMismatch: op {op_id!r} declared class {declared!r} but"
                f" {op_type!r} nodes are {op.node_class!r}"
            )
        ops.append(op)
    if violations:
        raise NetworkValidationError(violations)
    egdn = Egdn(slots, ops)
    val = Valuation.for_network(egdn)
    for slot_id in sorted(initial_contents or {}):
        record_edit(egdn, val, slot_id, seed_deltas(initial_contents[slot_id]))
    return egdn, val


def network_to_dot(egdn: Egdn) -> str:
    """Graphical notation as DOT: slots are boxes tagged A or M, ops are
    rounded boxes tagged Q, T, or X."""
    tag = {"query": "Q", "transformation": "T", "mixed": "X"}
    lines = ["digraph egdn {", "  rankdir=LR;"]
    for sid in sorted(egdn.slots):
        slot = egdn.slots[sid]
        kind = "M" if slot.kind == MODEL else "A"
        lines.append(f'  "{sid}" [shape=box label="{sid} [{kind}]"];')
    for oid in sorted(egdn.operations):
        op = egdn.operations[oid]
        lines.append(
            f'  "{oid}" [shape=box style=rounded label="{oid} [{tag[op.node_class]}]"];'
        )
    for oid in sorted(egdn.operations):
        op = egdn.operations[oid]
        for s in op.input_slots:
            lines.append(f'  "{s}" -> "{oid}";')
        for s in op.output_slots:
            lines.append(f'  "{oid}" -> "{s}";')
    lines.append("}")
    return "\n".join(lines)


# -- files --------------------------------------------------------------------


def load_json(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def dump_json(data: Mapping, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=False) + "\n")


def load_model(path) -> TypedGraph:
    return parse_model(load_json(path))


def load_type_graph(path) -> TypeGraph:
    return parse_type_graph(load_json(path))


def load_content(path) -> Content:
    return parse_content(load_json(path))


def load_network_spec(path) -> dict:
    return load_json(path)


def load_delta_script(path) -> list[tuple[Optional[str], DeltaSeq]]:
    return parse_delta_script(Path(path).read_text())
