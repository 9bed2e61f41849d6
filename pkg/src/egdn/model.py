"""Typed graphs, assignment sets, and the delta algebra that mutates them.

Models are typed graphs whose vertices may carry a primitive payload
(attribute values are encoded as dedicated value vertices).  Assignment
sets are sets of tuples over a declared variable list.  Both kinds of
content change only through sequences of atomic deltas; `apply_delta` is
strict and atomic per call, so a bad delta never leaves partially
mutated content behind.

All values here are either immutable or mutated only under exclusive
access by their owner; nothing in this module locks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Optional, Union

from .instrumentation import PROBES


class DeltaError(Exception):
    """A delta could not be applied to the given content."""


class AdjacentEdgesError(DeltaError):
    """Vertex removal attempted while adjacent edges still exist."""


class DuplicateIdError(DeltaError):
    """Creation of an element whose id is already taken."""


class MissingElementError(DeltaError):
    """Removal or reference of an element that does not exist."""


class KindMismatchError(DeltaError):
    """Model delta on an assignment set, tuple delta on a model, or a
    diff across content kinds."""


# Variable domain kinds for assignment sets.
VERTEX_REF = "vertexRef"
EDGE_REF = "edgeRef"
INTEGER = "integer"
FLOAT = "float"
STRING = "string"
BOOLEAN = "boolean"

VAR_KINDS = (VERTEX_REF, EDGE_REF, INTEGER, FLOAT, STRING, BOOLEAN)
NUMERIC_KINDS = (INTEGER, FLOAT)

Payload = Union[int, float, str, bool, None]


@dataclass(frozen=True)
class ExternalRef:
    """Reference to a vertex of another graph, used by linking models."""

    graph_id: str
    vertex_id: str

    def __str__(self) -> str:
        return f"{self.graph_id}::{self.vertex_id}"


Endpoint = Union[str, ExternalRef]


def endpoint_key(ep: Endpoint) -> str:
    """Canonical string form of an edge endpoint ("g::v" when external)."""
    return str(ep) if isinstance(ep, ExternalRef) else ep


def parse_endpoint(token: str) -> Endpoint:
    """Inverse of `endpoint_key`: "g::v" becomes an ExternalRef."""
    if "::" in token:
        graph_id, _, vertex_id = token.partition("::")
        return ExternalRef(graph_id, vertex_id)
    return token


@dataclass(frozen=True)
class Vertex:
    id: str
    type: str
    payload: Payload = None


@dataclass(frozen=True)
class Edge:
    id: str
    type: str
    src: Endpoint
    tgt: Endpoint


@dataclass(frozen=True)
class TypeGraph:
    """Declares the vertex types, edge types, and attribute-value types a
    model may use.  Edge types constrain the vertex types at both ends."""

    vertex_types: frozenset[str]
    edge_types: Mapping[str, tuple[str, str]]
    value_types: frozenset[str] = frozenset()

    @staticmethod
    def of(
        vertex_types: Iterable[str],
        edge_types: Mapping[str, tuple[str, str]] | Iterable[tuple[str, str, str]],
        value_types: Iterable[str] = (),
    ) -> "TypeGraph":
        vts = frozenset(vertex_types)
        if not isinstance(edge_types, Mapping):
            edge_types = {name: (src, tgt) for name, src, tgt in edge_types}
        vals = frozenset(value_types)
        tg = TypeGraph(vts, dict(edge_types), vals)
        tg.validate()
        return tg

    def validate(self) -> None:
        for name, (src, tgt) in self.edge_types.items():
            if src not in self.vertex_types:
                raise ValueError(f"edge type {name!r}: undeclared source type {src!r}")
            if tgt not in self.vertex_types:
                raise ValueError(f"edge type {name!r}: undeclared target type {tgt!r}")
        undeclared = self.value_types - self.vertex_types
        if undeclared:
            raise ValueError(f"value types not declared as vertex types: {sorted(undeclared)}")


class TypedGraph:
    """A typed graph with unique element ids and strict mutation.

    Linking graphs may use `ExternalRef` endpoints; regular graphs may
    not.  Adjacency and (endpoint, edge type) indices are maintained on
    every mutation so that deletions and anchored searches stay cheap.
    """

    def __init__(self, id: str = "", is_linking: bool = False):
        self.id = id
        self.is_linking = is_linking
        self._vertices: dict[str, Vertex] = {}
        self._edges: dict[str, Edge] = {}
        # endpoint key -> edge ids leaving / entering that endpoint
        self._out: dict[str, set[str]] = {}
        self._in: dict[str, set[str]] = {}

    # -- queries ---------------------------------------------------------

    def has_vertex(self, vid: str) -> bool:
        return vid in self._vertices

    def has_edge(self, eid: str) -> bool:
        return eid in self._edges

    def vertex(self, vid: str) -> Vertex:
        try:
            return self._vertices[vid]
        except KeyError:
            raise MissingElementError(f"no vertex {vid!r} in graph {self.id!r}") from None

    def edge(self, eid: str) -> Edge:
        try:
            return self._edges[eid]
        except KeyError:
            raise MissingElementError(f"no edge {eid!r} in graph {self.id!r}") from None

    def vertices(self) -> Iterator[Vertex]:
        return iter(self._vertices.values())

    def edges(self) -> Iterator[Edge]:
        return iter(self._edges.values())

    @property
    def vertex_count(self) -> int:
        return len(self._vertices)

    @property
    def edge_count(self) -> int:
        return len(self._edges)

    def size(self) -> int:
        return len(self._vertices) + len(self._edges)

    def edges_from(self, ep: Endpoint, edge_type: Optional[str] = None) -> list[Edge]:
        PROBES.probe()
        eids = self._out.get(endpoint_key(ep), ())
        result = [self._edges[e] for e in eids]
        if edge_type is not None:
            result = [e for e in result if e.type == edge_type]
        return result

    def edges_to(self, ep: Endpoint, edge_type: Optional[str] = None) -> list[Edge]:
        PROBES.probe()
        eids = self._in.get(endpoint_key(ep), ())
        result = [self._edges[e] for e in eids]
        if edge_type is not None:
            result = [e for e in result if e.type == edge_type]
        return result

    def degree(self, vid: str) -> int:
        return len(self._out.get(vid, ())) + len(self._in.get(vid, ()))

    # -- strict mutation (exclusive access only) --------------------------

    def add_vertex(self, v: Vertex) -> None:
        if v.id in self._vertices:
            raise DuplicateIdError(f"vertex {v.id!r} already exists")
        self._vertices[v.id] = v

    def remove_vertex(self, vid: str) -> None:
        if vid not in self._vertices:
            raise MissingElementError(f"cannot remove missing vertex {vid!r}")
        if self._out.get(vid) or self._in.get(vid):
            raise AdjacentEdgesError(f"vertex {vid!r} still has adjacent edges")
        del self._vertices[vid]
        self._out.pop(vid, None)
        self._in.pop(vid, None)

    def add_edge(self, e: Edge) -> None:
        if e.id in self._edges:
            raise DuplicateIdError(f"edge {e.id!r} already exists")
        for ep in (e.src, e.tgt):
            if isinstance(ep, ExternalRef):
                if not self.is_linking:
                    raise DeltaError(
                        f"edge {e.id!r}: external endpoint {ep} in non-linking graph"
                    )
            elif ep not in self._vertices:
                raise MissingElementError(f"edge {e.id!r}: missing endpoint {ep!r}")
        self._edges[e.id] = e
        self._out.setdefault(endpoint_key(e.src), set()).add(e.id)
        self._in.setdefault(endpoint_key(e.tgt), set()).add(e.id)

    def remove_edge(self, eid: str) -> None:
        e = self._edges.pop(eid, None)
        if e is None:
            raise MissingElementError(f"cannot remove missing edge {eid!r}")
        self._out[endpoint_key(e.src)].discard(eid)
        self._in[endpoint_key(e.tgt)].discard(eid)

    # -- value semantics ---------------------------------------------------

    def copy(self) -> "TypedGraph":
        g = TypedGraph(self.id, self.is_linking)
        g._vertices = dict(self._vertices)
        g._edges = dict(self._edges)
        g._out = {k: set(v) for k, v in self._out.items()}
        g._in = {k: set(v) for k, v in self._in.items()}
        return g

    def __eq__(self, other: object) -> bool:
        # Content equality by element ids; the graph's own id is a label,
        # not content, so two slots holding the same elements compare equal.
        if not isinstance(other, TypedGraph):
            return NotImplemented
        return (
            self.is_linking == other.is_linking
            and self._vertices == other._vertices
            and self._edges == other._edges
        )

    def __repr__(self) -> str:
        return (
            f"TypedGraph({self.id!r}, vertices={len(self._vertices)},"
            f" edges={len(self._edges)})"
        )


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in VAR_KINDS:
            raise ValueError(f"unknown variable kind {self.kind!r}")


class AssignmentSet:
    """A set of value tuples over an ordered variable list.

    Hash indices over variable subsets are built on demand and kept in
    sync by `add`/`remove`, so incremental consumers can probe by key in
    O(1) without rescanning.
    """

    def __init__(self, variables: Iterable[Variable]):
        self.variables: tuple[Variable, ...] = tuple(variables)
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names: {names}")
        self._tuples: set[tuple] = set()
        self._indexes: dict[tuple[int, ...], dict[tuple, set[tuple]]] = {}

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def positions(self, names: Iterable[str]) -> tuple[int, ...]:
        order = {v.name: i for i, v in enumerate(self.variables)}
        try:
            return tuple(order[n] for n in names)
        except KeyError as exc:
            raise KeyError(f"unknown variable {exc.args[0]!r} in {self.names}") from None

    def check_tuple(self, values: tuple) -> None:
        if len(values) != len(self.variables):
            raise KindMismatchError(
                f"tuple arity {len(values)} != {len(self.variables)} for {self.names}"
            )
        for var, value in zip(self.variables, values):
            ok = {
                VERTEX_REF: lambda x: isinstance(x, str),
                EDGE_REF: lambda x: isinstance(x, str),
                INTEGER: lambda x: isinstance(x, int) and not isinstance(x, bool),
                FLOAT: lambda x: isinstance(x, (int, float)) and not isinstance(x, bool),
                STRING: lambda x: isinstance(x, str),
                BOOLEAN: lambda x: isinstance(x, bool),
            }[var.kind](value)
            if not ok:
                raise KindMismatchError(
                    f"value {value!r} does not fit variable {var.name}:{var.kind}"
                )

    def __contains__(self, values: tuple) -> bool:
        PROBES.probe()
        return values in self._tuples

    def __len__(self) -> int:
        return len(self._tuples)

    def __iter__(self) -> Iterator[tuple]:
        return iter(self._tuples)

    def tuples(self) -> frozenset:
        return frozenset(self._tuples)

    def add(self, values: tuple) -> None:
        self.check_tuple(values)
        if values in self._tuples:
            raise DuplicateIdError(f"tuple {values!r} already present")
        self._tuples.add(values)
        for pos, index in self._indexes.items():
            key = tuple(values[i] for i in pos)
            index.setdefault(key, set()).add(values)

    def remove(self, values: tuple) -> None:
        if values not in self._tuples:
            raise MissingElementError(f"tuple {values!r} not present")
        self._tuples.discard(values)
        for pos, index in self._indexes.items():
            key = tuple(values[i] for i in pos)
            bucket = index.get(key)
            if bucket is not None:
                bucket.discard(values)
                if not bucket:
                    del index[key]

    def lookup(self, positions: tuple[int, ...], key: tuple) -> frozenset:
        """Probe (and lazily build) the hash index over `positions`."""
        index = self._indexes.get(positions)
        if index is None:
            index = {}
            for t in self._tuples:
                index.setdefault(tuple(t[i] for i in positions), set()).add(t)
            self._indexes[positions] = index
        PROBES.probe()
        return frozenset(index.get(key, ()))

    def copy(self) -> "AssignmentSet":
        a = AssignmentSet(self.variables)
        a._tuples = set(self._tuples)
        return a

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AssignmentSet):
            return NotImplemented
        return self.variables == other.variables and self._tuples == other._tuples

    def __repr__(self) -> str:
        return f"AssignmentSet({[f'{v.name}:{v.kind}' for v in self.variables]}, {len(self._tuples)} tuples)"


Content = Union[TypedGraph, AssignmentSet]


# -- atomic deltas ---------------------------------------------------------


@dataclass(frozen=True)
class VertexAdd:
    vertex_id: str
    vertex_type: str
    payload: Payload = None


@dataclass(frozen=True)
class VertexRemove:
    vertex_id: str


@dataclass(frozen=True)
class EdgeAdd:
    edge_id: str
    edge_type: str
    src: Endpoint
    tgt: Endpoint


@dataclass(frozen=True)
class EdgeRemove:
    edge_id: str


@dataclass(frozen=True)
class TupleAdd:
    values: tuple


@dataclass(frozen=True)
class TupleRemove:
    values: tuple


AtomicDelta = Union[VertexAdd, VertexRemove, EdgeAdd, EdgeRemove, TupleAdd, TupleRemove]
DeltaSeq = list  # list[AtomicDelta]; order is meaningful

MODEL_DELTAS = (VertexAdd, VertexRemove, EdgeAdd, EdgeRemove)
TUPLE_DELTAS = (TupleAdd, TupleRemove)


def apply_one(content: Content, delta: AtomicDelta) -> None:
    """Apply a single delta in place.  Strict: every precondition failure
    raises a DeltaError subclass before anything is touched."""
    if isinstance(content, TypedGraph):
        if isinstance(delta, VertexAdd):
            content.add_vertex(Vertex(delta.vertex_id, delta.vertex_type, delta.payload))
        elif isinstance(delta, VertexRemove):
            content.remove_vertex(delta.vertex_id)
        elif isinstance(delta, EdgeAdd):
            content.add_edge(Edge(delta.edge_id, delta.edge_type, delta.src, delta.tgt))
        elif isinstance(delta, EdgeRemove):
            content.remove_edge(delta.edge_id)
        else:
            raise KindMismatchError(f"tuple delta {delta!r} applied to a model")
    elif isinstance(content, AssignmentSet):
        if isinstance(delta, TupleAdd):
            content.add(delta.values)
        elif isinstance(delta, TupleRemove):
            content.remove(delta.values)
        else:
            raise KindMismatchError(f"model delta {delta!r} applied to an assignment set")
    else:
        raise KindMismatchError(f"cannot apply deltas to {type(content).__name__}")


def apply_delta(content: Content, deltas: Iterable[AtomicDelta]) -> Content:
    """Apply a delta sequence, returning new content; the input is never
    mutated, so a failing delta leaves the caller's value intact."""
    result = content.copy()
    for delta in deltas:
        apply_one(result, delta)
    return result


def seed_deltas(content: Content) -> DeltaSeq:
    """Creation deltas that rebuild `content` from empty content.

    Vertices precede edges; both sorted by id so seeding is reproducible.
    """
    if isinstance(content, TypedGraph):
        out: DeltaSeq = [
            VertexAdd(v.id, v.type, v.payload)
            for v in sorted(content.vertices(), key=lambda v: v.id)
        ]
        out.extend(
            EdgeAdd(e.id, e.type, e.src, e.tgt)
            for e in sorted(content.edges(), key=lambda e: e.id)
        )
        return out
    if isinstance(content, AssignmentSet):
        return [TupleAdd(t) for t in sorted(content, key=repr)]
    raise KindMismatchError(f"cannot seed from {type(content).__name__}")


def diff(before: Content, after: Content) -> DeltaSeq:
    """Normalized delta sequence turning `before` into `after` (by id).

    Elements present in both with identical attributes produce nothing;
    changed elements are removed and re-added.  Emission order is edge
    removals, vertex removals, vertex additions, edge additions, so the
    result is always applicable to `before`.
    """
    if isinstance(before, TypedGraph) and isinstance(after, TypedGraph):
        out: DeltaSeq = []
        removed_vertices = []
        added_vertices = []
        for vid in sorted(set(before._vertices) | set(after._vertices)):
            b, a = before._vertices.get(vid), after._vertices.get(vid)
            if b == a:
                continue
            if b is not None:
                removed_vertices.append(VertexRemove(vid))
            if a is not None:
                added_vertices.append(VertexAdd(a.id, a.type, a.payload))
        removed_edges = []
        added_edges = []
        for eid in sorted(set(before._edges) | set(after._edges)):
            b, a = before._edges.get(eid), after._edges.get(eid)
            if b == a:
                continue
            if b is not None:
                removed_edges.append(EdgeRemove(eid))
            if a is not None:
                added_edges.append(EdgeAdd(a.id, a.type, a.src, a.tgt))
        # Edges adjacent to removed or re-added vertices must cycle too.
        dirty = {d.vertex_id for d in removed_vertices}
        if dirty:
            already = {d.edge_id for d in removed_edges}
            for e in before.edges():
                if e.id in already:
                    continue
                if endpoint_key(e.src) in dirty or endpoint_key(e.tgt) in dirty:
                    removed_edges.append(EdgeRemove(e.id))
                    if after.has_edge(e.id):
                        added_edges.append(EdgeAdd(e.id, e.type, e.src, e.tgt))
            removed_edges.sort(key=lambda d: d.edge_id)
            added_edges.sort(key=lambda d: d.edge_id)
        out.extend(removed_edges)
        out.extend(removed_vertices)
        out.extend(added_vertices)
        out.extend(added_edges)
        return out
    if isinstance(before, AssignmentSet) and isinstance(after, AssignmentSet):
        if before.variables != after.variables:
            raise KindMismatchError("assignment sets differ in variable lists")
        gone = sorted(before.tuples() - after.tuples(), key=repr)
        new = sorted(after.tuples() - before.tuples(), key=repr)
        return [TupleRemove(t) for t in gone] + [TupleAdd(t) for t in new]
    raise KindMismatchError(
        f"cannot diff {type(before).__name__} against {type(after).__name__}"
    )


def resolve_external(
    ref: ExternalRef, graphs: Mapping[str, TypedGraph]
) -> Optional[Vertex]:
    """Resolve a cross-model reference against a graph context, or None
    when the graph or vertex is gone (dangling reference)."""
    graph = graphs.get(ref.graph_id)
    if graph is None or not graph.has_vertex(ref.vertex_id):
        return None
    return graph.vertex(ref.vertex_id)


# -- typing checks -----------------------------------------------------------


def typing_violations(graph: TypedGraph, tg: TypeGraph) -> list[str]:
    """All reasons the graph is not correctly typed over `tg`.

    External endpoints of linking graphs are exempt from endpoint type
    checks; they are only resolvable against a valuation at use time.
    """
    problems = []
    for v in graph.vertices():
        if v.type not in tg.vertex_types:
            problems.append(f"vertex {v.id!r}: undeclared type {v.type!r}")
        elif v.payload is not None and v.type not in tg.value_types:
            problems.append(f"vertex {v.id!r}: payload on non-value type {v.type!r}")
    for e in graph.edges():
        decl = tg.edge_types.get(e.type)
        if decl is None:
            problems.append(f"edge {e.id!r}: undeclared type {e.type!r}")
            continue
        src_t, tgt_t = decl
        for ep, want, side in ((e.src, src_t, "source"), (e.tgt, tgt_t, "target")):
            if isinstance(ep, ExternalRef):
                continue
            if graph.has_vertex(ep) and graph.vertex(ep).type != want:
                problems.append(
                    f"edge {e.id!r}: {side} {ep!r} has type"
                    f" {graph.vertex(ep).type!r}, expected {want!r}"
                )
    return problems


def check_typing(graph: TypedGraph, tg: TypeGraph) -> bool:
    """True iff every element's type is declared and every edge's endpoint
    types match the edge type's declaration."""
    return not typing_violations(graph, tg)


def delta_violations(
    delta: AtomicDelta, tg: TypeGraph, graph: TypedGraph
) -> list[str]:
    """Typing problems a single model delta would introduce; O(1)."""
    if isinstance(delta, VertexAdd):
        if delta.vertex_type not in tg.vertex_types:
            return [f"vertex {delta.vertex_id!r}: undeclared type {delta.vertex_type!r}"]
        if delta.payload is not None and delta.vertex_type not in tg.value_types:
            return [
                f"vertex {delta.vertex_id!r}: payload on non-value type"
                f" {delta.vertex_type!r}"
            ]
    elif isinstance(delta, EdgeAdd):
        decl = tg.edge_types.get(delta.edge_type)
        if decl is None:
            return [f"edge {delta.edge_id!r}: undeclared type {delta.edge_type!r}"]
        src_t, tgt_t = decl
        problems = []
        for ep, want, side in ((delta.src, src_t, "source"), (delta.tgt, tgt_t, "target")):
            if isinstance(ep, ExternalRef):
                continue
            if graph.has_vertex(ep) and graph.vertex(ep).type != want:
                problems.append(
                    f"edge {delta.edge_id!r}: {side} {ep!r} has type"
                    f" {graph.vertex(ep).type!r}, expected {want!r}"
                )
        return problems
    return []


# -- delta normalization -----------------------------------------------------


def _delta_key(delta: AtomicDelta):
    if isinstance(delta, (VertexAdd, VertexRemove)):
        return ("v", delta.vertex_id)
    if isinstance(delta, (EdgeAdd, EdgeRemove)):
        return ("e", delta.edge_id)
    return ("t", delta.values)


def normalize_deltas(deltas: Iterable[AtomicDelta]) -> DeltaSeq:
    """Drop canceling add/remove pairs from a valid delta sequence.

    An element added within the sequence and removed later cancels out
    entirely.  For tuples, a remove followed by a re-add of the same
    values also cancels (tuples have no identity beyond their values).
    The relative order of the surviving deltas is preserved, which keeps
    the sequence applicable wherever the original was.
    """
    kept: list[Optional[AtomicDelta]] = []
    pending_add: dict = {}
    pending_tuple_remove: dict = {}
    for delta in deltas:
        key = _delta_key(delta)
        if isinstance(delta, (VertexAdd, EdgeAdd, TupleAdd)):
            if isinstance(delta, TupleAdd) and key in pending_tuple_remove:
                kept[pending_tuple_remove.pop(key)] = None
                continue
            pending_add[key] = len(kept)
            kept.append(delta)
        else:
            if key in pending_add:
                kept[pending_add.pop(key)] = None
                continue
            if isinstance(delta, TupleRemove):
                pending_tuple_remove[key] = len(kept)
            kept.append(delta)
    return [d for d in kept if d is not None]
