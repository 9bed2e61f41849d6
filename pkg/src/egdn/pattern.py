"""Graph patterns: declaration, compact text syntax, and match search.

A pattern binds typed vertex variables, constrains them with edge
requirements and payload predicates, and may depend on other assignment
slots (a tuple with matching shared variables must or must not exist).
Search is anchored: callers pin some variables to concrete vertices or
payload values and the search only enumerates completions, which is what
keeps incremental matching proportional to the change.

Enumeration order is lexicographic by element id throughout, so results
and emitted delta orders are reproducible.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from . import expr as expr_mod
from .model import (
    AssignmentSet,
    ExternalRef,
    TypedGraph,
    VAR_KINDS,
    VERTEX_REF,
    Variable,
)


class PatternError(ValueError):
    """Malformed pattern declaration."""


@dataclass(frozen=True)
class EdgeConstraint:
    src: str
    edge_type: str
    tgt: str


@dataclass(frozen=True)
class DependencyConstraint:
    slot_id: str
    shared: tuple[str, ...]
    negative: bool


@dataclass(frozen=True)
class Pattern:
    variables: tuple[tuple[str, str], ...]  # (name, vertex type), declaration order
    edges: tuple[EdgeConstraint, ...] = ()
    predicates: tuple = ()  # parsed expression trees over payloads
    dependencies: tuple[DependencyConstraint, ...] = ()
    cross_product: bool = False

    def var_type(self, name: str) -> str:
        for var, vtype in self.variables:
            if var == name:
                return vtype
        raise PatternError(f"unknown pattern variable {name!r}")

    def var_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.variables)

    def validate(self) -> None:
        names = self.var_names()
        if len(set(names)) != len(names):
            raise PatternError(f"duplicate pattern variables in {names}")
        for e in self.edges:
            if e.src not in names or e.tgt not in names:
                raise PatternError(f"edge constraint {e} uses undeclared variables")
        for p in self.predicates:
            unknown = expr_mod.free_vars(p) - set(names)
            if unknown:
                raise PatternError(f"predicate references unknown variables {sorted(unknown)}")
            if expr_mod.has_aggregate(p):
                raise PatternError("pattern predicates cannot aggregate")
        for d in self.dependencies:
            unknown = set(d.shared) - set(names)
            if unknown:
                raise PatternError(
                    f"dependency on {d.slot_id!r} shares unknown variables {sorted(unknown)}"
                )
        if not self.cross_product and len(self._components()) > 1:
            raise PatternError(
                "pattern variables are not connected; declare 'cross' to allow"
                " a cross product"
            )

    def _components(self) -> list[set[str]]:
        remaining = set(self.var_names())
        adjacency: dict[str, set[str]] = {v: set() for v in remaining}
        for e in self.edges:
            adjacency[e.src].add(e.tgt)
            adjacency[e.tgt].add(e.src)
        components = []
        while remaining:
            seed = remaining.pop()
            comp = {seed}
            stack = [seed]
            while stack:
                for nxt in adjacency[stack.pop()]:
                    if nxt not in comp:
                        comp.add(nxt)
                        remaining.discard(nxt)
                        stack.append(nxt)
            components.append(comp)
        return components


_TERM = re.compile(r"^\s*([A-Za-z_]\w*)(?:\s*:\s*([A-Za-z_]\w*))?\s*$")
_EDGE = re.compile(r"^(.*?)-\s*([A-Za-z_]\w*)\s*->(.*)$")
_DEP = re.compile(r"^\s*(exists|absent)\s*\(\s*([A-Za-z_]\w*)\s*:\s*(.*?)\s*\)\s*$")


def parse_pattern(source) -> Pattern:
    """Accept either the compact text syntax or a structured mapping.

    Text clauses are ';'-separated: `p:Package -contains-> t:Type`
    declares variables at first mention and requires an edge;
    `where <expr>` filters on payloads; `exists(slot: x, y)` and
    `absent(slot: x)` declare dependencies; `cross` permits a
    disconnected variable graph.
    """
    if isinstance(source, Pattern):
        source.validate()
        return source
    if isinstance(source, Mapping):
        pattern = Pattern(
            variables=tuple((n, t) for n, t in source["vars"]),
            edges=tuple(EdgeConstraint(*e) for e in source.get("edges", ())),
            predicates=tuple(
                expr_mod.parse_expr(w) for w in source.get("where", ())
            ),
            dependencies=tuple(
                DependencyConstraint(
                    d["slot"], tuple(d["vars"]), bool(d.get("negative", False))
                )
                for d in source.get("deps", ())
            ),
            cross_product=bool(source.get("cross", False)),
        )
        pattern.validate()
        return pattern

    variables: dict[str, str] = {}
    edges: list[EdgeConstraint] = []
    predicates: list = []
    dependencies: list[DependencyConstraint] = []
    cross = False

    def term(text: str) -> str:
        m = _TERM.match(text)
        if not m:
            raise PatternError(f"bad variable term {text!r}")
        name, vtype = m.group(1), m.group(2)
        if vtype is not None:
            if name in variables and variables[name] != vtype:
                raise PatternError(f"variable {name!r} redeclared as {vtype!r}")
            variables.setdefault(name, vtype)
        elif name not in variables:
            raise PatternError(f"variable {name!r} used before a typed declaration")
        return name

    for raw in str(source).split(";"):
        clause = raw.strip()
        if not clause:
            continue
        if clause == "cross":
            cross = True
            continue
        if clause.startswith("where "):
            predicates.append(expr_mod.parse_expr(clause[len("where ") :]))
            continue
        dep = _DEP.match(clause)
        if dep:
            kind, slot_id, var_list = dep.groups()
            shared = tuple(v.strip() for v in var_list.split(",") if v.strip())
            dependencies.append(DependencyConstraint(slot_id, shared, kind == "absent"))
            continue
        edge = _EDGE.match(clause)
        if edge:
            src_text, edge_type, tgt_text = edge.groups()
            edges.append(EdgeConstraint(term(src_text), edge_type, term(tgt_text)))
            continue
        term(clause)

    pattern = Pattern(
        variables=tuple(variables.items()),
        edges=tuple(edges),
        predicates=tuple(predicates),
        dependencies=tuple(dependencies),
        cross_product=cross,
    )
    pattern.validate()
    return pattern


def pattern_to_text(pattern: Pattern) -> str:
    """Compact text form; inverse of `parse_pattern` up to clause order."""
    clauses = []
    mentioned: set[str] = set()

    def term(name: str) -> str:
        if name in mentioned:
            return name
        mentioned.add(name)
        return f"{name}:{pattern.var_type(name)}"

    for e in pattern.edges:
        clauses.append(f"{term(e.src)} -{e.edge_type}-> {term(e.tgt)}")
    for name, _ in pattern.variables:
        if name not in mentioned:
            clauses.append(term(name))
    for d in pattern.dependencies:
        kind = "absent" if d.negative else "exists"
        clauses.append(f"{kind}({d.slot_id}: {', '.join(d.shared)})")
    if pattern.cross_product:
        clauses.append("cross")
    return "; ".join(clauses)


# -- search ------------------------------------------------------------------


def _dependency_key(
    pattern_binding: Mapping[str, str],
    graph: TypedGraph,
    dep: DependencyConstraint,
    dep_content: AssignmentSet,
) -> Optional[tuple]:
    """Key tuple aligning the binding with the dependency slot's
    variables; ref-kind shared variables carry the vertex id, primitive
    ones the payload."""
    kinds = {v.name: v.kind for v in dep_content.variables}
    key = []
    for name in dep.shared:
        vid = pattern_binding[name]
        kind = kinds.get(name)
        if kind is None:
            return None
        if kind in (VERTEX_REF, "edgeRef"):
            key.append(vid)
        else:
            payload = graph.vertex(vid).payload if graph.has_vertex(vid) else None
            if payload is None:
                return None
            key.append(payload)
    return tuple(key)


def _binding_ok(
    pattern: Pattern,
    graph: TypedGraph,
    binding: Mapping[str, str],
    payload_pins: Mapping[str, object],
) -> bool:
    """Full check of a complete binding: edges, payload pins, predicates,
    and dependencies are all verified against the current contents."""
    for name, vid in binding.items():
        if not graph.has_vertex(vid):
            return False
        if graph.vertex(vid).type != pattern.var_type(name):
            return False
    for e in pattern.edges:
        src, tgt = binding[e.src], binding[e.tgt]
        if not any(
            edge.tgt == tgt
            for edge in graph.edges_from(src, e.edge_type)
            if not isinstance(edge.tgt, ExternalRef)
        ):
            return False
    for name, wanted in payload_pins.items():
        if graph.vertex(binding[name]).payload != wanted:
            return False
    if pattern.predicates:
        env = {}
        for name in binding:
            payload = graph.vertex(binding[name]).payload
            if payload is not None:
                env[name] = payload
        for predicate in pattern.predicates:
            if not expr_mod.free_vars(predicate) <= set(env):
                return False  # payload-less vertex cannot satisfy the clause
            if expr_mod.evaluate(predicate, env) is not True:
                return False
    return True


def _deps_ok(
    pattern: Pattern,
    graph: TypedGraph,
    binding: Mapping[str, str],
    dep_contents: Mapping[str, AssignmentSet],
) -> bool:
    for dep in pattern.dependencies:
        content = dep_contents[dep.slot_id]
        key = _dependency_key(binding, graph, dep, content)
        if key is None:
            return False
        positions = content.positions(dep.shared)
        hits = content.lookup(positions, key)
        if dep.negative and hits:
            return False
        if not dep.negative and not hits:
            return False
    return True


def find_matches(
    pattern: Pattern,
    graph: TypedGraph,
    dep_contents: Mapping[str, AssignmentSet],
    pinned: Optional[Mapping[str, str]] = None,
    payload_pins: Optional[Mapping[str, object]] = None,
) -> list[dict[str, str]]:
    """All complete bindings extending `pinned`, in lexicographic order.

    `payload_pins` restricts a variable to vertices with a given payload
    without fixing the vertex.  Unpinned variables are grown outward from
    bound ones along edge constraints where possible; only variables with
    no bound neighbor fall back to a full scan of their type.
    """
    pinned = dict(pinned or {})
    payload_pins = dict(payload_pins or {})
    for name, vid in pinned.items():
        if not graph.has_vertex(vid) or graph.vertex(vid).type != pattern.var_type(name):
            return []

    order = [name for name, _ in pattern.variables if name not in pinned]
    results: list[dict[str, str]] = []

    def candidates(name: str, binding: dict[str, str]) -> list[str]:
        vtype = pattern.var_type(name)
        hits: Optional[set[str]] = None
        for e in pattern.edges:
            if e.tgt == name and e.src in binding:
                found = {
                    edge.tgt
                    for edge in graph.edges_from(binding[e.src], e.edge_type)
                    if not isinstance(edge.tgt, ExternalRef)
                }
                hits = found if hits is None else hits & found
            elif e.src == name and e.tgt in binding:
                found = {
                    edge.src
                    for edge in graph.edges_to(binding[e.tgt], e.edge_type)
                    if not isinstance(edge.src, ExternalRef)
                }
                hits = found if hits is None else hits & found
        if hits is None:
            hits = {v.id for v in graph.vertices() if v.type == vtype}
        out = [
            vid
            for vid in hits
            if graph.has_vertex(vid) and graph.vertex(vid).type == vtype
        ]
        if name in payload_pins:
            out = [vid for vid in out if graph.vertex(vid).payload == payload_pins[name]]
        return sorted(out)

    def next_var(binding: dict[str, str], remaining: list[str]) -> str:
        for name in remaining:
            for e in pattern.edges:
                if (e.src == name and e.tgt in binding) or (
                    e.tgt == name and e.src in binding
                ):
                    return name
        return remaining[0]

    def search(binding: dict[str, str], remaining: list[str]) -> None:
        if not remaining:
            if _binding_ok(pattern, graph, binding, payload_pins) and _deps_ok(
                pattern, graph, binding, dep_contents
            ):
                results.append(dict(binding))
            return
        name = next_var(binding, remaining)
        rest = [v for v in remaining if v != name]
        for vid in candidates(name, binding):
            binding[name] = vid
            search(binding, rest)
            del binding[name]

    search(dict(pinned), order)
    return results


def binding_to_tuple(
    pattern: Pattern,
    graph: TypedGraph,
    out_vars: Sequence[Variable],
    binding: Mapping[str, str],
) -> Optional[tuple]:
    """Project a binding onto the output variable list.  Ref variables
    carry the vertex id; primitive ones carry the payload, and a binding
    without a fitting payload produces no tuple."""
    values = []
    for var in out_vars:
        vid = binding[var.name]
        if var.kind in (VERTEX_REF, "edgeRef"):
            values.append(vid)
            continue
        payload = graph.vertex(vid).payload if graph.has_vertex(vid) else None
        if payload is None:
            return None
        values.append(payload)
    result = tuple(values)
    try:
        probe = AssignmentSet(out_vars)
        probe.check_tuple(result)
    except Exception:
        return None
    return result


def tuple_supported(
    pattern: Pattern,
    graph: TypedGraph,
    dep_contents: Mapping[str, AssignmentSet],
    out_vars: Sequence[Variable],
    out_tuple: tuple,
) -> bool:
    """Does any binding still project to this output tuple?  Used to
    re-verify candidate removals against post-delta contents."""
    pinned: dict[str, str] = {}
    payload_pins: dict[str, object] = {}
    for var, value in zip(out_vars, out_tuple):
        if var.kind in (VERTEX_REF, "edgeRef"):
            pinned[var.name] = value
        else:
            payload_pins[var.name] = value
    return bool(find_matches(pattern, graph, dep_contents, pinned, payload_pins))
