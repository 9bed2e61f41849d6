"""Model synchronization nodes driven by correspondence rules.

A rule set maps source vertex types to target elements (one or more
roles) and source edge types to target edges between correspondents.
Element ids are derived deterministically and injectively, so the whole
translation is a function of the source model; a correspondence model
(a linking graph of link vertices with `source`/`target` reference
edges) traces every vertex pair and drives deletion.

Derived ids append "@<role>"; ids created by inverse propagation append
"@~<role>" instead, and the forward derivation strips that marker again.
The two maps are therefore mutually inverse, which is what keeps a
bidirectionally synchronized pair consistent under edits on either side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .model import (
    Content,
    DeltaSeq,
    Edge,
    EdgeAdd,
    EdgeRemove,
    ExternalRef,
    TypedGraph,
    Vertex,
    VertexAdd,
    VertexRemove,
    apply_one,
    endpoint_key,
    normalize_deltas,
)
from .network import (
    DomainMismatchError,
    MODEL,
    OperationNode,
    Slot,
    TRANSFORMATION,
    Valuation,
)

CORR_TYPE = "Corr"
CORR_SOURCE = "source"
CORR_TARGET = "target"


class ConsistencyError(Exception):
    """The correspondence model contradicts the rule set or the models."""


class ConflictError(Exception):
    """Concurrent edits on both sides touched corresponding elements."""


@dataclass(frozen=True)
class TargetSpec:
    role: str
    type: str
    payload: str = "none"  # "none" | "copy"


@dataclass(frozen=True)
class VertexRule:
    anchor: str  # source vertex type
    targets: tuple[TargetSpec, ...]


@dataclass(frozen=True)
class TargetEdgeSpec:
    suffix: str
    type: str
    from_role: str
    to_role: str


@dataclass(frozen=True)
class EdgeRule:
    anchor: str  # source edge type
    targets: tuple[TargetEdgeSpec, ...]


@dataclass(frozen=True)
class SyncRuleSet:
    vertex_rules: tuple[VertexRule, ...]
    edge_rules: tuple[EdgeRule, ...]

    def validate(self) -> None:
        seen_v = set()
        roles_by_anchor: dict[str, set[str]] = {}
        for rule in self.vertex_rules:
            if rule.anchor in seen_v:
                raise ValueError(f"overlapping vertex rules for anchor {rule.anchor!r}")
            seen_v.add(rule.anchor)
            roles = [t.role for t in rule.targets]
            if len(set(roles)) != len(roles):
                raise ValueError(f"rule {rule.anchor!r}: duplicate roles {roles}")
            for t in rule.targets:
                if "@" in t.role:
                    raise ValueError(f"role {t.role!r} may not contain '@'")
                if t.payload not in ("none", "copy"):
                    raise ValueError(f"bad payload mode {t.payload!r}")
            roles_by_anchor[rule.anchor] = set(roles)
        seen_e = set()
        for rule in self.edge_rules:
            if rule.anchor in seen_e:
                raise ValueError(f"overlapping edge rules for anchor {rule.anchor!r}")
            seen_e.add(rule.anchor)
            suffixes = [t.suffix for t in rule.targets]
            if len(set(suffixes)) != len(suffixes):
                raise ValueError(f"rule {rule.anchor!r}: duplicate suffixes {suffixes}")
            for t in rule.targets:
                if "@" in t.suffix:
                    raise ValueError(f"suffix {t.suffix!r} may not contain '@'")

    def vertex_rule(self, anchor: str) -> Optional[VertexRule]:
        for rule in self.vertex_rules:
            if rule.anchor == anchor:
                return rule
        return None

    def edge_rule(self, anchor: str) -> Optional[EdgeRule]:
        for rule in self.edge_rules:
            if rule.anchor == anchor:
                return rule
        return None

    def all_suffixes(self) -> list[str]:
        return [t.suffix for rule in self.edge_rules for t in rule.targets]

    def invertible(self) -> bool:
        target_types = [t.type for r in self.vertex_rules for t in r.targets]
        edge_types = [t.type for r in self.edge_rules for t in r.targets]
        return (
            all(len(r.targets) == 1 for r in self.vertex_rules)
            and all(len(r.targets) == 1 for r in self.edge_rules)
            and len(set(target_types)) == len(target_types)
            and len(set(edge_types)) == len(edge_types)
        )

    def inverse_vertex_rule(self, target_type: str) -> Optional[tuple[str, TargetSpec]]:
        for rule in self.vertex_rules:
            for t in rule.targets:
                if t.type == target_type:
                    return rule.anchor, t
        return None

    def inverse_edge_rule(self, target_type: str) -> Optional[tuple[EdgeRule, TargetEdgeSpec]]:
        for rule in self.edge_rules:
            for t in rule.targets:
                if t.type == target_type:
                    return rule, t
        return None

    def to_json(self) -> dict:
        return {
            "vertexRules": [
                {
                    "anchor": r.anchor,
                    "targets": [
                        {"role": t.role, "type": t.type, "payload": t.payload}
                        for t in r.targets
                    ],
                }
                for r in self.vertex_rules
            ],
            "edgeRules": [
                {
                    "anchor": r.anchor,
                    "targets": [
                        {
                            "suffix": t.suffix,
                            "type": t.type,
                            "from": t.from_role,
                            "to": t.to_role,
                        }
                        for t in r.targets
                    ],
                }
                for r in self.edge_rules
            ],
        }

    @staticmethod
    def from_json(data: Mapping) -> "SyncRuleSet":
        rules = SyncRuleSet(
            vertex_rules=tuple(
                VertexRule(
                    r["anchor"],
                    tuple(
                        TargetSpec(t["role"], t["type"], t.get("payload", "none"))
                        for t in r["targets"]
                    ),
                )
                for r in data.get("vertexRules", ())
            ),
            edge_rules=tuple(
                EdgeRule(
                    r["anchor"],
                    tuple(
                        TargetEdgeSpec(t["suffix"], t["type"], t["from"], t["to"])
                        for t in r["targets"]
                    ),
                )
                for r in data.get("edgeRules", ())
            ),
        )
        rules.validate()
        return rules


def derive_vertex(source_id: str, role: str) -> str:
    """Forward vertex id; strips an inverse marker instead of stacking."""
    marker = f"@~{role}"
    if source_id.endswith(marker):
        return source_id[: -len(marker)]
    return f"{source_id}@{role}"


def underive_vertex(target_id: str, role: str) -> str:
    """Source id whose forward derivation yields `target_id`."""
    suffix = f"@{role}"
    if target_id.endswith(suffix):
        return target_id[: -len(suffix)]
    return f"{target_id}@~{role}"


def derive_edge(source_id: str, suffix: str) -> str:
    marker = f"@~{suffix}"
    if source_id.endswith(marker):
        return source_id[: -len(marker)]
    return f"{source_id}@{suffix}"


def underive_edge(target_id: str, suffix: str) -> str:
    tail = f"@{suffix}"
    if target_id.endswith(tail):
        return target_id[: -len(tail)]
    return f"{target_id}@~{suffix}"


def corr_id(source_id: str, role: str) -> str:
    return f"{source_id}@{role}@corr"


class _CorrView:
    """Correspondence lookup over current corr content plus the links
    created or removed earlier in the same update call."""

    def __init__(self, corr: TypedGraph, src_slot: str, tgt_slot: str):
        self.corr = corr
        self.src_slot = src_slot
        self.tgt_slot = tgt_slot
        self.pending: dict[tuple[str, str], str] = {}  # (source id, role) -> target id
        self.dropped: set[str] = set()  # corr vertex ids deleted this call

    def links_of_source(self, source_id: str) -> list[tuple[str, str, str]]:
        """(corr vertex id, role, target id) triples for a source vertex."""
        found = []
        ref = ExternalRef(self.src_slot, source_id)
        for edge in self.corr.edges_to(ref, CORR_SOURCE):
            cid = edge.src
            if cid in self.dropped:
                continue
            role = self.corr.vertex(cid).payload
            target_edges = self.corr.edges_from(cid, CORR_TARGET)
            if not target_edges:
                raise ConsistencyError(f"correspondence {cid!r} has no target link")
            tgt_ref = target_edges[0].tgt
            if not isinstance(tgt_ref, ExternalRef):
                raise ConsistencyError(f"correspondence {cid!r} target is not external")
            found.append((cid, role, tgt_ref.vertex_id))
        for (sid, role), tid in self.pending.items():
            if sid == source_id:
                found.append((corr_id(sid, role), role, tid))
        return sorted(found)

    def links_of_target(self, target_id: str) -> list[tuple[str, str, str]]:
        """(corr vertex id, role, source id) triples for a target vertex."""
        found = []
        ref = ExternalRef(self.tgt_slot, target_id)
        for edge in self.corr.edges_to(ref, CORR_TARGET):
            cid = edge.src
            if cid in self.dropped:
                continue
            role = self.corr.vertex(cid).payload
            source_edges = self.corr.edges_from(cid, CORR_SOURCE)
            if not source_edges:
                raise ConsistencyError(f"correspondence {cid!r} has no source link")
            src_ref = source_edges[0].tgt
            if not isinstance(src_ref, ExternalRef):
                raise ConsistencyError(f"correspondence {cid!r} source is not external")
            found.append((cid, role, src_ref.vertex_id))
        for (sid, role), tid in self.pending.items():
            if tid == target_id:
                found.append((corr_id(sid, role), role, sid))
        return sorted(found)

    def target_of(self, source_id: str, role: str) -> Optional[str]:
        hit = self.pending.get((source_id, role))
        if hit is not None:
            return hit
        for _, found_role, tid in self.links_of_source(source_id):
            if found_role == role:
                return tid
        return None

    def record_link(self, source_id: str, role: str, target_id: str) -> None:
        self.pending[(source_id, role)] = target_id

    def record_drop(self, corr_vertex_id: str) -> None:
        self.dropped.add(corr_vertex_id)
        for key, tid in list(self.pending.items()):
            if corr_id(*key) == corr_vertex_id:
                del self.pending[key]


def _corr_creation(src_slot: str, tgt_slot: str, source_id: str, role: str,
                   target_id: str) -> DeltaSeq:
    cid = corr_id(source_id, role)
    return [
        VertexAdd(cid, CORR_TYPE, role),
        EdgeAdd(f"{cid}@s", CORR_SOURCE, cid, ExternalRef(src_slot, source_id)),
        EdgeAdd(f"{cid}@t", CORR_TARGET, cid, ExternalRef(tgt_slot, target_id)),
    ]


def _corr_removal(cid: str) -> DeltaSeq:
    return [EdgeRemove(f"{cid}@s"), EdgeRemove(f"{cid}@t"), VertexRemove(cid)]


class SyncUni(OperationNode):
    """Unidirectional synchronization: source changes propagate to the
    target and correspondence models; correspondence input deltas are
    bookkeeping only."""

    node_class = TRANSFORMATION

    def __init__(self, op_id, rules: SyncRuleSet, inputs: Sequence[Slot],
                 outputs: Sequence[Slot]):
        super().__init__(op_id, [s.id for s in inputs], [s.id for s in outputs])
        rules.validate()
        if not (len(inputs) == 2 and all(s.kind == MODEL for s in inputs)):
            raise DomainMismatchError(f"op {op_id!r}: needs model inputs (source, corr)")
        if not (len(outputs) == 2 and all(s.kind == MODEL for s in outputs)):
            raise DomainMismatchError(f"op {op_id!r}: needs model outputs (target, corr)")
        if inputs[1].id != outputs[1].id:
            raise DomainMismatchError(
                f"op {op_id!r}: second input and second output must be the same"
                f" correspondence slot"
            )
        if not inputs[1].is_linking:
            raise DomainMismatchError(f"op {op_id!r}: correspondence slot must be linking")
        self.src_slot = inputs[0].id
        self.tgt_slot = outputs[0].id
        self.corr_slot = inputs[1].id
        if len({self.src_slot, self.tgt_slot, self.corr_slot}) != 3:
            raise DomainMismatchError(
                f"op {op_id!r}: source, target, and correspondence must be"
                f" three distinct slots"
            )
        self.rules = rules

    # -- forward propagation ----------------------------------------------

    def _forward(
        self,
        deltas: DeltaSeq,
        target: TypedGraph,
        corr: _CorrView,
        source: TypedGraph,
    ) -> tuple[DeltaSeq, DeltaSeq]:
        """Translate source deltas into target and correspondence deltas."""
        tgt_out: DeltaSeq = []
        corr_out: DeltaSeq = []
        tgt_present: dict[str, bool] = {}

        def target_has(eid_or_vid: str, edge: bool) -> bool:
            if eid_or_vid in tgt_present:
                return tgt_present[eid_or_vid]
            return target.has_edge(eid_or_vid) if edge else target.has_vertex(eid_or_vid)

        for d in deltas:
            if isinstance(d, VertexAdd):
                rule = self.rules.vertex_rule(d.vertex_type)
                if rule is None:
                    continue
                for spec in rule.targets:
                    tid = derive_vertex(d.vertex_id, spec.role)
                    if target_has(tid, edge=False):
                        raise ConsistencyError(
                            f"rule id collision: target vertex {tid!r} already exists"
                        )
                    payload = d.payload if spec.payload == "copy" else None
                    tgt_out.append(VertexAdd(tid, spec.type, payload))
                    tgt_present[tid] = True
                    corr_out.extend(
                        _corr_creation(self.src_slot, self.tgt_slot, d.vertex_id,
                                       spec.role, tid)
                    )
                    corr.record_link(d.vertex_id, spec.role, tid)
            elif isinstance(d, VertexRemove):
                for cid, _role, tid in corr.links_of_source(d.vertex_id):
                    corr_out.extend(_corr_removal(cid))
                    corr.record_drop(cid)
                    tgt_out.append(VertexRemove(tid))
                    tgt_present[tid] = False
            elif isinstance(d, EdgeAdd):
                rule = self.rules.edge_rule(d.edge_type)
                if rule is None:
                    continue
                for spec in rule.targets:
                    src_t = corr.target_of(endpoint_key(d.src), spec.from_role)
                    tgt_t = corr.target_of(endpoint_key(d.tgt), spec.to_role)
                    if src_t is None or tgt_t is None:
                        continue  # an endpoint was not translated with that role
                    fid = derive_edge(d.edge_id, spec.suffix)
                    if target_has(fid, edge=True):
                        raise ConsistencyError(
                            f"rule id collision: target edge {fid!r} already exists"
                        )
                    tgt_out.append(EdgeAdd(fid, spec.type, src_t, tgt_t))
                    tgt_present[fid] = True
            elif isinstance(d, EdgeRemove):
                for suffix in self.rules.all_suffixes():
                    fid = derive_edge(d.edge_id, suffix)
                    if target_has(fid, edge=True):
                        tgt_out.append(EdgeRemove(fid))
                        tgt_present[fid] = False
        return tgt_out, corr_out

    def update(self, val: Valuation) -> dict[str, DeltaSeq]:
        source: TypedGraph = val.content(self.src_slot)
        target: TypedGraph = val.content(self.tgt_slot)
        corr = _CorrView(val.content(self.corr_slot), self.src_slot, self.tgt_slot)
        tgt_out, corr_out = self._forward(
            self.cached(self.src_slot), target, corr, source
        )
        return {
            self.tgt_slot: normalize_deltas(tgt_out),
            self.corr_slot: normalize_deltas(corr_out),
        }

    def batch_semantics(self, val: Valuation) -> dict[str, Content]:
        """Full retranslation of the source; a pure function of the
        source model thanks to deterministic id derivation."""
        source: TypedGraph = val.content(self.src_slot)
        target = TypedGraph(self.tgt_slot)
        corr = TypedGraph(self.corr_slot, is_linking=True)
        translated: dict[tuple[str, str], str] = {}
        for v in sorted(source.vertices(), key=lambda v: v.id):
            rule = self.rules.vertex_rule(v.type)
            if rule is None:
                continue
            for spec in rule.targets:
                tid = derive_vertex(v.id, spec.role)
                target.add_vertex(
                    Vertex(tid, spec.type, v.payload if spec.payload == "copy" else None)
                )
                translated[(v.id, spec.role)] = tid
                for delta in _corr_creation(self.src_slot, self.tgt_slot, v.id,
                                            spec.role, tid):
                    apply_one(corr, delta)
        for e in sorted(source.edges(), key=lambda e: e.id):
            rule = self.rules.edge_rule(e.type)
            if rule is None:
                continue
            for spec in rule.targets:
                src_t = translated.get((endpoint_key(e.src), spec.from_role))
                tgt_t = translated.get((endpoint_key(e.tgt), spec.to_role))
                if src_t is None or tgt_t is None:
                    continue
                target.add_edge(Edge(derive_edge(e.id, spec.suffix), spec.type, src_t, tgt_t))
        return {self.tgt_slot: target, self.corr_slot: corr}


class SyncBi(SyncUni):
    """Bidirectional synchronization via invertible rules.

    Source deltas propagate forward, genuine target deltas propagate
    backward through the inverse rules; self-produced echo deltas are
    recognized through the correspondence model and ignored.  Concurrent
    edits touching corresponding elements raise ConflictError.
    """

    def __init__(self, op_id, rules: SyncRuleSet, inputs: Sequence[Slot],
                 outputs: Sequence[Slot]):
        if len(inputs) != 3 or len(outputs) != 3:
            raise DomainMismatchError(
                f"op {op_id!r}: needs (source, target, corr) as both inputs"
                f" and outputs"
            )
        if [s.id for s in inputs] != [s.id for s in outputs]:
            raise DomainMismatchError(
                f"op {op_id!r}: inputs and outputs must be the same three slots"
            )
        if not rules.invertible():
            raise DomainMismatchError(
                f"op {op_id!r}: rule set is not invertible (rules must create"
                f" exactly one target element with unique types)"
            )
        super().__init__(op_id, rules, [inputs[0], inputs[2]], [inputs[1], inputs[2]])
        self.input_slots = tuple(s.id for s in inputs)
        self.output_slots = tuple(s.id for s in outputs)

    def dir_delta(self, changed: set[str]) -> set[str]:
        changed = set(changed) & set(self.input_slots)
        if not changed:
            return set()
        if changed == {self.src_slot}:
            return {self.tgt_slot, self.corr_slot}
        if changed == {self.tgt_slot}:
            return {self.src_slot, self.corr_slot}
        return set(self.output_slots)

    # -- echo classification and inverse propagation ------------------------

    def _classify_target_delta(self, d, source: TypedGraph, corr: _CorrView) -> bool:
        """True when the delta is a genuine user edit that still needs
        backward propagation."""
        if isinstance(d, VertexAdd):
            return not corr.links_of_target(d.vertex_id)
        if isinstance(d, VertexRemove):
            return bool(corr.links_of_target(d.vertex_id))
        if isinstance(d, EdgeAdd):
            pair = self.rules.inverse_edge_rule(d.edge_type)
            if pair is None:
                raise ConsistencyError(
                    f"no inverse rule for target edge type {d.edge_type!r}"
                )
            _, spec = pair
            return not source.has_edge(underive_edge(d.edge_id, spec.suffix))
        if isinstance(d, EdgeRemove):
            for suffix in self.rules.all_suffixes():
                if source.has_edge(underive_edge(d.edge_id, suffix)):
                    return True
            return False
        return False

    def _backward(
        self, deltas: DeltaSeq, source: TypedGraph, corr: _CorrView
    ) -> tuple[DeltaSeq, DeltaSeq]:
        src_out: DeltaSeq = []
        corr_out: DeltaSeq = []
        src_present: dict[str, bool] = {}

        def source_has(element_id: str, edge: bool) -> bool:
            if element_id in src_present:
                return src_present[element_id]
            return source.has_edge(element_id) if edge else source.has_vertex(element_id)

        for d in deltas:
            if isinstance(d, VertexAdd):
                pair = self.rules.inverse_vertex_rule(d.vertex_type)
                if pair is None:
                    raise ConsistencyError(
                        f"no inverse rule for target vertex type {d.vertex_type!r}"
                    )
                anchor, spec = pair
                sid = underive_vertex(d.vertex_id, spec.role)
                if source_has(sid, edge=False):
                    raise ConsistencyError(
                        f"rule id collision: source vertex {sid!r} already exists"
                    )
                payload = d.payload if spec.payload == "copy" else None
                src_out.append(VertexAdd(sid, anchor, payload))
                src_present[sid] = True
                corr_out.extend(
                    _corr_creation(self.src_slot, self.tgt_slot, sid, spec.role,
                                   d.vertex_id)
                )
                corr.record_link(sid, spec.role, d.vertex_id)
            elif isinstance(d, VertexRemove):
                for cid, _role, sid in corr.links_of_target(d.vertex_id):
                    corr_out.extend(_corr_removal(cid))
                    corr.record_drop(cid)
                    src_out.append(VertexRemove(sid))
                    src_present[sid] = False
            elif isinstance(d, EdgeAdd):
                pair = self.rules.inverse_edge_rule(d.edge_type)
                if pair is None:
                    raise ConsistencyError(
                        f"no inverse rule for target edge type {d.edge_type!r}"
                    )
                rule, spec = pair
                eid = underive_edge(d.edge_id, spec.suffix)
                src_ends = corr.links_of_target(endpoint_key(d.src))
                tgt_ends = corr.links_of_target(endpoint_key(d.tgt))
                if not src_ends or not tgt_ends:
                    raise ConsistencyError(
                        f"target edge {d.edge_id!r} connects untranslated vertices"
                    )
                src_out.append(EdgeAdd(eid, rule.anchor, src_ends[0][2], tgt_ends[0][2]))
                src_present[eid] = True
            elif isinstance(d, EdgeRemove):
                for suffix in self.rules.all_suffixes():
                    eid = underive_edge(d.edge_id, suffix)
                    if source_has(eid, edge=True):
                        src_out.append(EdgeRemove(eid))
                        src_present[eid] = False
                        break
        return src_out, corr_out

    def _touched_source_ids(self, deltas: DeltaSeq, target_side: bool,
                            corr: _CorrView) -> set[str]:
        """Source-side identities touched by a delta batch; target-side
        deltas are mapped back through the correspondence or inverse
        derivation."""
        ids: set[str] = set()
        for d in deltas:
            if isinstance(d, (VertexAdd, VertexRemove)):
                raw = d.vertex_id
                if not target_side:
                    ids.add(raw)
                    continue
                links = corr.links_of_target(raw)
                if links:
                    ids.update(sid for _, _, sid in links)
                else:
                    pair = self.rules.inverse_vertex_rule(getattr(d, "vertex_type", ""))
                    if pair is not None:
                        ids.add(underive_vertex(raw, pair[1].role))
            elif isinstance(d, (EdgeAdd, EdgeRemove)):
                raw = d.edge_id
                if not target_side:
                    ids.add(raw)
                    continue
                for suffix in self.rules.all_suffixes():
                    ids.add(underive_edge(raw, suffix))
        return ids

    def update(self, val: Valuation) -> dict[str, DeltaSeq]:
        source: TypedGraph = val.content(self.src_slot)
        target: TypedGraph = val.content(self.tgt_slot)
        corr = _CorrView(val.content(self.corr_slot), self.src_slot, self.tgt_slot)
        src_deltas = self.cached(self.src_slot)
        genuine_tgt = [
            d
            for d in self.cached(self.tgt_slot)
            if self._classify_target_delta(d, source, corr)
        ]
        if src_deltas and genuine_tgt:
            forward_ids = self._touched_source_ids(src_deltas, False, corr)
            backward_ids = self._touched_source_ids(genuine_tgt, True, corr)
            clash = forward_ids & backward_ids
            if clash:
                raise ConflictError(
                    f"concurrent edits touch corresponding elements: {sorted(clash)}"
                )
        tgt_out, corr_fwd = self._forward(src_deltas, target, corr, source)
        src_out, corr_bwd = self._backward(genuine_tgt, source, corr)
        return {
            self.src_slot: normalize_deltas(src_out),
            self.tgt_slot: normalize_deltas(tgt_out),
            self.corr_slot: normalize_deltas(corr_fwd + corr_bwd),
        }

    def batch_semantics(self, val: Valuation) -> dict[str, Content]:
        realized = super().batch_semantics(val)
        realized[self.src_slot] = val.content(self.src_slot).copy()
        return realized
