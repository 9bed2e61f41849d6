"""Built-in operation node families.

RETE-style nodes (inputs, join, anti-join) and the group nodes are fully
incremental: one cached delta costs a constant number of index probes
plus work proportional to what they emit.  Pattern matching is anchored
at the changed elements and re-verifies only affected matches, which is
incremental in the common case but may rescan its output when a deleted
element could occur in a non-output variable.

Every node implements the same contract: `update` consumes the cached
deltas, `batch_semantics` recomputes outputs from scratch (the validity
oracle), and `dir_delta` names the outputs an update may touch.  Emitted
sequences are normalized so they never contain canceling pairs.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Optional, Sequence

from . import pattern as pattern_mod
from .instrumentation import PROBES
from .expr import (
    EvalError,
    agg_vars,
    evaluate,
    free_vars,
    has_aggregate,
    parse_expr,
)
from .model import (
    AssignmentSet,
    Content,
    DeltaSeq,
    EdgeAdd,
    EdgeRemove,
    INTEGER,
    NUMERIC_KINDS,
    TupleAdd,
    TupleRemove,
    TypedGraph,
    Variable,
    VertexAdd,
    VertexRemove,
    VERTEX_REF,
    EDGE_REF,
    endpoint_key,
    normalize_deltas,
)
from .network import (
    ASSIGNMENT,
    DomainMismatchError,
    MODEL,
    OperationNode,
    QUERY,
    Slot,
    Valuation,
)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise DomainMismatchError(message)


def _single_assignment_output(op_id: str, outputs: Sequence[Slot]) -> Slot:
    if len(outputs) != 1:
        raise DomainMismatchError(
            f"ArityViolation: query node {op_id!r} must have exactly one output"
            f" slot, has {len(outputs)}"
        )
    if outputs[0].kind != ASSIGNMENT:
        raise DomainMismatchError(
            f"DomainMismatch: query node {op_id!r} must output an assignment slot"
        )
    return outputs[0]


def _slot_kinds(slots: Sequence[Slot], kind: str) -> list[Slot]:
    return [s for s in slots if s.kind == kind]


class _Overlay:
    """View of an assignment set at some point of a delta replay.

    The base is the slot's current (post-delta) content; `rewound` walks
    the cached deltas backwards so consumers can replay them forward and
    always probe the state that was in effect when each delta happened.
    """

    def __init__(self, base: AssignmentSet):
        self.base = base
        self.plus: set[tuple] = set()
        self.minus: set[tuple] = set()

    @classmethod
    def rewound(cls, base: AssignmentSet, deltas: DeltaSeq) -> "_Overlay":
        view = cls(base)
        for d in reversed(deltas):
            if isinstance(d, TupleAdd):
                view._mark_absent(d.values)
            else:
                view._mark_present(d.values)
        return view

    def _mark_present(self, t: tuple) -> None:
        if t in self.minus:
            self.minus.discard(t)
        else:
            self.plus.add(t)

    def _mark_absent(self, t: tuple) -> None:
        if t in self.plus:
            self.plus.discard(t)
        else:
            self.minus.add(t)

    def step(self, delta) -> None:
        if isinstance(delta, TupleAdd):
            self._mark_present(delta.values)
        else:
            self._mark_absent(delta.values)

    def __contains__(self, t: tuple) -> bool:
        if t in self.plus:
            return True
        if t in self.minus:
            return False
        return t in self.base

    def lookup(self, positions: tuple[int, ...], key: tuple) -> set[tuple]:
        hits = set(self.base.lookup(positions, key))
        for t in self.minus:
            if tuple(t[i] for i in positions) == key:
                hits.discard(t)
        for t in self.plus:
            if tuple(t[i] for i in positions) == key:
                hits.add(t)
        return hits


def _replay_order(
    caches: Mapping[str, DeltaSeq], slot_order: Sequence[str]
) -> list[tuple[str, object]]:
    """Flatten per-slot caches into one replay sequence (per-slot order
    is preserved; cross-slot interleaving is canonical, not historical,
    which is harmless because the net effect is the same)."""
    merged = []
    for sid in slot_order:
        merged.extend((sid, d) for d in caches.get(sid, ()))
    return merged


class NodeInput(OperationNode):
    """Extracts the vertices of one type from a model as 1-tuples."""

    node_class = QUERY

    def __init__(self, op_id, vertex_type: str, inputs: Sequence[Slot], outputs: Sequence[Slot]):
        super().__init__(op_id, [s.id for s in inputs], [s.id for s in outputs])
        _require(len(inputs) == 1 and inputs[0].kind == MODEL,
                 f"op {op_id!r}: needs exactly one model input")
        _single_assignment_output(op_id, outputs)
        _require(len(outputs[0].variables) == 1
                 and outputs[0].variables[0].kind == VERTEX_REF,
                 f"op {op_id!r}: output needs a single vertexRef variable")
        _require(not set(self.input_slots) & set(self.output_slots),
                 f"op {op_id!r}: output slot may not also be an input")
        self.vertex_type = vertex_type

    def update(self, val: Valuation) -> dict[str, DeltaSeq]:
        out_slot = self.output_slots[0]
        out_content = val.content(out_slot)
        view = _Overlay(out_content)
        emitted: DeltaSeq = []
        for d in self.cached(self.input_slots[0]):
            if isinstance(d, VertexAdd) and d.vertex_type == self.vertex_type:
                t = (d.vertex_id,)
                if t not in view:
                    emitted.append(TupleAdd(t))
                    view.step(emitted[-1])
            elif isinstance(d, VertexRemove):
                t = (d.vertex_id,)
                if t in view:
                    emitted.append(TupleRemove(t))
                    view.step(emitted[-1])
        return {out_slot: normalize_deltas(emitted)}

    def batch_semantics(self, val: Valuation) -> dict[str, Content]:
        out = AssignmentSet(val.slot(self.output_slots[0]).variables)
        graph: TypedGraph = val.content(self.input_slots[0])
        for v in sorted(graph.vertices(), key=lambda v: v.id):
            if v.type == self.vertex_type:
                out.add((v.id,))
        return {self.output_slots[0]: out}


class EdgeInput(OperationNode):
    """Extracts the edges of one type from a model as (edge, src, tgt)."""

    node_class = QUERY

    def __init__(self, op_id, edge_type: str, inputs: Sequence[Slot], outputs: Sequence[Slot]):
        super().__init__(op_id, [s.id for s in inputs], [s.id for s in outputs])
        _require(len(inputs) == 1 and inputs[0].kind == MODEL,
                 f"op {op_id!r}: needs exactly one model input")
        _single_assignment_output(op_id, outputs)
        kinds = tuple(v.kind for v in outputs[0].variables)
        _require(kinds == (EDGE_REF, VERTEX_REF, VERTEX_REF),
                 f"op {op_id!r}: output variables must be (edgeRef, vertexRef, vertexRef)")
        _require(not set(self.input_slots) & set(self.output_slots),
                 f"op {op_id!r}: output slot may not also be an input")
        self.edge_type = edge_type

    def update(self, val: Valuation) -> dict[str, DeltaSeq]:
        out_slot = self.output_slots[0]
        out_content: AssignmentSet = val.content(out_slot)
        emitted: DeltaSeq = []
        added: dict[str, tuple] = {}
        removed: set[str] = set()
        for d in self.cached(self.input_slots[0]):
            if isinstance(d, EdgeAdd) and d.edge_type == self.edge_type:
                t = (d.edge_id, endpoint_key(d.src), endpoint_key(d.tgt))
                added[d.edge_id] = t
                removed.discard(d.edge_id)
                emitted.append(TupleAdd(t))
            elif isinstance(d, EdgeRemove):
                if d.edge_id in added:
                    emitted.append(TupleRemove(added.pop(d.edge_id)))
                    continue
                if d.edge_id in removed:
                    continue
                hits = out_content.lookup((0,), (d.edge_id,))
                if hits:
                    removed.add(d.edge_id)
                    emitted.append(TupleRemove(next(iter(hits))))
        return {out_slot: normalize_deltas(emitted)}

    def batch_semantics(self, val: Valuation) -> dict[str, Content]:
        out = AssignmentSet(val.slot(self.output_slots[0]).variables)
        graph: TypedGraph = val.content(self.input_slots[0])
        for e in sorted(graph.edges(), key=lambda e: e.id):
            if e.type == self.edge_type:
                out.add((e.id, endpoint_key(e.src), endpoint_key(e.tgt)))
        return {self.output_slots[0]: out}


def _join_signature(left: Slot, right: Slot) -> tuple[list[str], list[Variable]]:
    """Shared variable names (kind-checked) and the joined variable list:
    all left variables, then the right-only ones."""
    left_kinds = {v.name: v.kind for v in left.variables}
    shared = []
    for v in right.variables:
        if v.name in left_kinds:
            _require(left_kinds[v.name] == v.kind,
                     f"shared variable {v.name!r} has kind {left_kinds[v.name]!r}"
                     f" on the left but {v.kind!r} on the right")
            shared.append(v.name)
    joined = list(left.variables) + [v for v in right.variables if v.name not in left_kinds]
    return shared, joined


class Join(OperationNode):
    """Natural join of two assignment slots on their shared variables."""

    node_class = QUERY

    def __init__(self, op_id, inputs: Sequence[Slot], outputs: Sequence[Slot]):
        super().__init__(op_id, [s.id for s in inputs], [s.id for s in outputs])
        _require(len(inputs) == 2 and all(s.kind == ASSIGNMENT for s in inputs),
                 f"op {op_id!r}: needs two assignment inputs")
        _single_assignment_output(op_id, outputs)
        _require(inputs[0].id != inputs[1].id,
                 f"op {op_id!r}: join inputs must be distinct slots")
        _require(not set(self.input_slots) & set(self.output_slots),
                 f"op {op_id!r}: output slot may not also be an input")
        left, right = inputs
        shared, joined = _join_signature(left, right)
        _require(tuple(joined) == outputs[0].variables,
                 f"op {op_id!r}: output variables must be {[f'{v.name}:{v.kind}' for v in joined]}")
        self.shared = tuple(shared)
        self._left_key = left.empty_content().positions(shared)
        self._right_key = right.empty_content().positions(shared)
        right_names = [v.name for v in right.variables]
        self._right_extra = tuple(
            i for i, v in enumerate(right.variables) if v.name not in {x.name for x in left.variables}
        )
        self._right_names = tuple(right_names)

    def _combine(self, left_t: tuple, right_t: tuple) -> tuple:
        return left_t + tuple(right_t[i] for i in self._right_extra)

    def update(self, val: Valuation) -> dict[str, DeltaSeq]:
        left_id, right_id = self.input_slots
        left_view = _Overlay.rewound(val.content(left_id), self.cached(left_id))
        right_view = _Overlay.rewound(val.content(right_id), self.cached(right_id))
        emitted: DeltaSeq = []
        for sid, d in _replay_order(self.delta_cache, self.input_slots):
            adding = isinstance(d, TupleAdd)
            if sid == left_id:
                key = tuple(d.values[i] for i in self._left_key)
                mates = right_view.lookup(self._right_key, key)
                pairs = [self._combine(d.values, r) for r in sorted(mates, key=repr)]
                left_view.step(d)
            else:
                key = tuple(d.values[i] for i in self._right_key)
                mates = left_view.lookup(self._left_key, key)
                pairs = [self._combine(l, d.values) for l in sorted(mates, key=repr)]
                right_view.step(d)
            emitted.extend(TupleAdd(p) if adding else TupleRemove(p) for p in pairs)
        return {self.output_slots[0]: normalize_deltas(emitted)}

    def batch_semantics(self, val: Valuation) -> dict[str, Content]:
        out = AssignmentSet(val.slot(self.output_slots[0]).variables)
        left: AssignmentSet = val.content(self.input_slots[0])
        right: AssignmentSet = val.content(self.input_slots[1])
        for l in left:
            key = tuple(l[i] for i in self._left_key)
            for r in right.lookup(self._right_key, key):
                combined = self._combine(l, r)
                if combined not in out:
                    out.add(combined)
        return {self.output_slots[0]: out}


class AntiJoin(OperationNode):
    """Left tuples with no right match on the shared variables."""

    node_class = QUERY

    def __init__(self, op_id, inputs: Sequence[Slot], outputs: Sequence[Slot]):
        super().__init__(op_id, [s.id for s in inputs], [s.id for s in outputs])
        _require(len(inputs) == 2 and all(s.kind == ASSIGNMENT for s in inputs),
                 f"op {op_id!r}: needs two assignment inputs")
        _single_assignment_output(op_id, outputs)
        _require(inputs[0].id != inputs[1].id,
                 f"op {op_id!r}: anti-join inputs must be distinct slots")
        _require(not set(self.input_slots) & set(self.output_slots),
                 f"op {op_id!r}: output slot may not also be an input")
        left, right = inputs
        shared, _ = _join_signature(left, right)
        _require(left.variables == outputs[0].variables,
                 f"op {op_id!r}: output variables must equal the left input's")
        self.shared = tuple(shared)
        self._left_key = left.empty_content().positions(shared)
        self._right_key = right.empty_content().positions(shared)

    def update(self, val: Valuation) -> dict[str, DeltaSeq]:
        left_id, right_id = self.input_slots
        left_view = _Overlay.rewound(val.content(left_id), self.cached(left_id))
        right_view = _Overlay.rewound(val.content(right_id), self.cached(right_id))
        emitted: DeltaSeq = []
        for sid, d in _replay_order(self.delta_cache, self.input_slots):
            adding = isinstance(d, TupleAdd)
            if sid == left_id:
                key = tuple(d.values[i] for i in self._left_key)
                unmatched = not right_view.lookup(self._right_key, key)
                if unmatched:
                    emitted.append(TupleAdd(d.values) if adding else TupleRemove(d.values))
                left_view.step(d)
            else:
                key = tuple(d.values[i] for i in self._right_key)
                before = len(right_view.lookup(self._right_key, key))
                right_view.step(d)
                after = len(right_view.lookup(self._right_key, key))
                if adding and before == 0 and after > 0:
                    for l in sorted(left_view.lookup(self._left_key, key), key=repr):
                        emitted.append(TupleRemove(l))
                elif not adding and before > 0 and after == 0:
                    for l in sorted(left_view.lookup(self._left_key, key), key=repr):
                        emitted.append(TupleAdd(l))
        return {self.output_slots[0]: normalize_deltas(emitted)}

    def batch_semantics(self, val: Valuation) -> dict[str, Content]:
        out = AssignmentSet(val.slot(self.output_slots[0]).variables)
        left: AssignmentSet = val.content(self.input_slots[0])
        right: AssignmentSet = val.content(self.input_slots[1])
        for l in sorted(left, key=repr):
            key = tuple(l[i] for i in self._left_key)
            if not right.lookup(self._right_key, key):
                out.add(l)
        return {self.output_slots[0]: out}


class GroupCount(OperationNode):
    """Tuple counts per group key, maintained as running counters."""

    node_class = QUERY
    _agg_kind_ok = staticmethod(lambda kind: kind == INTEGER)

    def __init__(self, op_id, by: Sequence[str], inputs: Sequence[Slot], outputs: Sequence[Slot]):
        super().__init__(op_id, [s.id for s in inputs], [s.id for s in outputs])
        _require(len(inputs) == 1 and inputs[0].kind == ASSIGNMENT,
                 f"op {op_id!r}: needs one assignment input")
        _single_assignment_output(op_id, outputs)
        _require(not set(self.input_slots) & set(self.output_slots),
                 f"op {op_id!r}: output slot may not also be an input")
        in_vars = {v.name: v for v in inputs[0].variables}
        _require(all(name in in_vars for name in by),
                 f"op {op_id!r}: grouping variables {list(by)} must be input variables")
        expected = tuple(in_vars[name] for name in by)
        out_vars = outputs[0].variables
        _require(out_vars[:-1] == expected,
                 f"op {op_id!r}: output must start with the grouping variables {list(by)}")
        _require(self._agg_kind_ok(out_vars[-1].kind),
                 f"op {op_id!r}: result variable kind {out_vars[-1].kind!r} does not fit")
        self.by = tuple(by)
        self._key_pos = inputs[0].empty_content().positions(by)
        self._state: Optional[dict[tuple, object]] = None

    def reset(self) -> None:
        super().reset()
        self._state = None

    def _measure(self, t: tuple):
        return 1

    def _state_add(self, state, key, t):
        state[key] = state.get(key, 0) + 1
        return state[key]

    def _state_remove(self, state, key, t):
        state[key] -= 1
        value = state[key]
        if value == 0:
            del state[key]
            return None
        return value

    def _state_value(self, state, key):
        PROBES.probe()
        return state.get(key)

    def _ensure_state(self, val: Valuation) -> dict:
        # First call replays the cache backwards from the post-delta
        # content so the counters start at the pre-delta grouping.
        if self._state is None:
            content: AssignmentSet = val.content(self.input_slots[0])
            view = _Overlay.rewound(content, self.cached(self.input_slots[0]))
            state: dict = {}
            for t in content:
                if t not in view.minus:
                    key = tuple(t[i] for i in self._key_pos)
                    self._state_add(state, key, t)
            for t in view.plus:
                key = tuple(t[i] for i in self._key_pos)
                self._state_add(state, key, t)
            self._state = state
        return self._state

    def update(self, val: Valuation) -> dict[str, DeltaSeq]:
        state = self._ensure_state(val)
        emitted: DeltaSeq = []
        for d in self.cached(self.input_slots[0]):
            key = tuple(d.values[i] for i in self._key_pos)
            old = self._state_value(state, key)
            if isinstance(d, TupleAdd):
                new = self._state_add(state, key, d.values)
            else:
                if old is None:
                    continue  # tolerated only if the cache is inconsistent
                new = self._state_remove(state, key, d.values)
            if old is not None:
                emitted.append(TupleRemove(key + (old,)))
            if new is not None:
                emitted.append(TupleAdd(key + (new,)))
        return {self.output_slots[0]: normalize_deltas(emitted)}

    def batch_semantics(self, val: Valuation) -> dict[str, Content]:
        out = AssignmentSet(val.slot(self.output_slots[0]).variables)
        groups: dict[tuple, object] = {}
        for t in val.content(self.input_slots[0]):
            key = tuple(t[i] for i in self._key_pos)
            self._state_add(groups, key, t)
        for key in groups:
            out.add(key + (self._state_value(groups, key),))
        return {self.output_slots[0]: out}


class GroupSum(GroupCount):
    """Running sums of one numeric variable per group key."""

    def __init__(self, op_id, by, over: str, inputs, outputs):
        if not (len(inputs) == 1 and inputs[0].kind == ASSIGNMENT):
            raise DomainMismatchError(f"op {op_id!r}: needs one assignment input")
        in_vars = {v.name: v for v in inputs[0].variables}
        if over not in in_vars:
            raise DomainMismatchError(f"op {op_id!r}: unknown sum variable {over!r}")
        if in_vars[over].kind not in NUMERIC_KINDS:
            raise DomainMismatchError(
                f"op {op_id!r}: cannot sum over non-numeric variable"
                f" {over}:{in_vars[over].kind}"
            )
        self._over_kind = in_vars[over].kind
        super().__init__(op_id, by, inputs, outputs)
        self.over = over
        self._over_pos = inputs[0].empty_content().positions([over])[0]

    def _agg_kind_ok(self, kind):
        return kind == self._over_kind

    # counters hold (sum, count) so a group vanishing is distinguishable
    # from a group summing to zero

    def _state_add(self, state, key, t):
        total, n = state.get(key, (0, 0))
        state[key] = (total + t[self._over_pos], n + 1)
        return state[key][0]

    def _state_remove(self, state, key, t):
        total, n = state[key]
        if n == 1:
            del state[key]
            return None
        state[key] = (total - t[self._over_pos], n - 1)
        return state[key][0]

    def _state_value(self, state, key):
        PROBES.probe()
        entry = state.get(key)
        return None if entry is None else entry[0]


class Expression(OperationNode):
    """Appends one computed variable to every input tuple."""

    node_class = QUERY

    def __init__(self, op_id, expr_text: str, inputs: Sequence[Slot], outputs: Sequence[Slot]):
        super().__init__(op_id, [s.id for s in inputs], [s.id for s in outputs])
        _require(len(inputs) == 1 and inputs[0].kind == ASSIGNMENT,
                 f"op {op_id!r}: needs one assignment input")
        _single_assignment_output(op_id, outputs)
        _require(not set(self.input_slots) & set(self.output_slots),
                 f"op {op_id!r}: output slot may not also be an input")
        _require(outputs[0].variables[:-1] == inputs[0].variables,
                 f"op {op_id!r}: output must extend the input variables by one")
        self.expr_text = expr_text
        self.tree = parse_expr(expr_text)
        _require(not has_aggregate(self.tree),
                 f"op {op_id!r}: aggregates need a group expression node")
        names = {v.name for v in inputs[0].variables}
        unknown = free_vars(self.tree) - names
        _require(not unknown, f"op {op_id!r}: unknown variables {sorted(unknown)}")
        self._names = tuple(v.name for v in inputs[0].variables)

    def _result(self, t: tuple):
        return evaluate(self.tree, dict(zip(self._names, t)))

    def update(self, val: Valuation) -> dict[str, DeltaSeq]:
        emitted: DeltaSeq = []
        for d in self.cached(self.input_slots[0]):
            extended = d.values + (self._result(d.values),)
            emitted.append(TupleAdd(extended) if isinstance(d, TupleAdd) else TupleRemove(extended))
        return {self.output_slots[0]: normalize_deltas(emitted)}

    def batch_semantics(self, val: Valuation) -> dict[str, Content]:
        out = AssignmentSet(val.slot(self.output_slots[0]).variables)
        for t in sorted(val.content(self.input_slots[0]), key=repr):
            out.add(t + (self._result(t),))
        return {self.output_slots[0]: out}


class GroupExpression(OperationNode):
    """One collection expression per group, recomputed for touched groups."""

    node_class = QUERY

    def __init__(self, op_id, by: Sequence[str], expr_text: str,
                 inputs: Sequence[Slot], outputs: Sequence[Slot]):
        super().__init__(op_id, [s.id for s in inputs], [s.id for s in outputs])
        _require(len(inputs) == 1 and inputs[0].kind == ASSIGNMENT,
                 f"op {op_id!r}: needs one assignment input")
        _single_assignment_output(op_id, outputs)
        _require(not set(self.input_slots) & set(self.output_slots),
                 f"op {op_id!r}: output slot may not also be an input")
        in_vars = {v.name: v for v in inputs[0].variables}
        _require(all(name in in_vars for name in by),
                 f"op {op_id!r}: grouping variables {list(by)} must be input variables")
        expected = tuple(in_vars[name] for name in by)
        _require(outputs[0].variables[:-1] == expected,
                 f"op {op_id!r}: output must start with the grouping variables")
        self.by = tuple(by)
        self.expr_text = expr_text
        self.tree = parse_expr(expr_text)
        bare = free_vars(self.tree) - set(by)
        _require(not bare,
                 f"op {op_id!r}: non-aggregated variables {sorted(bare)} must be grouping variables")
        unknown = agg_vars(self.tree) - set(in_vars)
        _require(not unknown, f"op {op_id!r}: unknown aggregate variables {sorted(unknown)}")
        self._key_pos = inputs[0].empty_content().positions(by)
        self._names = tuple(v.name for v in inputs[0].variables)
        self._out_key_pos = tuple(range(len(by)))

    def _group_value(self, key: tuple, rows: Iterable[tuple]):
        env = dict(zip(self.by, key))
        row_envs = [dict(zip(self._names, r)) for r in rows]
        return evaluate(self.tree, env, row_envs)

    def update(self, val: Valuation) -> dict[str, DeltaSeq]:
        in_content: AssignmentSet = val.content(self.input_slots[0])
        out_content: AssignmentSet = val.content(self.output_slots[0])
        touched = []
        seen = set()
        for d in self.cached(self.input_slots[0]):
            key = tuple(d.values[i] for i in self._key_pos)
            if key not in seen:
                seen.add(key)
                touched.append(key)
        emitted: DeltaSeq = []
        for key in touched:
            old = out_content.lookup(self._out_key_pos, key)
            rows = in_content.lookup(self._key_pos, key)
            if rows:
                new_tuple = key + (self._group_value(key, sorted(rows, key=repr)),)
            else:
                new_tuple = None
            for t in sorted(old, key=repr):
                if t != new_tuple:
                    emitted.append(TupleRemove(t))
            if new_tuple is not None and new_tuple not in old:
                emitted.append(TupleAdd(new_tuple))
        return {self.output_slots[0]: normalize_deltas(emitted)}

    def batch_semantics(self, val: Valuation) -> dict[str, Content]:
        out = AssignmentSet(val.slot(self.output_slots[0]).variables)
        groups: dict[tuple, list[tuple]] = {}
        for t in val.content(self.input_slots[0]):
            groups.setdefault(tuple(t[i] for i in self._key_pos), []).append(t)
        for key, rows in groups.items():
            out.add(key + (self._group_value(key, sorted(rows, key=repr)),))
        return {self.output_slots[0]: out}


class PatternMatch(OperationNode):
    """Anchored incremental matching of a graph pattern into a model."""

    node_class = QUERY

    def __init__(self, op_id, pat, inputs: Sequence[Slot], outputs: Sequence[Slot]):
        super().__init__(op_id, [s.id for s in inputs], [s.id for s in outputs])
        models = _slot_kinds(inputs, MODEL)
        _require(len(models) == 1, f"op {op_id!r}: needs exactly one model input")
        _single_assignment_output(op_id, outputs)
        _require(not set(self.input_slots) & set(self.output_slots),
                 f"op {op_id!r}: output slot may not also be an input")
        self.pattern = pattern_mod.parse_pattern(pat)
        self.model_slot = models[0].id
        dep_slots = {s.id for s in _slot_kinds(inputs, ASSIGNMENT)}
        declared = {d.slot_id for d in self.pattern.dependencies}
        _require(dep_slots == declared,
                 f"op {op_id!r}: dependency slots {sorted(declared)} must equal the"
                 f" assignment inputs {sorted(dep_slots)}")
        names = set(self.pattern.var_names())
        self.out_vars = outputs[0].variables
        for v in self.out_vars:
            _require(v.name in names,
                     f"op {op_id!r}: output variable {v.name!r} is not a pattern variable")
        self._out_by_name = {v.name: i for i, v in enumerate(self.out_vars)}
        self._relevant_edge_types = {e.edge_type for e in self.pattern.edges}
        self._var_types = dict(self.pattern.variables)
        self._non_output_types = {
            t for n, t in self.pattern.variables if n not in self._out_by_name
        }
        # id -> (type, payload) / (edge type, src, tgt) mirrors: removals
        # carry only ids, so the pre-state facts must be remembered here.
        self._vertex_mirror: dict[str, tuple[str, object]] = {}
        self._edge_mirror: dict[str, tuple[str, str, str]] = {}

    def reset(self) -> None:
        super().reset()
        self._vertex_mirror.clear()
        self._edge_mirror.clear()

    def _dep_contents(self, val: Valuation) -> dict[str, AssignmentSet]:
        return {
            d.slot_id: val.content(d.slot_id) for d in self.pattern.dependencies
        }

    def _dep_pins(self, dep: pattern_mod.DependencyConstraint, values: tuple,
                  dep_content: AssignmentSet):
        kinds = {v.name: v.kind for v in dep_content.variables}
        positions = dep_content.positions(dep.shared)
        pinned, payload_pins = {}, {}
        for name, pos in zip(dep.shared, positions):
            if kinds[name] in (VERTEX_REF, EDGE_REF):
                pinned[name] = values[pos]
            else:
                payload_pins[name] = values[pos]
        return pinned, payload_pins

    def update(self, val: Valuation) -> dict[str, DeltaSeq]:
        graph: TypedGraph = val.content(self.model_slot)
        deps = self._dep_contents(val)
        out_content: AssignmentSet = val.content(self.output_slots[0])

        anchors: list[tuple[dict, dict]] = []
        candidates: set[tuple] = set()
        recheck_all = False

        for d in self.cached(self.model_slot):
            if isinstance(d, VertexAdd):
                if d.vertex_type in self._var_types.values():
                    self._vertex_mirror[d.vertex_id] = (d.vertex_type, d.payload)
                for name, vtype in self.pattern.variables:
                    if vtype == d.vertex_type:
                        anchors.append(({name: d.vertex_id}, {}))
            elif isinstance(d, VertexRemove):
                known = self._vertex_mirror.pop(d.vertex_id, None)
                if known is None:
                    continue
                vtype, payload = known
                if vtype in self._non_output_types:
                    recheck_all = True
                    continue
                for name, declared_type in self.pattern.variables:
                    if declared_type != vtype or name not in self._out_by_name:
                        continue
                    pos = self._out_by_name[name]
                    wanted = d.vertex_id if self.out_vars[pos].kind in (VERTEX_REF, EDGE_REF) else payload
                    if wanted is None:
                        recheck_all = True
                        continue
                    candidates |= out_content.lookup((pos,), (wanted,))
            elif isinstance(d, EdgeAdd):
                if d.edge_type in self._relevant_edge_types:
                    src, tgt = endpoint_key(d.src), endpoint_key(d.tgt)
                    self._edge_mirror[d.edge_id] = (d.edge_type, src, tgt)
                    for e in self.pattern.edges:
                        if e.edge_type == d.edge_type:
                            anchors.append(({e.src: src, e.tgt: tgt}, {}))
            elif isinstance(d, EdgeRemove):
                known = self._edge_mirror.pop(d.edge_id, None)
                if known is None:
                    continue
                etype, src, tgt = known
                for e in self.pattern.edges:
                    if e.edge_type != etype:
                        continue
                    if e.src in self._out_by_name and e.tgt in self._out_by_name:
                        sp, tp = self._out_by_name[e.src], self._out_by_name[e.tgt]
                        if (self.out_vars[sp].kind in (VERTEX_REF, EDGE_REF)
                                and self.out_vars[tp].kind in (VERTEX_REF, EDGE_REF)):
                            candidates |= out_content.lookup((sp, tp), (src, tgt))
                            continue
                    recheck_all = True

        for dep in self.pattern.dependencies:
            content = deps[dep.slot_id]
            for d in self.cached(dep.slot_id):
                pinned, payload_pins = self._dep_pins(dep, d.values, content)
                grows = isinstance(d, TupleAdd) == dep.negative
                if not grows:
                    anchors.append((pinned, payload_pins))
                    continue
                locatable = all(
                    name in self._out_by_name
                    and self.out_vars[self._out_by_name[name]].kind
                    == {v.name: v.kind for v in content.variables}[name]
                    for name in dep.shared
                )
                if not locatable:
                    recheck_all = True
                    continue
                positions = tuple(self._out_by_name[n] for n in dep.shared)
                kinds = {v.name: v.kind for v in content.variables}
                key = tuple(
                    pinned[n] if kinds[n] in (VERTEX_REF, EDGE_REF) else payload_pins[n]
                    for n in dep.shared
                )
                candidates |= out_content.lookup(positions, key)

        if recheck_all:
            candidates = set(out_content)

        emitted: DeltaSeq = []
        for t in sorted(candidates, key=repr):
            if t in out_content and not pattern_mod.tuple_supported(
                self.pattern, graph, deps, self.out_vars, t
            ):
                emitted.append(TupleRemove(t))
        removed_now = {d.values for d in emitted}
        added_now: set[tuple] = set()
        for pinned, payload_pins in anchors:
            for binding in pattern_mod.find_matches(
                self.pattern, graph, deps, pinned, payload_pins
            ):
                t = pattern_mod.binding_to_tuple(self.pattern, graph, self.out_vars, binding)
                if t is None or t in added_now:
                    continue
                if t in out_content and t not in removed_now:
                    continue
                added_now.add(t)
                emitted.append(TupleAdd(t))
        return {self.output_slots[0]: normalize_deltas(emitted)}

    def batch_semantics(self, val: Valuation) -> dict[str, Content]:
        out = AssignmentSet(self.out_vars)
        graph: TypedGraph = val.content(self.model_slot)
        deps = self._dep_contents(val)
        for binding in pattern_mod.find_matches(self.pattern, graph, deps):
            t = pattern_mod.binding_to_tuple(self.pattern, graph, self.out_vars, binding)
            if t is not None and t not in out:
                out.add(t)
        return {self.output_slots[0]: out}


class ChildAbortError(Exception):
    """A composite node's child network failed to reach quiescence."""


class Composite(OperationNode):
    """Runs a child network to maintain the contents of exposed slots.

    Cached deltas on exposed inputs are forwarded into the child, the
    child is executed (ordered, with a budgeted fixpoint fallback), and
    the deltas the run applied to exposed output slots are returned.
    Update directions come from analyzing the child structure one exposed
    input at a time, combined by union, which also makes them union
    monotonic by construction.
    """

    node_class = "mixed"

    def __init__(self, op_id, child_builder, expose: Mapping[str, str],
                 inputs: Sequence[Slot], outputs: Sequence[Slot]):
        super().__init__(op_id, [s.id for s in inputs], [s.id for s in outputs])
        self._build_child = child_builder
        self.expose = dict(expose)
        for s in (*inputs, *outputs):
            _require(s.id in self.expose,
                     f"op {op_id!r}: slot {s.id!r} is not in the expose map")
        self.child, self.child_val = child_builder()
        for parent_id, child_id in self.expose.items():
            _require(child_id in self.child.slots,
                     f"op {op_id!r}: exposed child slot {child_id!r} does not exist")
        for s in inputs:
            _require(not self.child.is_pure_output(self.expose[s.id]),
                     f"op {op_id!r}: exposed input {s.id!r} maps to a pure output"
                     f" of the child network")
        self._echo: dict[str, DeltaSeq] = {}
        self._dir_cache = self._compute_directions()
        self.non_recursive = self._compute_non_recursive()

    def _compute_directions(self) -> dict[str, set[str]]:
        from .scheduler import analyze

        child_to_parent_out = {
            self.expose[p]: p for p in self.output_slots
        }
        directions: dict[str, set[str]] = {}
        for parent_in in self.input_slots:
            closure = analyze(self.child, {self.expose[parent_in]}).closure
            directions[parent_in] = {
                child_to_parent_out[c] for c in closure if c in child_to_parent_out
            }
        return directions

    def _compute_non_recursive(self) -> bool:
        from .scheduler import analyze

        child_inputs = {self.expose[p] for p in self.input_slots}
        result = analyze(self.child, child_inputs)
        return result.order is not None and not (result.closure & child_inputs)

    def dir_delta(self, changed: set[str]) -> set[str]:
        out: set[str] = set()
        for parent_in in set(changed) & set(self.input_slots):
            out |= self._dir_cache.get(parent_in, set())
        return out

    def reset(self) -> None:
        super().reset()
        self.child, self.child_val = self._build_child()
        self._echo.clear()

    def _strip_echo(self, slot_id: str, deltas: DeltaSeq) -> DeltaSeq:
        echo = self._echo.pop(slot_id, None)
        if echo and deltas[: len(echo)] == echo:
            return deltas[len(echo):]
        return deltas

    def update(self, val: Valuation) -> dict[str, DeltaSeq]:
        from .network import record_edit
        from .scheduler import (
            ABORTED,
            execute_incremental_fixpoint,
            execute_incremental_ordered,
            fixpoint_budget,
        )

        for parent_in in self.input_slots:
            fresh = self._strip_echo(parent_in, list(self.cached(parent_in)))
            if fresh:
                record_edit(self.child, self.child_val, self.expose[parent_in], fresh)
        mark = len(self.child_val.journal)
        report = execute_incremental_ordered(self.child, self.child_val)
        if report.outcome == ABORTED:
            report = execute_incremental_fixpoint(
                self.child, self.child_val, fixpoint_budget()
            )
        if not report.completed:
            raise ChildAbortError(
                f"composite {self.id!r}: child run ended with {report.outcome!r}"
            )
        out: dict[str, DeltaSeq] = {p: [] for p in self.output_slots}
        child_to_parent = {self.expose[p]: p for p in self.output_slots}
        for entry in self.child_val.journal[mark:]:
            parent_id = child_to_parent.get(entry.slot_id)
            if parent_id is not None:
                out[parent_id].extend(entry.deltas)
        result = {p: normalize_deltas(seq) for p, seq in out.items()}
        for p in self.output_slots:
            if p in self.input_slots and result[p]:
                self._echo[p] = list(result[p])
        return result

    def batch_semantics(self, val: Valuation) -> dict[str, Content]:
        from .scheduler import batch_execute

        child, _ = self._build_child()
        base = {
            self.expose[p]: val.content(p)
            for p in self.input_slots
            if not child.is_pure_output(self.expose[p])
        }
        child_val = batch_execute(child, base)
        return {
            p: child_val.content(self.expose[p]).copy() for p in self.output_slots
        }
