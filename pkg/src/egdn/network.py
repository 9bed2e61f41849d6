"""Slots, the operation-node contract, valuations, and validity.

A network is a bipartite graph of operation nodes and slot nodes.  Slots
hold content (a model or an assignment set); operations read their input
slots and maintain their output slots.  Every content change flows
through `Valuation.apply_to_slot`, which validates deltas against the
slot's domain and journals them, and through `record_edit`, which also
feeds the delta caches of adjacent operations.

A network plus its valuation is one mutable unit: callers need exclusive
access for edits and scheduler runs, and may clone the valuation for
concurrent read-only inspection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from . import model
from .model import (
    AssignmentSet,
    Content,
    DeltaSeq,
    MODEL_DELTAS,
    TUPLE_DELTAS,
    TypeGraph,
    TypedGraph,
    Variable,
    delta_violations,
)


class NetworkError(Exception):
    """Base for structural and usage errors at the network level."""


class NetworkValidationError(NetworkError):
    """Raised when a network fails structural validation; carries the
    full violation list so callers can report everything at once."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class DomainMismatchError(NetworkError):
    """Content or delta does not fit the slot's domain."""


class PolicyViolationError(NetworkError):
    """An edit was rejected by an enforcement policy."""


MODEL = "model"
ASSIGNMENT = "assignment"

QUERY = "query"
TRANSFORMATION = "transformation"
MIXED = "mixed"


@dataclass(frozen=True)
class Slot:
    """Named storage for either a model or an assignment set."""

    id: str
    kind: str  # MODEL | ASSIGNMENT
    type_graph: Optional[TypeGraph] = None  # model slots; None disables typing
    is_linking: bool = False
    variables: tuple[Variable, ...] = ()

    def empty_content(self) -> Content:
        if self.kind == MODEL:
            return TypedGraph(self.id, self.is_linking)
        return AssignmentSet(self.variables)

    def check_content(self, content: Content) -> None:
        if self.kind == MODEL:
            if not isinstance(content, TypedGraph):
                raise DomainMismatchError(f"slot {self.id!r} holds models")
            if self.type_graph is not None:
                problems = model.typing_violations(content, self.type_graph)
                if problems:
                    raise DomainMismatchError(
                        f"slot {self.id!r}: {'; '.join(problems)}"
                    )
        else:
            if not isinstance(content, AssignmentSet):
                raise DomainMismatchError(f"slot {self.id!r} holds assignment sets")
            if content.variables != self.variables:
                raise DomainMismatchError(
                    f"slot {self.id!r}: variables {content.variables} do not match"
                    f" declared {self.variables}"
                )
            for t in content:
                content.check_tuple(t)


class OperationNode:
    """Behavioral contract every operation node implements.

    Subclasses provide `update` (cached deltas in, output deltas out),
    `batch_semantics` (full recomputation from the inputs, used as the
    validity oracle), and `dir_delta` (which outputs may see deltas when
    the given inputs changed).  The delta cache is filled by `record_edit`
    and by the schedulers; the schedulers also clear it.
    """

    node_class = MIXED

    def __init__(self, op_id: str, input_slots: Iterable[str], output_slots: Iterable[str]):
        self.id = op_id
        self.input_slots: tuple[str, ...] = tuple(input_slots)
        self.output_slots: tuple[str, ...] = tuple(output_slots)
        self.delta_cache: dict[str, DeltaSeq] = {}
        self.non_recursive = True
        self.union_monotonic = True

    # -- cache plumbing ----------------------------------------------------

    def cache_deltas(self, slot_id: str, deltas: DeltaSeq) -> None:
        if slot_id not in self.adjacent_slots():
            raise NetworkError(f"op {self.id!r} is not adjacent to slot {slot_id!r}")
        if deltas:
            self.delta_cache.setdefault(slot_id, []).extend(deltas)

    def cached(self, slot_id: str) -> DeltaSeq:
        return self.delta_cache.get(slot_id, [])

    def clear_cache(self) -> None:
        self.delta_cache.clear()

    def has_cached_deltas(self) -> bool:
        return any(self.delta_cache.values())

    def changed_inputs(self) -> set[str]:
        return {s for s in self.input_slots if self.delta_cache.get(s)}

    def adjacent_slots(self) -> set[str]:
        return set(self.input_slots) | set(self.output_slots)

    # -- contract ----------------------------------------------------------

    def update(self, val: "Valuation") -> dict[str, DeltaSeq]:
        raise NotImplementedError

    def batch_semantics(self, val: "Valuation") -> dict[str, Content]:
        raise NotImplementedError

    def dir_delta(self, changed: set[str]) -> set[str]:
        """Output slots the update procedure may emit deltas for when at
        most the inputs in `changed` carry deltas.  Empty set for an
        empty change set; everything otherwise, unless refined."""
        if not changed & set(self.input_slots):
            return set()
        return set(self.output_slots)

    def reset(self) -> None:
        """Drop cached deltas and any internal incremental state."""
        self.clear_cache()

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.id!r}>"


@dataclass(frozen=True)
class EditRecord:
    """Journal entry: who changed which slot, and how."""

    slot_id: str
    deltas: tuple
    origin: str  # "user" or "op:<id>"


class Egdn:
    """The bipartite network of operation nodes and slots."""

    def __init__(self, slots: Iterable[Slot], operations: Iterable[OperationNode]):
        self.slots: dict[str, Slot] = {s.id: s for s in slots}
        self.operations: dict[str, OperationNode] = {o.id: o for o in operations}
        self._readers: dict[str, set[str]] = {s: set() for s in self.slots}
        self._writers: dict[str, set[str]] = {s: set() for s in self.slots}
        for op in self.operations.values():
            for s in op.input_slots:
                if s in self._readers:
                    self._readers[s].add(op.id)
            for s in op.output_slots:
                if s in self._writers:
                    self._writers[s].add(op.id)
        violations = self.structural_violations()
        if violations:
            raise NetworkValidationError(violations)

    # Paper orientation: an edge slot->op means the op reads the slot, so
    # readers(s) is out(s) and writers(s) is in(s).

    def readers(self, slot_id: str) -> set[str]:
        return self._readers.get(slot_id, set())

    def writers(self, slot_id: str) -> set[str]:
        return self._writers.get(slot_id, set())

    def adjacent_ops(self, slot_id: str) -> set[str]:
        return self.readers(slot_id) | self.writers(slot_id)

    def is_pure_output(self, slot_id: str) -> bool:
        """A slot some operation writes without also reading it."""
        return any(
            slot_id not in self.operations[o].input_slots for o in self.writers(slot_id)
        )

    def user_editable_slots(self) -> list[str]:
        return sorted(s for s in self.slots if not self.is_pure_output(s))

    def structural_violations(self) -> list[str]:
        """Bipartiteness, query arity, output sharing, and wiring kinds."""
        problems = []
        clash = set(self.slots) & set(self.operations)
        for name in sorted(clash):
            problems.append(
                f"BipartitenessViolation: {name!r} is both a slot and an operation"
            )
        for op in sorted(self.operations.values(), key=lambda o: o.id):
            for s in (*op.input_slots, *op.output_slots):
                if s not in self.slots:
                    problems.append(
                        f"BipartitenessViolation: op {op.id!r} wired to unknown"
                        f" node {s!r} (operations may only connect to slots)"
                    )
            outs = [self.slots[s] for s in op.output_slots if s in self.slots]
            if op.node_class == QUERY:
                if len(op.output_slots) != 1:
                    problems.append(
                        f"ArityViolation: query node {op.id!r} must have exactly"
                        f" one output slot, has {len(op.output_slots)}"
                    )
                elif outs and outs[0].kind != ASSIGNMENT:
                    problems.append(
                        f"DomainMismatch: query node {op.id!r} must output an"
                        f" assignment slot"
                    )
            if op.node_class == TRANSFORMATION:
                for slot in outs:
                    if slot.kind != MODEL:
                        problems.append(
                            f"DomainMismatch: transformation node {op.id!r} output"
                            f" {slot.id!r} must be a model slot"
                        )
        # Output slots may be shared only when every sharer also reads them.
        ops = sorted(self.operations.values(), key=lambda o: o.id)
        for i, o1 in enumerate(ops):
            for o2 in ops[i + 1 :]:
                shared = set(o1.output_slots) & set(o2.output_slots)
                for s in sorted(shared):
                    if s not in o1.input_slots or s not in o2.input_slots:
                        problems.append(
                            f"SharedOutputViolation: ops {o1.id!r} and {o2.id!r}"
                            f" share output slot {s!r} without both reading it"
                        )
        return problems

    def reset_state(self) -> None:
        for op in self.operations.values():
            op.reset()

    def __repr__(self) -> str:
        return f"Egdn({len(self.operations)} ops, {len(self.slots)} slots)"


class Valuation:
    """Total mapping from slot ids to contents, plus an edit journal."""

    def __init__(self, slots: Mapping[str, Slot]):
        self._slots = dict(slots)
        self._contents: dict[str, Content] = {
            sid: slot.empty_content() for sid, slot in self._slots.items()
        }
        self.journal: list[EditRecord] = []

    @staticmethod
    def for_network(egdn: Egdn) -> "Valuation":
        return Valuation(egdn.slots)

    def slot(self, slot_id: str) -> Slot:
        try:
            return self._slots[slot_id]
        except KeyError:
            raise NetworkError(f"unknown slot {slot_id!r}") from None

    def content(self, slot_id: str) -> Content:
        self.slot(slot_id)
        return self._contents[slot_id]

    def model_context(self) -> dict[str, TypedGraph]:
        """Graph-id resolution context for external references: every
        model slot's content under the slot's id."""
        return {
            sid: c for sid, c in self._contents.items() if isinstance(c, TypedGraph)
        }

    def slot_ids(self) -> list[str]:
        return sorted(self._slots)

    def apply_to_slot(self, slot_id: str, deltas: DeltaSeq, origin: str) -> None:
        """Apply deltas in place after validating each against the slot's
        domain.  The deltas are journaled under `origin`."""
        slot = self.slot(slot_id)
        content = self._contents[slot_id]
        if not deltas:
            return
        for d in deltas:
            if slot.kind == MODEL and not isinstance(d, MODEL_DELTAS):
                raise DomainMismatchError(f"slot {slot_id!r}: {d!r} is not a model delta")
            if slot.kind == ASSIGNMENT:
                if not isinstance(d, TUPLE_DELTAS):
                    raise DomainMismatchError(
                        f"slot {slot_id!r}: {d!r} is not a tuple delta"
                    )
                content.check_tuple(d.values)
        if slot.kind == MODEL and slot.type_graph is not None:
            for d in deltas:
                problems = delta_violations(d, slot.type_graph, content)
                if problems:
                    raise DomainMismatchError(f"slot {slot_id!r}: {'; '.join(problems)}")
        for d in deltas:
            model.apply_one(content, d)
        self.journal.append(EditRecord(slot_id, tuple(deltas), origin))

    def set_content(self, slot_id: str, content: Content) -> None:
        slot = self.slot(slot_id)
        slot.check_content(content)
        if isinstance(content, TypedGraph):
            content = content.copy()
            content.id = slot_id
            content.is_linking = slot.is_linking
        else:
            content = content.copy()
        self._contents[slot_id] = content

    def clone(self) -> "Valuation":
        other = Valuation(self._slots)
        other._contents = {sid: c.copy() for sid, c in self._contents.items()}
        other.journal = list(self.journal)
        return other

    def snapshot(self) -> dict[str, Content]:
        return {sid: c.copy() for sid, c in self._contents.items()}

    def __repr__(self) -> str:
        return f"Valuation({len(self._slots)} slots, {len(self.journal)} edits)"


def record_edit(
    egdn: Egdn,
    val: Valuation,
    slot_id: str,
    deltas: DeltaSeq,
    origin: str = "user",
    enforce: bool = False,
) -> None:
    """Apply an edit to a slot and append it to the delta cache of every
    adjacent operation.

    With `enforce` set, user edits to pure-output slots are rejected:
    their owning operation could never reconcile contents it did not
    produce itself.
    """
    if slot_id not in egdn.slots:
        raise NetworkError(f"unknown slot {slot_id!r}")
    if enforce and origin == "user" and egdn.is_pure_output(slot_id):
        raise PolicyViolationError(
            f"slot {slot_id!r} is a pure output of"
            f" {sorted(egdn.writers(slot_id))}; user edits are not allowed"
        )
    val.apply_to_slot(slot_id, deltas, origin)
    for op_id in sorted(egdn.adjacent_ops(slot_id)):
        egdn.operations[op_id].cache_deltas(slot_id, deltas)


def op_valid(op: OperationNode, val: Valuation) -> bool:
    """True iff the output slots hold exactly what a full recomputation
    from the current inputs would produce (id-level equality)."""
    expected = op.batch_semantics(val)
    return all(val.content(s) == expected[s] for s in op.output_slots)


def first_invalid(egdn: Egdn, val: Valuation) -> Optional[str]:
    for op_id in sorted(egdn.operations):
        if not op_valid(egdn.operations[op_id], val):
            return op_id
    return None


def network_valid(egdn: Egdn, val: Valuation) -> bool:
    return first_invalid(egdn, val) is None
