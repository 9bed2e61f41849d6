"""Static analysis for safe update orders, incremental execution, and
edit policies.

`analyze` simulates change propagation over the network structure using
only the operations' declared update directions.  It builds a trigger
graph whose edges mean "executing this operation may force that one";
if the graph stays acyclic, its topological order is a safe one-pass
execution order.  `execute_incremental_ordered` runs that order;
`execute_incremental_fixpoint` is the fallback for networks where no
order exists, bounded by a round budget because termination cannot be
guaranteed there.

The scheduler owns the network exclusively for the duration of a run.
An optional progress callback receives per-operation increments and may
be drained from another thread.
"""

from __future__ import annotations

import os
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

from .model import Content, seed_deltas
from .network import (
    Egdn,
    NetworkError,
    PolicyViolationError,
    Valuation,
    record_edit,
)

COMPLETED = "completed"
ABORTED = "aborted"
BUDGET_EXCEEDED = "budget_exceeded"

DEFAULT_FIXPOINT_BUDGET = 1000
BUDGET_ENV_VAR = "EGDN_FIXPOINT_BUDGET"


class NotAnalyzableError(NetworkError):
    """Static analysis requires every operation to declare a
    non-recursive update procedure."""


class DirViolationError(NetworkError):
    """An operation emitted deltas for an output slot its declared update
    directions ruled out; the analysis result cannot be trusted."""


class ExecutionFailedError(NetworkError):
    """A run that was required to complete did not."""

    def __init__(self, report: "ExecutionReport"):
        super().__init__(f"execution ended with outcome {report.outcome!r}")
        self.report = report


def fixpoint_budget() -> int:
    """Round budget for fixpoint runs; overridable via the environment."""
    raw = os.environ.get(BUDGET_ENV_VAR)
    if raw is None:
        return DEFAULT_FIXPOINT_BUDGET
    budget = int(raw)
    if budget < 1:
        raise ValueError(f"{BUDGET_ENV_VAR} must be >= 1, got {budget}")
    return budget


class TriggerGraph:
    """Directed graph over operation ids with online cycle detection.

    Maintains a topological numbering (Pearce/Kelly style): inserting an
    edge that already respects the numbering is O(1); otherwise only the
    affected region is reordered, and a cycle discovered during the
    reorder is reported with its path.
    """

    def __init__(self):
        self._ord: dict[str, int] = {}
        self._succ: dict[str, set[str]] = {}
        self._pred: dict[str, set[str]] = {}
        self.edges: set[tuple[str, str]] = set()
        self.cycle: Optional[list[str]] = None

    @property
    def vertices(self) -> set[str]:
        return set(self._ord)

    @property
    def acyclic(self) -> bool:
        return self.cycle is None

    def add_vertex(self, v: str) -> None:
        if v not in self._ord:
            self._ord[v] = len(self._ord)
            self._succ[v] = set()
            self._pred[v] = set()

    def add_edge(self, u: str, v: str) -> bool:
        """Create the edge unless it exists; False iff it closed a cycle."""
        self.add_vertex(u)
        self.add_vertex(v)
        if (u, v) in self.edges:
            return True
        self.edges.add((u, v))
        self._succ[u].add(v)
        self._pred[v].add(u)
        if self._ord[u] < self._ord[v]:
            return True
        # Edge goes against the numbering: explore the window between v
        # and u.  Reaching u forward from v means the new edge closed a
        # cycle; otherwise shuffle the window back into topological shape.
        lo, hi = self._ord[v], self._ord[u]
        forward: list[str] = []
        seen = {v}
        stack = [(v, [v])]
        while stack:
            node, path = stack.pop()
            forward.append(node)
            for nxt in self._succ[node]:
                if nxt == u:
                    self.cycle = path + [u, v]
                    return False
                if nxt not in seen and lo <= self._ord[nxt] <= hi:
                    seen.add(nxt)
                    stack.append((nxt, path + [nxt]))
        backward: list[str] = []
        seen_b = {u}
        stack2 = [u]
        while stack2:
            node = stack2.pop()
            backward.append(node)
            for nxt in self._pred[node]:
                if nxt not in seen_b and lo <= self._ord[nxt] <= hi:
                    seen_b.add(nxt)
                    stack2.append(nxt)
        backward.sort(key=self._ord.__getitem__)
        forward.sort(key=self._ord.__getitem__)
        slots = sorted(self._ord[x] for x in backward + forward)
        for node, position in zip(backward + forward, slots):
            self._ord[node] = position
        return True

    def topological_order(self) -> list[str]:
        """Kahn's algorithm with ascending-id tie-break, so the order is a
        function of the edge set alone and runs stay reproducible."""
        if not self.acyclic:
            raise NetworkError("trigger graph has a cycle")
        import heapq

        indegree = {v: len(self._pred[v]) for v in self._ord}
        ready = [v for v, d in indegree.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            v = heapq.heappop(ready)
            order.append(v)
            for nxt in self._succ[v]:
                indegree[nxt] -= 1
                if indegree[nxt] == 0:
                    heapq.heappush(ready, nxt)
        return order

    def to_dot(self) -> str:
        lines = ["digraph trigger {"]
        for v in sorted(self._ord):
            lines.append(f'  "{v}";')
        for u, v in sorted(self.edges):
            lines.append(f'  "{u}" -> "{v}";')
        lines.append("}")
        return "\n".join(lines)


Ordering = Callable[[Iterable[str]], list[str]]


@dataclass
class AnalysisResult:
    order: Optional[list[str]]
    trigger: TriggerGraph
    closure: set[str]
    cycle: Optional[list[str]] = None

    @property
    def analyzable(self) -> bool:
        return self.order is not None


def analyze(
    egdn: Egdn, changed_slots: Iterable[str], ordering: Ordering = sorted
) -> AnalysisResult:
    """Frontier expansion over the network structure for an initially
    changed slot set.

    Returns the trigger graph, the canonical update order (None if a
    cyclic dependency was detected), and the closure: every slot the
    propagation may write.  `ordering` only controls queue tie-breaks;
    the resulting edge set is independent of it.
    """
    changed = set(changed_slots)
    unknown = changed - set(egdn.slots)
    if unknown:
        raise NetworkError(f"unknown slots in change set: {sorted(unknown)}")
    blockers = sorted(
        o.id for o in egdn.operations.values() if not o.non_recursive
    )
    if blockers:
        raise NotAnalyzableError(
            f"operations with recursive update procedures: {blockers}"
        )

    pending: dict[str, set[str]] = {o: set() for o in egdn.operations}
    trigger = TriggerGraph()
    closure: set[str] = set()
    queue: deque[str] = deque()
    queued: set[str] = set()

    initial = set()
    for s in changed:
        initial |= egdn.adjacent_ops(s)
    for o in ordering(initial):
        queue.append(o)
        queued.add(o)
        pending[o] = changed & set(egdn.operations[o].input_slots)
        trigger.add_vertex(o)

    while queue:
        o = queue.popleft()
        queued.discard(o)
        op = egdn.operations[o]
        may_write = set(op.dir_delta(set(pending[o])))
        closure |= may_write
        affected = set()
        for s in may_write:
            affected |= egdn.adjacent_ops(s)
        affected.discard(o)
        for other in ordering(affected):
            if other not in queued:
                queue.append(other)
                queued.add(other)
            pending[other] |= may_write & set(egdn.operations[other].input_slots)
            trigger.add_vertex(other)
            if not trigger.add_edge(o, other):
                return AnalysisResult(None, trigger, closure, trigger.cycle)
        pending[o] = set()

    return AnalysisResult(trigger.topological_order(), trigger, closure)


def find_valid_update_order(
    egdn: Egdn, changed_slots: Iterable[str], ordering: Ordering = sorted
) -> tuple[Optional[list[str]], TriggerGraph]:
    """Safe one-pass execution order for the changed slots, or None when
    a trigger cycle makes one impossible."""
    result = analyze(egdn, changed_slots, ordering)
    return result.order, result.trigger


def closure_delta(
    egdn: Egdn, changed_slots: Iterable[str], ordering: Ordering = sorted
) -> set[str]:
    """Slots the network may write on its own when the given slots
    change.  Partial if the analysis aborts on a cycle."""
    return analyze(egdn, changed_slots, ordering).closure


@dataclass
class ExecutionReport:
    """What a scheduler run did: outcome, order, and per-op effort."""

    outcome: str
    executed: list[str] = field(default_factory=list)
    emitted: dict[str, int] = field(default_factory=dict)
    op_wall_ms: dict[str, float] = field(default_factory=dict)
    rounds: Optional[int] = None
    cycle: Optional[list[str]] = None

    @property
    def completed(self) -> bool:
        return self.outcome == COMPLETED

    def total_emitted(self) -> int:
        return sum(self.emitted.values())

    def to_json(self) -> dict:
        return {
            "outcome": self.outcome,
            "executed": self.executed,
            "emitted": self.emitted,
            "opWallMs": {k: round(v, 4) for k, v in self.op_wall_ms.items()},
            "rounds": self.rounds,
            "cycle": self.cycle,
        }

    def to_csv_rows(self) -> list[tuple]:
        return [
            (op, self.emitted.get(op, 0), round(self.op_wall_ms.get(op, 0.0), 4))
            for op in self.executed
        ]


Progress = Callable[[str, int, float], None]


def _run_op(
    egdn: Egdn,
    val: Valuation,
    op_id: str,
    report: ExecutionReport,
    progress: Optional[Progress],
    check_dir: bool,
) -> dict:
    """Execute one update procedure and time it; the caller applies and
    distributes the emitted deltas per its own algorithm."""
    op = egdn.operations[op_id]
    pending_inputs = op.changed_inputs()
    started = time.perf_counter()
    delta_map = op.update(val)
    elapsed_ms = (time.perf_counter() - started) * 1000.0
    stray = set(delta_map) - set(op.output_slots)
    if stray:
        raise DirViolationError(f"op {op_id!r} emitted for non-output slots {sorted(stray)}")
    emitted_slots = {s for s, seq in delta_map.items() if seq}
    allowed = op.dir_delta(pending_inputs)
    if check_dir and not emitted_slots <= allowed:
        raise DirViolationError(
            f"op {op_id!r} emitted into {sorted(emitted_slots - allowed)} but its"
            f" declared directions for {sorted(pending_inputs)} are {sorted(allowed)}"
        )
    count = sum(len(seq) for seq in delta_map.values())
    report.executed.append(op_id)
    report.emitted[op_id] = report.emitted.get(op_id, 0) + count
    report.op_wall_ms[op_id] = report.op_wall_ms.get(op_id, 0.0) + elapsed_ms
    if progress is not None:
        progress(op_id, count, elapsed_ms)
    return delta_map


def execute_incremental_ordered(
    egdn: Egdn,
    val: Valuation,
    ordering: Ordering = sorted,
    progress: Optional[Progress] = None,
) -> ExecutionReport:
    """One-pass incremental execution along a statically derived order.

    Per operation: run its update, apply the emitted deltas to the output
    slots, append them to the caches of every reader, then clear the
    operation's own cache.  Aborts without touching any content when no
    safe order exists.
    """
    changed = {
        s
        for op in egdn.operations.values()
        for s, seq in op.delta_cache.items()
        if seq
    }
    result = analyze(egdn, changed, ordering)
    if result.order is None:
        return ExecutionReport(ABORTED, cycle=result.cycle)
    report = ExecutionReport(COMPLETED)
    for op_id in result.order:
        op = egdn.operations[op_id]
        delta_map = _run_op(egdn, val, op_id, report, progress, check_dir=True)
        for slot_id in op.output_slots:
            seq = delta_map.get(slot_id, [])
            val.apply_to_slot(slot_id, seq, origin=f"op:{op_id}")
            if seq:
                for reader in sorted(egdn.readers(slot_id)):
                    egdn.operations[reader].cache_deltas(slot_id, seq)
        op.clear_cache()
    return report


def execute_incremental_fixpoint(
    egdn: Egdn,
    val: Valuation,
    max_rounds: Optional[int] = None,
    ordering: Ordering = sorted,
    progress: Optional[Progress] = None,
) -> ExecutionReport:
    """Worklist iteration until no operation has pending deltas.

    Not guaranteed to terminate on cyclic networks, so a round budget
    caps the run; exceeding it leaves the valuation and caches exactly
    as the last completed round produced them.
    """
    budget = fixpoint_budget() if max_rounds is None else max_rounds
    if budget < 1:
        raise ValueError(f"max_rounds must be >= 1, got {budget}")
    report = ExecutionReport(COMPLETED)
    due = {o for o, op in egdn.operations.items() if op.has_cached_deltas()}
    rounds = 0
    while due:
        if rounds == budget:
            report.outcome = BUDGET_EXCEEDED
            break
        rounds += 1
        due_next: set[str] = set()
        for op_id in ordering(due):
            due.discard(op_id)
            op = egdn.operations[op_id]
            delta_map = _run_op(egdn, val, op_id, report, progress, check_dir=False)
            op.clear_cache()
            for slot_id in op.output_slots:
                seq = delta_map.get(slot_id, [])
                if not seq:
                    continue
                val.apply_to_slot(slot_id, seq, origin=f"op:{op_id}")
                for reader in sorted(egdn.readers(slot_id)):
                    egdn.operations[reader].cache_deltas(slot_id, seq)
                    if reader not in due:
                        due_next.add(reader)
                for writer in sorted(egdn.writers(slot_id)):
                    if writer != op_id and writer not in due:
                        due_next.add(writer)
        due = due_next
    report.rounds = rounds
    return report


@dataclass(frozen=True)
class PolicyDecision:
    allowed: bool
    reason: Optional[str] = None  # "no-order" | "overwrite"
    detail: str = ""

    def __bool__(self) -> bool:
        return self.allowed


def policy_check(
    egdn: Egdn, already_edited: Iterable[str], candidate: str
) -> PolicyDecision:
    """Propagation-closure locking: an additional slot may be edited only
    if an update order still exists for the whole edited set and the
    propagation cannot write back into any edited slot."""
    edited = set(already_edited) | {candidate}
    result = analyze(egdn, edited)
    if result.order is None:
        cycle = " -> ".join(result.cycle or [])
        return PolicyDecision(False, "no-order", f"trigger cycle: {cycle}")
    overlap = edited & result.closure
    if overlap:
        return PolicyDecision(
            False,
            "overwrite",
            f"propagation would rewrite edited slots {sorted(overlap)}",
        )
    return PolicyDecision(True)


def batch_execute(
    egdn: Egdn,
    base_contents: Mapping[str, Content],
    max_rounds: Optional[int] = None,
    ordering: Ordering = sorted,
) -> Valuation:
    """Execute the network from scratch for the given base contents.

    Starting from the all-empty valuation (the one state that is always
    consistent), the base contents are seeded as plain creation deltas
    and propagated incrementally; a fixpoint run is the fallback when no
    order exists.  Resets all operation state, so any previous valuation
    for this network is stale afterwards.
    """
    for slot_id in base_contents:
        if slot_id not in egdn.slots:
            raise NetworkError(f"unknown slot {slot_id!r}")
        if egdn.is_pure_output(slot_id):
            raise PolicyViolationError(
                f"slot {slot_id!r} is a pure output; base contents may only"
                f" seed user-editable slots"
            )
    egdn.reset_state()
    val = Valuation.for_network(egdn)
    for slot_id in sorted(base_contents):
        record_edit(egdn, val, slot_id, seed_deltas(base_contents[slot_id]))
    report = execute_incremental_ordered(egdn, val, ordering)
    if report.outcome == ABORTED:
        report = execute_incremental_fixpoint(egdn, val, max_rounds, ordering)
    if not report.completed:
        raise ExecutionFailedError(report)
    return val
