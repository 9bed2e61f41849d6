"""Network structure, validation, edits, and validity checks."""

import pytest

from egdn.model import (
    AssignmentSet,
    TupleAdd,
    TypedGraph,
    Variable,
    VertexAdd,
    VertexRemove,
    apply_delta,
)
from egdn.network import (
    Egdn,
    NetworkValidationError,
    PolicyViolationError,
    Slot,
    Valuation,
    network_valid,
    op_valid,
    record_edit,
)
from egdn.operators import NodeInput
from egdn.scheduler import batch_execute, execute_incremental_ordered

from .nets import (
    CopyVertices,
    chain_net,
    make_net,
    op,
    simple_figure_net,
    slot_assign,
    slot_model,
)


class TestBuildNetwork:
    def test_simple_figure_net_shape(self):
        egdn, val = simple_figure_net()
        assert len(egdn.operations) == 2
        assert len(egdn.slots) == 3
        assert network_valid(egdn, val)  # all-empty is consistent

    def test_query_with_two_outputs_is_arity_violation(self):
        with pytest.raises(NetworkValidationError) as err:
            make_net(
                [
                    slot_model("m"),
                    slot_assign("a1", ("v", "vertexRef")),
                    slot_assign("a2", ("v", "vertexRef")),
                ],
                [op("q", "node_input", ["m"], ["a1", "a2"], type="Class")],
            )
        assert "ArityViolation" in str(err.value)

    def test_shared_pure_output_rejected(self):
        slots = [Slot("m1", "model"), Slot("m2", "model"), Slot("out", "model")]
        ops = [
            CopyVertices("t1", "Class", [slots[0]], [slots[2]]),
            CopyVertices("t2", "Class", [slots[1]], [slots[2]]),
        ]
        with pytest.raises(NetworkValidationError) as err:
            Egdn(slots, ops)
        assert "SharedOutputViolation" in str(err.value)

    def test_wiring_to_unknown_slot_is_bipartiteness_violation(self):
        with pytest.raises(NetworkValidationError) as err:
            make_net(
                [slot_model("m")],
                [op("q", "node_input", ["m"], ["ghost"], type="Class")],
            )
        assert "BipartitenessViolation" in str(err.value)

    def test_wrong_slot_kind_is_domain_mismatch(self):
        with pytest.raises(NetworkValidationError) as err:
            make_net(
                [slot_assign("a", ("v", "vertexRef")), slot_assign("b", ("v", "vertexRef"))],
                [op("q", "node_input", ["a"], ["b"], type="Class")],
            )
        assert "DomainMismatch" in str(err.value)

    def test_initial_contents_are_seeded_as_pending_deltas(self):
        base = TypedGraph("cd")
        base.add_vertex(__import__("egdn.model", fromlist=["Vertex"]).Vertex("c1", "Class"))
        egdn, val = make_net(
            [slot_model("m"), slot_assign("a1", ("v", "vertexRef"))],
            [op("q", "node_input", ["m"], ["a1"], type="Class")],
            initial={"m": base},
        )
        assert val.content("m").has_vertex("c1")
        assert egdn.operations["q"].cached("m")  # pending, not yet executed
        assert not network_valid(egdn, val)
        execute_incremental_ordered(egdn, val)
        assert network_valid(egdn, val)


class TestRecordEdit:
    def test_edit_reaches_adjacent_caches(self):
        egdn, val = simple_figure_net()
        record_edit(egdn, val, "cd", [VertexAdd("c1", "Class")])
        assert len(egdn.operations["T"].cached("cd")) == 1
        assert egdn.operations["Q"].cached("cd") == []

    def test_pure_output_edit_rejected_under_enforcement(self):
        egdn, val = simple_figure_net()
        with pytest.raises(PolicyViolationError):
            record_edit(egdn, val, "asg", [VertexAdd("x", "Class")], enforce=True)
        # without enforcement the edit is accepted and cached
        record_edit(egdn, val, "asg", [VertexAdd("x", "Class")])
        assert val.content("asg").has_vertex("x")

    def test_successive_edits_concatenate_in_order(self):
        egdn, val = simple_figure_net()
        record_edit(egdn, val, "cd", [VertexAdd("c1", "Class")])
        record_edit(egdn, val, "cd", [VertexAdd("c2", "Class")])
        cached = egdn.operations["T"].cached("cd")
        assert [d.vertex_id for d in cached] == ["c1", "c2"]

    def test_content_equals_quiescent_base_plus_cached_deltas(self):
        egdn, val = simple_figure_net()
        base = val.content("cd").copy()
        record_edit(egdn, val, "cd", [VertexAdd("c1", "Class")])
        record_edit(egdn, val, "cd", [VertexAdd("c2", "Class"), VertexRemove("c1")])
        cached = egdn.operations["T"].cached("cd")
        assert apply_delta(base, cached) == val.content("cd")

    def test_rejected_edit_changes_nothing(self):
        egdn, val = simple_figure_net()
        record_edit(egdn, val, "cd", [VertexAdd("c1", "Class")])
        before = val.content("cd").copy()
        cache_before = list(egdn.operations["T"].cached("cd"))
        with pytest.raises(Exception):
            record_edit(egdn, val, "cd", [VertexAdd("c1", "Class")])  # duplicate id
        assert val.content("cd") == before
        assert egdn.operations["T"].cached("cd") == cache_before


class TestValidity:
    def test_all_empty_is_valid_for_builtins(self):
        egdn, val = chain_net()
        for node in egdn.operations.values():
            assert op_valid(node, val)

    def test_stale_output_is_invalid(self):
        egdn, val = simple_figure_net()
        record_edit(egdn, val, "cd", [VertexAdd("c1", "Class")])
        assert not op_valid(egdn.operations["T"], val)
        assert not network_valid(egdn, val)

    def test_outputs_set_to_oracle_result_are_valid(self):
        egdn, val = simple_figure_net()
        record_edit(egdn, val, "cd", [VertexAdd("c1", "Class")])
        for op_id in ("T", "Q"):
            node = egdn.operations[op_id]
            for slot_id, content in node.batch_semantics(val).items():
                val.set_content(slot_id, content)
        assert network_valid(egdn, val)

    def test_empty_network_is_valid(self):
        egdn = Egdn([Slot("m", "model")], [])
        assert network_valid(egdn, Valuation.for_network(egdn))

    def test_batch_executed_network_is_valid(self):
        egdn, _ = chain_net()
        base_model = TypedGraph("s0")
        from egdn.model import Vertex

        for i in range(4):
            base_model.add_vertex(Vertex(f"c{i}", "Class"))
        base_sr = AssignmentSet((Variable("v", "vertexRef"), Variable("m", "integer")))
        base_sr.add(("c0", 1))
        base_sr.add(("c0", 2))
        val = batch_execute(egdn, {"s0": base_model, "sr": base_sr})
        assert network_valid(egdn, val)
        assert val.content("s3").tuples() == {("c0", 2)}
