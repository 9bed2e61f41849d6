"""RETE, property-computation, and pattern operator behavior."""

import random

import pytest

from egdn.expr import EvalError
from egdn.instrumentation import PROBES
from egdn.model import (
    AssignmentSet,
    EdgeAdd,
    EdgeRemove,
    TupleAdd,
    TupleRemove,
    Variable,
    Vertex,
    VertexAdd,
    VertexRemove,
)
from egdn.network import record_edit
from egdn.scheduler import batch_execute, execute_incremental_ordered

from .harness import check_dir_monotonicity, check_step, run_node
from .nets import make_net, op, slot_assign, slot_model
from .oracles import (
    brute_antijoin,
    brute_group_count,
    brute_group_sum,
    brute_join,
)
from .strategies import random_assignment

CD_TG = {
    "vertexTypes": ["Package", "Class", "Attr"],
    "edgeTypes": [
        {"name": "contains", "src": "Package", "tgt": "Class"},
        {"name": "attrs", "src": "Class", "tgt": "Attr"},
    ],
    "valueTypes": ["Attr"],
}


def node_input_net():
    return make_net(
        [slot_model("m", "cd"), slot_assign("a", ("v", "vertexRef"))],
        [op("q", "node_input", ["m"], ["a"], type="Class")],
        type_graphs={"cd": CD_TG},
    )


def edge_input_net():
    return make_net(
        [
            slot_model("m", "cd"),
            slot_assign("a", ("e", "edgeRef"), ("s", "vertexRef"), ("t", "vertexRef")),
        ],
        [op("q", "edge_input", ["m"], ["a"], type="contains")],
        type_graphs={"cd": CD_TG},
    )


def join_net(left_vars, right_vars, out_vars):
    return make_net(
        [
            slot_assign("l", *left_vars),
            slot_assign("r", *right_vars),
            slot_assign("o", *out_vars),
        ],
        [op("j", "join", ["l", "r"], ["o"])],
    )


class TestNodeInput:
    def test_matching_vertex_add_emits_tuple(self):
        egdn, val = node_input_net()
        record_edit(egdn, val, "m", [VertexAdd("v1", "Class")])
        delta_map = egdn.operations["q"].update(val)
        assert delta_map == {"a": [TupleAdd(("v1",))]}

    def test_other_type_is_ignored(self):
        egdn, val = node_input_net()
        record_edit(egdn, val, "m", [VertexAdd("v1", "Package")])
        assert egdn.operations["q"].update(val) == {"a": []}

    def test_batch_counts_only_the_requested_type(self):
        egdn, val = node_input_net()
        deltas = [VertexAdd(f"c{i}", "Class") for i in range(3)]
        deltas += [VertexAdd(f"p{i}", "Package") for i in range(2)]
        record_edit(egdn, val, "m", deltas)
        out = egdn.operations["q"].batch_semantics(val)["a"]
        # brute-force scan oracle:
        expected = {(v.id,) for v in val.content("m").vertices() if v.type == "Class"}
        assert len(expected) == 3
        assert out.tuples() == expected

    def test_remove_emits_tuple_remove(self):
        egdn, val = node_input_net()
        record_edit(egdn, val, "m", [VertexAdd("v1", "Class")])
        run_node(egdn, val, "q")
        check_step(egdn, val, "q", [("m", [VertexRemove("v1")])])
        assert val.content("a").tuples() == set()

    def test_random_steps_stay_consistent(self):
        rng = random.Random(5)
        for _ in range(30):
            egdn, val = node_input_net()
            live = []
            for _ in range(rng.randint(1, 6)):
                edits = []
                for _ in range(rng.randint(1, 4)):
                    if live and rng.random() < 0.4:
                        vid = live.pop(rng.randrange(len(live)))
                        edits.append(VertexRemove(vid))
                    else:
                        vid = f"v{rng.randrange(10**6)}"
                        vtype = rng.choice(["Class", "Package"])
                        live.append(vid)
                        edits.append(VertexAdd(vid, vtype))
                check_step(egdn, val, "q", [("m", edits)])


class TestEdgeInput:
    def test_add_and_remove(self):
        egdn, val = edge_input_net()
        record_edit(
            egdn,
            val,
            "m",
            [
                VertexAdd("p1", "Package"),
                VertexAdd("c1", "Class"),
                EdgeAdd("e1", "contains", "p1", "c1"),
            ],
        )
        delta_map = run_node(egdn, val, "q")
        assert delta_map["a"] == [TupleAdd(("e1", "p1", "c1"))]
        check_step(egdn, val, "q", [("m", [EdgeRemove("e1")])])
        assert val.content("a").tuples() == set()


class TestJoin:
    def test_left_add_probes_right(self):
        egdn, val = join_net(
            [("x", "integer"), ("y", "integer")],
            [("y", "integer"), ("z", "integer")],
            [("x", "integer"), ("y", "integer"), ("z", "integer")],
        )
        record_edit(egdn, val, "r", [TupleAdd((2, 3))])
        run_node(egdn, val, "j")
        delta_map = check_step(egdn, val, "j", [("l", [TupleAdd((1, 2))])])
        assert delta_map["o"] == [TupleAdd((1, 2, 3))]

    def test_disjoint_vars_is_cross_product(self):
        egdn, val = join_net(
            [("x", "integer")], [("z", "integer")], [("x", "integer"), ("z", "integer")]
        )
        record_edit(egdn, val, "r", [TupleAdd((7,)), TupleAdd((8,))])
        run_node(egdn, val, "j")
        delta_map = check_step(egdn, val, "j", [("l", [TupleAdd((1,))])])
        assert set(d.values for d in delta_map["o"]) == {(1, 7), (1, 8)}

    def test_randomized_equals_brute_force(self):
        rng = random.Random(11)
        lv = (Variable("x", "string"), Variable("y", "integer"))
        rv = (Variable("y", "integer"), Variable("z", "string"))
        for _ in range(40):
            egdn, val = join_net(
                [(v.name, v.kind) for v in lv],
                [(v.name, v.kind) for v in rv],
                [("x", "string"), ("y", "integer"), ("z", "string")],
            )
            left = random_assignment(rng, lv, max_tuples=20, value_pool=["a", "b", "c"])
            right = random_assignment(rng, rv, max_tuples=20, value_pool=["a", "b", "c"])
            val2 = batch_execute(egdn, {"l": left, "r": right})
            assert val2.content("o").tuples() == brute_join(left, right)
            # then a random incremental step against the oracle
            edits = []
            for _ in range(rng.randint(1, 5)):
                side = rng.choice(["l", "r"])
                content = val2.content(side)
                existing = sorted(content, key=repr)
                pending = {d.values for s, ds in edits if s == side for d in ds}
                if existing and rng.random() < 0.5:
                    t = rng.choice(existing)
                    if t not in pending:
                        edits.append((side, [TupleRemove(t)]))
                else:
                    vars_ = lv if side == "l" else rv
                    t = (rng.choice("abc"), rng.randint(0, 3)) if side == "l" else (
                        rng.randint(0, 3),
                        rng.choice("abc"),
                    )
                    if t not in content and t not in pending:
                        edits.append((side, [TupleAdd(t)]))
            if edits:
                check_step(egdn, val2, "j", edits)
                assert val2.content("o").tuples() == brute_join(
                    val2.content("l"), val2.content("r")
                )


class TestAntiJoin:
    def anti_net(self):
        return make_net(
            [
                slot_assign("l", ("x", "integer")),
                slot_assign("r", ("x", "integer"), ("w", "string")),
                slot_assign("o", ("x", "integer")),
            ],
            [op("aj", "anti_join", ["l", "r"], ["o"])],
        )

    def test_right_add_removes_left_from_output(self):
        egdn, val = self.anti_net()
        record_edit(egdn, val, "l", [TupleAdd((1,))])
        run_node(egdn, val, "aj")
        assert val.content("o").tuples() == {(1,)}
        delta_map = check_step(egdn, val, "aj", [("r", [TupleAdd((1, "w"))])])
        assert delta_map["o"] == [TupleRemove((1,))]

    def test_right_remove_restores(self):
        egdn, val = self.anti_net()
        record_edit(egdn, val, "l", [TupleAdd((1,))])
        record_edit(egdn, val, "r", [TupleAdd((1, "w"))])
        run_node(egdn, val, "aj")
        assert val.content("o").tuples() == set()
        delta_map = check_step(egdn, val, "aj", [("r", [TupleRemove((1, "w"))])])
        assert delta_map["o"] == [TupleAdd((1,))]

    def test_randomized_equals_brute_force(self):
        rng = random.Random(23)
        lv = (Variable("x", "integer"), Variable("k", "string"))
        rv = (Variable("x", "integer"), Variable("w", "string"))
        for _ in range(40):
            egdn, val = make_net(
                [
                    slot_assign("l", ("x", "integer"), ("k", "string")),
                    slot_assign("r", ("x", "integer"), ("w", "string")),
                    slot_assign("o", ("x", "integer"), ("k", "string")),
                ],
                [op("aj", "anti_join", ["l", "r"], ["o"])],
            )
            left = random_assignment(rng, lv, max_tuples=16, value_pool=["a", "b"])
            right = random_assignment(rng, rv, max_tuples=16, value_pool=["a", "b"])
            val2 = batch_execute(egdn, {"l": left, "r": right})
            assert val2.content("o").tuples() == brute_antijoin(left, right)


class TestGroupNodes:
    def count_net(self):
        return make_net(
            [
                slot_assign("a", ("p", "string"), ("m", "integer")),
                slot_assign("c", ("p", "string"), ("n", "integer")),
            ],
            [op("gc", "group_count", ["a"], ["c"], by=["p"])],
        )

    def test_counts(self):
        egdn, val = self.count_net()
        base = AssignmentSet((Variable("p", "string"), Variable("m", "integer")))
        for t in [("A", 1), ("A", 2), ("B", 3)]:
            base.add(t)
        val = batch_execute(egdn, {"a": base})
        assert val.content("c").tuples() == {("A", 2), ("B", 1)}
        delta_map = check_step(egdn, val, "gc", [("a", [TupleRemove(("B", 3))])])
        assert delta_map["c"] == [TupleRemove(("B", 1))]

    def test_change_emits_remove_then_add(self):
        egdn, val = self.count_net()
        val = batch_execute(egdn, {})
        record_edit(egdn, val, "a", [TupleAdd(("A", 1))])
        run_node(egdn, val, "gc")
        delta_map = check_step(egdn, val, "gc", [("a", [TupleAdd(("A", 2))])])
        assert delta_map["c"] == [TupleRemove(("A", 1)), TupleAdd(("A", 2))]

    def test_sum_requires_numeric_variable(self):
        from egdn.network import NetworkValidationError

        with pytest.raises(NetworkValidationError) as err:
            make_net(
                [
                    slot_assign("a", ("p", "string"), ("m", "string")),
                    slot_assign("c", ("p", "string"), ("s", "integer")),
                ],
                [op("gs", "group_sum", ["a"], ["c"], by=["p"], over="m")],
            )
        assert "non-numeric" in str(err.value)

    def test_sum_matches_brute_force(self):
        rng = random.Random(31)
        variables = (Variable("p", "string"), Variable("m", "integer"))
        for _ in range(40):
            egdn, _ = make_net(
                [
                    slot_assign("a", ("p", "string"), ("m", "integer")),
                    slot_assign("c", ("p", "string"), ("s", "integer")),
                ],
                [op("gs", "group_sum", ["a"], ["c"], by=["p"], over="m")],
            )
            base = random_assignment(rng, variables, max_tuples=18, value_pool=["a", "b", "c"])
            val = batch_execute(egdn, {"a": base})
            assert val.content("c").tuples() == brute_group_sum(base, ["p"], "m")
            # one incremental step
            content = val.content("a")
            tuples = sorted(content, key=repr)
            if tuples and rng.random() < 0.5:
                edits = [("a", [TupleRemove(rng.choice(tuples))])]
            else:
                t = (rng.choice("abc"), rng.randint(0, 5))
                if t in content:
                    continue
                edits = [("a", [TupleAdd(t)])]
            check_step(egdn, val, "gs", edits)
            assert val.content("c").tuples() == brute_group_sum(
                val.content("a"), ["p"], "m"
            )

    def test_count_matches_brute_force_randomized(self):
        rng = random.Random(37)
        variables = (Variable("p", "string"), Variable("m", "integer"))
        for _ in range(30):
            egdn, _ = self.count_net()
            base = random_assignment(rng, variables, max_tuples=18, value_pool=["a", "b"])
            val = batch_execute(egdn, {"a": base})
            assert val.content("c").tuples() == brute_group_count(base, ["p"])


class TestExpression:
    def expr_net(self, expr_text="x + 1"):
        return make_net(
            [
                slot_assign("a", ("x", "integer")),
                slot_assign("b", ("x", "integer"), ("y", "integer")),
            ],
            [op("ex", "expr", ["a"], ["b"], expr=expr_text)],
        )

    def test_maps_adds(self):
        egdn, val = self.expr_net()
        delta_map = check_step(egdn, val, "ex", [("a", [TupleAdd((2,))])])
        assert delta_map["b"] == [TupleAdd((2, 3))]

    def test_maps_removes(self):
        egdn, val = self.expr_net()
        check_step(egdn, val, "ex", [("a", [TupleAdd((2,))])])
        delta_map = check_step(egdn, val, "ex", [("a", [TupleRemove((2,))])])
        assert delta_map["b"] == [TupleRemove((2, 3))]

    def test_division_by_zero_aborts(self):
        egdn, val = self.expr_net("x / 0")
        record_edit(egdn, val, "a", [TupleAdd((2,))])
        with pytest.raises(EvalError):
            egdn.operations["ex"].update(val)


class TestGroupExpression:
    def net(self, expr_text="max(x)"):
        return make_net(
            [
                slot_assign("a", ("g", "string"), ("x", "integer")),
                slot_assign("b", ("g", "string"), ("r", "integer")),
            ],
            [op("ge", "group_expr", ["a"], ["b"], by=["g"], expr=expr_text)],
        )

    def test_max_updates_on_new_maximum(self):
        egdn, val = self.net()
        base = AssignmentSet((Variable("g", "string"), Variable("x", "integer")))
        base.add(("A", 1))
        base.add(("A", 3))
        val = batch_execute(egdn, {"a": base})
        assert val.content("b").tuples() == {("A", 3)}
        delta_map = check_step(egdn, val, "ge", [("a", [TupleAdd(("A", 5))])])
        assert delta_map["b"] == [TupleRemove(("A", 3)), TupleAdd(("A", 5))]

    def test_group_leaving_emits_only_remove(self):
        egdn, val = self.net()
        val = batch_execute(egdn, {})
        check_step(egdn, val, "ge", [("a", [TupleAdd(("A", 1))])])
        delta_map = check_step(egdn, val, "ge", [("a", [TupleRemove(("A", 1))])])
        assert delta_map["b"] == [TupleRemove(("A", 1))]

    def test_recompute_matches_oracle_randomized(self):
        rng = random.Random(41)
        variables = (Variable("g", "string"), Variable("x", "integer"))
        for _ in range(25):
            egdn, _ = self.net("max(x) - min(x)")
            base = random_assignment(rng, variables, max_tuples=14, value_pool=["a", "b"])
            val = batch_execute(egdn, {"a": base})
            groups = {}
            for g, x in base:
                groups.setdefault(g, []).append(x)
            expected = {(g, max(xs) - min(xs)) for g, xs in groups.items()}
            assert val.content("b").tuples() == expected


class TestDirDeclarations:
    def test_every_builtin_is_union_monotonic(self):
        egdn, _ = node_input_net()
        check_dir_monotonicity(egdn.operations["q"])
        egdn, _ = join_net(
            [("x", "integer")], [("x", "integer"), ("z", "integer")],
            [("x", "integer"), ("z", "integer")],
        )
        check_dir_monotonicity(egdn.operations["j"])
        egdn, _ = TestGroupNodes().count_net()
        check_dir_monotonicity(egdn.operations["gc"])

    def test_dir_of_empty_set_is_empty(self):
        egdn, _ = node_input_net()
        assert egdn.operations["q"].dir_delta(set()) == set()


class TestProbeBounds:
    """Index probes per single atomic delta stay within 4 * (1 + emitted)."""

    def _measure(self, egdn, val, op_id, slot_id, delta):
        record_edit(egdn, val, slot_id, [delta])
        node = egdn.operations[op_id]
        PROBES.reset()
        delta_map = node.update(val)
        probes = PROBES.reset()
        emitted = sum(len(seq) for seq in delta_map.values())
        assert probes <= 4 * (1 + emitted), (
            f"{op_id}: {probes} probes for {emitted} emitted deltas"
        )
        for s in node.output_slots:
            val.apply_to_slot(s, delta_map.get(s, []), origin="op:probe")
        node.clear_cache()
        return probes, emitted

    def test_join_probe_bound(self):
        egdn, val = join_net(
            [("x", "integer"), ("y", "integer")],
            [("y", "integer"), ("z", "integer")],
            [("x", "integer"), ("y", "integer"), ("z", "integer")],
        )
        left = AssignmentSet((Variable("x", "integer"), Variable("y", "integer")))
        right = AssignmentSet((Variable("y", "integer"), Variable("z", "integer")))
        for i in range(400):
            left.add((i, i % 20))
            right.add((i % 20, i))
        val = batch_execute(egdn, {"l": left, "r": right})
        self._measure(egdn, val, "j", "l", TupleAdd((1000, 3)))
        self._measure(egdn, val, "j", "l", TupleRemove((1000, 3)))

    def test_group_count_probe_bound(self):
        egdn, val = TestGroupNodes().count_net()
        base = AssignmentSet((Variable("p", "string"), Variable("m", "integer")))
        for i in range(500):
            base.add((f"p{i % 25}", i))
        val = batch_execute(egdn, {"a": base})
        self._measure(egdn, val, "gc", "a", TupleAdd(("p1", 10**6)))
        self._measure(egdn, val, "gc", "a", TupleRemove(("p1", 10**6)))
