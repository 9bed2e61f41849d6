"""Pattern parsing and incremental pattern matching."""

import random

import pytest

from egdn.model import (
    Edge,
    EdgeAdd,
    EdgeRemove,
    TupleAdd,
    TupleRemove,
    TypedGraph,
    Variable,
    Vertex,
    VertexAdd,
    VertexRemove,
)
from egdn.network import record_edit
from egdn.pattern import (
    EdgeConstraint,
    Pattern,
    PatternError,
    parse_pattern,
    pattern_to_text,
)
from egdn.scheduler import batch_execute

from .harness import check_step, run_node
from .nets import make_net, op, slot_assign, slot_model
from .oracles import brute_pattern_matches
from .strategies import mutate_graph, random_typed_graph, TG

ASG_TG = {
    "vertexTypes": ["Package", "Type", "Method"],
    "edgeTypes": [
        {"name": "contains", "src": "Package", "tgt": "Type"},
        {"name": "methods", "src": "Type", "tgt": "Method"},
    ],
    "valueTypes": [],
}


class TestParsing:
    def test_edge_clause(self):
        p = parse_pattern("p:Package -contains-> t:Type")
        assert p.variables == (("p", "Package"), ("t", "Type"))
        assert p.edges == (EdgeConstraint("p", "contains", "t"),)

    def test_where_and_deps(self):
        p = parse_pattern(
            "a:Val; where a > 3; exists(d1: a); absent(d2: a); cross"
        )
        assert len(p.predicates) == 1
        assert [d.negative for d in p.dependencies] == [False, True]
        assert p.cross_product

    def test_round_trip_through_text(self):
        p = parse_pattern("p:Package -contains-> t:Type; exists(d: t)")
        assert parse_pattern(pattern_to_text(p)) == p

    def test_undeclared_variable_rejected(self):
        with pytest.raises(PatternError):
            parse_pattern("p -contains-> t:Type")

    def test_disconnected_needs_cross_flag(self):
        with pytest.raises(PatternError):
            parse_pattern("a:Package; b:Type")
        parse_pattern("a:Package; b:Type; cross")

    def test_structured_form(self):
        p = parse_pattern(
            {
                "vars": [["p", "Package"], ["t", "Type"]],
                "edges": [["p", "contains", "t"]],
            }
        )
        assert p.edges == (EdgeConstraint("p", "contains", "t"),)


def containment_net():
    return make_net(
        [
            slot_model("m", "asg"),
            slot_assign("a", ("p", "vertexRef"), ("t", "vertexRef")),
        ],
        [op("pm", "pattern", ["m"], ["a"], pattern="p:Package -contains-> t:Type")],
        type_graphs={"asg": ASG_TG},
    )


class TestIncrementalMatching:
    def test_edge_add_creates_match(self):
        egdn, val = containment_net()
        record_edit(
            egdn, val, "m",
            [VertexAdd("p1", "Package"), VertexAdd("t1", "Type")],
        )
        run_node(egdn, val, "pm")
        delta_map = check_step(
            egdn, val, "pm", [("m", [EdgeAdd("e1", "contains", "p1", "t1")])]
        )
        assert delta_map["a"] == [TupleAdd(("p1", "t1"))]

    def test_edge_remove_drops_match_unless_parallel_edge_remains(self):
        egdn, val = containment_net()
        record_edit(
            egdn, val, "m",
            [
                VertexAdd("p1", "Package"),
                VertexAdd("t1", "Type"),
                EdgeAdd("e1", "contains", "p1", "t1"),
                EdgeAdd("e2", "contains", "p1", "t1"),
            ],
        )
        run_node(egdn, val, "pm")
        assert val.content("a").tuples() == {("p1", "t1")}
        delta_map = check_step(egdn, val, "pm", [("m", [EdgeRemove("e1")])])
        assert delta_map["a"] == []  # e2 still supports the match
        delta_map = check_step(egdn, val, "pm", [("m", [EdgeRemove("e2")])])
        assert delta_map["a"] == [TupleRemove(("p1", "t1"))]

    def test_batch_two_packages_three_types(self):
        egdn, val = containment_net()
        deltas = [VertexAdd(f"p{i}", "Package") for i in (1, 2)]
        deltas += [VertexAdd(f"t{i}", "Type") for i in (1, 2, 3)]
        deltas += [
            EdgeAdd("e1", "contains", "p1", "t1"),
            EdgeAdd("e2", "contains", "p1", "t2"),
            EdgeAdd("e3", "contains", "p2", "t3"),
        ]
        record_edit(egdn, val, "m", deltas)
        out = egdn.operations["pm"].batch_semantics(val)["a"]
        pattern = egdn.operations["pm"].pattern
        oracle = brute_pattern_matches(pattern, val.content("m"), {})
        expected = {(b["p"], b["t"]) for b in oracle}
        assert len(expected) == 3
        assert out.tuples() == expected

    def test_where_clause_on_payloads(self):
        egdn, val = make_net(
            [
                slot_model("m", "tg"),
                slot_assign("a", ("b", "vertexRef"), ("v", "vertexRef")),
            ],
            [op("pm", "pattern", ["m"], ["a"], pattern="b:B -bv-> v:Val; where v > 3")],
            type_graphs={
                "tg": {
                    "vertexTypes": ["A", "B", "Val"],
                    "edgeTypes": [
                        {"name": "ab", "src": "A", "tgt": "B"},
                        {"name": "aa", "src": "A", "tgt": "A"},
                        {"name": "bv", "src": "B", "tgt": "Val"},
                    ],
                    "valueTypes": ["Val"],
                }
            },
        )
        record_edit(
            egdn, val, "m",
            [
                VertexAdd("b1", "B"),
                VertexAdd("w1", "Val", 2),
                VertexAdd("w2", "Val", 5),
                EdgeAdd("e1", "bv", "b1", "w1"),
                EdgeAdd("e2", "bv", "b1", "w2"),
            ],
        )
        delta_map = run_node(egdn, val, "pm")
        assert {d.values for d in delta_map["a"]} == {("b1", "w2")}

    def test_payload_output_variable(self):
        # a primitive output variable carries the payload, and removing
        # one of two equal-payload vertices keeps the collapsed tuple
        egdn, val = make_net(
            [
                slot_model("m", "tg"),
                slot_assign("a", ("b", "vertexRef"), ("v", "integer")),
            ],
            [op("pm", "pattern", ["m"], ["a"], pattern="b:B -bv-> v:Val")],
            type_graphs={
                "tg": {
                    "vertexTypes": ["B", "Val"],
                    "edgeTypes": [{"name": "bv", "src": "B", "tgt": "Val"}],
                    "valueTypes": ["Val"],
                }
            },
        )
        record_edit(
            egdn, val, "m",
            [
                VertexAdd("b1", "B"),
                VertexAdd("w1", "Val", 7),
                VertexAdd("w2", "Val", 7),
                EdgeAdd("e1", "bv", "b1", "w1"),
                EdgeAdd("e2", "bv", "b1", "w2"),
            ],
        )
        run_node(egdn, val, "pm")
        assert val.content("a").tuples() == {("b1", 7)}
        check_step(egdn, val, "pm", [("m", [EdgeRemove("e1"), VertexRemove("w1")])])
        assert val.content("a").tuples() == {("b1", 7)}
        check_step(egdn, val, "pm", [("m", [EdgeRemove("e2"), VertexRemove("w2")])])
        assert val.content("a").tuples() == set()


class TestDependencies:
    def dep_net(self, negative: bool):
        kind = "absent" if negative else "exists"
        return make_net(
            [
                slot_model("m", "asg"),
                slot_assign("d", ("p", "vertexRef")),
                slot_assign("a", ("p", "vertexRef"), ("t", "vertexRef")),
            ],
            [
                op(
                    "pm", "pattern", ["m", "d"], ["a"],
                    pattern=f"p:Package -contains-> t:Type; {kind}(d: p)",
                )
            ],
            type_graphs={"asg": ASG_TG},
        )

    def test_negative_dependency_add_removes_match(self):
        egdn, val = self.dep_net(negative=True)
        record_edit(
            egdn, val, "m",
            [
                VertexAdd("p1", "Package"),
                VertexAdd("t1", "Type"),
                EdgeAdd("e1", "contains", "p1", "t1"),
            ],
        )
        run_node(egdn, val, "pm")
        assert val.content("a").tuples() == {("p1", "t1")}
        delta_map = check_step(egdn, val, "pm", [("d", [TupleAdd(("p1",))])])
        assert delta_map["a"] == [TupleRemove(("p1", "t1"))]
        # recompute-all oracle agreement
        oracle = brute_pattern_matches(
            egdn.operations["pm"].pattern, val.content("m"), {"d": val.content("d")}
        )
        assert {(b["p"], b["t"]) for b in oracle} == val.content("a").tuples()

    def test_positive_dependency_gates_matches(self):
        egdn, val = self.dep_net(negative=False)
        record_edit(
            egdn, val, "m",
            [
                VertexAdd("p1", "Package"),
                VertexAdd("t1", "Type"),
                EdgeAdd("e1", "contains", "p1", "t1"),
            ],
        )
        run_node(egdn, val, "pm")
        assert val.content("a").tuples() == set()
        delta_map = check_step(egdn, val, "pm", [("d", [TupleAdd(("p1",))])])
        assert delta_map["a"] == [TupleAdd(("p1", "t1"))]
        delta_map = check_step(egdn, val, "pm", [("d", [TupleRemove(("p1",))])])
        assert delta_map["a"] == [TupleRemove(("p1", "t1"))]


class TestRandomizedAgainstRecompute:
    def test_random_edit_scripts_match_batch(self):
        rng = random.Random(97)
        for _ in range(25):
            egdn, val = make_net(
                [
                    slot_model("m", "rtg"),
                    slot_assign("a", ("x", "vertexRef"), ("y", "vertexRef")),
                ],
                [op("pm", "pattern", ["m"], ["a"], pattern="x:A -ab-> y:B")],
                type_graphs={
                    "rtg": {
                        "vertexTypes": ["A", "B", "Val"],
                        "edgeTypes": [
                            {"name": "ab", "src": "A", "tgt": "B"},
                            {"name": "aa", "src": "A", "tgt": "A"},
                            {"name": "bv", "src": "B", "tgt": "Val"},
                        ],
                        "valueTypes": ["Val"],
                    }
                },
            )
            base = random_typed_graph(rng, max_vertices=10, max_edges=12)
            val = batch_execute(egdn, {"m": base})
            for _ in range(3):
                before = val.content("m")
                after = mutate_graph(rng, before, steps=4)
                from egdn.model import diff

                deltas = diff(before, after)
                if not deltas:
                    continue
                check_step(egdn, val, "pm", [("m", deltas)])
                expected = egdn.operations["pm"].batch_semantics(val)["a"]
                assert val.content("a") == expected
