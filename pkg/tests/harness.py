"""Drivers that run one operation node the way the ordered scheduler
would, plus the shared conditional-correctness check."""

from egdn.model import normalize_deltas
from egdn.network import record_edit


def run_node(egdn, val, op_id):
    """Execute one node: update, apply to outputs, feed readers, clear."""
    node = egdn.operations[op_id]
    delta_map = node.update(val)
    for slot_id in node.output_slots:
        seq = delta_map.get(slot_id, [])
        val.apply_to_slot(slot_id, seq, origin=f"op:{op_id}")
        if seq:
            for reader in sorted(egdn.readers(slot_id)):
                egdn.operations[reader].cache_deltas(slot_id, seq)
    node.clear_cache()
    return delta_map


def settle(egdn, val, order):
    for op_id in order:
        run_node(egdn, val, op_id)


def check_step(egdn, val, op_id, edits):
    """Record the edits, run the node once, and verify the contract:

    1. outputs equal a fresh batch recomputation (conditional correctness;
       the valuation was consistent before the edits),
    2. emitted sequences carry no canceling pairs,
    3. an immediate second run, fed only its own echoes, emits nothing
       (non-recursiveness).
    """
    node = egdn.operations[op_id]
    for slot_id, deltas in edits:
        record_edit(egdn, val, slot_id, deltas)
    delta_map = node.update(val)
    for slot_id, seq in delta_map.items():
        assert normalize_deltas(list(seq)) == list(seq), (
            f"{op_id}: canceling pair in {seq}"
        )
    for slot_id in node.output_slots:
        val.apply_to_slot(slot_id, delta_map.get(slot_id, []), origin=f"op:{op_id}")
    node.clear_cache()
    expected = node.batch_semantics(val)
    for slot_id in node.output_slots:
        assert val.content(slot_id) == expected[slot_id], (
            f"{op_id}: output {slot_id} diverged from batch semantics"
        )
    for slot_id in set(node.output_slots) & set(node.input_slots):
        node.cache_deltas(slot_id, delta_map.get(slot_id, []))
    second = node.update(val)
    assert all(not seq for seq in second.values()), (
        f"{op_id}: second immediate update emitted {second}"
    )
    node.clear_cache()
    return delta_map


def check_dir_monotonicity(node):
    """dir is monotone and union monotonic over every input subset."""
    from itertools import combinations

    inputs = list(dict.fromkeys(node.input_slots))
    subsets = []
    for r in range(len(inputs) + 1):
        subsets.extend(frozenset(c) for c in combinations(inputs, r))
    for s1 in subsets:
        for s2 in subsets:
            d1, d2 = node.dir_delta(set(s1)), node.dir_delta(set(s2))
            if s1 <= s2:
                assert d1 <= d2, f"{node.id}: dir not monotone for {s1} vs {s2}"
            assert d1 | d2 == node.dir_delta(set(s1 | s2)), (
                f"{node.id}: dir not union monotonic for {s1}, {s2}"
            )
    assert node.dir_delta(set()) == set() or node.dir_delta(set()), "dir(∅) defined"
