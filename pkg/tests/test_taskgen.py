import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evograph.graph import N, is_weakly_connected
from evograph.sandbox import Fact
from evograph.taskgen import (
    PROFILES,
    FactPattern,
    TaskInstance,
    difficulty_counts,
    expand_active,
    fold_knowledge,
    generate_tasks,
    replay_reference,
    sample_scope_with_chain,
)

from oracles import bfs_connected


def test_difficulty_counts():
    assert difficulty_counts(15) == {"easy": 5, "medium": 5, "hard": 5}
    assert difficulty_counts(0) == {"easy": 0, "medium": 0, "hard": 0}
    assert difficulty_counts(6, (1, 0, 1)) == {"easy": 3, "medium": 0, "hard": 3}
    with pytest.raises(ValueError):
        difficulty_counts(3, (0, 0, 0))


@settings(max_examples=200)
@given(st.integers(0, 200), st.lists(st.integers(0, 5), min_size=3, max_size=3).filter(lambda m: sum(m) > 0))
def test_difficulty_counts_sum(count, mix):
    c = difficulty_counts(count, mix)
    assert sum(c.values()) == count and min(c.values()) >= 0


def test_zero_tasks(desk_graph):
    assert generate_tasks(desk_graph, 0, rng=random.Random(0)) == []


@pytest.mark.parametrize("difficulty", ["easy", "medium", "hard"])
def test_scope_profiles(difficulty, desk_graph):
    rng = random.Random(difficulty)
    profile = PROFILES[difficulty]
    for _ in range(100):
        sub, chain = sample_scope_with_chain(desk_graph, difficulty, rng)
        dbs = len(sub.databases)
        if difficulty == "easy":
            assert dbs <= 2
        if difficulty == "hard":
            assert dbs >= 3
        assert profile.nodes[0] <= len(sub.nodes) <= profile.nodes[1]
        assert set(chain) <= set(sub.tool_map)
        assert bfs_connected([n.id for n in sub.nodes], [(e.source, e.target) for e in sub.edges])
        assert is_weakly_connected(sub)


def test_tasks_follow_mix(episodes_with_tasks):
    for ep, tasks in episodes_with_tasks:
        for g in ep.graphs:
            ts = tasks[g.version_id]
            assert [t.difficulty for t in ts] == ["easy"] * 2 + ["medium"] * 2 + ["hard"] * 2
            assert len({t.task_id for t in ts}) == len(ts)
            assert all(t.env_version == g.version_id for t in ts)


def test_reference_replays_to_final_knowledge(episodes_with_tasks):
    for ep, tasks in episodes_with_tasks:
        env = {g.version_id: g for g in ep.graphs}
        for vid, ts in tasks.items():
            for t in ts:
                assert replay_reference(t, env[vid]) == t.reference.final_knowledge


def test_knowledge_is_fold_of_turn_facts(episodes_with_tasks):
    for _, tasks in episodes_with_tasks:
        for ts in tasks.values():
            for t in ts:
                per_turn = [turn.facts for turn in t.reference.turns]
                union = set()
                for fs in per_turn:
                    union |= fs
                assert fold_knowledge(per_turn)[-1] == union == t.reference.final_knowledge


def test_active_set_grows_and_recomputes(episodes_with_tasks):
    for ep, tasks in episodes_with_tasks:
        env = {g.version_id: g for g in ep.graphs}
        for vid, ts in tasks.items():
            for t in ts:
                active = frozenset()
                for turn in t.reference.turns:
                    tool = env[vid].tool_map[turn.action.tool]
                    again = expand_active(active, tool, turn.facts, turn.revealed)
                    assert again == turn.active
                    assert active < turn.active
                    active = turn.active


def test_criteria_are_met_by_reference(episodes_with_tasks):
    for _, tasks in episodes_with_tasks:
        for ts in tasks.values():
            for t in ts:
                assert len(t.instructions) == len(t.reference.turns)
                for ins, turn in zip(t.instructions, t.reference.turns):
                    assert ins.criterion
                    for p in ins.criterion:
                        hits = [f for f in turn.facts if f.node == p.node]
                        assert hits and (p.wildcard or any(f.value == p.value for f in hits))


def test_fold_knowledge_is_monotone():
    facts = [
        {Fact(N("User.name"), "u1", "A")},
        set(),
        {Fact(N("User.name"), "u1", "A"), Fact(N("Order.status"), "o1", "delivered")},
    ]
    ks = fold_knowledge(facts)
    assert [len(k) for k in ks] == [1, 1, 2]
    assert ks[0] <= ks[1] <= ks[2]


def test_task_doc_round_trip(episodes_with_tasks):
    _, tasks = episodes_with_tasks[0]
    for ts in tasks.values():
        for t in ts:
            text = json.dumps(t.to_doc(), sort_keys=True)
            back = TaskInstance.from_doc(json.loads(text))
            assert json.dumps(back.to_doc(), sort_keys=True) == text
            assert back.reference == t.reference


def test_fact_pattern_doc():
    p = FactPattern(N("Order.product_ids"), ("a", "b"))
    assert FactPattern.from_doc(p.to_doc()) == p
    assert FactPattern(N("Order.status")).wildcard


def test_generation_is_deterministic(desk_graph):
    a = generate_tasks(desk_graph, 3, rng=random.Random(11))
    b = generate_tasks(desk_graph, 3, rng=random.Random(11))
    assert [json.dumps(t.to_doc(), sort_keys=True) for t in a] == [json.dumps(t.to_doc(), sort_keys=True) for t in b]
