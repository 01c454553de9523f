import random

import pytest

from evograph.adapters import CART_WORKAROUND
from evograph.evolve import (
    ReplayProposer,
    SeededProposer,
    challenge_level,
    context_document,
    generate_completion,
    generate_saturation,
    load_episode,
    run_episode,
    sample_deprecation_candidates,
    shortcut_candidates,
    validate_evolution,
    write_episode,
)
from evograph.fixture import CART_TOOLS
from evograph.graph import N, apply_delta, serialize, validate

from conftest import SEQUENCE


@pytest.fixture(scope="module")
def replay(desk_graph):
    return run_episode(desk_graph, SEQUENCE, ReplayProposer(0), 0)


# -- completion -------------------------------------------------------------


def test_price_alert_completion(replay):
    g1, d1 = replay.versions[1]
    assert "PriceAlert" in g1.databases
    assert {t.name for t in d1.added_tools} == {"create_price_alert", "get_price_alerts"}
    assert g1.primary_keys["PriceAlert"] == N("PriceAlert.alert_id")
    assert {N("PriceAlert.user_id"), N("PriceAlert.product_id")} <= {n.id for n in d1.added_nodes}
    links = {(str(e.source), str(e.target)) for e in g1.foreign_links if e.source.database == "PriceAlert"}
    assert links == {("PriceAlert.user_id", "User.user_id"), ("PriceAlert.product_id", "Product.product_id")}
    assert validate(g1) == []


def test_completion_is_seed_deterministic(desk_graph):
    a = generate_completion(desk_graph, SeededProposer(7), random.Random(7))
    b = generate_completion(desk_graph, SeededProposer(7), random.Random(7))
    assert serialize(a) == serialize(b)


def test_completion_grows_tools(desk_graph):
    for seed in range(10):
        delta = generate_completion(desk_graph, SeededProposer(seed), random.Random(seed))
        g = apply_delta(desk_graph, delta)
        assert len(g.tools) > len(desk_graph.tools)
        assert validate(g) == []


# -- saturation -------------------------------------------------------------


def test_refund_summary_shortcut(replay):
    tools = {t.name: t for t in replay.deltas[2].added_tools}
    t = tools["get_order_refund_summary"]
    assert t.kind == "READ"
    assert [str(n) for n in t.inputs] == ["Order.order_id"]
    assert [str(n) for n in t.outputs] == ["ExchangeRequest.request_id", "ExchangeRequest.refund_amount"]
    assert [str(n) for n in t.discovery_path] == [
        "Order.exchange_request_ids", "ExchangeRequest.request_id", "ExchangeRequest.refund_amount",
    ]


def test_saturation_zero_tools_is_empty(desk_graph):
    delta = generate_saturation(desk_graph, SeededProposer(0), 0, random.Random(0))
    assert delta.is_empty()
    assert delta.context.metadata["new_tools"] == []


def test_shortcut_candidates_are_ranked_and_new(desk_graph):
    cands = shortcut_candidates(desk_graph, random.Random(3))
    assert cands
    lengths = [len(c.path) for c in cands]
    assert lengths == sorted(lengths, reverse=True)
    existing = {(t.inputs, t.outputs) for t in desk_graph.tools}
    for c in cands:
        assert (c.proposed_inputs, c.proposed_outputs) not in existing
        assert len({n.database for n in c.path}) >= 2
        assert c.proposed_inputs[0] == desk_graph.primary_keys[c.path[0].database]


# -- deprecation ------------------------------------------------------------


def test_cart_candidate_shape(desk_graph):
    (cart,) = [c for c in sample_deprecation_candidates(desk_graph) if c.kind == "database" and c.label == "Cart"]
    assert len(cart.removed_nodes) == 5
    assert len(cart.removed_edges) == 7
    assert cart.affected_tools == CART_TOOLS
    assert challenge_level(desk_graph, cart) == "medium"


def test_cart_deprecation_context(desk_graph):
    ep = run_episode(desk_graph, ("deprecation",), ReplayProposer(0), 0)
    g1, d1 = ep.versions[1]
    assert "Cart" not in g1.databases
    assert not set(CART_TOOLS) & set(g1.tool_map)
    doc = context_document(d1)
    assert doc["workaround"] == CART_WORKAROUND
    assert doc["metadata"]["challenge_level"] == "medium"
    assert len(doc["removed_data_points"]) == 5
    assert sorted(doc["metadata"]["deprecated_tools"]) == sorted(CART_TOOLS)
    assert g1.metadata["deprecated_tools"]


def test_challenge_levels(desk_graph):
    levels = {c.label: challenge_level(desk_graph, c) for c in sample_deprecation_candidates(desk_graph)}
    assert levels["User.user_id -> User.name"] == "easy"
    assert levels["Payment"] == "medium"
    assert set(levels.values()) <= {"easy", "medium", "hard", "extreme"}


def test_candidates_all_remove_a_tool(paper_graph):
    cands = sample_deprecation_candidates(paper_graph)
    assert cands and all(c.affected_tools for c in cands)


# -- episodes ---------------------------------------------------------------


def test_empty_sequence_is_seed_only(desk_graph):
    ep = run_episode(desk_graph, (), SeededProposer(0), 0)
    assert [g.version_id for g in ep.graphs] == ["G0"]
    assert validate_evolution(ep) == []


def test_fifty_episodes(desk_graph):
    total = 0
    for seed in range(50):
        ep = run_episode(desk_graph, SEQUENCE, SeededProposer(seed), seed)
        assert validate_evolution(ep) == []
        counts = [len(g.tools) for g in ep.graphs]
        assert counts[1] > counts[0] and counts[2] > counts[1] and counts[3] < counts[2]
        deltas = [serialize(d) for d in ep.deltas[1:]]
        assert len(set(deltas)) == 3
        total += len(ep.graphs)
    assert total == 200


def test_corrupted_version_gives_one_violation(replay):
    versions = list(replay.versions)
    g2, d2 = versions[2]
    # drop a primary key that a foreign link still points at
    edge = next(e for e in g2.foreign_links)
    broken = type(g2).build(
        g2.version_id,
        [n for n in g2.nodes if n.id != edge.target],
        [e for e in g2.edges if edge.target not in (e.source, e.target)],
        g2.tools,
        g2.metadata,
    )
    assert validate(broken)
    versions[2] = (broken, d2)
    ep = type(replay)(replay.episode_id, replay.seed, replay.strategy_sequence, tuple(versions))
    problems = validate_evolution(ep)
    assert len(problems) == 1
    assert problems[0].index == 2


def test_write_load_round_trip(replay, tmp_path):
    write_episode(replay, tmp_path / "ep")
    back = load_episode(tmp_path / "ep")
    assert [serialize(g) for g in back.graphs] == [serialize(g) for g in replay.graphs]
    assert [serialize(d) for d in back.deltas[1:]] == [serialize(d) for d in replay.deltas[1:]]
    assert validate_evolution(back) == []
    assert (tmp_path / "ep" / "context_v3.json").exists()
