import json
import random

import httpx
import pytest

from evograph.adapters import (
    CANNED_COMPLETION,
    AdapterConfig,
    ChatClient,
    LLMProposer,
    candidate_descriptions,
    canned_deprecation,
    canned_tool_proposals,
    extract_tag,
    parse_completion,
    parse_deprecation_decision,
    parse_graph_evolve_design,
    parse_task_proposal,
    parse_tool_proposals,
    parse_tool_signature,
    render_deprecation_decision,
    render_graph_evolve_design,
    render_task_proposal,
    wrap_tag,
)
from evograph.evolve import (
    ProposerError,
    ReplayProposer,
    run_episode,
    sample_deprecation_candidates,
    shortcut_candidates,
    validate_evolution,
)
from evograph.graph import READ, WRITE, N, serialize

from conftest import SEQUENCE


def test_extract_tag():
    assert extract_tag("noise <a>\n body \n</a> tail", "a") == "body"
    assert extract_tag(wrap_tag("x", "t"), "t") == "x"
    with pytest.raises(ProposerError):
        extract_tag("<a>open", "a")


def test_task_proposal_round_trip():
    text = render_task_proposal("Gift Wrap", "As a shopper, I want gift wrap.", ["- No wrap option."], ["wrap()"])
    doc = parse_task_proposal(text)
    assert doc == {"task_name": "Gift Wrap", "user_story": "As a shopper, I want gift wrap.", "gaps": ["No wrap option."]}


def test_task_proposal_needs_a_name():
    with pytest.raises(ProposerError):
        parse_task_proposal(wrap_tag("just some words", "task_proposal"))


def test_read_signature(desk_graph):
    t = parse_tool_signature("get_user_orders(user_id: User.user_id) -> List[Order]", desk_graph.node_map)
    assert t.kind == READ
    assert t.inputs == (N("User.user_id"),)
    assert N("Order.order_id") in t.outputs and N("User.user_id") not in t.outputs


def test_write_signature_and_optional(desk_graph):
    t = parse_tool_signature(
        "write_review(product_id: Product.product_id, rating: Review.rating, comment?: Review.comment) -> Review",
        desk_graph.node_map,
    )
    assert t.kind == WRITE
    assert t.optional_inputs == (N("Review.comment"),)
    assert N("Review.review_id") in t.outputs


def test_bad_signature(desk_graph):
    for sig in ("not a signature", "get_x(nope: Nope.nope) -> Order", "get_x(user_id: User.user_id) -> Nowhere"):
        with pytest.raises(ProposerError):
            parse_tool_signature(sig, desk_graph.node_map)


def test_canned_completion_parses(desk_graph):
    p = parse_completion(CANNED_COMPLETION, desk_graph)
    assert p.new_databases == ("PriceAlert",)
    assert {t.name for t in p.new_tools} == {"create_price_alert", "get_price_alerts"}
    assert len(p.new_nodes) == 7


def test_design_round_trip(desk_graph):
    p = parse_completion(CANNED_COMPLETION, desk_graph)
    again = parse_graph_evolve_design(render_graph_evolve_design(p), desk_graph)
    assert again["new_nodes"] == p.new_nodes
    assert again["new_edges"] == p.new_edges
    assert again["new_tools"] == p.new_tools


def test_design_must_be_json(desk_graph):
    with pytest.raises(ProposerError):
        parse_graph_evolve_design(wrap_tag("{not json", "graph_evolve_design"), desk_graph)


def test_tool_proposals_round_trip(desk_graph):
    cands = shortcut_candidates(desk_graph, random.Random(0))
    chosen = parse_tool_proposals(canned_tool_proposals(cands, 2), cands)
    assert len(chosen) == 2
    for c in chosen:
        assert c.tool.name
        assert c in cands or c.path in {x.path for x in cands}


def test_tool_proposals_reject_bad_items(desk_graph):
    cands = shortcut_candidates(desk_graph, random.Random(0))
    c = cands[0]
    last = len(c.path) - 1
    bad = [
        [{"path_id": 999, "input_node_ids": [0], "output_node_ids": [last]}],
        [{"path_id": 0, "input_node_ids": [last], "output_node_ids": [0]}],
        [{"path_id": 0, "input_node_ids": [0], "output_node_ids": [0]}],
        [{"path_id": 0, "input_node_ids": [0], "output_node_ids": [last], "tool_type": "WRITE"}],
        [{"path_id": 0, "input_node_ids": ["Nope.nope"], "output_node_ids": [last]}],
        {"path_id": 0},
    ]
    for items in bad:
        with pytest.raises(ProposerError):
            parse_tool_proposals(wrap_tag(json.dumps(items), "tool_proposals"), cands)


def test_candidate_descriptions_index_path(desk_graph):
    cands = shortcut_candidates(desk_graph, random.Random(0))
    docs = candidate_descriptions(cands)
    assert [d["path_id"] for d in docs] == list(range(len(cands)))
    assert docs[0]["nodes"][0] == {"node_id": 0, "node": str(cands[0].path[0])}


def test_deprecation_decision_round_trip(desk_graph):
    cands = sample_deprecation_candidates(desk_graph)
    d = parse_deprecation_decision(render_deprecation_decision(2, "r", "i", "HARD", "h"), cands)
    assert d.candidate == cands[2] and d.challenge_level == "hard" and d.workaround_hint == "h"
    with pytest.raises(ProposerError):
        parse_deprecation_decision(render_deprecation_decision(2, "r", "i", "apocalyptic", "h"), cands)
    with pytest.raises(ProposerError):
        parse_deprecation_decision(render_deprecation_decision(10_000, "r", "i", "easy", "h"), cands)


def test_canned_deprecation_picks_cart(desk_graph):
    cands = sample_deprecation_candidates(desk_graph)
    d = parse_deprecation_decision(canned_deprecation(cands), cands)
    assert d.candidate.label == "Cart"


# -- HTTP -------------------------------------------------------------------


def reply(content):
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


def test_chat_client_sends_bearer(monkeypatch):
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json=reply("hello"))

    monkeypatch.setenv("TEST_ADAPTER_KEY", "sekrit")
    cfg = AdapterConfig.from_mapping({"endpoint": "http://proposer.test/v1/chat", "model": "m",
                                      "credential_env": "TEST_ADAPTER_KEY"})
    client = ChatClient(cfg, transport=httpx.MockTransport(handler))
    assert client.complete("sys", "hi") == "hello"
    (req,) = seen
    assert req.headers["Authorization"] == "Bearer sekrit"
    body = json.loads(req.content)
    assert body["model"] == "m"
    assert [m["role"] for m in body["messages"]] == ["system", "user"]


def test_chat_client_without_key(monkeypatch):
    monkeypatch.delenv("TEST_ADAPTER_KEY", raising=False)
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json={"unexpected": True})

    cfg = AdapterConfig("http://proposer.test/", credential_env="TEST_ADAPTER_KEY")
    client = ChatClient(cfg, transport=httpx.MockTransport(handler))
    with pytest.raises(ProposerError):
        client.complete("s", "p")
    assert "Authorization" not in seen[0].headers


def test_adapter_config_needs_endpoint():
    with pytest.raises(ValueError):
        AdapterConfig.from_mapping({"model": "m"})


class CannedEndpoint:
    """Answers each prompt with the replay proposer's wire text."""

    def __init__(self, graph_holder):
        self.holder = graph_holder
        self.prompts = []

    def __call__(self, request):
        body = json.loads(request.content)
        prompt = body["messages"][1]["content"]
        self.prompts.append(prompt)
        g = self.holder[0]
        if "<task_proposal>" in prompt and "<graph_evolve_design>" not in prompt:
            text = CANNED_COMPLETION.split("</task_proposal>")[0] + "</task_proposal>"
        elif "<graph_evolve_design>" in prompt:
            text = CANNED_COMPLETION.split("</task_proposal>")[1]
        elif "<tool_proposals>" in prompt:
            text = canned_tool_proposals(self.holder[1], 2)
        else:
            text = canned_deprecation(sample_deprecation_candidates(g))
        return httpx.Response(200, json=reply(text))


def test_llm_proposer_matches_replay(desk_graph, monkeypatch):
    # the LLM route fed the canned texts must reproduce the replay episode
    holder = [desk_graph, None]
    endpoint = CannedEndpoint(holder)
    client = ChatClient(AdapterConfig("http://proposer.test/"), transport=httpx.MockTransport(endpoint))
    proposer = LLMProposer(client)

    real_select = proposer.select_shortcuts

    def select(graph, cands, n, rng):
        holder[1] = cands
        return real_select(graph, cands, n, rng)

    def deprecate(graph, cands, rng):
        holder[0] = graph
        return LLMProposer.select_deprecation(proposer, graph, cands, rng)

    monkeypatch.setattr(proposer, "select_shortcuts", select)
    monkeypatch.setattr(proposer, "select_deprecation", deprecate)
    ep = run_episode(desk_graph, SEQUENCE, proposer, 0)
    ref = run_episode(desk_graph, SEQUENCE, ReplayProposer(0), 0)
    assert validate_evolution(ep) == []
    assert [serialize(g) for g in ep.graphs] == [serialize(g) for g in ref.graphs]
    assert len(endpoint.prompts) == 4
