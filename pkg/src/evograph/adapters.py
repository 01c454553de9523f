"""Wire formats for external proposers and agents.

Proposals travel as tagged text blocks: ``<task_proposal>`` (free text),
``<graph_evolve_design>`` (JSON), ``<tool_proposals>`` (JSON list) and
``<deprecation_decision>`` (JSON). The HTTP client speaks a chat-completions
style endpoint and reads its credential from one environment variable.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

import httpx

from .evolve import (
    CHALLENGE_LEVELS,
    CompletionProposal,
    DeprecationCandidate,
    DeprecationDecision,
    ProposerError,
    SeededProposer,
    ShortcutCandidate,
    shortcut_name,
)
from .graph import (
    READ,
    WRITE,
    AttributeNode,
    EnvGraph,
    NodeId,
    RelationEdge,
    ToolSpec,
    graph_to_doc,
    normalize_type,
)

DEFAULT_CREDENTIAL_ENV = "EVOGRAPH_API_KEY"
READ_PREFIXES = ("get_", "list_", "find_", "search_", "lookup_", "check_", "view_")


def extract_tag(text: str, tag: str) -> str:
    m = re.search(rf"<{tag}>(.*?)</{tag}>", text, re.S)
    if not m:
        raise ProposerError(f"reply has no <{tag}> block")
    return m.group(1).strip()


def wrap_tag(body: str, tag: str) -> str:
    return f"<{tag}>\n{body.strip()}\n</{tag}>"


def _json_block(text: str, tag: str) -> Any:
    body = extract_tag(text, tag)
    body = re.sub(r"^```(?:json)?\s*|\s*```$", "", body)
    try:
        return json.loads(body)
    except json.JSONDecodeError as exc:
        raise ProposerError(f"<{tag}> is not valid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# completion


def parse_task_proposal(text: str) -> dict[str, Any]:
    body = extract_tag(text, "task_proposal")
    name = re.search(r"#+\s*Task:\s*(.+)", body)
    story = re.search(r'User Story:\s*"?(.+?)"?\s*$', body, re.M)
    gaps_block = re.search(r"Why Not Supported:\s*(.*?)(?:Required Capabilities Missing:|$)", body, re.S)
    gaps = [ln.strip(" -*\t") for ln in (gaps_block.group(1) if gaps_block else "").splitlines() if ln.strip()]
    if not name:
        raise ProposerError("task proposal has no task name")
    return {
        "task_name": name.group(1).strip(),
        "user_story": story.group(1).strip() if story else "",
        "gaps": gaps,
    }


def render_task_proposal(task_name: str, user_story: str, gaps: Sequence[str], capabilities: Sequence[str]) -> str:
    lines = [f"### Task: {task_name}", f'User Story: "{user_story}"', "", "Why Not Supported:", ""]
    lines += list(gaps)
    lines += ["", "Required Capabilities Missing:", ""] + list(capabilities)
    return wrap_tag("\n".join(lines), "task_proposal")


_SIG = re.compile(r"^\s*([A-Za-z_]\w*)\s*\((.*)\)\s*(?:->\s*(.+?))?\s*$")


def _resolve(name: str, nodes: Mapping[NodeId, AttributeNode], prefer: Sequence[str]) -> NodeId:
    name = name.strip().rstrip("?")
    if "." in name:
        nid = NodeId.parse(name)
        if nid not in nodes:
            raise ProposerError(f"unknown node {name}")
        return nid
    hits = sorted(n for n in nodes if n.attribute == name)
    for db in prefer:
        for h in hits:
            if h.database == db:
                return h
    if not hits:
        raise ProposerError(f"unknown node {name}")
    return hits[0]


def parse_tool_signature(
    sig: str, nodes: Mapping[NodeId, AttributeNode], prefer: Sequence[str] = ()
) -> ToolSpec:
    """``name(arg: DB.attr, opt?: DB.attr) -> DB`` into a ToolSpec. READ
    tools return every attribute of the returned database not passed in;
    WRITE tools echo the key, references and written attributes."""
    m = _SIG.match(sig)
    if not m:
        raise ProposerError(f"bad tool signature {sig!r}")
    name, arglist, ret = m.group(1), m.group(2), (m.group(3) or "").strip()
    inputs, optional = [], []
    for part in filter(None, (p.strip() for p in arglist.split(","))):
        arg, _, node = part.partition(":")
        nid = _resolve(node or arg, nodes, prefer)
        inputs.append(nid)
        if arg.strip().endswith("?") or node.strip().endswith("?"):
            optional.append(nid)
    kind = READ if name.startswith(READ_PREFIXES) else WRITE
    ret_db = re.sub(r"^(?:List\[|list\[)?(\w+).*$", r"\1", ret) if ret else ""
    if ret_db and "." in ret:
        ret_db = ret.split(".")[0]
    attrs = sorted((n for n in nodes.values() if n.database == ret_db), key=lambda n: n.id)
    if not attrs:
        raise ProposerError(f"tool {name} returns unknown database {ret!r}")
    if kind == READ:
        outputs = [n.id for n in attrs if n.id not in inputs]
    else:
        outputs = [n.id for n in attrs if n.is_primary_key or n.is_foreign_key or n.id in inputs]
    return ToolSpec(name, kind, tuple(inputs), tuple(outputs), optional_inputs=tuple(optional))


def parse_graph_evolve_design(text: str, graph: EnvGraph) -> dict[str, Any]:
    doc = _json_block(text, "graph_evolve_design")
    if not isinstance(doc, dict):
        raise ProposerError("graph_evolve_design must be an object")
    nodes = []
    for i, n in enumerate(doc.get("new_nodes", [])):
        try:
            nodes.append(AttributeNode(
                NodeId(n["database"], n["attribute"]),
                normalize_type(n.get("type", "string")),
                n.get("description", ""),
                bool(n.get("is_primary_key", False)),
                bool(n.get("is_foreign_key", False)),
                bool(n.get("modifiable", True)),
                tuple(n["allowed_values"]) if n.get("allowed_values") else None,
            ))
        except (KeyError, ValueError) as exc:
            raise ProposerError(f"new_nodes[{i}]: {exc}") from exc
    all_nodes = dict(graph.node_map)
    all_nodes.update({n.id: n for n in nodes})
    new_dbs = tuple(doc.get("new_databases", []))
    tools = {}
    for sig in doc.get("new_tools", []):
        t = parse_tool_signature(sig, all_nodes, new_dbs)
        tools[t.name] = t
    edges = []
    for i, e in enumerate(doc.get("new_edges", [])):
        try:
            names = []
            for sig in e.get("tools", []):
                t = parse_tool_signature(sig, all_nodes, new_dbs)
                tools.setdefault(t.name, t)
                names.append(t.name)
            edges.append(RelationEdge(
                NodeId(e["source_database"], e["source_attribute"]),
                NodeId(e["target_database"], e["target_attribute"]),
                e.get("relationship_type", "references"),
                e.get("cardinality", "one-to-one"),
                tuple(sorted(set(names))),
                e.get("description", ""),
            ))
        except KeyError as exc:
            raise ProposerError(f"new_edges[{i}]: missing {exc}") from exc
    return {
        "rationale": doc.get("rationale", ""),
        "new_databases": new_dbs,
        "new_nodes": tuple(nodes),
        "new_edges": tuple(edges),
        "new_tools": tuple(tools[k] for k in sorted(tools)),
    }


def parse_completion(text: str, graph: EnvGraph) -> CompletionProposal:
    task = parse_task_proposal(text)
    design = parse_graph_evolve_design(text, graph)
    return CompletionProposal(
        task["task_name"], task["user_story"], tuple(task["gaps"]), design["new_databases"],
        design["new_nodes"], design["new_edges"], design["new_tools"], design["rationale"],
    )


def _tool_text(t: ToolSpec) -> str:
    args = ", ".join(f"{n.attribute}{'?' if n in t.optional_inputs else ''}: {n}" for n in t.inputs)
    return f"{t.name}({args}) -> {t.outputs[0].database}"


def render_graph_evolve_design(p: CompletionProposal) -> str:
    doc = {
        "rationale": p.rationale,
        "new_databases": list(p.new_databases),
        "new_nodes": [
            {
                "database": n.database,
                "attribute": n.attribute,
                "type": n.value_type,
                "description": n.description,
                "is_primary_key": n.is_primary_key,
                "is_foreign_key": n.is_foreign_key,
                "modifiable": n.modifiable,
                **({"allowed_values": list(n.allowed_values)} if n.allowed_values else {}),
            }
            for n in p.new_nodes
        ],
        "new_edges": [
            {
                "source_database": e.source.database,
                "source_attribute": e.source.attribute,
                "target_database": e.target.database,
                "target_attribute": e.target.attribute,
                "relationship_type": e.relationship_type,
                "cardinality": e.cardinality,
                "description": e.description,
                "tools": [_tool_text(t) for t in p.new_tools if t.name in e.tools],
            }
            for e in p.new_edges
        ],
        "new_tools": [_tool_text(t) for t in p.new_tools],
    }
    return wrap_tag(json.dumps(doc, indent=2), "graph_evolve_design")


CANNED_COMPLETION = render_task_proposal(
    "Competitor Price Monitoring with Auto-Adjust Cart Alerts",
    "As a shopper, I want to set target prices for products in my cart and across competitor websites, "
    "and be notified when the best price becomes available.",
    [
        "No PriceAlert entity: users cannot define target prices, alert conditions, or notification preferences.",
        "No price analytics APIs: no comparison against historical, competitor, or threshold-based signals.",
    ],
    ["create_price_alert()", "tool - store a target price for a product", "get_price_alerts()",
     "tool - list a user's alerts", "PriceAlert", "entity with fields: alert_id, user_id, product_id, target_price"],
) + "\n" + wrap_tag(json.dumps({
    "rationale": "PriceAlert references both the user who set it and the product it watches.",
    "new_databases": ["PriceAlert"],
    "new_nodes": [
        {"database": "PriceAlert", "attribute": "alert_id", "type": "str", "description": "Unique alert identifier",
         "is_primary_key": True, "is_foreign_key": False, "modifiable": False},
        {"database": "PriceAlert", "attribute": "user_id", "type": "str", "description": "User who set the alert",
         "is_primary_key": False, "is_foreign_key": True, "modifiable": False},
        {"database": "PriceAlert", "attribute": "product_id", "type": "str", "description": "Watched product",
         "is_primary_key": False, "is_foreign_key": True, "modifiable": False},
        {"database": "PriceAlert", "attribute": "target_price", "type": "float", "description": "Desired price",
         "is_primary_key": False, "is_foreign_key": False, "modifiable": True},
        {"database": "PriceAlert", "attribute": "alert_type", "type": "str", "description": "Alert condition",
         "is_primary_key": False, "is_foreign_key": False, "modifiable": True,
         "allowed_values": ["price_drop", "threshold"]},
        {"database": "PriceAlert", "attribute": "status", "type": "str", "description": "Alert status",
         "is_primary_key": False, "is_foreign_key": False, "modifiable": True,
         "allowed_values": ["active", "triggered", "cancelled"]},
        {"database": "PriceAlert", "attribute": "created_at", "type": "str", "description": "Creation timestamp",
         "is_primary_key": False, "is_foreign_key": False, "modifiable": False},
    ],
    "new_edges": [
        {"source_database": "PriceAlert", "source_attribute": "user_id", "target_database": "User",
         "target_attribute": "user_id", "relationship_type": "belongs_to", "cardinality": "many-to-one",
         "description": "Alert owner",
         "tools": ["create_price_alert(user_id: User.user_id, product_id: Product.product_id, "
                   "target_price: PriceAlert.target_price, alert_type?: PriceAlert.alert_type) -> PriceAlert"]},
        {"source_database": "PriceAlert", "source_attribute": "product_id", "target_database": "Product",
         "target_attribute": "product_id", "relationship_type": "references", "cardinality": "many-to-one",
         "description": "Watched product", "tools": []},
        {"source_database": "User", "source_attribute": "user_id", "target_database": "PriceAlert",
         "target_attribute": "alert_id", "relationship_type": "contains", "cardinality": "one-to-many",
         "description": "A user's alerts", "tools": ["get_price_alerts(user_id: User.user_id) -> PriceAlert"]},
        {"source_database": "PriceAlert", "source_attribute": "alert_id", "target_database": "PriceAlert",
         "target_attribute": "target_price", "relationship_type": "has_attribute", "cardinality": "one-to-one",
         "description": "", "tools": []},
        {"source_database": "PriceAlert", "source_attribute": "alert_id", "target_database": "PriceAlert",
         "target_attribute": "alert_type", "relationship_type": "has_attribute", "cardinality": "one-to-one",
         "description": "", "tools": []},
        {"source_database": "PriceAlert", "source_attribute": "alert_id", "target_database": "PriceAlert",
         "target_attribute": "status", "relationship_type": "has_attribute", "cardinality": "one-to-one",
         "description": "", "tools": []},
        {"source_database": "PriceAlert", "source_attribute": "alert_id", "target_database": "PriceAlert",
         "target_attribute": "created_at", "relationship_type": "has_attribute", "cardinality": "one-to-one",
         "description": "", "tools": []},
    ],
    "new_tools": [],
}, indent=2), "graph_evolve_design")


# ---------------------------------------------------------------------------
# saturation


def candidate_descriptions(candidates: Sequence[ShortcutCandidate]) -> list[dict[str, Any]]:
    return [
        {
            "path_id": i,
            "nodes": [{"node_id": j, "node": str(n)} for j, n in enumerate(c.path)],
            "entry_key": str(c.proposed_inputs[0]),
        }
        for i, c in enumerate(candidates)
    ]


def render_tool_proposals(items: Sequence[Mapping[str, Any]]) -> str:
    return wrap_tag(json.dumps(list(items), indent=2), "tool_proposals")


def _path_node(cand: ShortcutCandidate, ref: Any) -> NodeId:
    """A node reference: an index into the path, or a node id that is on the
    path or is the candidate's proposed input."""
    if isinstance(ref, str) and "." in ref:
        node = NodeId.parse(ref)
        if node in cand.path or node in cand.proposed_inputs:
            return node
        raise ValueError(f"{ref} is not on the path")
    return cand.path[int(ref)]


def _position(cand: ShortcutCandidate, node: NodeId) -> int:
    return cand.path.index(node) if node in cand.path else -1


def _node_ref(cand: ShortcutCandidate, node: NodeId) -> int | str:
    return cand.path.index(node) if node in cand.path else str(node)


def parse_tool_proposals(text: str, candidates: Sequence[ShortcutCandidate]) -> list[ShortcutCandidate]:
    doc = _json_block(text, "tool_proposals")
    if not isinstance(doc, list):
        raise ProposerError("tool_proposals must be a list")
    out = []
    for i, item in enumerate(doc):
        try:
            cand = candidates[int(item["path_id"])]
            ins = tuple(dict.fromkeys(_path_node(cand, j) for j in item["input_node_ids"]))
            outs = tuple(dict.fromkeys(_path_node(cand, j) for j in item["output_node_ids"]))
        except (KeyError, IndexError, ValueError, TypeError) as exc:
            raise ProposerError(f"tool_proposals[{i}]: {exc}") from exc
        if not ins or not outs or set(ins) & set(outs):
            raise ProposerError(f"tool_proposals[{i}]: inputs and outputs must be non-empty and disjoint")
        if item.get("tool_type", READ) != READ:
            raise ProposerError(f"tool_proposals[{i}]: only READ shortcuts are supported")
        first = min(_position(cand, n) for n in ins)
        if any(_position(cand, o) <= first for o in outs):
            raise ProposerError(f"tool_proposals[{i}]: outputs must follow the first input on the path")
        tool = replace(cand.tool, name=str(item.get("tool_name", "")), inputs=ins, outputs=outs,
                       description=str(item.get("description", cand.tool.description)))
        out.append(replace(
            cand, proposed_inputs=ins, proposed_outputs=outs, tool=tool,
            rationale=str(item.get("rationale", "")), use_cases=tuple(item.get("use_cases", ())),
            relationship_type=item.get("relationship_type", "links_to")
            if item.get("relationship_type") in ("links_to", "aggregates") else "links_to",
            cardinality=item.get("cardinality", cand.cardinality),
        ))
    return out


_CANNED_SHORTCUTS = (
    (("User.user_id", "Order.order_id", "Product.product_id"), "get_user_purchased_products",
     "Products a user has purchased across all orders."),
    (("Order.exchange_request_ids", "ExchangeRequest.request_id", "ExchangeRequest.refund_amount"),
     "get_order_refund_summary", "Refund information for all exchanges of an order."),
)


def canned_tool_proposals(candidates: Sequence[ShortcutCandidate], n: int) -> str:
    items: list[dict[str, Any]] = []
    used: set[int] = set()
    taken: set[str] = set()
    for path, name, desc in _CANNED_SHORTCUTS:
        for i, c in enumerate(candidates):
            if i not in used and tuple(map(str, c.path[: len(path)])) == path and len(items) < n:
                used.add(i)
                taken.add(name)
                items.append(_proposal_item(i, c, name, desc))
                break
    for i, c in enumerate(candidates):
        if len(items) >= n:
            break
        if i not in used:
            used.add(i)
            name = shortcut_name(c, taken)
            taken.add(name)
            items.append(_proposal_item(i, c, name, c.tool.description))
    return render_tool_proposals(items)


def _proposal_item(i: int, c: ShortcutCandidate, name: str, desc: str) -> dict[str, Any]:
    return {
        "path_id": i,
        "tool_name": name,
        "tool_type": READ,
        "description": desc,
        "input_node_ids": [_node_ref(c, n) for n in c.proposed_inputs],
        "output_node_ids": [_node_ref(c, n) for n in c.proposed_outputs],
        "relationship_type": "links_to",
        "cardinality": "one-to-many",
        "rationale": c.rationale,
        "use_cases": list(c.use_cases),
    }


# ---------------------------------------------------------------------------
# deprecation


def candidate_summaries(candidates: Sequence[DeprecationCandidate]) -> list[dict[str, Any]]:
    return [
        {
            "candidate_id": i,
            "kind": c.kind,
            "description": c.describe(),
            "removed_nodes": [str(n) for n in c.removed_nodes],
            "removed_edges": [str(e) for e in c.removed_edges],
            "affected_tools": list(c.affected_tools),
        }
        for i, c in enumerate(candidates)
    ]


def render_deprecation_decision(candidate_id: int, reason: str, impact: str, level: str, hint: str) -> str:
    return wrap_tag(json.dumps({
        "candidate_id": candidate_id,
        "deprecation_reason": reason,
        "impact_summary": impact,
        "challenge_level": level,
        "workaround_hint": hint,
    }, indent=2), "deprecation_decision")


def parse_deprecation_decision(text: str, candidates: Sequence[DeprecationCandidate]) -> DeprecationDecision:
    doc = _json_block(text, "deprecation_decision")
    try:
        cand = candidates[int(doc["candidate_id"])]
    except (KeyError, IndexError, ValueError, TypeError) as exc:
        raise ProposerError(f"deprecation_decision: bad candidate_id ({exc})") from exc
    level = str(doc.get("challenge_level", "")).lower()
    if level not in CHALLENGE_LEVELS:
        raise ProposerError(f"deprecation_decision: unknown challenge level {level!r}")
    return DeprecationDecision(
        cand,
        str(doc.get("deprecation_reason", "")),
        str(doc.get("impact_summary", "")),
        level,
        str(doc.get("workaround_hint", "")),
    )


CART_REASON = (
    "Cart service undergoing scheduled maintenance for database migration to improve scalability and "
    "session handling."
)
CART_IMPACT = (
    "Users cannot view, modify, or create shopping carts. Cart-to-checkout flow is unavailable. "
    "Affects 5 data fields and 5 cart-related tools."
)
CART_WORKAROUND = (
    "Agent can still help users browse products, check order history for past purchases, look up product "
    "details, and inform users when cart service will be restored. Users can note product IDs to add later, "
    "or agent could help with wishlists if available."
)


def canned_deprecation(candidates: Sequence[DeprecationCandidate]) -> str:
    for i, c in enumerate(candidates):
        if c.kind == "database" and c.label == "Cart":
            return render_deprecation_decision(i, CART_REASON, CART_IMPACT, "medium", CART_WORKAROUND)
    idx = next((i for i, c in enumerate(candidates) if c.kind == "database"), 0)
    c = candidates[idx]
    return render_deprecation_decision(
        idx,
        f"{c.label} service is being migrated to a new architecture.",
        f"{len(c.affected_tools)} tools become unavailable.",
        "medium",
        "Use the remaining lookup tools and tell the user the service will be restored.",
    )


# ---------------------------------------------------------------------------
# HTTP transport


@dataclass(frozen=True)
class AdapterConfig:
    endpoint: str
    model: str = ""
    credential_env: str = DEFAULT_CREDENTIAL_ENV
    timeout: float = 60.0

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> AdapterConfig:
        if "endpoint" not in doc:
            raise ValueError("adapter config needs an endpoint")
        return cls(
            doc["endpoint"],
            doc.get("model", ""),
            doc.get("credential_env", DEFAULT_CREDENTIAL_ENV),
            float(doc.get("timeout", 60.0)),
        )


class ChatClient:
    """Minimal chat-completions client."""

    def __init__(self, config: AdapterConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        headers = {}
        key = os.environ.get(config.credential_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=config.timeout, headers=headers, transport=transport)

    def post_json(self, payload: Mapping[str, Any]) -> dict[str, Any]:
        resp = self._http.post(self.config.endpoint, json=dict(payload))
        resp.raise_for_status()
        return resp.json()

    def complete(self, system: str, prompt: str) -> str:
        doc = self.post_json({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": prompt}],
        })
        try:
            return doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProposerError(f"unexpected completion payload: {exc}") from exc


class LLMProposer(SeededProposer):
    """Proposer backed by a chat endpoint; replies must use the tagged
    formats above."""

    def __init__(self, client: ChatClient, domain: str = "e-commerce", num_tools_hint: int = 2):
        super().__init__(0)
        self.client = client
        self.domain = domain

    def _graph_json(self, graph: EnvGraph) -> str:
        return json.dumps(graph_to_doc(graph), sort_keys=True)

    def decide_completion(self, graph, rng):
        system = f"You are a Product Manager for a {self.domain} website proposing unsupported features."
        proposal = self.client.complete(
            system,
            "Propose a NEW feature the current system cannot support, in <task_proposal> tags.\n"
            f"Databases: {', '.join(graph.databases)}\nTools: {', '.join(t.name for t in graph.tools)}\n"
            f"Seed: {rng.randint(0, 10**6)}",
        )
        design = self.client.complete(
            f"You are a Software Architect designing data models and APIs for a {self.domain} website.",
            "Design the additions in <graph_evolve_design> JSON for this task:\n"
            f"{extract_tag(proposal, 'task_proposal')}\n\nCurrent graph:\n{self._graph_json(graph)}",
        )
        return parse_completion(proposal + "\n" + design, graph)

    def select_shortcuts(self, graph, candidates, n, rng):
        reply = self.client.complete(
            f"You are an expert API designer for {self.domain} systems.",
            f"Select exactly {n} paths and answer in <tool_proposals> JSON.\n"
            + json.dumps(candidate_descriptions(candidates), indent=2),
        )
        return parse_tool_proposals(reply, candidates)[:n]

    def select_deprecation(self, graph, candidates, rng):
        reply = self.client.complete(
            f"You are an expert system architect managing API deprecations in a {self.domain} website.",
            "Select ONE candidate and answer in <deprecation_decision> JSON.\n"
            + json.dumps(candidate_summaries(candidates), indent=2),
        )
        return parse_deprecation_decision(reply, candidates)
