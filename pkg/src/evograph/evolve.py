"""Environment evolution: completion, saturation and deprecation deltas,
episode orchestration and post-evolution coherence checks."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

from .graph import (
    READ,
    WRITE,
    AttributeNode,
    EnvGraph,
    GraphDelta,
    NodeId,
    NoPathError,
    RelationEdge,
    ToolSpec,
    Violation,
    apply_delta,
    deserialize,
    dumps,
    find_bridges,
    random_walk,
    serialize,
    validate,
)
from .sandbox import (
    SandboxError,
    build_call,
    execute_tool,
    focus_entities,
    focus_prerequisites,
    link_path,
    materialize,
    snake,
    tool_databases,
)

COMPLETION, SATURATION, DEPRECATION = "completion", "saturation", "deprecation"
CHALLENGE_LEVELS = ("easy", "medium", "hard", "extreme")
CHALLENGE_PREFERENCE = ("medium", "hard", "easy", "extreme")


class ProposerError(Exception):
    """A proposal that cannot be turned into a valid delta."""


class NoCandidatesError(Exception):
    pass


class EpisodeError(Exception):
    def __init__(self, step: int, strategy: str, cause: Exception):
        super().__init__(f"step {step} ({strategy}): {cause}")
        self.step = step
        self.strategy = strategy
        self.cause = cause


@dataclass(frozen=True)
class EvolutionContext:
    strategy: str
    title: str
    narrative: str
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def to_doc(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy,
            "title": self.title,
            "narrative": self.narrative,
            "metadata": json.loads(json.dumps(dict(self.metadata), sort_keys=True)),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> EvolutionContext:
        return cls(doc["strategy"], doc.get("title", ""), doc.get("narrative", ""), dict(doc.get("metadata", {})))


@dataclass(frozen=True)
class CompletionProposal:
    task_name: str
    user_story: str
    gaps: tuple[str, ...]
    new_databases: tuple[str, ...]
    new_nodes: tuple[AttributeNode, ...]
    new_edges: tuple[RelationEdge, ...]
    new_tools: tuple[ToolSpec, ...]
    rationale: str = ""


@dataclass(frozen=True)
class ShortcutCandidate:
    path: tuple[NodeId, ...]
    proposed_inputs: tuple[NodeId, ...]
    proposed_outputs: tuple[NodeId, ...]
    tool: ToolSpec
    rationale: str = ""
    use_cases: tuple[str, ...] = ()
    relationship_type: str = "links_to"
    cardinality: str = "one-to-many"

    def describe(self) -> dict[str, Any]:
        return {
            "path": [str(n) for n in self.path],
            "inputs": [str(n) for n in self.proposed_inputs],
            "outputs": [str(n) for n in self.proposed_outputs],
        }


@dataclass(frozen=True)
class DeprecationCandidate:
    kind: str
    removed_edges: tuple[RelationEdge, ...]
    removed_nodes: tuple[NodeId, ...]
    affected_tools: tuple[str, ...]

    @property
    def label(self) -> str:
        if self.kind == "database":
            return self.removed_nodes[0].database
        return str(self.removed_edges[0])

    def sort_key(self):
        first = self.removed_nodes[0] if self.removed_nodes else self.removed_edges[0].source
        second = self.removed_edges[0].target if self.removed_edges else first
        return (self.kind, first, second)

    def describe(self) -> str:
        if self.kind == "database":
            return f"Service down: {self.label} ({len(self.removed_nodes)} nodes, {len(self.removed_edges)} edges)"
        return f"Connection removed: {self.label} ({len(self.affected_tools)} tools affected)"


@dataclass(frozen=True)
class DeprecationDecision:
    candidate: DeprecationCandidate
    reason: str
    impact: str
    challenge_level: str
    workaround_hint: str


class Proposer(Protocol):
    def decide_completion(self, graph: EnvGraph, rng: random.Random) -> CompletionProposal: ...

    def select_shortcuts(
        self, graph: EnvGraph, candidates: Sequence[ShortcutCandidate], n: int, rng: random.Random
    ) -> list[ShortcutCandidate]: ...

    def select_deprecation(
        self, graph: EnvGraph, candidates: Sequence[DeprecationCandidate], rng: random.Random
    ) -> DeprecationDecision: ...


# ---------------------------------------------------------------------------
# completion

# (name, primary key, [(attribute, type, allowed values)], preferred parents, feature)
_TEMPLATES: tuple[tuple[str, str, tuple, tuple[str, ...], str], ...] = (
    ("PriceAlert", "alert_id",
     (("target_price", "float", None), ("alert_type", "string", ("price_drop", "threshold")),
      ("status", "string", ("active", "triggered", "cancelled"))),
     ("User", "Product"), "set target prices and be told when a product gets cheaper"),
    ("Wishlist", "wishlist_id",
     (("title", "string", None), ("is_public", "boolean", None)),
     ("User", "Product"), "save products to a wishlist for later"),
    ("Subscription", "subscription_id",
     (("frequency", "string", ("weekly", "monthly", "quarterly")), ("status", "string", ("active", "paused"))),
     ("User", "Product"), "subscribe to regular deliveries of a product"),
    ("GiftCard", "gift_card_id",
     (("balance", "float", None), ("code", "string", None), ("status", "string", ("active", "redeemed"))),
     ("User",), "buy and redeem gift cards"),
    ("LoyaltyAccount", "loyalty_account_id",
     (("points", "integer", None), ("tier", "string", ("bronze", "silver", "gold"))),
     ("User",), "collect loyalty points on purchases"),
    ("ProductQuestion", "question_id",
     (("question_text", "string", None), ("answer_text", "optional[string]", None)),
     ("Product", "User"), "ask questions about a product before buying"),
    ("ReturnLabel", "label_id",
     (("carrier", "string", ("ups", "fedex", "usps")), ("tracking_number", "string", None)),
     ("Order",), "print a prepaid return label for an order"),
    ("SupportTicket", "ticket_id",
     (("subject", "string", None), ("priority", "string", ("low", "normal", "urgent")),
      ("status", "string", ("open", "closed"))),
     ("User", "Order"), "open a support ticket about an order"),
    ("PriceHistory", "record_id",
     (("price", "float", None), ("source", "string", ("site", "competitor"))),
     ("Product",), "see how a product's price changed over time"),
    ("DeliverySlot", "slot_id",
     (("window", "string", ("morning", "afternoon", "evening")), ("fee", "float", None)),
     ("Order",), "pick a delivery time window for an order"),
)


def build_completion(
    graph: EnvGraph,
    name: str,
    pk_attr: str,
    fields: Sequence[tuple[str, str, Sequence[str] | None]],
    parents: Sequence[str],
    *,
    task_name: str,
    user_story: str,
    tool_stem: str | None = None,
) -> CompletionProposal:
    """A new database hanging off ``parents`` with create/list/detail tools."""
    stem = tool_stem or snake(name)
    pk = NodeId(name, pk_attr)
    nodes = [AttributeNode(pk, "string", f"Unique {stem.replace('_', ' ')} identifier", is_primary_key=True, modifiable=False)]
    edges: list[RelationEdge] = []
    fk_nodes = []
    for p in parents:
        ppk = graph.primary_keys[p]
        fk = NodeId(name, ppk.attribute)
        fk_nodes.append(fk)
        nodes.append(AttributeNode(fk, graph.node_map[ppk].value_type, f"Owning {p} reference", is_foreign_key=True, modifiable=False))
    data = []
    for attr, typ, allowed in fields:
        nid = NodeId(name, attr)
        data.append(nid)
        nodes.append(AttributeNode(nid, typ, attr.replace("_", " ").capitalize(),
                                   allowed_values=tuple(allowed) if allowed else None))
    created = NodeId(name, "created_at")
    nodes.append(AttributeNode(created, "string", "Creation timestamp", modifiable=False))

    create = f"create_{stem}"
    lister = f"list_{stem}s"
    details = f"get_{stem}_details"
    parent_pks = [graph.primary_keys[p] for p in parents]
    tools = [
        ToolSpec(create, WRITE, tuple(parent_pks) + tuple(data), (pk, *fk_nodes, *data),
                 f"Create a {stem.replace('_', ' ')}"),
        ToolSpec(lister, READ, (parent_pks[0],), (pk, *data), f"List {stem.replace('_', ' ')}s of a {parents[0]}"),
        ToolSpec(details, READ, (pk,), (*fk_nodes, *data, created), f"Details of one {stem.replace('_', ' ')}"),
    ]
    for fk, ppk in zip(fk_nodes, parent_pks):
        edges.append(RelationEdge(pk, fk, "has_attribute", "one-to-one", (details,)))
        edges.append(RelationEdge(fk, ppk, "belongs_to", "many-to-one", (create,), f"{name} belongs to {ppk.database}"))
    for nid in data:
        edges.append(RelationEdge(pk, nid, "has_attribute", "one-to-one", (details,)))
    edges.append(RelationEdge(pk, created, "has_attribute", "one-to-one", (details,)))
    edges.append(RelationEdge(parent_pks[0], pk, "contains", "one-to-many", (create, lister),
                              f"{parents[0]} has many {name} entries"))
    gaps = (
        f"No {name} entity: the system cannot store this information.",
        f"No tool to create or list {stem.replace('_', ' ')}s.",
    )
    return CompletionProposal(task_name, user_story, gaps, (name,), tuple(nodes), tuple(edges), tuple(tools),
                              f"{name} attaches to {', '.join(parents)} through foreign keys.")


def check_proposal(graph: EnvGraph, proposal: CompletionProposal) -> None:
    new_ids = {n.id for n in proposal.new_nodes}
    for db in proposal.new_databases:
        if db in graph.databases:
            raise ProposerError(f"database {db} already exists")
        pks = [n for n in proposal.new_nodes if n.database == db and n.is_primary_key]
        if len(pks) != 1:
            raise ProposerError(f"database {db} needs exactly one primary key, got {len(pks)}")
        attached = any(
            (e.source.database == db) != (e.target.database == db)
            and ((e.source in graph.node_map) or (e.target in graph.node_map))
            for e in proposal.new_edges
        )
        if not attached:
            raise ProposerError(f"database {db} is an island")
    for e in proposal.new_edges:
        for end in (e.source, e.target):
            if end not in new_ids and end not in graph.node_map:
                raise ProposerError(f"edge {e} references unknown node {end}")
    if not proposal.new_tools:
        raise ProposerError("proposal adds no tools")
    for t in proposal.new_tools:
        if t.name in graph.tool_map:
            raise ProposerError(f"tool {t.name} already exists")


def generate_completion(graph: EnvGraph, proposer: Proposer, rng: random.Random) -> GraphDelta:
    proposal = proposer.decide_completion(graph, rng)
    check_proposal(graph, proposal)
    names = sorted(t.name for t in proposal.new_tools)
    ctx = EvolutionContext(
        COMPLETION,
        proposal.task_name,
        f'User story: "{proposal.user_story}"\nWhy not supported:\n'
        + "\n".join(f"- {g}" for g in proposal.gaps)
        + f"\nNew entities: {', '.join(proposal.new_databases)}\nNew tools: {', '.join(names)}",
        {
            "new_tools": names,
            "deprecated_tools": [],
            "new_databases": list(proposal.new_databases),
            "user_story": proposal.user_story,
            "rationale": proposal.rationale,
        },
    )
    delta = GraphDelta(
        COMPLETION,
        added_nodes=proposal.new_nodes,
        added_edges=proposal.new_edges,
        added_tools=proposal.new_tools,
        context=ctx,
    ).canonical()
    problems = validate(apply_delta(graph, delta))
    if problems:
        raise ProposerError(f"proposal yields an invalid graph: {problems[0]}")
    return delta


# ---------------------------------------------------------------------------
# saturation


def _shortcut_from_path(graph: EnvGraph, path: Sequence[NodeId]) -> ShortcutCandidate | None:
    path = tuple(path)
    if len({n.database for n in path}) < 2:
        return None
    for u, v in zip(path, path[1:]):
        if u.database != v.database and link_path(graph, u.database, v.database) is None:
            return None
    last_db = path[-1].database
    first_db = path[0].database
    leave = next(i for i, n in enumerate(path) if n.database != first_db)
    # walks that come back to their starting table are round trips, not shortcuts
    if any(n.database == first_db for n in path[leave:]):
        return None
    # keyed on the first table's primary key when the walk starts on another attribute
    inp = graph.primary_keys.get(first_db, path[0])
    if inp in path:
        path = path[path.index(inp):]
    outs = tuple(dict.fromkeys(n for n in path if n.database == last_db and n != inp))
    if not outs:
        return None
    tool = ToolSpec(
        "",
        READ,
        (inp,),
        outs,
        f"Shortcut from {inp} to {', '.join(str(o) for o in outs)}",
        discovery_path=path,
    )
    return ShortcutCandidate(path, (inp,), outs, tool,
                             f"Collapses a {len(path) - 1}-hop traversal into one call.")


def _executable(graph: EnvGraph, tool: ToolSpec) -> bool:
    """Whether ``tool`` returns records on a linked focus store."""
    rng = random.Random(tool.signature())
    graph = EnvGraph.build(graph.version_id, graph.nodes, graph.edges, (*graph.tools, tool), graph.metadata)
    prereqs = focus_prerequisites(graph, tool_databases(graph, tool), rng)
    state = materialize(graph, prereqs, rng)
    call = build_call(graph, tool, focus_entities(state, prereqs))
    if call is None:
        return False
    try:
        execute_tool(state, call)
    except SandboxError:
        return False
    return True


def shortcut_candidates(
    graph: EnvGraph,
    rng: random.Random,
    *,
    min_len: int = 2,
    max_len: int = 4,
    walks_per_node: int = 4,
) -> list[ShortcutCandidate]:
    """Distinct multi-database shortcut candidates found by random walks,
    ranked longest path first, then lexicographically."""
    existing = {(t.inputs, t.outputs) for t in graph.tools}
    links = {(e.source, e.target) for e in graph.edges if e.relationship_type in ("links_to", "aggregates")}
    found: dict[tuple, ShortcutCandidate] = {}
    for start in sorted(n.id for n in graph.nodes):
        if not graph.out_neighbors.get(start):
            continue
        for _ in range(walks_per_node):
            try:
                path = random_walk(graph, start, min_len, max_len, rng)
            except NoPathError:
                break
            cand = _shortcut_from_path(graph, path)
            if cand is None:
                continue
            key = (cand.proposed_inputs, cand.proposed_outputs)
            if key in existing or key in found or (cand.proposed_inputs[0], cand.proposed_outputs[-1]) in links:
                continue
            found[key] = cand
    ranked = sorted(found.values(), key=lambda c: (-len(c.path), [str(n) for n in c.path]))
    return [c for c in ranked if _executable(graph, replace(c.tool, name="probe"))]


def shortcut_name(candidate: ShortcutCandidate, taken: set[str]) -> str:
    first = candidate.proposed_inputs[0]
    last = candidate.proposed_outputs[-1]
    db = snake(last.database)
    if last.attribute == f"{db}_id" or last.attribute == "id":
        label = f"{db}s"
    elif last.attribute.startswith(db):
        label = last.attribute
    else:
        label = f"{db}_{last.attribute}"
    base = f"get_{label}_by_{first.attribute}"
    name, i = base, 2
    while name in taken:
        name = f"{base}_{i}"
        i += 1
    return name


def generate_saturation(
    graph: EnvGraph,
    proposer: Proposer,
    num_tools: int,
    rng: random.Random,
    *,
    min_len: int = 2,
    max_len: int = 4,
) -> GraphDelta:
    if num_tools <= 0:
        return GraphDelta(SATURATION, context=EvolutionContext(
            SATURATION, "Saturation Evolution", "No shortcut tools requested.",
            {"new_tools": [], "deprecated_tools": []}))
    candidates = shortcut_candidates(graph, rng, min_len=min_len, max_len=max_len)
    if not candidates:
        raise NoCandidatesError(f"no shortcut path of {min_len}..{max_len} hops")
    chosen = proposer.select_shortcuts(graph, candidates, min(num_tools, len(candidates)), rng)
    taken = set(graph.tool_map)
    tools, edges, lines = [], [], []
    endpoints = set()
    for c in chosen:
        name = c.tool.name or shortcut_name(c, taken)
        if name in taken:
            raise ProposerError(f"tool {name} already exists")
        end = (c.proposed_inputs[0], c.proposed_outputs[-1], c.relationship_type)
        if end in endpoints or end in graph.edge_map:
            raise ProposerError(f"shortcut edge {end[0]} -> {end[1]} already exists")
        endpoints.add(end)
        taken.add(name)
        tool = replace(c.tool, name=name, inputs=c.proposed_inputs, outputs=c.proposed_outputs, discovery_path=c.path)
        tools.append(tool)
        edges.append(RelationEdge(end[0], end[1], c.relationship_type, c.cardinality, (name,), tool.description))
        lines.append(
            f"{name} ({tool.kind}): inputs {', '.join(map(str, tool.inputs))}; "
            f"outputs {', '.join(map(str, tool.outputs))}; discovery path {' -> '.join(map(str, c.path))}"
        )
    names = sorted(t.name for t in tools)
    ctx = EvolutionContext(
        SATURATION,
        "Saturation Evolution: New Shortcut Tools",
        "Shortcut tools give direct access to data previously reachable only through multi-hop traversals.\n"
        + "\n".join(lines),
        {
            "new_tools": names,
            "deprecated_tools": [],
            "discovery_paths": {t.name: [str(n) for n in t.discovery_path] for t in tools},
        },
    )
    return GraphDelta(SATURATION, added_edges=tuple(edges), added_tools=tuple(tools), context=ctx).canonical()


# ---------------------------------------------------------------------------
# deprecation


def affected_tools(graph: EnvGraph, nodes: Sequence[NodeId], edges: Sequence[RelationEdge]) -> tuple[str, ...]:
    gone = set(nodes)
    out = {name for e in edges for name in e.tools}
    for t in graph.tools:
        if gone & (t.nodes | set(t.discovery_path)):
            out.add(t.name)
    return tuple(sorted(out))


def sample_deprecation_candidates(graph: EnvGraph, rng: random.Random | None = None) -> list[DeprecationCandidate]:
    """Peripheral edges, whole databases and cross-database bridges that
    would remove at least one tool."""
    out: list[DeprecationCandidate] = []
    degree: dict[NodeId, int] = {}
    for e in graph.edges:
        degree[e.source] = degree.get(e.source, 0) + 1
        degree[e.target] = degree.get(e.target, 0) + 1
    for e in graph.edges:
        if degree.get(e.target) == 1:
            out.append(DeprecationCandidate("peripheral_edge", (e,), (), affected_tools(graph, (), (e,))))
    for db in graph.databases:
        pk = graph.primary_keys.get(db)
        referrers = {e.source.database for e in graph.foreign_links if e.target == pk}
        if len(referrers) >= 3:
            continue
        nodes = tuple(n.id for n in graph.attributes_of(db))
        edges = tuple(e for e in graph.edges if e.source.database == db or e.target.database == db)
        out.append(DeprecationCandidate("database", edges, nodes, affected_tools(graph, nodes, edges)))
    for e in find_bridges(graph):
        if e.crosses_databases:
            out.append(DeprecationCandidate("bridge", (e,), (), affected_tools(graph, (), (e,))))
    out = [c for c in out if c.affected_tools]
    return sorted(out, key=DeprecationCandidate.sort_key)


def challenge_level(graph: EnvGraph, cand: DeprecationCandidate) -> str:
    if len(cand.affected_tools) >= 0.4 * max(1, len(graph.tools)):
        return "extreme"
    if cand.kind == "peripheral_edge":
        return "easy"
    if cand.kind == "database":
        return "medium" if len(cand.affected_tools) <= 5 else "hard"
    return "hard"


def deprecation_delta(graph: EnvGraph, decision: DeprecationDecision) -> GraphDelta:
    cand = decision.candidate
    gone_tools = set(cand.affected_tools)
    removed_edges = {e.key: e for e in cand.removed_edges}
    stripped = []
    for e in graph.edges:
        if e.key in removed_edges or not gone_tools & set(e.tools):
            continue
        removed_edges[e.key] = e
        stripped.append(replace(e, tools=tuple(x for x in e.tools if x not in gone_tools)))
    connections = [
        {"edge": str(e), "tools": [graph.tool_map[x].signature() for x in e.tools if x in gone_tools]}
        for e in cand.removed_edges
    ]
    deprecated = [graph.tool_map[x].signature() for x in cand.affected_tools]
    ctx = EvolutionContext(
        DEPRECATION,
        "System Deprecation Notice",
        f"{cand.describe()}\nReason: {decision.reason}\nImpact: {decision.impact}\n"
        f"Challenge level: {decision.challenge_level.upper()}\nWorkaround: {decision.workaround_hint}\n"
        f"Deprecated tools: {', '.join(cand.affected_tools)}",
        {
            "new_tools": [],
            "deprecated_tools": list(cand.affected_tools),
            "kind": cand.kind,
            "description": cand.describe(),
            "reason": decision.reason,
            "impact": decision.impact,
            "challenge_level": decision.challenge_level,
            "workaround_hint": decision.workaround_hint,
            "removed_connections": connections,
            "removed_data_points": [str(n) for n in cand.removed_nodes],
            "deprecated_tool_signatures": deprecated,
        },
    )
    return GraphDelta(
        DEPRECATION,
        removed_nodes=tuple(graph.node_map[n] for n in cand.removed_nodes),
        removed_edges=tuple(removed_edges.values()),
        added_edges=tuple(stripped),
        removed_tools=tuple(graph.tool_map[x] for x in cand.affected_tools),
        context=ctx,
    ).canonical()


def generate_deprecation(graph: EnvGraph, proposer: Proposer, rng: random.Random) -> GraphDelta:
    candidates = sample_deprecation_candidates(graph, rng)
    if not candidates:
        raise NoCandidatesError("no deprecation candidate removes a tool")
    decision = proposer.select_deprecation(graph, candidates, rng)
    if decision.candidate not in candidates:
        raise ProposerError("decision names an unknown candidate")
    if decision.challenge_level not in CHALLENGE_LEVELS:
        raise ProposerError(f"unknown challenge level {decision.challenge_level!r}")
    return deprecation_delta(graph, decision)


def context_document(delta: GraphDelta) -> dict[str, Any]:
    """The per-version context file: narrative plus headline sections."""
    ctx = delta.context
    doc = ctx.to_doc() if ctx is not None else {"strategy": delta.strategy, "title": "", "narrative": "", "metadata": {}}
    if delta.strategy == DEPRECATION and ctx is not None:
        meta = ctx.metadata
        doc["removed_connections"] = list(meta.get("removed_connections", []))
        doc["removed_data_points"] = list(meta.get("removed_data_points", []))
        doc["deprecated_tools"] = list(meta.get("deprecated_tool_signatures", []))
        doc["workaround"] = meta.get("workaround_hint", "")
    return doc


# ---------------------------------------------------------------------------
# proposers


class SeededProposer:
    """Deterministic template-driven decisions."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def decide_completion(self, graph: EnvGraph, rng: random.Random) -> CompletionProposal:
        have = set(graph.databases)
        fresh = [t for t in _TEMPLATES if t[0] not in have]
        name, pk, fields, preferred, feature = rng.choice(fresh or list(_TEMPLATES))
        base, i = name, 2
        while name in have:
            name = f"{base}{i}"
            i += 1
        pkeys = sorted(graph.primary_keys)
        if not pkeys:
            raise ProposerError("graph has no primary keys to attach to")
        parents = [p for p in preferred if p in graph.primary_keys]
        if not parents:
            parents = [rng.choice(pkeys)]
        parents = parents[: rng.randint(1, min(2, len(parents)))]
        stem = snake(name)
        return build_completion(
            graph, name, pk, fields, parents,
            task_name=f"{' '.join(_words(name)).title()} Support",
            user_story=f"As a shopper, I want to {feature}.",
            tool_stem=stem,
        )

    def select_shortcuts(self, graph, candidates, n, rng):
        return list(candidates[:n])

    def select_deprecation(self, graph, candidates, rng):
        by_level: dict[str, list[DeprecationCandidate]] = {}
        for c in candidates:
            by_level.setdefault(challenge_level(graph, c), []).append(c)
        for level in CHALLENGE_PREFERENCE:
            if level in by_level:
                cand = rng.choice(by_level[level])
                return DeprecationDecision(cand, *describe_deprecation(graph, cand), level,
                                           workaround_for(graph, cand))
        raise NoCandidatesError("no candidates")


def _words(name: str) -> list[str]:
    return snake(name).split("_")


def describe_deprecation(graph: EnvGraph, cand: DeprecationCandidate) -> tuple[str, str]:
    if cand.kind == "database":
        reason = f"{cand.label} service undergoing scheduled maintenance for a database migration."
    elif cand.kind == "bridge":
        reason = f"The integration {cand.label} is being retired as part of an API consolidation."
    else:
        reason = f"The endpoint behind {cand.label} is being sunset."
    impact = (
        f"Affects {len(cand.removed_nodes)} data fields and {len(cand.affected_tools)} tools: "
        + ", ".join(cand.affected_tools)
        + "."
    )
    return reason, impact


def workaround_for(graph: EnvGraph, cand: DeprecationCandidate) -> str:
    gone = set(cand.affected_tools)
    dbs = {n.database for n in cand.removed_nodes} | {
        x.database for e in cand.removed_edges for x in (e.source, e.target)
    }
    alternatives = sorted(
        t.name for t in graph.tools if t.name not in gone and {n.database for n in t.nodes} & dbs
    )[:3]
    alt = f"Use {', '.join(alternatives)} where possible" if alternatives else "No direct alternative exists"
    return f"{alt}; note the details the user provides so they can be applied once the service is restored."


class ReplayProposer(SeededProposer):
    """Canned decisions taken from worked examples, expressed in the tagged
    wire formats and parsed back through the adapter parsers."""

    def decide_completion(self, graph, rng):
        from .adapters import CANNED_COMPLETION, parse_completion

        if "PriceAlert" in graph.databases or not {"User", "Product"} <= set(graph.databases):
            return super().decide_completion(graph, rng)
        return parse_completion(CANNED_COMPLETION, graph)

    def select_shortcuts(self, graph, candidates, n, rng):
        from .adapters import canned_tool_proposals, parse_tool_proposals

        return parse_tool_proposals(canned_tool_proposals(candidates, n), candidates)

    def select_deprecation(self, graph, candidates, rng):
        from .adapters import canned_deprecation, parse_deprecation_decision

        return parse_deprecation_decision(canned_deprecation(candidates), candidates)


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class Episode:
    episode_id: str
    seed: int
    strategy_sequence: tuple[str, ...]
    versions: tuple[tuple[EnvGraph, GraphDelta | None], ...]

    @property
    def graphs(self) -> list[EnvGraph]:
        return [g for g, _ in self.versions]

    @property
    def deltas(self) -> list[GraphDelta | None]:
        return [d for _, d in self.versions]


def run_episode(
    seed_graph: EnvGraph,
    sequence: Sequence[str],
    proposer: Proposer | None = None,
    seed: int = 0,
    *,
    episode_id: str | None = None,
    saturation_tools: int = 2,
    walk_lengths: tuple[int, int] = (2, 4),
) -> Episode:
    proposer = proposer or SeededProposer(seed)
    episode_id = episode_id or f"{seed:03d}"
    meta = dict(seed_graph.metadata)
    meta.update(episode_id=episode_id, strategy="seed", parent=None)
    graph = seed_graph.with_version("G0", meta)
    versions: list[tuple[EnvGraph, GraphDelta | None]] = [(graph, None)]
    for k, strategy in enumerate(sequence, start=1):
        rng = random.Random(f"{seed}:{k}:{strategy}")
        try:
            if strategy == COMPLETION:
                delta = generate_completion(graph, proposer, rng)
            elif strategy == SATURATION:
                delta = generate_saturation(graph, proposer, saturation_tools, rng,
                                            min_len=walk_lengths[0], max_len=walk_lengths[1])
            elif strategy == DEPRECATION:
                delta = generate_deprecation(graph, proposer, rng)
            else:
                raise ValueError(f"unknown strategy {strategy!r}")
            graph = apply_delta(graph, delta, version_id=f"G{k}")
            problems = validate(graph)
            if problems:
                raise ProposerError(f"invalid version: {problems[0]}")
        except Exception as exc:
            raise EpisodeError(k, strategy, exc) from exc
        versions.append((graph, delta))
    return Episode(episode_id, seed, tuple(sequence), tuple(versions))


def _expected_metadata(delta: GraphDelta) -> tuple[list[str], list[str]]:
    return sorted(t.name for t in delta.added_tools), sorted(t.name for t in delta.removed_tools)


def validate_evolution(episode: Episode) -> list[Violation]:
    """At most one violation per version index; chain checks involving an
    already invalid version are skipped."""
    out: list[Violation] = []
    bad: set[int] = set()
    for k, (g, _) in enumerate(episode.versions):
        problems = validate(g)
        if problems:
            bad.add(k)
            out.append(Violation("invalid version", g.version_id, "; ".join(map(str, problems[:3])), k))
    for k in range(1, len(episode.versions)):
        if k in bad or k - 1 in bad:
            continue
        prev, _ = episode.versions[k - 1]
        g, delta = episode.versions[k]
        issue = _chain_issue(episode, k, prev, g, delta)
        if issue:
            out.append(Violation("broken chain", g.version_id, issue, k))
    return out


def _chain_issue(episode: Episode, k: int, prev: EnvGraph, g: EnvGraph, delta: GraphDelta | None) -> str:
    if delta is None:
        return "missing delta"
    if k - 1 < len(episode.strategy_sequence) and delta.strategy != episode.strategy_sequence[k - 1]:
        return f"delta strategy {delta.strategy} != {episode.strategy_sequence[k - 1]}"
    try:
        rebuilt = apply_delta(prev, delta, version_id=g.version_id)
    except Exception as exc:
        return f"delta does not apply: {exc}"
    if not rebuilt.same_structure(g):
        return "version differs from parent plus delta"
    ctx = delta.context
    if ctx is None or not ctx.narrative:
        return "missing evolution context"
    added, removed = _expected_metadata(delta)
    if sorted(ctx.metadata.get("new_tools", [])) != added:
        return "context new_tools disagree with delta"
    if sorted(ctx.metadata.get("deprecated_tools", [])) != removed:
        return "context deprecated_tools disagree with delta"
    if delta.strategy in (COMPLETION, SATURATION) and (not added or removed):
        return "tool count did not grow"
    if delta.strategy == DEPRECATION and (not removed or added):
        return "tool count did not shrink"
    return ""


def write_episode(episode: Episode, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "episode_id": episode.episode_id,
        "seed": episode.seed,
        "strategy_sequence": list(episode.strategy_sequence),
        "versions": [g.version_id for g in episode.graphs],
    }
    (d / "episode.json").write_text(dumps(manifest))
    for k, (g, delta) in enumerate(episode.versions):
        (d / f"G{k}.json").write_text(serialize(g))
        if delta is not None:
            (d / f"delta_v{k}.json").write_text(serialize(delta))
            (d / f"context_v{k}.json").write_text(dumps(context_document(delta)))
    return d


def load_episode(directory: str | Path) -> Episode:
    d = Path(directory)
    manifest = json.loads((d / "episode.json").read_text())
    versions = []
    for k in range(len(manifest["versions"])):
        g = deserialize((d / f"G{k}.json").read_text())
        delta_path = d / f"delta_v{k}.json"
        delta = deserialize(delta_path.read_text()) if delta_path.exists() else None
        versions.append((g, delta))
    return Episode(manifest["episode_id"], manifest["seed"], tuple(manifest["strategy_sequence"]), tuple(versions))
