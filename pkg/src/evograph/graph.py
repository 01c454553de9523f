"""Typed relational environment graphs.

An :class:`EnvGraph` is one environment version: attribute nodes keyed by
``(database, attribute)``, typed relation edges, and the tools attached to
those edges. Graphs and deltas are immutable values; every operation here is
a pure function of its inputs (and of an explicit ``random.Random`` where
randomness is involved).
"""

from __future__ import annotations

import json
import random
import re
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Iterable, Iterator, Mapping, Sequence

RELATIONSHIP_TYPES = (
    "references",
    "belongs_to",
    "contains",
    "has_attribute",
    "identifies",
    "used_for",
    "updates",
    "explains",
    "aggregates",
    "links_to",
)
CARDINALITIES = ("one-to-one", "one-to-many", "many-to-one", "many-to-many")
STRATEGIES = ("completion", "saturation", "deprecation")
READ = "READ"
WRITE = "WRITE"

BASE_TYPES = ("string", "integer", "float", "boolean", "list[string]", "list[integer]", "map")

_TYPE_ALIASES = {
    "str": "string",
    "string": "string",
    "int": "integer",
    "integer": "integer",
    "float": "float",
    "number": "float",
    "bool": "boolean",
    "boolean": "boolean",
    "list[str]": "list[string]",
    "list[string]": "list[string]",
    "list-of-string": "list[string]",
    "list[int]": "list[integer]",
    "list[integer]": "list[integer]",
    "dict": "map",
    "dict[str,any]": "map",
    "dict[str,str]": "map",
    "map": "map",
}

_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class GraphError(Exception):
    """Base class for graph-core errors."""


class ConflictError(GraphError):
    """A delta adds an element that exists or removes one that does not."""


class NoPathError(GraphError):
    """A random walk could not leave its start node."""


class ParseError(GraphError):
    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


def normalize_type(tag: str) -> str:
    """Map a type tag (including Python-style aliases like ``Optional[str]``)
    to the canonical vocabulary."""
    raw = tag.strip()
    compact = raw.replace(" ", "").lower()
    m = re.fullmatch(r"optional\[(.+)\]", compact)
    if m:
        return f"optional[{normalize_type(m.group(1))}]"
    if compact in _TYPE_ALIASES:
        return _TYPE_ALIASES[compact]
    if compact.startswith("list["):
        return "list[string]"
    if compact.startswith("dict["):
        return "map"
    raise ValueError(f"unknown value type {tag!r}")


def base_type(tag: str) -> str:
    """Strip an ``optional[...]`` wrapper."""
    m = re.fullmatch(r"optional\[(.+)\]", tag)
    return m.group(1) if m else tag


def is_optional_type(tag: str) -> bool:
    return tag.startswith("optional[")


def element_type(tag: str) -> str:
    """Scalar type stored in (or referenced by) a value of ``tag``."""
    t = base_type(tag)
    m = re.fullmatch(r"list\[(.+)\]", t)
    return m.group(1) if m else t


@dataclass(frozen=True, order=True)
class NodeId:
    database: str
    attribute: str

    def __str__(self) -> str:
        return f"{self.database}.{self.attribute}"

    @classmethod
    def parse(cls, text: str | NodeId) -> NodeId:
        if isinstance(text, NodeId):
            return text
        db, sep, attr = str(text).partition(".")
        if not sep or not db or not attr:
            raise ValueError(f"node id must look like Database.attribute, got {text!r}")
        return cls(db, attr)


def N(text: str) -> NodeId:
    """Shorthand for ``NodeId.parse``."""
    return NodeId.parse(text)


@dataclass(frozen=True)
class AttributeNode:
    id: NodeId
    value_type: str = "string"
    description: str = ""
    is_primary_key: bool = False
    is_foreign_key: bool = False
    modifiable: bool = True
    allowed_values: tuple[Any, ...] | None = None

    @property
    def database(self) -> str:
        return self.id.database

    @property
    def attribute(self) -> str:
        return self.id.attribute


@dataclass(frozen=True)
class ToolSpec:
    name: str
    kind: str
    inputs: tuple[NodeId, ...]
    outputs: tuple[NodeId, ...]
    description: str = ""
    optional_inputs: tuple[NodeId, ...] = ()
    # The walk a shortcut tool was discovered on; the sandbox follows it verbatim.
    discovery_path: tuple[NodeId, ...] = ()

    @property
    def required_inputs(self) -> tuple[NodeId, ...]:
        return tuple(n for n in self.inputs if n not in self.optional_inputs)

    @property
    def nodes(self) -> frozenset[NodeId]:
        return frozenset(self.inputs) | frozenset(self.outputs)

    def signature(self) -> str:
        args = ", ".join(
            f"{n.attribute}{'?' if n in self.optional_inputs else ''}: {n}" for n in self.inputs
        )
        return f"{self.name}({args}) -> {', '.join(str(n) for n in self.outputs)}"


@dataclass(frozen=True)
class RelationEdge:
    source: NodeId
    target: NodeId
    relationship_type: str = "references"
    cardinality: str = "one-to-one"
    tools: tuple[str, ...] = ()
    description: str = ""

    @property
    def key(self) -> tuple[NodeId, NodeId, str]:
        return (self.source, self.target, self.relationship_type)

    @property
    def crosses_databases(self) -> bool:
        return self.source.database != self.target.database

    def __str__(self) -> str:
        return f"{self.source} -> {self.target}"


def _edge_sort_key(e: RelationEdge):
    return (e.source, e.target, e.relationship_type)


@dataclass(frozen=True, eq=False)
class EnvGraph:
    """One environment version. Construct through :meth:`build` to get the
    canonical (sorted) element order."""

    version_id: str
    nodes: tuple[AttributeNode, ...]
    edges: tuple[RelationEdge, ...]
    tools: tuple[ToolSpec, ...]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        version_id: str,
        nodes: Iterable[AttributeNode],
        edges: Iterable[RelationEdge] = (),
        tools: Iterable[ToolSpec] = (),
        metadata: Mapping[str, Any] | None = None,
    ) -> EnvGraph:
        return cls(
            version_id=version_id,
            nodes=tuple(sorted(nodes, key=lambda n: n.id)),
            edges=tuple(sorted(edges, key=_edge_sort_key)),
            tools=tuple(sorted(tools, key=lambda t: t.name)),
            metadata=dict(metadata or {}),
        )

    # -- indices -----------------------------------------------------------
    @cached_property
    def node_map(self) -> dict[NodeId, AttributeNode]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def tool_map(self) -> dict[str, ToolSpec]:
        return {t.name: t for t in self.tools}

    @cached_property
    def edge_map(self) -> dict[tuple[NodeId, NodeId, str], RelationEdge]:
        return {e.key: e for e in self.edges}

    @cached_property
    def out_neighbors(self) -> dict[NodeId, list[NodeId]]:
        out: dict[NodeId, set[NodeId]] = defaultdict(set)
        for e in self.edges:
            if e.source != e.target:
                out[e.source].add(e.target)
        return {k: sorted(v) for k, v in out.items()}

    @cached_property
    def undirected_neighbors(self) -> dict[NodeId, list[NodeId]]:
        nb: dict[NodeId, set[NodeId]] = defaultdict(set)
        for e in self.edges:
            if e.source != e.target:
                nb[e.source].add(e.target)
                nb[e.target].add(e.source)
        return {k: sorted(v) for k, v in nb.items()}

    @cached_property
    def databases(self) -> tuple[str, ...]:
        return tuple(sorted({n.database for n in self.nodes}))

    @cached_property
    def primary_keys(self) -> dict[str, NodeId]:
        pks: dict[str, NodeId] = {}
        for n in self.nodes:
            if n.is_primary_key and n.database not in pks:
                pks[n.database] = n.id
        return pks

    @cached_property
    def foreign_links(self) -> tuple[RelationEdge, ...]:
        """Edges that carry data-level references: a foreign-key node pointing
        at the primary key of another database."""
        out = []
        for e in self.edges:
            s, t = self.node_map.get(e.source), self.node_map.get(e.target)
            if s is None or t is None or not e.crosses_databases:
                continue
            if s.is_foreign_key and t.is_primary_key:
                out.append(e)
        return tuple(out)

    def attributes_of(self, database: str) -> list[AttributeNode]:
        return [n for n in self.nodes if n.database == database]

    def edges_for_tool(self, name: str) -> list[RelationEdge]:
        return [e for e in self.edges if name in e.tools]

    def incident_edges(self, node: NodeId) -> list[RelationEdge]:
        return [e for e in self.edges if e.source == node or e.target == node]

    def tools_referencing(self, nodes: Iterable[NodeId]) -> list[str]:
        ns = set(nodes)
        return sorted(t.name for t in self.tools if t.nodes & ns)

    def structure(self) -> tuple:
        """Version-independent value used for isomorphism checks."""
        return (self.nodes, self.edges, self.tools)

    def same_structure(self, other: EnvGraph) -> bool:
        return self.structure() == other.structure()

    def with_version(self, version_id: str, metadata: Mapping[str, Any] | None = None) -> EnvGraph:
        return replace(self, version_id=version_id, metadata=dict(metadata if metadata is not None else self.metadata))


@dataclass(frozen=True)
class GraphDelta:
    strategy: str
    added_nodes: tuple[AttributeNode, ...] = ()
    removed_nodes: tuple[AttributeNode, ...] = ()
    added_edges: tuple[RelationEdge, ...] = ()
    removed_edges: tuple[RelationEdge, ...] = ()
    added_tools: tuple[ToolSpec, ...] = ()
    removed_tools: tuple[ToolSpec, ...] = ()
    context: Any = None  # evolve.EvolutionContext; kept untyped to avoid an import cycle

    def is_empty(self) -> bool:
        return not (
            self.added_nodes
            or self.removed_nodes
            or self.added_edges
            or self.removed_edges
            or self.added_tools
            or self.removed_tools
        )

    def canonical(self) -> GraphDelta:
        return replace(
            self,
            added_nodes=tuple(sorted(self.added_nodes, key=lambda n: n.id)),
            removed_nodes=tuple(sorted(self.removed_nodes, key=lambda n: n.id)),
            added_edges=tuple(sorted(self.added_edges, key=_edge_sort_key)),
            removed_edges=tuple(sorted(self.removed_edges, key=_edge_sort_key)),
            added_tools=tuple(sorted(self.added_tools, key=lambda t: t.name)),
            removed_tools=tuple(sorted(self.removed_tools, key=lambda t: t.name)),
        )

    def inverse(self) -> GraphDelta:
        return replace(
            self,
            added_nodes=self.removed_nodes,
            removed_nodes=self.added_nodes,
            added_edges=self.removed_edges,
            removed_edges=self.added_edges,
            added_tools=self.removed_tools,
            removed_tools=self.added_tools,
        )

    def overlaps(self) -> list[str]:
        """Elements present (by value) in both an added and a removed list."""
        out = []
        for a, r in (
            (self.added_nodes, self.removed_nodes),
            (self.added_edges, self.removed_edges),
            (self.added_tools, self.removed_tools),
        ):
            out.extend(str(x) for x in set(a) & set(r))
        return sorted(out)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    code: str
    subject: str
    message: str = ""
    index: int | None = None

    def __str__(self) -> str:
        prefix = f"[{self.index}] " if self.index is not None else ""
        return f"{prefix}{self.code}: {self.subject}" + (f" ({self.message})" if self.message else "")


def _types_compatible(fk_type: str, pk_type: str) -> bool:
    return element_type(fk_type) == element_type(pk_type)


def validate(graph: EnvGraph) -> list[Violation]:
    """Every invariant violation in ``graph``; an empty list means valid."""
    out: list[Violation] = []
    seen: set[NodeId] = set()
    for n in graph.nodes:
        if n.id in seen:
            out.append(Violation("duplicate node", str(n.id)))
        seen.add(n.id)
        if not (_IDENT.match(n.database) and _IDENT.match(n.attribute)) or not n.database.isascii() or not n.attribute.isascii():
            out.append(Violation("invalid identifier", str(n.id)))
        try:
            if normalize_type(n.value_type) != n.value_type:
                out.append(Violation("non-canonical type", str(n.id), n.value_type))
        except ValueError:
            out.append(Violation("unknown type", str(n.id), n.value_type))

    pk_count: dict[str, int] = defaultdict(int)
    for n in graph.nodes:
        if n.is_primary_key:
            pk_count[n.database] += 1
    for db, c in sorted(pk_count.items()):
        if c > 1:
            out.append(Violation("duplicate primary key", db, f"{c} primary keys"))

    tool_names = [t.name for t in graph.tools]
    for name in sorted({x for x in tool_names if tool_names.count(x) > 1}):
        out.append(Violation("duplicate tool", name))
    for t in graph.tools:
        if not _IDENT.match(t.name):
            out.append(Violation("invalid identifier", t.name))
        if t.kind not in (READ, WRITE):
            out.append(Violation("invalid tool kind", t.name, t.kind))
        if not t.inputs:
            out.append(Violation("tool without inputs", t.name))
        if not t.outputs:
            out.append(Violation("tool without outputs", t.name))
        for n in t.inputs:
            if n not in graph.node_map:
                out.append(Violation("dangling tool input", t.name, str(n)))
        for n in t.outputs:
            if n not in graph.node_map:
                out.append(Violation("dangling tool output", t.name, str(n)))
        for n in t.discovery_path:
            if n not in graph.node_map:
                out.append(Violation("dangling discovery path", t.name, str(n)))
        if not set(t.optional_inputs) <= set(t.inputs):
            out.append(Violation("optional input not an input", t.name))
        if t.kind == READ and set(t.inputs) & set(t.outputs):
            out.append(Violation("read tool echoes inputs", t.name))

    seen_edges: set[tuple] = set()
    for e in graph.edges:
        if e.key in seen_edges:
            out.append(Violation("duplicate edge", str(e), e.relationship_type))
        seen_edges.add(e.key)
        if e.source not in graph.node_map:
            out.append(Violation("dangling edge source", str(e)))
        if e.target not in graph.node_map:
            out.append(Violation("dangling edge target", str(e)))
        if e.relationship_type not in RELATIONSHIP_TYPES:
            out.append(Violation("invalid relationship type", str(e), e.relationship_type))
        if e.cardinality not in CARDINALITIES:
            out.append(Violation("invalid cardinality", str(e), e.cardinality))
        if e.source == e.target and e.relationship_type != "has_attribute":
            out.append(Violation("self loop", str(e)))
        for name in e.tools:
            if name not in graph.tool_map:
                out.append(Violation("dangling edge tool", str(e), name))
        s, t = graph.node_map.get(e.source), graph.node_map.get(e.target)
        if s and t and s.is_foreign_key and t.is_primary_key and e.crosses_databases:
            if not _types_compatible(s.value_type, t.value_type):
                out.append(Violation("foreign key type mismatch", str(e), f"{s.value_type} vs {t.value_type}"))
    return out


# ---------------------------------------------------------------------------
# deltas


def next_version_id(version_id: str) -> str:
    m = re.fullmatch(r"(.*?)(\d+)", version_id)
    if m:
        return f"{m.group(1)}{int(m.group(2)) + 1}"
    return f"{version_id}.1"


def apply_delta(graph: EnvGraph, delta: GraphDelta, *, version_id: str | None = None) -> EnvGraph:
    """Apply removals, then additions, producing a new version.

    Strict: nothing is cascaded. Implicit consequences of a removal (incident
    edges, referencing tools, detached edge tool lists) must be spelled out in
    the delta, which keeps every version change self-describing.
    """
    nodes = dict(graph.node_map)
    edges = dict(graph.edge_map)
    tools = dict(graph.tool_map)
    for n in delta.removed_nodes:
        if n.id not in nodes:
            raise ConflictError(f"cannot remove missing node {n.id}")
        del nodes[n.id]
    for e in delta.removed_edges:
        if e.key not in edges:
            raise ConflictError(f"cannot remove missing edge {e} ({e.relationship_type})")
        del edges[e.key]
    for t in delta.removed_tools:
        if t.name not in tools:
            raise ConflictError(f"cannot remove missing tool {t.name}")
        del tools[t.name]
    for n in delta.added_nodes:
        if n.id in nodes:
            raise ConflictError(f"cannot add existing node {n.id}")
        nodes[n.id] = n
    for e in delta.added_edges:
        if e.key in edges:
            raise ConflictError(f"cannot add existing edge {e} ({e.relationship_type})")
        edges[e.key] = e
    for t in delta.added_tools:
        if t.name in tools:
            raise ConflictError(f"cannot add existing tool {t.name}")
        tools[t.name] = t

    meta = dict(graph.metadata)
    meta["parent"] = graph.version_id
    meta["strategy"] = delta.strategy
    if delta.removed_tools:
        deprecated = dict(meta.get("deprecated_tools", {}))
        hint = ""
        ctx = delta.context
        if ctx is not None:
            hint = str(getattr(ctx, "metadata", {}).get("workaround_hint", ""))
        for t in delta.removed_tools:
            deprecated[t.name] = hint
        meta["deprecated_tools"] = dict(sorted(deprecated.items()))
    if delta.added_tools and "deprecated_tools" in meta:
        revived = {t.name for t in delta.added_tools}
        meta["deprecated_tools"] = {k: v for k, v in meta["deprecated_tools"].items() if k not in revived}
    return EnvGraph.build(
        version_id or next_version_id(graph.version_id),
        nodes.values(),
        edges.values(),
        tools.values(),
        meta,
    )


def diff(old: EnvGraph, new: EnvGraph, strategy: str = "completion") -> GraphDelta:
    """Delta turning ``old`` into ``new``; changed elements appear as a
    removal of the old value plus an addition of the new one."""

    def split(a: Mapping, b: Mapping):
        removed = [v for k, v in a.items() if k not in b or b[k] != v]
        added = [v for k, v in b.items() if k not in a or a[k] != v]
        return tuple(added), tuple(removed)

    an, rn = split(old.node_map, new.node_map)
    ae, re_ = split(old.edge_map, new.edge_map)
    at, rt = split(old.tool_map, new.tool_map)
    return GraphDelta(strategy, an, rn, ae, re_, at, rt).canonical()


# ---------------------------------------------------------------------------
# algorithms


def random_walk(
    graph: EnvGraph,
    start: NodeId,
    min_len: int,
    max_len: int,
    rng: random.Random,
    *,
    max_attempts: int = 64,
) -> list[NodeId]:
    """Simple directed walk from ``start`` of ``min_len``..``max_len`` hops.

    A target length is drawn uniformly, then each step picks uniformly among
    unvisited out-neighbours. Walks that get stuck short of ``min_len`` are
    rejected and redrawn.
    """
    if start not in graph.node_map:
        raise KeyError(start)
    if not 1 <= min_len <= max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    if not graph.out_neighbors.get(start):
        raise NoPathError(f"no outgoing edge from {start}")
    for _ in range(max_attempts):
        target = rng.randint(min_len, max_len)
        path = [start]
        seen = {start}
        while len(path) - 1 < target:
            options = [n for n in graph.out_neighbors.get(path[-1], ()) if n not in seen]
            if not options:
                break
            nxt = rng.choice(options)
            path.append(nxt)
            seen.add(nxt)
        if len(path) - 1 >= min_len:
            return path
    raise NoPathError(f"no simple walk of at least {min_len} hops from {start}")


def weak_component(graph: EnvGraph, node: NodeId) -> set[NodeId]:
    seen = {node}
    queue = deque([node])
    while queue:
        cur = queue.popleft()
        for nb in graph.undirected_neighbors.get(cur, ()):
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return seen


def induced_subgraph(graph: EnvGraph, nodes: Iterable[NodeId], version_id: str | None = None) -> EnvGraph:
    """Nodes, the edges between them, and the tools on those edges whose
    inputs and outputs all survive."""
    keep = set(nodes)
    edges = [e for e in graph.edges if e.source in keep and e.target in keep]
    attached = {name for e in edges for name in e.tools}
    tools = [t for t in graph.tools if t.name in attached and t.nodes <= keep]
    names = {t.name for t in tools}
    edges = [replace(e, tools=tuple(x for x in e.tools if x in names)) for e in edges]
    meta = {"parent": graph.version_id, "subgraph_of": graph.version_id}
    if "deprecated_tools" in graph.metadata:
        meta["deprecated_tools"] = dict(graph.metadata["deprecated_tools"])
    return EnvGraph.build(
        version_id or f"{graph.version_id}.sub",
        [graph.node_map[n] for n in keep],
        edges,
        tools,
        meta,
    )


def sample_connected_subgraph(
    graph: EnvGraph,
    target_node_count: int,
    rng: random.Random,
    *,
    anchor: NodeId | None = None,
) -> EnvGraph:
    """Grow a weakly connected node set from an anchor by repeatedly adding a
    uniformly chosen undirected neighbour, and return its induced subgraph."""
    if not 1 <= target_node_count <= len(graph.nodes):
        raise ValueError("target_node_count out of range")
    if anchor is None:
        anchor = rng.choice([n.id for n in graph.nodes])
    chosen = [anchor]
    kept = {anchor}
    frontier: set[NodeId] = set(graph.undirected_neighbors.get(anchor, ()))
    while len(kept) < target_node_count and frontier:
        nxt = rng.choice(sorted(frontier))
        kept.add(nxt)
        chosen.append(nxt)
        frontier.discard(nxt)
        frontier.update(n for n in graph.undirected_neighbors.get(nxt, ()) if n not in kept)
    return induced_subgraph(graph, kept)


def is_weakly_connected(graph: EnvGraph) -> bool:
    if not graph.nodes:
        return True
    return len(weak_component(graph, graph.nodes[0].id)) == len(graph.nodes)


def connect(graph: EnvGraph, nodes: Iterable[NodeId]) -> set[NodeId]:
    """Extend ``nodes`` with shortest undirected connector paths so the set
    becomes weakly connected in ``graph`` (when possible)."""
    keep = set(nodes)
    if not keep:
        return keep
    order = sorted(keep)
    root = order[0]
    for target in order[1:]:
        sub = induced_subgraph(graph, keep)
        if target in weak_component(sub, root):
            continue
        # BFS in the full graph from the root's component to target
        comp = weak_component(sub, root)
        prev: dict[NodeId, NodeId | None] = {n: None for n in sorted(comp)}
        queue = deque(sorted(comp))
        while queue:
            cur = queue.popleft()
            if cur == target:
                break
            for nb in graph.undirected_neighbors.get(cur, ()):
                if nb not in prev:
                    prev[nb] = cur
                    queue.append(nb)
        if target not in prev:
            continue
        cur: NodeId | None = target
        while cur is not None:
            keep.add(cur)
            cur = prev[cur]
    return keep


def expand_once(graph: EnvGraph, nodes: Iterable[NodeId]) -> set[NodeId]:
    """One expansion step: directed edge targets plus outputs of tools whose
    required inputs are all present."""
    cur = set(nodes)
    out = set(cur)
    for n in cur:
        out.update(graph.out_neighbors.get(n, ()))
    for t in graph.tools:
        if t.required_inputs and set(t.required_inputs) <= cur:
            out.update(t.outputs)
    return out


def reachable_set(graph: EnvGraph, seeds: Iterable[NodeId]) -> set[NodeId]:
    cur = set(seeds)
    missing = cur - set(graph.node_map)
    if missing:
        raise KeyError(sorted(missing)[0])
    while True:
        nxt = expand_once(graph, cur)
        if nxt == cur:
            return cur
        cur = nxt


def find_bridges(graph: EnvGraph) -> list[RelationEdge]:
    """Edges whose removal increases the number of weakly connected
    components (bridges of the undirected multigraph view)."""
    adj: dict[NodeId, list[tuple[NodeId, int]]] = defaultdict(list)
    edges = [e for e in graph.edges if e.source != e.target]
    for i, e in enumerate(edges):
        adj[e.source].append((e.target, i))
        adj[e.target].append((e.source, i))
    disc: dict[NodeId, int] = {}
    low: dict[NodeId, int] = {}
    bridges: list[int] = []
    counter = 0
    for root in sorted(adj):
        if root in disc:
            continue
        disc[root] = low[root] = counter
        counter += 1
        stack: list[tuple[NodeId, int, Iterator]] = [(root, -1, iter(adj[root]))]
        while stack:
            node, via, it = stack[-1]
            advanced = False
            for nb, eid in it:
                if eid == via:
                    continue
                if nb in disc:
                    low[node] = min(low[node], disc[nb])
                else:
                    disc[nb] = low[nb] = counter
                    counter += 1
                    stack.append((nb, eid, iter(adj[nb])))
                    advanced = True
                    break
            if advanced:
                continue
            stack.pop()
            if stack:
                parent = stack[-1][0]
                low[parent] = min(low[parent], low[node])
                if low[node] > disc[parent]:
                    bridges.append(via)
    return sorted((edges[i] for i in bridges), key=_edge_sort_key)


# ---------------------------------------------------------------------------
# serialization


def node_to_doc(n: AttributeNode) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "name": n.attribute,
        "type": n.value_type,
        "description": n.description,
        "is_primary_key": n.is_primary_key,
        "is_foreign_key": n.is_foreign_key,
        "modifiable": n.modifiable,
    }
    if n.allowed_values is not None:
        doc["allowed_values"] = list(n.allowed_values)
    return doc


def edge_to_doc(e: RelationEdge) -> dict[str, Any]:
    return {
        "source": str(e.source),
        "target": str(e.target),
        "relationship_type": e.relationship_type,
        "cardinality": e.cardinality,
        "tools": list(e.tools),
        "description": e.description,
    }


def tool_to_doc(t: ToolSpec) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "name": t.name,
        "kind": t.kind,
        "inputs": [str(n) for n in t.inputs],
        "outputs": [str(n) for n in t.outputs],
        "description": t.description,
    }
    if t.optional_inputs:
        doc["optional_inputs"] = [str(n) for n in t.optional_inputs]
    if t.discovery_path:
        doc["discovery_path"] = [str(n) for n in t.discovery_path]
    return doc


def graph_to_doc(graph: EnvGraph) -> dict[str, Any]:
    dbs: dict[str, dict[str, list]] = {}
    for n in graph.nodes:
        dbs.setdefault(n.database, {"attributes": []})["attributes"].append(node_to_doc(n))
    return {
        "version_id": graph.version_id,
        "metadata": dict(graph.metadata),
        "databases": dbs,
        "edges": [edge_to_doc(e) for e in sorted(graph.edges, key=_edge_sort_key)],
        "tools": [tool_to_doc(t) for t in sorted(graph.tools, key=lambda t: t.name)],
    }


def _flat_node_doc(n: AttributeNode) -> dict[str, Any]:
    doc = node_to_doc(n)
    doc["database"] = n.database
    return doc


def delta_to_doc(delta: GraphDelta) -> dict[str, Any]:
    d = delta.canonical()
    ctx = d.context
    return {
        "strategy": d.strategy,
        "added_nodes": [_flat_node_doc(n) for n in d.added_nodes],
        "removed_nodes": [_flat_node_doc(n) for n in d.removed_nodes],
        "added_edges": [edge_to_doc(e) for e in d.added_edges],
        "removed_edges": [edge_to_doc(e) for e in d.removed_edges],
        "added_tools": [tool_to_doc(t) for t in d.added_tools],
        "removed_tools": [tool_to_doc(t) for t in d.removed_tools],
        "context": ctx.to_doc() if ctx is not None else None,
    }


class _Reader:
    """Field access that reports the failing path on bad input."""

    def __init__(self, path: str = ""):
        self.path = path

    def get(self, doc: Any, key: str, kind: type | tuple = object, default: Any = ...):
        where = f"{self.path}.{key}" if self.path else key
        if not isinstance(doc, dict):
            raise ParseError("expected an object", field=self.path or "<root>")
        if key not in doc:
            if default is ...:
                raise ParseError("missing field", field=where)
            return default
        val = doc[key]
        if kind is not object and not isinstance(val, kind):
            raise ParseError(f"expected {getattr(kind, '__name__', kind)}", field=where)
        return val

    def sub(self, key: str | int) -> _Reader:
        if isinstance(key, int):
            return _Reader(f"{self.path}[{key}]")
        return _Reader(f"{self.path}.{key}" if self.path else key)


def _parse_node_id(text: Any, where: str) -> NodeId:
    try:
        return NodeId.parse(text)
    except (ValueError, TypeError) as exc:
        raise ParseError(str(exc), field=where) from None


def node_from_doc(doc: dict, database: str, r: _Reader) -> AttributeNode:
    allowed = r.get(doc, "allowed_values", list, None)
    try:
        vtype = normalize_type(r.get(doc, "type", str))
    except ValueError as exc:
        raise ParseError(str(exc), field=f"{r.path}.type") from None
    return AttributeNode(
        id=NodeId(database, r.get(doc, "name", str)),
        value_type=vtype,
        description=r.get(doc, "description", str, ""),
        is_primary_key=r.get(doc, "is_primary_key", bool, False),
        is_foreign_key=r.get(doc, "is_foreign_key", bool, False),
        modifiable=r.get(doc, "modifiable", bool, True),
        allowed_values=tuple(allowed) if allowed is not None else None,
    )


def edge_from_doc(doc: dict, r: _Reader) -> RelationEdge:
    return RelationEdge(
        source=_parse_node_id(r.get(doc, "source", str), f"{r.path}.source"),
        target=_parse_node_id(r.get(doc, "target", str), f"{r.path}.target"),
        relationship_type=r.get(doc, "relationship_type", str),
        cardinality=r.get(doc, "cardinality", str),
        tools=tuple(r.get(doc, "tools", list, [])),
        description=r.get(doc, "description", str, ""),
    )


def tool_from_doc(doc: dict, r: _Reader) -> ToolSpec:
    def ids(key: str, default: Any = ...) -> tuple[NodeId, ...]:
        vals = r.get(doc, key, list, default)
        return tuple(_parse_node_id(v, f"{r.path}.{key}[{i}]") for i, v in enumerate(vals))

    return ToolSpec(
        name=r.get(doc, "name", str),
        kind=r.get(doc, "kind", str),
        inputs=ids("inputs"),
        outputs=ids("outputs"),
        description=r.get(doc, "description", str, ""),
        optional_inputs=ids("optional_inputs", []),
        discovery_path=ids("discovery_path", []),
    )


def graph_from_doc(doc: Any) -> EnvGraph:
    r = _Reader()
    dbs = r.get(doc, "databases", dict)
    nodes = []
    for db, body in dbs.items():
        dr = r.sub("databases").sub(db)
        for i, a in enumerate(dr.get(body, "attributes", list)):
            nodes.append(node_from_doc(a, db, dr.sub("attributes").sub(i)))
    edges = [edge_from_doc(e, r.sub("edges").sub(i)) for i, e in enumerate(r.get(doc, "edges", list, []))]
    tools = [tool_from_doc(t, r.sub("tools").sub(i)) for i, t in enumerate(r.get(doc, "tools", list, []))]
    return EnvGraph.build(
        r.get(doc, "version_id", str),
        nodes,
        edges,
        tools,
        r.get(doc, "metadata", dict, {}),
    )


def delta_from_doc(doc: Any) -> GraphDelta:
    from .evolve import EvolutionContext

    r = _Reader()

    def nodes(key: str):
        out = []
        for i, n in enumerate(r.get(doc, key, list, [])):
            nr = r.sub(key).sub(i)
            out.append(node_from_doc(n, nr.get(n, "database", str), nr))
        return tuple(out)

    ctx = r.get(doc, "context", (dict, type(None)), None)
    return GraphDelta(
        strategy=r.get(doc, "strategy", str),
        added_nodes=nodes("added_nodes"),
        removed_nodes=nodes("removed_nodes"),
        added_edges=tuple(edge_from_doc(e, r.sub("added_edges").sub(i)) for i, e in enumerate(r.get(doc, "added_edges", list, []))),
        removed_edges=tuple(edge_from_doc(e, r.sub("removed_edges").sub(i)) for i, e in enumerate(r.get(doc, "removed_edges", list, []))),
        added_tools=tuple(tool_from_doc(t, r.sub("added_tools").sub(i)) for i, t in enumerate(r.get(doc, "added_tools", list, []))),
        removed_tools=tuple(tool_from_doc(t, r.sub("removed_tools").sub(i)) for i, t in enumerate(r.get(doc, "removed_tools", list, []))),
        context=EvolutionContext.from_doc(ctx) if ctx is not None else None,
    ).canonical()


def dumps(doc: Any) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def serialize(value: EnvGraph | GraphDelta) -> str:
    if isinstance(value, EnvGraph):
        return dumps(graph_to_doc(value))
    if isinstance(value, GraphDelta):
        return dumps(delta_to_doc(value))
    raise TypeError(f"cannot serialize {type(value).__name__}")


def deserialize(text: str) -> EnvGraph | GraphDelta:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    if isinstance(doc, dict) and "databases" in doc:
        return graph_from_doc(doc)
    if isinstance(doc, dict) and "strategy" in doc:
        return delta_from_doc(doc)
    raise ParseError("document is neither a graph nor a delta", field="<root>")


def canonical_structure_text(graph: EnvGraph) -> str:
    """Serialization with version and metadata blanked, for isomorphism."""
    doc = graph_to_doc(graph)
    doc["version_id"] = ""
    doc["metadata"] = {}
    return dumps(doc)


def databases_of(nodes: Iterable[NodeId]) -> set[str]:
    return {n.database for n in nodes}


def node_ids(graph: EnvGraph) -> list[NodeId]:
    return [n.id for n in graph.nodes]


def tools_on_edges(graph: EnvGraph, edges: Sequence[RelationEdge]) -> list[str]:
    return sorted({name for e in edges for name in e.tools})
