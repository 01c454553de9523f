"""Executable environments: an entity store plus a tool interpreter.

Tools are never hand-written. A READ tool selects entities of its first
input's database, joins to the output databases along foreign-key links
(shortest link path, ties broken by name) and projects the output
attributes. Shortcut tools carrying a discovery path follow that path hop by
hop instead. A WRITE tool upserts or appends one entity of its output
database. Every result is turned into fact triples.
"""

from __future__ import annotations

import copy
import hashlib
import json
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .graph import (
    READ,
    WRITE,
    AttributeNode,
    EnvGraph,
    NodeId,
    RelationEdge,
    ToolSpec,
    base_type,
    dumps,
    element_type,
    is_optional_type,
)

Entity = dict[str, Any]


class SandboxError(Exception):
    """Base class for tool execution failures."""


class UnknownToolError(SandboxError):
    pass


class DeprecatedToolError(SandboxError):
    def __init__(self, tool: str, workaround_hint: str):
        msg = f"tool {tool!r} has been deprecated"
        if workaround_hint:
            msg += f". Workaround: {workaround_hint}"
        super().__init__(msg)
        self.tool = tool
        self.workaround_hint = workaround_hint


class MissingInputError(SandboxError):
    pass


class NotFoundError(SandboxError):
    pass


class SchemaMismatchError(SandboxError):
    pass


class UnknownTokenError(KeyError):
    pass


def snake(name: str) -> str:
    return "".join("_" + c.lower() if c.isupper() else c for c in name).lstrip("_")


def freeze(value: Any) -> Any:
    """Hashable form of a stored literal."""
    if isinstance(value, list):
        return tuple(freeze(v) for v in value)
    if isinstance(value, dict):
        return tuple(sorted((k, freeze(v)) for k, v in value.items()))
    return value


def thaw(value: Any) -> Any:
    if isinstance(value, tuple):
        return [thaw(v) for v in value]
    return value


def flatten(values: Iterable[Any]) -> set[Any]:
    out: set[Any] = set()
    for v in values:
        if v is None:
            continue
        if isinstance(v, (list, tuple)):
            out.update(x for x in v if x is not None)
        else:
            out.add(v)
    return out


def matches(stored: Any, wanted: set[Any]) -> bool:
    if stored is None:
        return False
    if isinstance(stored, list):
        return any(x in wanted for x in stored)
    return stored in wanted


def _arg_matches(stored: Any, arg: Any) -> bool:
    if isinstance(arg, list):
        return freeze(stored) == freeze(arg)
    if isinstance(stored, list):
        return arg in stored
    return stored == arg


@dataclass(frozen=True, order=True)
class Fact:
    node: NodeId
    entity_key: Any
    value: Any

    def to_doc(self) -> dict[str, Any]:
        return {"node": str(self.node), "entity_key": self.entity_key, "value": thaw(self.value)}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> Fact:
        return cls(NodeId.parse(doc["node"]), freeze(doc["entity_key"]), freeze(doc["value"]))


@dataclass(frozen=True)
class Record:
    database: str
    key: Any
    values: Mapping[str, Any]

    def to_doc(self) -> dict[str, Any]:
        return {"database": self.database, "key": self.key, "values": dict(self.values)}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> Record:
        return cls(doc["database"], doc["key"], dict(doc["values"]))


def extract_facts(records: Iterable[Record]) -> frozenset[Fact]:
    """One fact per (record, attribute) with a non-null value."""
    out = set()
    for r in records:
        for attr, val in r.values.items():
            if val is not None:
                out.add(Fact(NodeId(r.database, attr), freeze(r.key), freeze(val)))
    return frozenset(out)


@dataclass(frozen=True)
class ToolCall:
    tool: str
    args: Mapping[NodeId, Any] = field(default_factory=dict)
    turn: int = 0

    @classmethod
    def make(cls, tool: str, args: Mapping[Any, Any] | None = None, turn: int = 0) -> ToolCall:
        return cls(tool, {NodeId.parse(k): v for k, v in (args or {}).items()}, turn)

    def to_doc(self) -> dict[str, Any]:
        return {"tool": self.tool, "args": {str(k): v for k, v in sorted(self.args.items())}, "turn": self.turn}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> ToolCall:
        return cls.make(doc["tool"], doc.get("args", {}), doc.get("turn", 0))


@dataclass(frozen=True)
class ToolResult:
    status: str
    records: tuple[Record, ...] = ()
    facts: frozenset[Fact] = frozenset()
    error: str = ""
    error_type: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "status": self.status,
            "records": [r.to_doc() for r in self.records],
            "facts": [f.to_doc() for f in sorted(self.facts, key=_fact_key)],
        }
        if self.error:
            doc["error"] = self.error
            doc["error_type"] = self.error_type
        return doc

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> ToolResult:
        return cls(
            doc["status"],
            tuple(Record.from_doc(r) for r in doc.get("records", [])),
            frozenset(Fact.from_doc(f) for f in doc.get("facts", [])),
            doc.get("error", ""),
            doc.get("error_type", ""),
        )


def _fact_key(f: Fact):
    return (f.node, json.dumps(thaw(f.entity_key), sort_keys=True), json.dumps(thaw(f.value), sort_keys=True))


def sort_facts(facts: Iterable[Fact]) -> list[Fact]:
    return sorted(facts, key=_fact_key)


@dataclass
class SandboxState:
    graph: EnvGraph
    store: dict[str, list[Entity]]
    call_log: list[tuple[ToolCall, ToolResult]] = field(default_factory=list)

    def entities(self, database: str) -> list[Entity]:
        return self.store.get(database, [])

    def pk_attr(self, database: str) -> str | None:
        pk = self.graph.primary_keys.get(database)
        return pk.attribute if pk else None

    def find(self, database: str, key: Any) -> Entity | None:
        pk = self.pk_attr(database)
        for e in self.entities(database):
            if e.get(pk) == key:
                return e
        return None

    def dump(self) -> dict[str, list[Entity]]:
        out = {}
        for db in sorted(self.store):
            pk = self.pk_attr(db)
            out[db] = sorted((dict(sorted(e.items())) for e in self.store[db]), key=lambda e: str(e.get(pk)))
        return out

    def dump_text(self) -> str:
        return dumps(self.dump())

    def call_log_lines(self) -> str:
        return "".join(
            json.dumps({"turn": c.turn, "call": c.to_doc(), "result": r.to_doc()}, sort_keys=True) + "\n"
            for c, r in self.call_log
        )


# ---------------------------------------------------------------------------
# joins


def _link_adjacency(graph: EnvGraph) -> dict[str, list[tuple[str, RelationEdge, bool]]]:
    adj: dict[str, list[tuple[str, RelationEdge, bool]]] = {}
    for e in graph.foreign_links:
        a, b = e.source.database, e.target.database
        adj.setdefault(a, []).append((b, e, True))
        adj.setdefault(b, []).append((a, e, False))
    for db in adj:
        adj[db].sort(key=lambda x: (x[0], x[1].source, x[1].target, not x[2]))
    return adj


def link_path(graph: EnvGraph, src: str, dst: str) -> list[tuple[RelationEdge, bool]] | None:
    """Shortest chain of foreign-key links from database ``src`` to ``dst``.
    Each step is ``(link, forward)``; forward follows FK -> PK."""
    if src == dst:
        return []
    adj = _link_adjacency(graph)
    prev: dict[str, tuple[str, RelationEdge, bool] | None] = {src: None}
    queue = deque([src])
    while queue:
        cur = queue.popleft()
        for nb, e, fwd in adj.get(cur, ()):
            if nb not in prev:
                prev[nb] = (cur, e, fwd)
                if nb == dst:
                    steps = []
                    node = dst
                    while prev[node] is not None:
                        p, pe, pf = prev[node]
                        steps.append((pe, pf))
                        node = p
                    return steps[::-1]
                queue.append(nb)
    return None


def _follow(state: SandboxState, ents: list[Entity], step: tuple[RelationEdge, bool]) -> list[Entity]:
    link, forward = step
    if forward:
        wanted = flatten(e.get(link.source.attribute) for e in ents)
        target_db, attr = link.target.database, link.target.attribute
    else:
        wanted = flatten(e.get(link.target.attribute) for e in ents)
        target_db, attr = link.source.database, link.source.attribute
    return [e for e in state.entities(target_db) if matches(e.get(attr), wanted)]


def navigate(state: SandboxState, ents: list[Entity], src: str, dst: str) -> list[Entity]:
    steps = link_path(state.graph, src, dst)
    if steps is None:
        return []
    for step in steps:
        ents = _follow(state, ents, step)
    return ents


def tool_databases(graph: EnvGraph, tool: ToolSpec) -> set[str]:
    """Every database the interpreter touches when running ``tool``."""
    dbs = {n.database for n in tool.nodes}
    if tool.discovery_path:
        path = list(tool.discovery_path)
        dbs |= {n.database for n in path}
        pairs = [(a.database, b.database) for a, b in zip(path, path[1:])]
    else:
        anchor = (tool.outputs[0] if tool.kind == WRITE else tool.inputs[0]).database
        pairs = [(anchor, d) for d in sorted(dbs)]
    for a, b in pairs:
        for link, _ in link_path(graph, a, b) or []:
            dbs.add(link.source.database)
            dbs.add(link.target.database)
    return dbs


# ---------------------------------------------------------------------------
# execution


def _records(state: SandboxState, db: str, ents: list[Entity], attrs: Sequence[str]) -> dict[Any, Record]:
    pk = state.pk_attr(db)
    out = {}
    for e in ents:
        key = e.get(pk)
        values = {pk: key} if pk else {}
        values.update({a: copy.deepcopy(e.get(a)) for a in attrs})
        out[key] = Record(db, key, values)
    return out


def _merge(into: dict[tuple, Record], db: str, recs: dict[Any, Record]) -> None:
    for key, r in recs.items():
        k = (db, json.dumps(key, sort_keys=True))
        if k in into:
            merged = dict(into[k].values)
            merged.update(r.values)
            into[k] = Record(db, key, merged)
        else:
            into[k] = r


def _select(state: SandboxState, db: str, args: Mapping[NodeId, Any]) -> list[Entity]:
    conds = [(n.attribute, v) for n, v in args.items() if n.database == db]
    return [e for e in state.entities(db) if all(_arg_matches(e.get(a), v) for a, v in conds)]


def _run_path(state: SandboxState, tool: ToolSpec, args: Mapping[NodeId, Any]) -> list[Record]:
    path = list(tool.discovery_path)
    on_path = [path.index(n) for n in tool.inputs if n in path]
    start = min(on_path) if on_path else 0
    u = path[start]
    ents = _select(state, u.database, {n: v for n, v in args.items() if n.database == u.database})
    at: dict[int, list[Entity]] = {start: ents}
    for i in range(start, len(path) - 1):
        u, v = path[i], path[i + 1]
        # the reached entities carry over; re-selecting by shared list members would widen them
        reached = at[i] if u.database == v.database else navigate(state, at[i], u.database, v.database)
        if v in args:
            reached = [e for e in reached if _arg_matches(e.get(v.attribute), args[v])]
        at[i + 1] = reached
    out: dict[tuple, Record] = {}
    for o in tool.outputs:
        idx = max(i for i, n in enumerate(path) if n == o)
        _merge(out, o.database, _records(state, o.database, at.get(idx, []), [o.attribute]))
    return list(out.values())


def _run_read(state: SandboxState, tool: ToolSpec, args: Mapping[NodeId, Any]) -> list[Record]:
    if tool.discovery_path:
        return _run_path(state, tool, args)
    anchor = tool.inputs[0].database
    sel = _select(state, anchor, args)
    by_db = {anchor: sel}
    for db in sorted({n.database for n in args} - {anchor}):
        by_db[db] = [e for e in navigate(state, sel, anchor, db) if e in _select(state, db, args)]
    out: dict[tuple, Record] = {}
    for db in sorted({n.database for n in tool.outputs}):
        ents = by_db[db] if db in by_db else navigate(state, sel, anchor, db)
        attrs = [n.attribute for n in tool.outputs if n.database == db]
        _merge(out, db, _records(state, db, ents, attrs))
    return list(out.values())


def _run_write(state: SandboxState, tool: ToolSpec, args: Mapping[NodeId, Any]) -> list[Record]:
    g = state.graph
    target = tool.outputs[0].database
    pk = state.pk_attr(target)
    assign: dict[str, Any] = {}
    parents: list[tuple[str, Entity]] = []
    for n, v in args.items():
        if n.database == target:
            assign[n.attribute] = copy.deepcopy(v)
            continue
        if g.primary_keys.get(n.database) != n:
            continue
        parent = state.find(n.database, v)
        refs = [e for e in g.foreign_links if e.source.database == target and e.target == n]
        backs = [e for e in g.foreign_links if e.source.database == n.database and e.target.database == target]
        if (refs or backs) and parent is None:
            raise NotFoundError(f"{n} = {v!r} does not exist")
        for link in refs:
            node = g.node_map[link.source]
            assign[link.source.attribute] = [v] if base_type(node.value_type).startswith("list[") else v
        if backs:
            parents.append((n.database, parent))

    upsert = any(
        e.cardinality == "one-to-one" and target in (e.source.database, e.target.database)
        for e in g.edges_for_tool(tool.name)
    )
    entity = None
    if pk and pk in assign:
        entity = state.find(target, assign[pk])
    elif upsert:
        fk_assign = {a: v for a, v in assign.items() if g.node_map[NodeId(target, a)].is_foreign_key}
        if fk_assign:
            entity = next(
                (e for e in state.entities(target) if all(freeze(e.get(a)) == freeze(v) for a, v in fk_assign.items())),
                None,
            )
    if entity is not None:
        for a, v in assign.items():
            if a != pk and g.node_map[NodeId(target, a)].modifiable:
                entity[a] = v
    else:
        entity = _new_entity(state, target, assign)
        state.store.setdefault(target, []).append(entity)
    key = entity.get(pk)
    for db, parent in parents:
        for link in g.foreign_links:
            if link.source.database == db and link.target.database == target:
                attr = link.source.attribute
                node = g.node_map[link.source]
                if base_type(node.value_type).startswith("list["):
                    cur = list(parent.get(attr) or [])
                    if key not in cur:
                        cur.append(key)
                    parent[attr] = cur
                elif parent.get(attr) is None:
                    parent[attr] = key
    attrs = [n.attribute for n in tool.outputs if n.database == target]
    return list(_records(state, target, [entity], attrs).values())


def _new_entity(state: SandboxState, db: str, assign: Mapping[str, Any]) -> Entity:
    seq = len(state.entities(db)) + 1
    ent: Entity = {}
    for n in state.graph.attributes_of(db):
        a = n.attribute
        if a in assign:
            ent[a] = assign[a]
        elif n.is_primary_key:
            ent[a] = _fresh_key(state, db, seq)
        elif n.is_foreign_key:
            ent[a] = [] if base_type(n.value_type).startswith("list[") else None
        else:
            ent[a] = _default_value(n, seq)
    return ent


def _fresh_key(state: SandboxState, db: str, seq: int) -> str:
    existing = {str(e.get(state.pk_attr(db))) for e in state.entities(db)}
    while True:
        key = f"{snake(db)}_{seq:03d}"
        if key not in existing:
            return key
        seq += 1


def _default_value(node: AttributeNode, seq: int) -> Any:
    t = base_type(node.value_type)
    if node.allowed_values:
        return node.allowed_values[0]
    if t == "integer":
        return 0
    if t == "float":
        return 0.0
    if t == "boolean":
        return False
    if t.startswith("list["):
        return []
    if t == "map":
        return {}
    return f"{node.attribute}_{seq:03d}"


def check_args(tool: ToolSpec, args: Mapping[NodeId, Any]) -> None:
    missing = [n for n in tool.required_inputs if args.get(n) is None]
    if missing:
        raise MissingInputError(f"{tool.name} needs {', '.join(str(n) for n in missing)}")


def execute_tool(state: SandboxState, call: ToolCall) -> tuple[SandboxState, ToolResult]:
    """Run ``call`` against ``state`` (mutated in place for WRITE tools).

    Failures are logged in ``state.call_log`` and then raised.
    """
    try:
        tool = state.graph.tool_map.get(call.tool)
        if tool is None:
            deprecated = state.graph.metadata.get("deprecated_tools", {})
            if call.tool in deprecated:
                raise DeprecatedToolError(call.tool, deprecated[call.tool])
            raise UnknownToolError(f"no tool named {call.tool!r}")
        args = {NodeId.parse(k): v for k, v in call.args.items() if NodeId.parse(k) in tool.inputs}
        check_args(tool, args)
        args = {k: v for k, v in args.items() if v is not None}
        records = _run_read(state, tool, args) if tool.kind == READ else _run_write(state, tool, args)
        if not records:
            raise NotFoundError(f"{tool.name}: no matching records")
    except SandboxError as exc:
        state.call_log.append((call, ToolResult("error", error=str(exc), error_type=type(exc).__name__)))
        raise
    records = sorted(records, key=lambda r: (r.database, json.dumps(r.key, sort_keys=True)))
    result = ToolResult("ok", tuple(records), extract_facts(records))
    state.call_log.append((call, result))
    return state, result


def try_execute(state: SandboxState, call: ToolCall) -> ToolResult:
    """``execute_tool`` with failures folded into an error result."""
    try:
        return execute_tool(state, call)[1]
    except SandboxError:
        return state.call_log[-1][1]


# ---------------------------------------------------------------------------
# materialization

_FIRST = ("Susan", "Arjun", "Mei", "Tomas", "Amara", "Lena", "Kofi", "Rosa", "Ivan", "Nadia")
_LAST = ("Morales", "Patel", "Chen", "Novak", "Okafor", "Berg", "Mensah", "Diaz", "Petrov", "Haddad")


def synthesize(node: AttributeNode, seq: int, rng: random.Random) -> Any:
    t = base_type(node.value_type)
    if node.allowed_values:
        return rng.choice(list(node.allowed_values))
    a = node.attribute
    if t == "string":
        if a == "email":
            return f"{snake(node.database)}_{seq:03d}@example.com"
        if a == "name" and node.database == "User":
            return f"{rng.choice(_FIRST)} {rng.choice(_LAST)}"
        return f"{a}_{seq:03d}"
    if t == "integer":
        return rng.randint(1, 10)
    if t == "float":
        return round(rng.uniform(5, 500), 2)
    if t == "boolean":
        return rng.random() < 0.5
    if t.startswith("list["):
        if element_type(t) == "integer":
            return [rng.randint(1, 10) for _ in range(rng.randint(1, 2))]
        return [f"{a}_{seq:03d}_{i}" for i in range(1, rng.randint(1, 2) + 1)]
    if t == "map":
        return {}
    return f"{a}_{seq:03d}"


def _is_list(node: AttributeNode) -> bool:
    return base_type(node.value_type).startswith("list[")


def materialize(
    graph: EnvGraph,
    prerequisites: Sequence[Mapping[str, Any]] = (),
    rng: random.Random | None = None,
    *,
    background: int = 0,
) -> SandboxState:
    """Build a store holding every prerequisite entity (``{"database": ...,
    "values": {...}}``) plus ``background`` distractors per prerequisite
    database, with every foreign key linked to an existing entity."""
    rng = rng or random.Random(0)
    state = SandboxState(graph, {})
    for p in prerequisites:
        db = p["database"]
        if db not in graph.databases:
            raise SchemaMismatchError(f"unknown database {db!r}")
        for a in p.get("values", {}):
            if NodeId(db, a) not in graph.node_map:
                raise SchemaMismatchError(f"unknown attribute {db}.{a}")

    def create(db: str, values: Mapping[str, Any]) -> Entity:
        seq = len(state.entities(db)) + 1
        ent: Entity = {}
        for n in graph.attributes_of(db):
            a = n.attribute
            if a in values:
                ent[a] = copy.deepcopy(values[a])
            elif n.is_primary_key:
                ent[a] = _fresh_key(state, db, seq)
            elif n.is_foreign_key:
                ent[a] = None
            else:
                ent[a] = synthesize(n, seq, rng)
        state.store.setdefault(db, []).append(ent)
        return ent

    for p in prerequisites:
        pk = state.pk_attr(p["database"])
        vals = p.get("values", {})
        if pk in vals and state.find(p["database"], vals[pk]) is not None:
            state.find(p["database"], vals[pk]).update(copy.deepcopy(dict(vals)))
            continue
        create(p["database"], vals)
    for db in sorted({p["database"] for p in prerequisites}):
        for _ in range(background):
            create(db, {})

    _link_foreign_keys(state, rng, create)
    return state


def _link_foreign_keys(state: SandboxState, rng: random.Random, create) -> None:
    g = state.graph
    links = sorted(g.foreign_links, key=lambda e: (e.source, e.target))
    by_source: dict[NodeId, RelationEdge] = {}
    for e in links:
        by_source.setdefault(e.source, e)
    linked_fks = set(by_source)

    def mirror(link: RelationEdge) -> RelationEdge | None:
        a, b = link.source.database, link.target.database
        pk_a = g.primary_keys.get(a)
        for e in links:
            if e.source.database == b and e.target == pk_a:
                return e
        return None

    # stated references to missing entities get created first
    for link in links:
        for e in list(state.entities(link.source.database)):
            for key in flatten([e.get(link.source.attribute)]):
                if state.find(link.target.database, key) is None:
                    create(link.target.database, {link.target.attribute: key})

    changed = True
    while changed:
        changed = False
        for link in links:
            node = g.node_map[link.source]
            if _is_list(node):
                continue
            b = link.target.database
            m = mirror(link)
            m_list = m is not None and _is_list(g.node_map[m.source])
            for e in list(state.entities(link.source.database)):
                if e.get(link.source.attribute) is not None:
                    continue
                pk_a = state.pk_attr(link.source.database)
                cands = state.entities(b)
                chosen = None
                if m is not None and not m_list:
                    back = [x for x in cands if x.get(m.source.attribute) == e.get(pk_a)]
                    free = [x for x in cands if x.get(m.source.attribute) is None]
                    if back:
                        chosen = back[0]
                    elif free:
                        chosen = rng.choice(free)
                    else:
                        chosen = create(b, {m.source.attribute: e.get(pk_a)})
                    if chosen.get(m.source.attribute) is None:
                        chosen[m.source.attribute] = e.get(pk_a)
                elif cands:
                    chosen = rng.choice(cands)
                else:
                    chosen = create(b, {})
                e[link.source.attribute] = chosen[link.target.attribute]
                changed = True

    for link in links:
        node = g.node_map[link.source]
        if not _is_list(node):
            continue
        a, b = link.source.database, link.target.database
        pk_a = state.pk_attr(a)
        inverse = [x for x in links if x.source.database == b and x.target == g.primary_keys.get(a)
                   and not _is_list(g.node_map[x.source])]
        for e in state.entities(a):
            stated = e.get(link.source.attribute)
            if inverse:
                inv = inverse[0]
                kids = [x for x in state.entities(b) if x.get(inv.source.attribute) == e.get(pk_a)]
                for key in stated or []:
                    kid = state.find(b, key)
                    if kid is not None and kid.get(inv.source.attribute) is None:
                        kid[inv.source.attribute] = e.get(pk_a)
                        kids.append(kid)
                keys = list(stated or [])
                for kid in kids:
                    if kid[link.target.attribute] not in keys:
                        keys.append(kid[link.target.attribute])
                e[link.source.attribute] = keys
            elif stated is None:
                cands = state.entities(b) or [create(b, {})]
                k = min(len(cands), rng.randint(1, 2))
                picks = rng.sample(sorted(cands, key=lambda x: str(x[link.target.attribute])), k)
                e[link.source.attribute] = [x[link.target.attribute] for x in picks]

    # foreign keys without a link edge carry no reference
    for db, ents in state.store.items():
        for n in g.attributes_of(db):
            if n.is_foreign_key and n.id not in linked_fks:
                for e in ents:
                    if e.get(n.attribute) is not None and not _is_list(n):
                        continue
                    if e.get(n.attribute) is None:
                        e[n.attribute] = [] if _is_list(n) else None


def populate(graph: EnvGraph, counts: Mapping[str, int], rng: random.Random) -> SandboxState:
    """A background store with ``counts[db]`` entities per database."""
    prereqs = [{"database": db, "values": {}} for db in sorted(counts) for _ in range(counts[db])]
    return materialize(graph, prereqs, rng)


def check_conformance(state: SandboxState) -> list[str]:
    out = []
    g = state.graph
    for db, ents in sorted(state.store.items()):
        if db not in g.databases:
            out.append(f"{db}: not in graph")
            continue
        attrs = {n.attribute: n for n in g.attributes_of(db)}
        keys = [e.get(state.pk_attr(db)) for e in ents]
        if len(set(map(str, keys))) != len(keys):
            out.append(f"{db}: duplicate primary key")
        for e in ents:
            if set(e) != set(attrs):
                out.append(f"{db}: attribute set mismatch {sorted(set(e) ^ set(attrs))}")
                continue
            for a, v in e.items():
                if not _type_ok(attrs[a], v):
                    out.append(f"{db}.{a}: {v!r} is not {attrs[a].value_type}")
    return out


def _type_ok(node: AttributeNode, v: Any) -> bool:
    if v is None:
        return is_optional_type(node.value_type) or node.is_foreign_key
    t = base_type(node.value_type)
    if t.startswith("list["):
        return isinstance(v, list)
    return {
        "string": lambda x: isinstance(x, str),
        "integer": lambda x: isinstance(x, int) and not isinstance(x, bool),
        "float": lambda x: isinstance(x, (int, float)) and not isinstance(x, bool),
        "boolean": lambda x: isinstance(x, bool),
        "map": lambda x: isinstance(x, dict),
    }.get(t, lambda x: True)(v)


# ---------------------------------------------------------------------------
# snapshots


class SnapshotStore:
    """Content-addressed snapshots; tokens are digests of the graph version
    and the canonical store dump."""

    def __init__(self):
        self._data: dict[str, tuple[EnvGraph, str]] = {}

    def snapshot(self, state: SandboxState) -> str:
        text = state.dump_text()
        token = hashlib.sha256((state.graph.version_id + "\n" + text).encode()).hexdigest()[:16]
        self._data[token] = (state.graph, text)
        return token

    def restore(self, token: str) -> SandboxState:
        if token not in self._data:
            raise UnknownTokenError(token)
        graph, text = self._data[token]
        return SandboxState(graph, json.loads(text))

    def register(self, graph: EnvGraph, store_dump: Mapping[str, list]) -> str:
        return self.snapshot(SandboxState(graph, copy.deepcopy(dict(store_dump))))

    def __contains__(self, token: str) -> bool:
        return token in self._data


default_snapshots = SnapshotStore()


def snapshot(state: SandboxState) -> str:
    return default_snapshots.snapshot(state)


def restore(token: str) -> SandboxState:
    return default_snapshots.restore(token)


# ---------------------------------------------------------------------------
# focus entities: one linked entity per database, used to build callable tasks


def focus_prerequisites(
    graph: EnvGraph,
    databases: Iterable[str],
    rng: random.Random,
    overrides: Mapping[str, Mapping[str, Any]] | None = None,
) -> list[dict[str, Any]]:
    """One prerequisite entity per database, mutually linked along every
    foreign-key link between the chosen databases."""
    dbs = sorted(set(databases) & set(graph.databases))
    overrides = overrides or {}
    keys = {}
    for db in dbs:
        pk = graph.primary_keys.get(db)
        if pk is None:
            continue
        keys[db] = overrides.get(db, {}).get(pk.attribute, f"{snake(db)}_{rng.randint(100, 999)}")
    prereqs = []
    for db in dbs:
        if db not in keys:
            continue
        values: dict[str, Any] = {graph.primary_keys[db].attribute: keys[db]}
        for link in graph.foreign_links:
            if link.source.database == db and link.target.database in keys:
                node = graph.node_map[link.source]
                k = keys[link.target.database]
                values[link.source.attribute] = [k] if _is_list(node) else k
        values.update(overrides.get(db, {}))
        prereqs.append({"database": db, "values": values})
    return prereqs


def focus_entities(state: SandboxState, prerequisites: Sequence[Mapping[str, Any]]) -> dict[str, Entity]:
    out = {}
    for p in prerequisites:
        db = p["database"]
        pk = state.pk_attr(db)
        key = p.get("values", {}).get(pk)
        ent = state.find(db, key) if key is not None else None
        if ent is not None:
            out[db] = ent
    return out


def build_call(
    graph: EnvGraph,
    tool: ToolSpec,
    focus: Mapping[str, Entity],
    choices: Mapping[NodeId, Any] | None = None,
    turn: int = 0,
) -> ToolCall | None:
    """Arguments for ``tool`` drawn from the focus entities, with values for
    data written by WRITE tools taken from ``choices``. None when an input
    has no available value."""
    choices = choices or {}
    target = tool.outputs[0].database if tool.kind == WRITE else None
    args: dict[NodeId, Any] = {}
    for n in tool.inputs:
        node = graph.node_map[n]
        if n in choices:
            args[n] = choices[n]
        elif n.database == target and not node.is_primary_key and not node.is_foreign_key:
            args[n] = synthesize(node, 1, random.Random(str(n)))
        elif n.database in focus and focus[n.database].get(n.attribute) is not None:
            args[n] = copy.deepcopy(focus[n.database][n.attribute])
        elif n in tool.optional_inputs:
            continue
        else:
            return None
    return ToolCall(tool.name, args, turn)
