"""Graph-grounded task synthesis.

A task is planned as a chain of tools inside a connected scope of the
environment graph. The oracle walk executes the chain against a
materialized store one tool per turn, recording the user utterance, the
facts each turn must surface and the growing active node set.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .graph import (
    WRITE,
    EnvGraph,
    NodeId,
    ToolSpec,
    connect,
    graph_from_doc,
    graph_to_doc,
    induced_subgraph,
    is_weakly_connected,
)
from .sandbox import (
    Fact,
    SandboxError,
    SandboxState,
    ToolCall,
    build_call,
    default_snapshots,
    execute_tool,
    focus_entities,
    focus_prerequisites,
    freeze,
    materialize,
    snake,
    sort_facts,
    synthesize,
    thaw,
    tool_databases,
)

WILDCARD = "*"
DIFFICULTIES = ("easy", "medium", "hard")


@dataclass(frozen=True)
class DifficultyProfile:
    nodes: tuple[int, int]
    chain: tuple[int, int]
    max_databases: int | None = None
    min_databases: int | None = None


PROFILES = {
    "easy": DifficultyProfile((4, 6), (2, 3), max_databases=2),
    "medium": DifficultyProfile((7, 10), (3, 4)),
    "hard": DifficultyProfile((11, 16), (4, 6), min_databases=3),
}


class TaskGenerationError(Exception):
    pass


class NoToolsInScopeError(TaskGenerationError):
    pass


class WalkStuckError(TaskGenerationError):
    pass


class ScenarioError(TaskGenerationError):
    pass


@dataclass(frozen=True, order=True)
class FactPattern:
    """A required fact: ``value`` is WILDCARD when any value will do."""

    node: NodeId
    value: Any = WILDCARD

    @property
    def wildcard(self) -> bool:
        return self.value == WILDCARD

    def to_doc(self) -> dict[str, Any]:
        return {"node": str(self.node), "value": thaw(self.value)}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> FactPattern:
        return cls(NodeId.parse(doc["node"]), freeze(doc["value"]))


@dataclass(frozen=True)
class StateInstruction:
    turn: int
    utterance: str
    criterion: tuple[FactPattern, ...]

    def to_doc(self) -> dict[str, Any]:
        return {"turn": self.turn, "utterance": self.utterance, "criterion": [p.to_doc() for p in self.criterion]}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> StateInstruction:
        return cls(doc["turn"], doc["utterance"], tuple(FactPattern.from_doc(p) for p in doc["criterion"]))


@dataclass(frozen=True)
class ReferenceTurn:
    action: ToolCall
    facts: frozenset[Fact]
    active: frozenset[NodeId]
    revealed: frozenset[NodeId] = frozenset()

    def to_doc(self) -> dict[str, Any]:
        return {
            "action": self.action.to_doc(),
            "facts": [f.to_doc() for f in sort_facts(self.facts)],
            "active": sorted(str(n) for n in self.active),
            "revealed": sorted(str(n) for n in self.revealed),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> ReferenceTurn:
        return cls(
            ToolCall.from_doc(doc["action"]),
            frozenset(Fact.from_doc(f) for f in doc["facts"]),
            frozenset(NodeId.parse(n) for n in doc["active"]),
            frozenset(NodeId.parse(n) for n in doc.get("revealed", [])),
        )


@dataclass(frozen=True)
class ReferenceTrajectory:
    turns: tuple[ReferenceTurn, ...]
    final_knowledge: frozenset[Fact]

    def to_doc(self) -> dict[str, Any]:
        return {
            "turns": [t.to_doc() for t in self.turns],
            "final_knowledge": [f.to_doc() for f in sort_facts(self.final_knowledge)],
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> ReferenceTrajectory:
        return cls(
            tuple(ReferenceTurn.from_doc(t) for t in doc["turns"]),
            frozenset(Fact.from_doc(f) for f in doc["final_knowledge"]),
        )


@dataclass(frozen=True)
class Scenario:
    goal: str
    description: str
    prerequisites: tuple[Mapping[str, Any], ...]
    choices: Mapping[NodeId, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    env_version: str
    subgraph: EnvGraph
    goal: str
    scenario: str
    prerequisites: tuple[Mapping[str, Any], ...]
    difficulty: str
    snapshot: str
    store: Mapping[str, list]
    instructions: tuple[StateInstruction, ...]
    reference: ReferenceTrajectory
    chain: tuple[str, ...] = ()

    @property
    def turns(self) -> int:
        return len(self.instructions)

    def to_doc(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "env_version": self.env_version,
            "difficulty": self.difficulty,
            "goal": self.goal,
            "scenario": self.scenario,
            "prerequisites": [dict(p) for p in self.prerequisites],
            "chain": list(self.chain),
            "subgraph": graph_to_doc(self.subgraph),
            "initial_state": {"token": self.snapshot, "store": self.store},
            "instructions": [i.to_doc() for i in self.instructions],
            "reference": self.reference.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> TaskInstance:
        return cls(
            doc["task_id"],
            doc["env_version"],
            graph_from_doc(doc["subgraph"]),
            doc["goal"],
            doc["scenario"],
            tuple(doc.get("prerequisites", [])),
            doc["difficulty"],
            doc["initial_state"]["token"],
            doc["initial_state"]["store"],
            tuple(StateInstruction.from_doc(i) for i in doc["instructions"]),
            ReferenceTrajectory.from_doc(doc["reference"]),
            tuple(doc.get("chain", [])),
        )


# ---------------------------------------------------------------------------
# scope sampling


def _attached_tools(graph: EnvGraph) -> list[ToolSpec]:
    attached = {name for e in graph.edges for name in e.tools}
    return [t for t in graph.tools if t.name in attached]


def _footprint(graph: EnvGraph, tool: ToolSpec) -> set[NodeId]:
    """Nodes a scope needs to keep ``tool`` and every fact it returns."""
    nodes = set(tool.nodes)
    edge = next(e for e in graph.edges if tool.name in e.tools)
    nodes |= {edge.source, edge.target}
    for db in {n.database for n in tool.outputs}:
        pk = graph.primary_keys.get(db)
        if pk is not None:
            nodes.add(pk)
    return nodes


def _grow_chain(graph: EnvGraph, tools: Sequence[ToolSpec], length: int, rng: random.Random) -> list[ToolSpec] | None:
    chain = [rng.choice(tools)]
    covered = _footprint(graph, chain[0])
    produced = set(chain[0].outputs)
    while len(chain) < length:
        used = {t.name for t in chain}
        touching = [
            t for t in tools
            if t.name not in used and t.nodes & covered and not set(t.outputs) <= covered
        ]
        if not touching:
            return None
        linked = [t for t in touching if set(t.inputs) & produced]
        nxt = rng.choice(linked or touching)
        chain.append(nxt)
        covered |= _footprint(graph, nxt)
        produced |= set(nxt.outputs)
    return chain


def sample_scope_with_chain(
    graph: EnvGraph, difficulty: str, rng: random.Random, *, attempts: int = 200
) -> tuple[EnvGraph, list[str]]:
    profile = PROFILES[difficulty]
    tools = _attached_tools(graph)
    if not tools:
        raise NoToolsInScopeError(f"{graph.version_id} has no tools on edges")
    for _ in range(attempts):
        length = rng.randint(*profile.chain)
        chain = _grow_chain(graph, tools, length, rng)
        if chain is None:
            continue
        nodes = set()
        for t in chain:
            nodes |= _footprint(graph, t)
        nodes = connect(graph, nodes)
        lo, hi = profile.nodes
        if len(nodes) > hi:
            continue
        while len(nodes) < lo:
            border = sorted({nb for n in nodes for nb in graph.undirected_neighbors.get(n, ())} - nodes)
            if not border:
                break
            nodes.add(rng.choice(border))
        if len(nodes) < lo:
            continue
        sub = induced_subgraph(graph, nodes, version_id=graph.version_id)
        if not {t.name for t in chain} <= set(sub.tool_map) or not is_weakly_connected(sub):
            continue
        dbs = len(sub.databases)
        if profile.max_databases is not None and dbs > profile.max_databases:
            continue
        if profile.min_databases is not None and dbs < profile.min_databases:
            continue
        return sub, [t.name for t in chain]
    raise NoToolsInScopeError(f"no {difficulty} scope with a tool chain in {graph.version_id}")


def sample_task_scope(graph: EnvGraph, difficulty: str, rng: random.Random) -> EnvGraph:
    return sample_scope_with_chain(graph, difficulty, rng)[0]


# ---------------------------------------------------------------------------
# scenario

_FIRST = ("susan", "arjun", "mei", "tomas", "amara", "lena", "kofi", "rosa", "ivan", "nadia")
_LAST = ("morales", "patel", "chen", "novak", "okafor", "berg", "mensah", "diaz", "petrov", "haddad")


def _words(attr: str) -> str:
    return attr.replace("_", " ")


def synthesize_scenario(
    env: EnvGraph, subgraph: EnvGraph, chain: Sequence[str], rng: random.Random
) -> Scenario:
    tools = [env.tool_map[name] for name in chain]
    if not any(t.kind == WRITE for t in tools) and len(tools) < 2:
        raise ScenarioError("scope needs a WRITE tool or at least two READ tools")
    dbs: set[str] = set()
    for t in tools:
        dbs |= tool_databases(env, t)
    overrides: dict[str, dict[str, Any]] = {}
    persona = None
    if "User" in dbs and "user_id" in {n.attribute for n in env.attributes_of("User")}:
        first, last = rng.choice(_FIRST), rng.choice(_LAST)
        uid = f"user_{rng.randint(100, 999)}"
        persona = f"{first.title()} {last.title()}"
        attrs = {n.attribute for n in env.attributes_of("User")}
        overrides["User"] = {"user_id": uid}
        if "name" in attrs:
            overrides["User"]["name"] = persona
        if "email" in attrs:
            overrides["User"]["email"] = f"{first}.{last}.{uid}@example.com"
    prereqs = focus_prerequisites(env, dbs, rng, overrides)

    choices: dict[NodeId, Any] = {}
    for i, t in enumerate(tools):
        if t.kind != WRITE:
            continue
        target = t.outputs[0].database
        for n in t.inputs:
            node = env.node_map[n]
            if n.database == target and not node.is_primary_key and not node.is_foreign_key and n not in choices:
                choices[n] = synthesize(node, i + 1, rng)

    goal_tool = tools[-1]
    if goal_tool.kind == WRITE:
        target = goal_tool.outputs[0].database
        detail = ", ".join(f"{_words(n.attribute)} {_render(v)}" for n, v in sorted(choices.items()) if n.database == target)
        goal = _words(goal_tool.name).capitalize() + (f" with {detail}" if detail else "")
    else:
        outs = ", ".join(_words(n.attribute) for n in goal_tool.outputs)
        goal = f"Find out the {outs} of my {_words(snake(goal_tool.outputs[0].database))}"
    who = f"You are {persona}. " if persona else "You are a customer. "
    description = (
        f"{who}You want to: {goal}. Along the way you will need the assistant to "
        + ", then ".join(_words(t.name) for t in tools)
        + "."
    )
    return Scenario(goal + ".", description, tuple(prereqs), choices)


# ---------------------------------------------------------------------------
# oracle walk


def expand_active(active: Iterable[NodeId], tool: ToolSpec, facts: Iterable[Fact], revealed: Iterable[NodeId]) -> frozenset[NodeId]:
    """Active set after one turn: previous nodes, revealed identifiers, the
    executed tool's inputs and outputs, and the nodes of the facts it returned."""
    return frozenset(active) | frozenset(revealed) | tool.nodes | {f.node for f in facts}


def fold_knowledge(turn_facts: Iterable[Iterable[Fact]]) -> list[frozenset[Fact]]:
    """K_1..K_T with K_t = K_{t-1} ∪ facts_t."""
    out, k = [], frozenset()
    for fs in turn_facts:
        k = k | frozenset(fs)
        out.append(k)
    return out


def _render(value: Any) -> str:
    v = thaw(value)
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    return str(v)


def render_utterance(turn: int, tool: ToolSpec, revealed: Mapping[NodeId, Any], written: Mapping[NodeId, Any], goal: str) -> str:
    parts = []
    if turn == 1:
        parts.append(f"Hi, I need some help. {goal}")
    for n, v in sorted(revealed.items()):
        if n not in written:
            parts.append(f"My {_words(n.attribute)} is {_render(v)}.")
    if tool.kind == WRITE:
        asks = ", ".join(f"{_words(n.attribute)} {_render(v)}" for n, v in sorted(written.items()))
        parts.append(f"Please go ahead and {_words(tool.name)}" + (f" with {asks}." if asks else "."))
    else:
        outs = ", ".join(_words(n.attribute) for n in tool.outputs)
        parts.append(f"Can you tell me the {outs}?")
    return " ".join(parts)


def agentic_walk(
    env: EnvGraph,
    subgraph: EnvGraph,
    state: SandboxState,
    scenario: Scenario,
    chain: Sequence[str],
    *,
    max_turns: int = 12,
) -> tuple[tuple[StateInstruction, ...], ReferenceTrajectory]:
    """Run ``chain`` one tool per turn on ``state`` (mutated)."""
    if len(chain) > max_turns:
        raise WalkStuckError(f"chain of {len(chain)} exceeds {max_turns} turns")
    focus = focus_entities(state, scenario.prerequisites)
    knowledge: frozenset[Fact] = frozenset()
    active: frozenset[NodeId] = frozenset()
    instructions, turns = [], []
    for t, name in enumerate(chain, start=1):
        tool = subgraph.tool_map.get(name)
        if tool is None:
            raise WalkStuckError(f"{name} is outside the scope")
        call = build_call(env, tool, focus, scenario.choices, turn=t)
        if call is None:
            raise WalkStuckError(f"no arguments for {name}")
        known: dict[NodeId, set] = {}
        for f in knowledge:
            known.setdefault(f.node, set()).add(f.value)
        revealed = {
            n: v for n, v in call.args.items() if known.get(n) != {freeze(v)}
        }
        try:
            _, result = execute_tool(state, call)
        except SandboxError as exc:
            raise WalkStuckError(f"{name} failed: {exc}") from exc
        facts = result.facts
        fact_nodes = {f.node for f in facts}
        if not fact_nodes <= set(subgraph.node_map):
            raise WalkStuckError(f"{name} surfaces facts outside the scope")
        written = {n: v for n, v in call.args.items() if n in scenario.choices}
        patterns = []
        for o in tool.outputs:
            if o not in fact_nodes:
                continue
            if tool.kind == WRITE and o in written:
                patterns.append(FactPattern(o, freeze(written[o])))
            else:
                patterns.append(FactPattern(o))
        if not patterns:
            raise WalkStuckError(f"{name} surfaces nothing")
        knowledge = knowledge | facts
        new_active = expand_active(active, tool, facts, revealed)
        if new_active == active:
            raise WalkStuckError(f"{name} does not expand the active set")
        active = new_active
        instructions.append(StateInstruction(t, render_utterance(t, tool, revealed, written, scenario.goal), tuple(sorted(patterns))))
        turns.append(ReferenceTurn(call, facts, active, frozenset(revealed)))
    return tuple(instructions), ReferenceTrajectory(tuple(turns), knowledge)


def replay_reference(task: TaskInstance, env: EnvGraph) -> frozenset[Fact]:
    """Final knowledge obtained by re-running the reference calls on a fresh
    copy of the task's initial store."""
    state = SandboxState(env, {k: [dict(e) for e in v] for k, v in _copy(task.store).items()})
    k: frozenset[Fact] = frozenset()
    for turn in task.reference.turns:
        _, result = execute_tool(state, turn.action)
        k = k | result.facts
    return k


def _copy(store: Mapping[str, list]) -> dict[str, list]:
    import copy

    return copy.deepcopy(dict(store))


# ---------------------------------------------------------------------------
# batch generation


def difficulty_counts(count: int, mix: Sequence[float] = (1, 1, 1)) -> dict[str, int]:
    total = float(sum(mix))
    if count < 0 or total <= 0 or any(w < 0 for w in mix):
        raise ValueError("count must be >= 0 and mix weights positive")
    medium = round(count * mix[1] / total)
    hard = round(count * mix[2] / total)
    if medium + hard > count:
        hard = count - medium
    return {"easy": count - medium - hard, "medium": medium, "hard": hard}


def generate_task(
    env: EnvGraph, difficulty: str, rng: random.Random, task_id: str, *, max_turns: int = 12, background: int = 2
) -> TaskInstance:
    subgraph, chain = sample_scope_with_chain(env, difficulty, rng)
    scenario = synthesize_scenario(env, subgraph, chain, rng)
    state = materialize(env, scenario.prerequisites, rng, background=background)
    store = state.dump()
    token = default_snapshots.snapshot(state)
    instructions, reference = agentic_walk(env, subgraph, state, scenario, chain, max_turns=max_turns)
    sub = subgraph.with_version(f"{env.version_id}.{task_id}", dict(subgraph.metadata))
    return TaskInstance(
        task_id, env.version_id, sub, scenario.goal, scenario.description, scenario.prerequisites,
        difficulty, token, store, instructions, reference, tuple(chain),
    )


def generate_tasks(
    env: EnvGraph,
    count: int,
    difficulty_mix: Sequence[float] = (1, 1, 1),
    rng: random.Random | None = None,
    *,
    max_turns: int = 12,
    resamples: int = 5,
) -> list[TaskInstance]:
    rng = rng or random.Random(0)
    counts = difficulty_counts(count, difficulty_mix)
    base = rng.randrange(2**32)
    slots = [d for d in DIFFICULTIES for _ in range(counts[d])]
    tasks, failures = [], []
    for i, difficulty in enumerate(slots):
        task_id = f"{env.version_id}-task_{i:02d}"
        last: Exception | None = None
        for attempt in range(resamples + 1):
            slot_rng = random.Random(f"{base}:{i}:{attempt}")
            try:
                task = generate_task(env, difficulty, slot_rng, task_id, max_turns=max_turns)
            except (WalkStuckError, NoToolsInScopeError, ScenarioError) as exc:
                last = exc
                continue
            if replay_reference(task, env) != task.reference.final_knowledge:
                last = WalkStuckError(f"{task_id}: reference replay diverged")
                continue
            tasks.append(task)
            break
        else:
            failures.append(f"{env.version_id}/{task_id} ({difficulty}): {last}")
    if failures:
        raise TaskGenerationError("; ".join(failures))
    return tasks
