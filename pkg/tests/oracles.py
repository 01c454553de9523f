"""Independent reference computations used by the test-suite.

Each oracle recomputes a quantity the library produces by a different route,
so agreement between the two is evidence rather than tautology.
"""

from __future__ import annotations

import random
from collections import deque
from fractions import Fraction

import networkx as nx

from evograph.graph import READ, EnvGraph, NodeId, ToolSpec
from evograph.sandbox import (
    SandboxError,
    SandboxState,
    ToolCall,
    execute_tool,
    focus_prerequisites,
    materialize,
    tool_databases,
)


# ---------------------------------------------------------------------------
# connectivity and bridges


def bfs_connected(node_ids, edge_pairs) -> bool:
    """Plain BFS over the undirected view."""
    nodes = list(node_ids)
    if not nodes:
        return True
    adj = {n: set() for n in nodes}
    for a, b in edge_pairs:
        adj[a].add(b)
        adj[b].add(a)
    seen = {nodes[0]}
    queue = deque([nodes[0]])
    while queue:
        cur = queue.popleft()
        for nb in adj[cur]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return len(seen) == len(nodes)


def component_count(graph: EnvGraph, skip=None) -> int:
    g = nx.MultiGraph()
    g.add_nodes_from(n.id for n in graph.nodes)
    for e in graph.edges:
        if e.key != skip:
            g.add_edge(e.source, e.target)
    return nx.number_connected_components(g)


def brute_force_bridges(graph: EnvGraph) -> set:
    """Edges whose removal raises the weak component count."""
    base = component_count(graph)
    return {e.key for e in graph.edges if component_count(graph, skip=e.key) > base}


def reachability_fixpoint(graph: EnvGraph, seeds) -> set:
    """Least fixpoint of edge-following plus tool firing, computed by a
    worklist instead of whole-set iteration."""
    reached = set(seeds)
    work = deque(sorted(reached))
    fired = set()
    while work:
        cur = work.popleft()
        for e in graph.edges:
            if e.source == cur and e.target not in reached:
                reached.add(e.target)
                work.append(e.target)
        for t in graph.tools:
            if t.name in fired or not t.required_inputs:
                continue
            if set(t.required_inputs) <= reached:
                fired.add(t.name)
                for o in t.outputs:
                    if o not in reached:
                        reached.add(o)
                        work.append(o)
    return reached


# ---------------------------------------------------------------------------
# random walks


def walk_distribution(graph: EnvGraph, start: NodeId, min_len: int, max_len: int) -> dict[tuple, Fraction]:
    """Exact distribution of accepted walks: uniform target length, uniform
    unvisited successor per step, rejection of walks shorter than min_len."""
    out_nb = {}
    for e in graph.edges:
        out_nb.setdefault(e.source, set()).add(e.target)
    one_shot: dict[tuple, Fraction] = {}
    span = max_len - min_len + 1

    def grow(path, target, p):
        if len(path) - 1 == target:
            one_shot[tuple(path)] = one_shot.get(tuple(path), Fraction(0)) + p
            return
        options = sorted(n for n in out_nb.get(path[-1], ()) if n not in path)
        if not options:
            if len(path) - 1 >= min_len:
                one_shot[tuple(path)] = one_shot.get(tuple(path), Fraction(0)) + p
            return
        for n in options:
            grow(path + [n], target, p / len(options))

    for target in range(min_len, max_len + 1):
        grow([start], target, Fraction(1, span))
    total = sum(one_shot.values())
    return {k: v / total for k, v in one_shot.items()}


# ---------------------------------------------------------------------------
# shortcut composition


def keyed_read(state: SandboxState, key_node: NodeId, out: NodeId, key) -> tuple[set, set]:
    """A plain READ keyed on ``key_node`` projecting ``out``: returns the
    primary keys of the reached ``out`` entities and their ``out`` values."""
    g = state.graph
    name = f"hop__{key_node}__{out}".replace(".", "_")
    outputs = (out,) if out != key_node else (g.primary_keys[out.database],)
    hop = ToolSpec(name, READ, (key_node,), outputs, "one hop")
    probe = EnvGraph.build(g.version_id, g.nodes, g.edges, (*g.tools, hop), g.metadata)
    local = SandboxState(probe, state.store)
    try:
        _, result = execute_tool(local, ToolCall.make(name, {str(key_node): key}))
    except SandboxError:
        return set(), set()
    pk = g.primary_keys[out.database]
    keys = {f.value for f in result.facts if f.node == pk}
    values = {f.value for f in result.facts if f.node == out}
    return keys, values


def composed_outputs(state: SandboxState, tool: ToolSpec, value) -> dict[NodeId, set]:
    """Output values of a shortcut obtained by chaining one-hop READs along
    its discovery path, each keyed on the primary key of the entities the
    previous hop reached."""
    g = state.graph
    path = list(tool.discovery_path)
    entry = tool.inputs[0]
    keys, _ = keyed_read(state, entry, g.primary_keys[path[0].database], value)
    per_index = [keys]
    for u, v in zip(path, path[1:]):
        pk_u = g.primary_keys[u.database]
        nxt: set = set()
        for k in sorted(keys, key=repr):
            nxt |= keyed_read(state, pk_u, v, k)[0]
        keys = nxt
        per_index.append(keys)
    out = {}
    for o in tool.outputs:
        idx = max(i for i, n in enumerate(path) if n == o)
        pk_o = g.primary_keys[o.database]
        vals: set = set()
        for k in per_index[idx]:
            vals |= keyed_read(state, pk_o, o, k)[1]
        out[o] = vals
    return out


def shortcut_outputs(state: SandboxState, tool: ToolSpec, value) -> dict[NodeId, set]:
    try:
        _, result = execute_tool(state, ToolCall.make(tool.name, {str(tool.inputs[0]): value}))
    except SandboxError:
        return {o: set() for o in tool.outputs}
    return {o: {f.value for f in result.facts if f.node == o} for o in tool.outputs}


def shortcut_store(graph: EnvGraph, tool: ToolSpec, seed: int) -> SandboxState:
    rng = random.Random(f"store:{tool.name}:{seed}")
    prereqs = focus_prerequisites(graph, tool_databases(graph, tool), rng)
    state = materialize(graph, prereqs, rng, background=3)
    return state
