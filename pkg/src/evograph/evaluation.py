"""State-gated user simulation, agent policies, memory strategies and
metric aggregation."""

from __future__ import annotations

import copy
import csv
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .graph import EnvGraph, NodeId, dumps
from .sandbox import Fact, SandboxState, ToolCall, ToolResult, thaw, try_execute
from .taskgen import FactPattern, TaskInstance

MEMORY_MODES = ("baseline", "history", "reflection")
CLARIFICATION_PREFIX = "I still need help with this."
DIGEST_LIMIT = 1024


class PolicyError(Exception):
    """The policy produced something that is not a tool call or a reply."""


class EvalError(Exception):
    def __init__(self, version_id: str, task_id: str, cause: Exception):
        super().__init__(f"{version_id}/{task_id}: {cause}")
        self.version_id = version_id
        self.task_id = task_id
        self.cause = cause


@dataclass(frozen=True)
class Reply:
    text: str


@dataclass(frozen=True)
class PolicyView:
    """Everything a policy may see. Success criteria never appear here."""

    conversation: tuple[Mapping[str, Any], ...]
    tool_catalog: tuple[Mapping[str, Any], ...]
    last_results: tuple[Mapping[str, Any], ...] = ()

    def to_doc(self) -> dict[str, Any]:
        return {
            "conversation": [dict(e) for e in self.conversation],
            "tool_catalog": [dict(t) for t in self.tool_catalog],
            "last_results": [dict(r) for r in self.last_results],
        }


class AgentPolicy(Protocol):
    def reset(self, memory_context: Sequence[Any], task_id: str) -> None: ...

    def step(self, view: PolicyView) -> ToolCall | Reply: ...


def tool_catalog(graph: EnvGraph) -> tuple[dict[str, Any], ...]:
    return tuple(
        {
            "name": t.name,
            "kind": t.kind,
            "signature": t.signature(),
            "description": t.description,
            "inputs": [str(n) for n in t.inputs],
            "optional_inputs": [str(n) for n in t.optional_inputs],
            "outputs": [str(n) for n in t.outputs],
        }
        for t in graph.tools
    )


# ---------------------------------------------------------------------------
# success checking


def _literal_in(value: Any, text: str) -> bool:
    v = thaw(value)
    if isinstance(v, list):
        return bool(v) and all(str(x) in text for x in v)
    if isinstance(v, bool):
        return str(v).lower() in text.lower()
    return str(v) in text


def check_state_success(criterion: Iterable[FactPattern], knowledge: Iterable[Fact], reply_text: str = "") -> bool:
    """Wildcard patterns need any fact on their node; exact patterns need a
    fact with an equal value or the literal quoted in the reply."""
    by_node: dict[NodeId, set] = {}
    for f in knowledge:
        by_node.setdefault(f.node, set()).add(f.value)
    for p in criterion:
        values = by_node.get(p.node, set())
        if p.wildcard:
            if not values:
                return False
        elif p.value not in values and not (reply_text and _literal_in(p.value, reply_text)):
            return False
    return True


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class SimConfig:
    retry_budget: int = 2
    max_actions: int = 16


@dataclass(frozen=True)
class TurnOutcome:
    turn: int
    satisfied: int
    attempts: int
    tool_calls: int


@dataclass
class TaskReport:
    task_id: str
    version_id: str
    outcomes: list[TurnOutcome]
    n_tool: int
    transcript: list[dict[str, Any]] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.outcomes)

    @property
    def C(self) -> float:
        return sum(o.satisfied for o in self.outcomes) / self.T if self.T else 0.0

    @property
    def states(self) -> list[int]:
        return [o.satisfied for o in self.outcomes]

    def to_doc(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "version_id": self.version_id,
            "C": self.C,
            "T": self.T,
            "N_tool": self.n_tool,
            "states": self.states,
            "attempts": [o.attempts for o in self.outcomes],
            "tool_calls": [o.tool_calls for o in self.outcomes],
        }


def _event(role: str, turn: int, payload: Any) -> dict[str, Any]:
    return {"role": role, "turn": turn, "payload": payload}


def transcript_lines(transcript: Iterable[Mapping[str, Any]]) -> str:
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in transcript)


def initial_state(task: TaskInstance, env: EnvGraph) -> SandboxState:
    if env.version_id != task.env_version:
        raise ValueError(f"task {task.task_id} targets {task.env_version}, not {env.version_id}")
    return SandboxState(env, copy.deepcopy(dict(task.store)))


def run_task(
    task: TaskInstance,
    policy: AgentPolicy,
    env: EnvGraph,
    config: SimConfig = SimConfig(),
    memory_context: Sequence[Any] = (),
) -> TaskReport:
    state = initial_state(task, env)
    catalog = tool_catalog(env)
    policy.reset(tuple(memory_context), task.task_id)
    knowledge: set[Fact] = set()
    transcript: list[dict[str, Any]] = []
    outcomes = []
    for instr in task.instructions:
        t = instr.turn
        utterance = instr.utterance
        attempts = 0
        calls = 0
        while True:
            transcript.append(_event("user", t, utterance))
            reply = ""
            last: list[dict[str, Any]] = []
            try:
                for _ in range(config.max_actions):
                    action = policy.step(PolicyView(tuple(copy.deepcopy(transcript)), catalog, tuple(last)))
                    if isinstance(action, Reply):
                        reply = str(action.text)
                        transcript.append(_event("agent", t, {"reply": reply}))
                        break
                    if not isinstance(action, ToolCall):
                        raise PolicyError(f"unexpected action {action!r}")
                    call = ToolCall(action.tool, dict(action.args), t)
                    try:
                        result = try_execute(state, call)
                    except Exception as exc:  # malformed arguments
                        result = ToolResult("error", error=str(exc), error_type=type(exc).__name__)
                        state.call_log.append((call, result))
                    calls += 1
                    if result.ok:
                        knowledge |= result.facts
                    doc = {"call": call.to_doc(), "result": result.to_doc()}
                    transcript.append(_event("tool", t, doc))
                    last = [doc]
                else:
                    raise PolicyError(f"no reply after {config.max_actions} actions")
            except PolicyError as exc:
                transcript.append(_event("agent", t, {"error": str(exc)}))
            if check_state_success(instr.criterion, knowledge, reply):
                outcomes.append(TurnOutcome(t, 1, attempts, calls))
                break
            if attempts >= config.retry_budget:
                outcomes.append(TurnOutcome(t, 0, attempts, calls))
                break
            attempts += 1
            utterance = f"{CLARIFICATION_PREFIX} {instr.utterance}"
    return TaskReport(task.task_id, task.env_version, outcomes, len(state.call_log), transcript)


# ---------------------------------------------------------------------------
# policies


class OraclePolicy:
    """Replays each task's reference trajectory: the turn's calls, then a reply."""

    def __init__(self, tasks: Iterable[TaskInstance]):
        self._tasks = {t.task_id: t for t in tasks}
        self._calls: dict[int, list[ToolCall]] = {}
        self._turn = None
        self._queue: list[ToolCall] = []

    def reset(self, memory_context, task_id):
        task = self._tasks[task_id]
        self._calls = {}
        for t in task.reference.turns:
            self._calls.setdefault(t.action.turn, []).append(t.action)
        self._turn = None
        self._queue = []

    def step(self, view):
        turn = next(e["turn"] for e in reversed(view.conversation) if e["role"] == "user")
        if turn != self._turn:
            self._turn = turn
            self._queue = list(self._calls.get(turn, []))
        if self._queue:
            return self._queue.pop(0)
        return Reply("Done, here is what I found.")


class NullPolicy:
    def reset(self, memory_context, task_id):
        pass

    def step(self, view):
        return Reply("Sorry, I cannot help with that.")


class RecordingPolicy:
    """Wraps a policy and keeps every view and memory context it receives."""

    def __init__(self, inner: AgentPolicy):
        self.inner = inner
        self.views: list[PolicyView] = []
        self.memory_contexts: list[tuple] = []

    def reset(self, memory_context, task_id):
        self.memory_contexts.append(tuple(memory_context))
        self.inner.reset(memory_context, task_id)

    def step(self, view):
        self.views.append(view)
        return self.inner.step(view)


class HttpAgentPolicy:
    """Agent behind an HTTP endpoint. Request: ``{conversation, tool_catalog,
    memory_context}``; response: ``{tool_calls: [{tool, args}]}`` or ``{reply}``."""

    def __init__(self, client):
        self.client = client
        self._memory: tuple = ()
        self._pending: list[ToolCall] = []

    def reset(self, memory_context, task_id):
        self._memory = tuple(memory_context)
        self._pending = []

    def step(self, view):
        if self._pending:
            return self._pending.pop(0)
        try:
            doc = self.client.post_json({
                "conversation": [dict(e) for e in view.conversation],
                "tool_catalog": [dict(t) for t in view.tool_catalog],
                "memory_context": list(self._memory),
            })
        except Exception as exc:
            raise PolicyError(f"agent endpoint failed: {exc}") from exc
        if isinstance(doc, dict) and "reply" in doc:
            return Reply(str(doc["reply"]))
        try:
            calls = [ToolCall.make(c["tool"], c.get("args", {})) for c in doc["tool_calls"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise PolicyError(f"malformed agent response: {exc}") from exc
        if not calls:
            raise PolicyError("empty tool_calls")
        self._pending = calls[1:]
        return calls[0]


# ---------------------------------------------------------------------------
# memory


def summarize_reflection(transcript: Sequence[Mapping[str, Any]], score: float | None = None) -> dict[str, Any]:
    """Structured digest of a finished task, at most 1 KB as JSON."""
    if not transcript:
        return {}
    tools: dict[str, dict[str, int]] = {}
    deprecated: dict[str, str] = {}
    for e in transcript:
        if e.get("role") != "tool":
            continue
        name = e["payload"]["call"]["tool"]
        result = e["payload"]["result"]
        tally = tools.setdefault(name, {"ok": 0, "error": 0})
        tally["ok" if result["status"] == "ok" else "error"] += 1
        if result.get("error_type") == "DeprecatedToolError":
            msg = result.get("error", "")
            hint = msg.split("Workaround:", 1)[1].strip() if "Workaround:" in msg else ""
            deprecated[name] = hint[:160]
    digest: dict[str, Any] = {
        "tools": dict(sorted(tools.items())),
        "deprecated_encountered": dict(sorted(deprecated.items())),
        "C": score,
    }
    while len(json.dumps(digest, sort_keys=True).encode()) > DIGEST_LIMIT:
        if digest["tools"]:
            least = min(digest["tools"], key=lambda k: (sum(digest["tools"][k].values()), k))
            del digest["tools"][least]
        elif any(len(v) > 40 for v in digest["deprecated_encountered"].values()):
            digest["deprecated_encountered"] = {k: v[:40] for k, v in digest["deprecated_encountered"].items()}
        else:
            digest["deprecated_encountered"].popitem()
    return digest


@dataclass(frozen=True)
class MemoryEntry:
    seq: int
    task_id: str
    content: Any


class MemoryModule:
    """Bounded FIFO of past transcripts (history) or digests (reflection)."""

    def __init__(self, mode: str = "baseline", k: int = 5):
        if mode not in MEMORY_MODES:
            raise ValueError(f"unknown memory mode {mode!r}")
        if k < 0:
            raise ValueError("k must be >= 0")
        self.mode = mode
        self.k = k
        self.entries: deque[MemoryEntry] = deque(maxlen=k)
        self._seq = 0

    def record(self, report: TaskReport) -> None:
        if self.mode == "baseline" or self.k == 0:
            return
        self._seq += 1
        if self.mode == "history":
            content: Any = {"task_id": report.task_id, "transcript": copy.deepcopy(report.transcript)}
        else:
            content = summarize_reflection(report.transcript, report.C)
        self.entries.append(MemoryEntry(self._seq, report.task_id, content))

    def context(self) -> tuple[Any, ...]:
        return tuple(e.content for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class VersionSummary:
    version_id: str
    mean_C: float
    mean_T: float
    mean_N_tool: float
    tasks: int


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


@dataclass
class EvalReport:
    strategy: str
    policy: str
    task_reports: list[TaskReport]

    @property
    def versions(self) -> list[VersionSummary]:
        order: list[str] = []
        groups: dict[str, list[TaskReport]] = {}
        for r in self.task_reports:
            if r.version_id not in groups:
                order.append(r.version_id)
            groups.setdefault(r.version_id, []).append(r)
        return [
            VersionSummary(
                v,
                _mean([r.C for r in groups[v]]),
                _mean([r.T for r in groups[v]]),
                _mean([r.n_tool for r in groups[v]]),
                len(groups[v]),
            )
            for v in order
        ]

    @property
    def mu_C(self) -> float:
        return _mean([r.C for r in self.task_reports])

    @property
    def mean_T(self) -> float:
        return _mean([r.T for r in self.task_reports])

    @property
    def mean_N_tool(self) -> float:
        return _mean([r.n_tool for r in self.task_reports])

    def rows(self) -> list[dict[str, Any]]:
        rows = [
            {"version_id": v.version_id, "mean_C": v.mean_C, "mean_T": v.mean_T, "mean_N_tool": v.mean_N_tool}
            for v in self.versions
        ]
        rows.append({"version_id": "overall", "mean_C": self.mu_C, "mean_T": self.mean_T, "mean_N_tool": self.mean_N_tool})
        return rows

    def to_doc(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy,
            "policy": self.policy,
            "rows": self.rows(),
            "tasks": [r.to_doc() for r in self.task_reports],
        }


CSV_COLUMNS = ("version_id", "mean_C", "mean_T", "mean_N_tool")


def emit_report(report: EvalReport, directory: str | Path, name: str = "report") -> tuple[Path, Path]:
    """Write ``<name>.csv`` (one row per version plus ``overall``) and
    ``<name>.json`` with the raw per-task numbers."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    csv_path = d / f"{name}.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in report.rows():
            w.writerow([row["version_id"]] + [repr(float(row[c])) for c in CSV_COLUMNS[1:]])
    json_path = d / f"{name}.json"
    json_path.write_text(dumps(report.to_doc()))
    return csv_path, json_path


def read_report_csv(path: str | Path) -> list[dict[str, Any]]:
    with Path(path).open(newline="") as fh:
        return [
            {"version_id": r["version_id"], **{c: float(r[c]) for c in CSV_COLUMNS[1:]}}
            for r in csv.DictReader(fh)
        ]


def run_episode_eval(
    graphs: Sequence[EnvGraph],
    tasks_by_version: Mapping[str, Sequence[TaskInstance]],
    policy: AgentPolicy,
    strategy: str = "baseline",
    *,
    k: int = 5,
    config: SimConfig = SimConfig(),
    policy_label: str = "",
    on_task: Callable[[TaskReport, MemoryModule], None] | None = None,
) -> EvalReport:
    """Run every version's tasks in order, carrying memory across tasks and
    versions per ``strategy``."""
    memory = MemoryModule(strategy, k)
    reports = []
    for env in graphs:
        tasks = tasks_by_version.get(env.version_id)
        if tasks is None:
            raise EvalError(env.version_id, "-", KeyError("no tasks for version"))
        for task in tasks:
            try:
                report = run_task(task, policy, env, config, memory.context())
            except Exception as exc:
                raise EvalError(env.version_id, task.task_id, exc) from exc
            memory.record(report)
            reports.append(report)
            if on_task is not None:
                on_task(report, memory)
    return EvalReport(strategy, policy_label or type(policy).__name__, reports)


def run_reruns(
    task: TaskInstance,
    env: EnvGraph,
    policy_factory: Callable[[], AgentPolicy],
    n: int = 4,
    config: SimConfig = SimConfig(),
) -> list[TaskReport]:
    """``n`` independent runs, each with a fresh policy and a fresh copy of
    the initial store."""
    return [run_task(task, policy_factory(), env, config) for _ in range(n)]
