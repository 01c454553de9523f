import dataclasses
import json
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evograph.adapters import CART_WORKAROUND
from evograph.evaluation import (
    CLARIFICATION_PREFIX,
    DIGEST_LIMIT,
    EvalReport,
    MemoryModule,
    NullPolicy,
    OraclePolicy,
    RecordingPolicy,
    Reply,
    SimConfig,
    TaskReport,
    TurnOutcome,
    check_state_success,
    emit_report,
    read_report_csv,
    run_episode_eval,
    run_reruns,
    run_task,
    summarize_reflection,
)
from evograph.evolve import ReplayProposer, run_episode
from evograph.graph import N
from evograph.sandbox import Fact, ToolCall
from evograph.taskgen import FactPattern, StateInstruction, generate_tasks

NAME = N("User.name")
STATUS = N("Order.status")


# -- success checking ----------------------------------------------------------


def test_wildcard_needs_any_fact():
    k = {Fact(NAME, "u1", "Susan")}
    assert check_state_success([FactPattern(NAME)], k)
    assert not check_state_success([FactPattern(STATUS)], k)
    assert check_state_success([], set())


def test_exact_value_in_knowledge_or_reply():
    k = {Fact(STATUS, "o1", "shipped")}
    assert check_state_success([FactPattern(STATUS, "shipped")], k)
    assert not check_state_success([FactPattern(STATUS, "delivered")], k)
    assert check_state_success([FactPattern(STATUS, "delivered")], k, "it says delivered")
    assert check_state_success([FactPattern(N("Order.product_ids"), ("p1", "p2"))], set(), "p1 and p2")
    assert not check_state_success([FactPattern(N("Order.product_ids"), ("p1", "p2"))], set(), "only p1")


def test_score_is_mean_of_turn_states():
    outcomes = [TurnOutcome(i + 1, s, 0, 0) for i, s in enumerate([1, 1, 0, 1])]
    assert TaskReport("t", "G0", outcomes, 0).C == 0.75
    assert TaskReport("t", "G0", [], 0).C == 0.0


# -- simulation ----------------------------------------------------------------


@pytest.fixture(scope="module")
def run(episodes_with_tasks):
    ep, tasks = episodes_with_tasks[0]
    return ep.graphs[0], tasks[ep.graphs[0].version_id]


def test_oracle_scores_one(run):
    env, tasks = run
    for t in tasks:
        r = run_task(t, OraclePolicy(tasks), env)
        assert r.C == 1.0
        assert r.n_tool == len(t.reference.turns)
        assert all(o.attempts == 0 for o in r.outcomes)


def test_null_policy_exhausts_retries(run):
    env, tasks = run
    t = tasks[0]
    r = run_task(t, NullPolicy(), env, SimConfig(retry_budget=2))
    assert r.C == 0.0 and r.n_tool == 0
    assert all(o.attempts == 2 for o in r.outcomes)
    user_lines = [e["payload"] for e in r.transcript if e["role"] == "user"]
    assert len(user_lines) == 3 * t.turns
    assert sum(line.startswith(CLARIFICATION_PREFIX) for line in user_lines) == 2 * t.turns


class LateOracle:
    """Replies empty-handed the first time each turn is asked."""

    def __init__(self, tasks):
        self.inner = OraclePolicy(tasks)
        self.asked = set()

    def reset(self, memory_context, task_id):
        self.asked = set()
        self.inner.reset(memory_context, task_id)

    def step(self, view):
        last = next(e for e in reversed(view.conversation) if e["role"] == "user")
        if last["turn"] not in self.asked:
            self.asked.add(last["turn"])
            return Reply("Let me think about it.")
        return self.inner.step(view)


def test_clarification_allows_recovery(run):
    env, tasks = run
    t = tasks[0]
    r = run_task(t, LateOracle(tasks), env)
    assert r.C == 1.0
    assert all(o.attempts == 1 for o in r.outcomes)
    clarified = [e for e in r.transcript if e["role"] == "user" and e["payload"].startswith(CLARIFICATION_PREFIX)]
    assert len(clarified) == t.turns


def test_zero_retry_budget(run):
    env, tasks = run
    r = run_task(tasks[0], LateOracle(tasks), env, SimConfig(retry_budget=0))
    assert r.C == 0.0


def test_policy_never_sees_criteria(run):
    env, tasks = run
    t = tasks[0]
    swapped = tuple(
        dataclasses.replace(i, criterion=(FactPattern(N("Nowhere.secret"), "sentinel-value"),))
        for i in t.instructions
    )
    t2 = dataclasses.replace(t, instructions=swapped)
    views = []
    for task in (t, t2):
        rec = RecordingPolicy(OraclePolicy([task]))
        run_task(task, rec, env, SimConfig(retry_budget=0))
        views.append([json.dumps(v.to_doc(), sort_keys=True) for v in rec.views])
    assert views[0] == views[1]
    assert not any("sentinel-value" in v for v in views[1])


def test_bad_tool_calls_are_logged(run):
    env, tasks = run

    class Flailing:
        def reset(self, memory_context, task_id):
            pass

        def step(self, view):
            if view.last_results:
                return Reply("no luck")
            return ToolCall("no_such_tool", {}, 0)

    r = run_task(tasks[0], Flailing(), env, SimConfig(retry_budget=0))
    assert r.n_tool == tasks[0].turns
    errs = [e["payload"]["result"]["error_type"] for e in r.transcript if e["role"] == "tool"]
    assert set(errs) == {"UnknownToolError"}


def test_reruns_are_identical(run):
    env, tasks = run
    reps = run_reruns(tasks[0], env, lambda: OraclePolicy(tasks), n=4)
    docs = {json.dumps(r.to_doc(), sort_keys=True) for r in reps}
    assert len(docs) == 1


# -- memory --------------------------------------------------------------------


def fake_report(i, transcript=()):
    return TaskReport(f"task_{i}", "G0", [TurnOutcome(1, 1, 0, 0)], 0, list(transcript))


def test_history_keeps_last_k():
    m = MemoryModule("history", 5)
    for i in range(1, 8):
        m.record(fake_report(i))
    assert [c["task_id"] for c in m.context()] == [f"task_{i}" for i in range(3, 8)]


def test_baseline_keeps_nothing():
    m = MemoryModule("baseline", 5)
    m.record(fake_report(1))
    assert m.context() == ()
    assert len(MemoryModule("history", 0)) == 0


def test_memory_mode_checked():
    with pytest.raises(ValueError):
        MemoryModule("telepathy")


def test_reflection_digest_with_deprecated_tool(desk_graph):
    g = run_episode(desk_graph, ("deprecation",), ReplayProposer(0), 0).graphs[1]
    tasks = generate_tasks(g, 1, (1, 0, 0), random.Random(0))
    t = tasks[0]

    class CartFan:
        def reset(self, memory_context, task_id):
            pass

        def step(self, view):
            if view.last_results:
                return Reply("sorry")
            return ToolCall.make("add_to_cart", {"User.user_id": "u"})

    r = run_task(t, CartFan(), g, SimConfig(retry_budget=0))
    digest = summarize_reflection(r.transcript, r.C)
    assert digest["tools"]["add_to_cart"]["error"] == t.turns
    hint = digest["deprecated_encountered"]["add_to_cart"]
    assert hint and CART_WORKAROUND.startswith(hint)
    assert len(json.dumps(digest, sort_keys=True).encode()) <= DIGEST_LIMIT


def test_empty_digest():
    assert summarize_reflection([]) == {}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.text(min_size=1, max_size=30), st.booleans(), st.text(max_size=400)), max_size=60))
def test_digest_is_bounded(calls):
    transcript = []
    for name, ok, err in calls:
        result = {"status": "ok"} if ok else {
            "status": "error", "error_type": "DeprecatedToolError", "error": f"gone. Workaround: {err}",
        }
        transcript.append({"role": "tool", "turn": 1, "payload": {"call": {"tool": name}, "result": result}})
    digest = summarize_reflection(transcript, 0.5)
    assert len(json.dumps(digest, sort_keys=True).encode()) <= DIGEST_LIMIT


def test_episode_eval_carries_memory(episodes_with_tasks):
    ep, tasks = episodes_with_tasks[0]
    seen = []
    rec = RecordingPolicy(OraclePolicy([t for ts in tasks.values() for t in ts]))
    report = run_episode_eval(ep.graphs, tasks, rec, "history", k=5,
                              on_task=lambda r, m: seen.append([c["task_id"] for c in m.context()]))
    order = [r.task_id for r in report.task_reports]
    for i, ctx in enumerate(rec.memory_contexts):
        assert [c["task_id"] for c in ctx] == order[max(0, i - 5):i]
    assert seen[-1] == order[-5:]
    assert report.mu_C == 1.0


# -- reports -------------------------------------------------------------------


def test_mu_c_by_brute_force(episodes_with_tasks):
    ep, tasks = episodes_with_tasks[1]
    report = run_episode_eval(ep.graphs, tasks, LateOracle([t for ts in tasks.values() for t in ts]),
                              config=SimConfig(retry_budget=0))
    per_task = [Fraction(sum(r.states), len(r.states)) for r in report.task_reports]
    assert report.mu_C == pytest.approx(float(sum(per_task) / len(per_task)), abs=1e-12)


def test_csv_round_trip(tmp_path, episodes_with_tasks):
    ep, tasks = episodes_with_tasks[0]
    report = run_episode_eval(ep.graphs, tasks, OraclePolicy([t for ts in tasks.values() for t in ts]))
    csv_path, json_path = emit_report(report, tmp_path, "ep")
    rows = read_report_csv(csv_path)
    assert rows == report.rows()
    assert [r["version_id"] for r in rows] == [g.version_id for g in ep.graphs] + ["overall"]
    assert json.loads(json_path.read_text())["rows"] == json.loads(json.dumps(report.rows()))


def test_single_task_overall_equals_task():
    r = TaskReport("t", "G0", [TurnOutcome(1, 1, 0, 2), TurnOutcome(2, 0, 2, 1)], 3)
    rows = EvalReport("baseline", "x", [r]).rows()
    assert rows[0] == {**rows[1], "version_id": "G0"}
    assert rows[1] == {"version_id": "overall", "mean_C": 0.5, "mean_T": 2.0, "mean_N_tool": 3.0}


def test_instruction_doc_round_trip():
    i = StateInstruction(2, "hello", (FactPattern(NAME), FactPattern(STATUS, "shipped")))
    assert StateInstruction.from_doc(i.to_doc()) == i
