"""Command line front end: seed, evolve, taskgen, eval, validate, report."""

from __future__ import annotations

import argparse
import json
import random
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

from .evaluation import (
    EvalReport,
    HttpAgentPolicy,
    NullPolicy,
    OraclePolicy,
    SimConfig,
    TaskReport,
    TurnOutcome,
    emit_report,
    run_episode_eval,
)
from .evolve import ReplayProposer, SeededProposer, load_episode, run_episode, validate_evolution, write_episode
from .fixture import seed_graph
from .graph import STRATEGIES, dumps, serialize, validate
from .sandbox import populate
from .taskgen import TaskInstance, generate_tasks


@dataclass
class PipelineConfig:
    seed: int = 0
    episodes: int = 1
    strategies: list[str] = field(default_factory=lambda: ["completion", "saturation", "deprecation"])
    tasks_per_version: int = 6
    difficulty_mix: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    memory_strategy: str = "baseline"
    memory_k: int = 5
    retry_budget: int = 2
    max_turns: int = 12
    saturation_tools: int = 2
    output_dir: str = "out"
    paper_scale: bool = False
    jobs: int = 1
    proposer: str = "seeded"
    policy: str = "oracle"
    proposer_adapter: dict[str, Any] = field(default_factory=dict)
    agent_adapter: dict[str, Any] = field(default_factory=dict)

    def check(self) -> None:
        for name in ("episodes", "tasks_per_version", "memory_k", "retry_budget", "max_turns", "saturation_tools"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if any(s not in STRATEGIES for s in self.strategies):
            raise ValueError(f"strategies must be drawn from {STRATEGIES}")
        if len(self.difficulty_mix) != 3 or any(w <= 0 for w in self.difficulty_mix):
            raise ValueError("difficulty_mix needs three positive weights")

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict[str, Any]) -> PipelineConfig:
        doc: dict[str, Any] = {}
        if path:
            doc = json.loads(Path(path).read_text())
            unknown = set(doc) - {f.name for f in fields(cls)}
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
        doc.update({k: v for k, v in overrides.items() if v is not None})
        if doc.get("paper_scale"):
            doc.setdefault("episodes", 50)
            doc.setdefault("tasks_per_version", 15)
        cfg = cls(**doc)
        cfg.check()
        return cfg


def _out(cfg: PipelineConfig) -> Path:
    return Path(cfg.output_dir)


def _episode_dirs(root: Path) -> list[Path]:
    return sorted(p for p in root.glob("episode_*") if (p / "episode.json").exists())


def _proposer(cfg: PipelineConfig, seed: int):
    if cfg.proposer == "seeded":
        return SeededProposer(seed)
    if cfg.proposer == "replay":
        return ReplayProposer(seed)
    if cfg.proposer == "llm":
        from .adapters import AdapterConfig, ChatClient, LLMProposer

        return LLMProposer(ChatClient(AdapterConfig.from_mapping(cfg.proposer_adapter)))
    raise ValueError(f"unknown proposer {cfg.proposer!r}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_seed(cfg: PipelineConfig) -> int:
    g = seed_graph(cfg.paper_scale)
    problems = validate(g)
    d = _out(cfg) / "seed"
    d.mkdir(parents=True, exist_ok=True)
    (d / "G0.json").write_text(serialize(g))
    products, users = (1000, 100) if cfg.paper_scale else (50, 10)
    counts = {db: users for db in g.databases}
    counts["Product"] = products
    counts["User"] = users
    state = populate(g, counts, random.Random(cfg.seed))
    (d / "store.json").write_text(state.dump_text())
    for p in problems:
        _log(f"seed: {p}")
    _log(f"seed: {len(g.databases)} databases, {len(g.nodes)} nodes, {len(g.tools)} tools -> {d}")
    return 1 if problems else 0


def _evolve_one(args: tuple[PipelineConfig, int]) -> list[str]:
    cfg, i = args
    seed = cfg.seed + i
    episode_id = f"{i:03d}"
    ep = run_episode(seed_graph(cfg.paper_scale), cfg.strategies, _proposer(cfg, seed), seed,
                     episode_id=episode_id, saturation_tools=cfg.saturation_tools)
    write_episode(ep, _out(cfg) / f"episode_{episode_id}")
    return [f"episode {episode_id} {v}" for v in validate_evolution(ep)]


def _map(cfg: PipelineConfig, fn, items: Sequence) -> list:
    if cfg.jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def cmd_evolve(cfg: PipelineConfig) -> int:
    if not cfg.strategies:
        raise ValueError("evolve needs a non-empty strategy sequence")
    problems = [p for ps in _map(cfg, _evolve_one, [(cfg, i) for i in range(cfg.episodes)]) for p in ps]
    for p in problems:
        _log(p)
    _log(f"evolve: {cfg.episodes} episodes -> {_out(cfg)}")
    return 1 if problems else 0


def _taskgen_one(args: tuple[PipelineConfig, str]) -> int:
    cfg, path = args
    d = Path(path)
    ep = load_episode(d)
    total = 0
    for g in ep.graphs:
        rng = random.Random(f"{cfg.seed}:{ep.episode_id}:{g.version_id}")
        tasks = generate_tasks(g, cfg.tasks_per_version, cfg.difficulty_mix, rng, max_turns=cfg.max_turns)
        tdir = d / "tasks" / g.version_id
        tdir.mkdir(parents=True, exist_ok=True)
        for i, t in enumerate(tasks):
            (tdir / f"task_{i:02d}.json").write_text(dumps(t.to_doc()))
        total += len(tasks)
    return total


def cmd_taskgen(cfg: PipelineConfig) -> int:
    dirs = _episode_dirs(_out(cfg))
    if not dirs:
        _log(f"taskgen: no episodes under {_out(cfg)}")
        return 1
    counts = _map(cfg, _taskgen_one, [(cfg, str(d)) for d in dirs])
    _log(f"taskgen: {sum(counts)} tasks over {len(dirs)} episodes")
    return 0


def load_tasks(episode_dir: Path, version_id: str) -> list[TaskInstance]:
    tdir = episode_dir / "tasks" / version_id
    return [TaskInstance.from_doc(json.loads(p.read_text())) for p in sorted(tdir.glob("task_*.json"))]


def _policy(cfg: PipelineConfig, tasks: Sequence[TaskInstance]):
    if cfg.policy == "oracle":
        return OraclePolicy(tasks)
    if cfg.policy == "null":
        return NullPolicy()
    if cfg.policy == "http":
        from .adapters import AdapterConfig, ChatClient

        return HttpAgentPolicy(ChatClient(AdapterConfig.from_mapping(cfg.agent_adapter)))
    raise ValueError(f"unknown policy {cfg.policy!r}")


def _eval_one(args: tuple[PipelineConfig, str]) -> dict[str, Any]:
    cfg, path = args
    d = Path(path)
    ep = load_episode(d)
    tasks = {g.version_id: load_tasks(d, g.version_id) for g in ep.graphs}
    policy = _policy(cfg, [t for ts in tasks.values() for t in ts])
    report = run_episode_eval(
        ep.graphs, tasks, policy, cfg.memory_strategy, k=cfg.memory_k,
        config=SimConfig(retry_budget=cfg.retry_budget), policy_label=cfg.policy,
    )
    emit_report(report, _out(cfg) / "reports", f"episode_{ep.episode_id}")
    return {"episode": ep.episode_id, "mu_C": report.mu_C}


def cmd_eval(cfg: PipelineConfig) -> int:
    dirs = _episode_dirs(_out(cfg))
    if not dirs:
        _log(f"eval: no episodes under {_out(cfg)}")
        return 1
    if cfg.memory_strategy != "baseline":
        results = [_eval_one((cfg, str(d))) for d in dirs]
    else:
        results = _map(cfg, _eval_one, [(cfg, str(d)) for d in dirs])
    for r in results:
        _log(f"eval: episode {r['episode']} mu_C={r['mu_C']:.4f}")
    paths = sorted((_out(cfg) / "reports").glob("episode_*.json"))
    merge_reports(paths, _out(cfg) / "reports", "overall", cfg.memory_strategy, cfg.policy)
    return 0


def cmd_validate(path: str | Path) -> int:
    root = Path(path)
    dirs = [root] if (root / "episode.json").exists() else _episode_dirs(root)
    if not dirs:
        _log(f"validate: no episodes under {root}")
        return 1
    problems = []
    versions = 0
    for d in dirs:
        try:
            ep = load_episode(d)
        except Exception as exc:
            problems.append(f"{d.name}: cannot load ({exc})")
            continue
        versions += len(ep.versions)
        problems += [f"{d.name} {v}" for v in validate_evolution(ep)]
    for p in problems:
        print(p)
    print(f"validated {versions} versions in {len(dirs)} episodes: {len(problems)} problems")
    return 1 if problems else 0


def _reports_from(paths: Sequence[Path]) -> list[TaskReport]:
    out = []
    for p in paths:
        doc = json.loads(Path(p).read_text())
        for t in doc["tasks"]:
            outcomes = [
                TurnOutcome(i + 1, s, a, c)
                for i, (s, a, c) in enumerate(zip(t["states"], t["attempts"], t["tool_calls"]))
            ]
            out.append(TaskReport(t["task_id"], t["version_id"], outcomes, t["N_tool"]))
    return out


def merge_reports(paths: Sequence[Path], directory: Path, name: str, strategy: str = "", policy: str = "") -> EvalReport:
    report = EvalReport(strategy, policy, _reports_from(paths))
    emit_report(report, directory, name)
    return report


def cmd_report(paths: Sequence[str], out: str | None) -> int:
    files: list[Path] = []
    for p in map(Path, paths):
        files += sorted(p.glob("episode_*.json")) if p.is_dir() else [p]
    if not files:
        _log("report: no report files")
        return 1
    report = merge_reports(files, Path(out) if out else Path("."), "merged")
    for row in report.rows():
        print(",".join([row["version_id"]] + [repr(float(row[c])) for c in ("mean_C", "mean_T", "mean_N_tool")]))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--strategies", type=lambda s: [x.strip() for x in s.split(",") if x.strip()],
                   help="comma separated, e.g. completion,saturation,deprecation")
    p.add_argument("--tasks-per-version", type=int, dest="tasks_per_version")
    p.add_argument("--difficulty-mix", dest="difficulty_mix",
                   type=lambda s: [float(x) for x in s.split(":")], help="easy:medium:hard, e.g. 1:1:1")
    p.add_argument("--memory-strategy", dest="memory_strategy", choices=("baseline", "history", "reflection"))
    p.add_argument("--memory-k", type=int, dest="memory_k")
    p.add_argument("--retry-budget", type=int, dest="retry_budget")
    p.add_argument("--max-turns", type=int, dest="max_turns")
    p.add_argument("--saturation-tools", type=int, dest="saturation_tools")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--paper-scale", action="store_const", const=True, dest="paper_scale")
    p.add_argument("--jobs", type=int)
    p.add_argument("--proposer", choices=("seeded", "replay", "llm"))
    p.add_argument("--policy", choices=("oracle", "null", "http"))


_CONFIG_KEYS = {f.name for f in fields(PipelineConfig)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evograph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("seed", "write the seed environment"),
        ("evolve", "evolve episodes from the seed"),
        ("taskgen", "generate tasks for every episode version"),
        ("eval", "run a policy over the generated tasks"),
        ("run", "seed, evolve, taskgen and eval in one go"),
    ):
        _add_config_flags(sub.add_parser(name, help=helptext))
    v = sub.add_parser("validate", help="check episode directories")
    v.add_argument("path")
    r = sub.add_parser("report", help="merge per-episode reports into one CSV")
    r.add_argument("paths", nargs="+")
    r.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        return cmd_validate(args.path)
    if args.command == "report":
        return cmd_report(args.paths, args.out)
    overrides = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS}
    try:
        cfg = PipelineConfig.load(args.config, overrides)
    except (ValueError, TypeError) as exc:
        _log(f"config error: {exc}")
        return 2
    if args.command == "seed":
        return cmd_seed(cfg)
    if args.command == "evolve":
        return cmd_evolve(cfg)
    if args.command == "taskgen":
        return cmd_taskgen(cfg)
    if args.command == "eval":
        return cmd_eval(cfg)
    for step in (cmd_seed, cmd_evolve, cmd_taskgen, cmd_eval):
        code = step(cfg)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
