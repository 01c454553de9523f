from __future__ import annotations

import random

import pytest

from evograph.evolve import SeededProposer, run_episode
from evograph.fixture import seed_graph
from evograph.taskgen import generate_tasks

SEQUENCE = ("completion", "saturation", "deprecation")

# acceptance verdict lines, printed again in the terminal summary
VERDICTS: list[str] = []


def build_episodes(count: int = 5, *, paper_scale: bool = False, tasks_per_version: int = 6):
    """Seeded episodes and their per-version tasks."""
    out = []
    for seed in range(count):
        ep = run_episode(seed_graph(paper_scale), SEQUENCE, SeededProposer(seed), seed, episode_id=f"{seed:03d}")
        tasks = {
            g.version_id: generate_tasks(g, tasks_per_version, (1, 1, 1), random.Random(f"{seed}:{g.version_id}"))
            for g in ep.graphs
        }
        out.append((ep, tasks))
    return out


@pytest.fixture(scope="session")
def desk_graph():
    return seed_graph()


@pytest.fixture(scope="session")
def paper_graph():
    return seed_graph(paper_scale=True)


@pytest.fixture(scope="session")
def episodes_with_tasks():
    return build_episodes()


@pytest.fixture(scope="session")
def episode(episodes_with_tasks):
    return episodes_with_tasks[0][0]


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
