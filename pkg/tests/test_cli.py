import json

import pytest

from evograph.cli import PipelineConfig, main
from evograph.evaluation import read_report_csv
from evograph.graph import deserialize


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_seed_is_deterministic(tmp_path):
    assert main(["seed", "--out", str(tmp_path / "a")]) == 0
    assert main(["seed", "--out", str(tmp_path / "b")]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    store = json.loads((tmp_path / "a" / "seed" / "store.json").read_text())
    assert len(store["Product"]) >= 50 and len(store["User"]) >= 10


def test_seed_paper_scale(tmp_path):
    assert main(["seed", "--out", str(tmp_path), "--paper-scale"]) == 0
    g = deserialize((tmp_path / "seed" / "G0.json").read_text())
    assert len(g.tools) == 51
    assert len(g.nodes) == 64
    store = json.loads((tmp_path / "seed" / "store.json").read_text())
    assert len(store["Product"]) >= 1000 and len(store["User"]) >= 100


def test_full_pipeline(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--out", str(out), "--episodes", "2", "--tasks-per-version", "3"]) == 0
    for ep in ("episode_000", "episode_001"):
        assert sorted(p.name for p in (out / ep).glob("G*.json")) == ["G0.json", "G1.json", "G2.json", "G3.json"]
        assert len(list((out / ep / "tasks").rglob("task_*.json"))) == 12
    rows = read_report_csv(out / "reports" / "overall.csv")
    assert rows[-1]["version_id"] == "overall"
    assert rows[-1]["mean_C"] == 1.0

    assert main(["validate", str(out)]) == 0
    assert "validated 8 versions in 2 episodes: 0 problems" in capsys.readouterr().out

    assert main(["report", str(out / "reports" / "episode_000.json"), str(out / "reports" / "episode_001.json"),
                 "--out", str(tmp_path)]) == 0
    assert read_report_csv(tmp_path / "merged.csv") == rows


def test_null_policy_scores_zero(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--out", str(out), "--tasks-per-version", "3", "--policy", "null"]) == 0
    assert read_report_csv(out / "reports" / "overall.csv")[-1]["mean_C"] == 0.0


def test_validate_flags_corrupted_episode(tmp_path, capsys):
    out = tmp_path / "ev"
    assert main(["evolve", "--out", str(out)]) == 0
    g2 = out / "episode_000" / "G2.json"
    doc = json.loads(g2.read_text())
    doc["tools"] = doc["tools"][1:]
    g2.write_text(json.dumps(doc))
    capsys.readouterr()
    assert main(["validate", str(out)]) == 1
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    assert "[2]" in lines[0]
    assert lines[-1].endswith("1 problems")


def test_validate_empty_dir(tmp_path):
    assert main(["validate", str(tmp_path)]) == 1


def test_config_file_and_overrides(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"seed": 4, "episodes": 3, "memory_strategy": "history"}))
    cfg = PipelineConfig.load(cfg_path, {"episodes": 1, "seed": None})
    assert (cfg.seed, cfg.episodes, cfg.memory_strategy) == (4, 1, "history")
    paper = PipelineConfig.load(None, {"paper_scale": True})
    assert (paper.episodes, paper.tasks_per_version) == (50, 15)


@pytest.mark.parametrize("doc", [
    {"colour": "blue"},
    {"episodes": -1},
    {"strategies": ["mutation"]},
    {"difficulty_mix": [1, 1]},
    {"jobs": 0},
])
def test_bad_config(tmp_path, doc):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(doc))
    assert main(["seed", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 2


def test_history_memory_run(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--out", str(out), "--tasks-per-version", "3", "--memory-strategy", "history"]) == 0
    doc = json.loads((out / "reports" / "overall.json").read_text())
    assert doc["strategy"] == "history"
    assert len(doc["tasks"]) == 12
