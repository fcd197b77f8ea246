from __future__ import annotations

import argparse
import json

import pytest

from hive_nav.cli import main, parse_ablations, read_seeds
from hive_nav.hierarchy import Ablation
from hive_nav.world import WorldConfig


def test_read_seeds(tmp_path):
    p = tmp_path / "s.txt"
    p.write_text("1, 2\n3")
    assert read_seeds(str(p), []) == [1, 2, 3]
    p.write_text("[4, 5]")
    assert read_seeds(str(p), []) == [4, 5]
    assert read_seeds(None, [9]) == [9]


def test_parse_ablations():
    assert parse_ablations("dm,ao") == {Ablation.NO_DYNAMIC_MAP, Ablation.NO_AUTO_ORGANIZE}
    assert parse_ablations(None) == frozenset()
    with pytest.raises(argparse.ArgumentTypeError):
        parse_ablations("xx")


def test_run_block_search(tmp_path, capsys):
    seeds = tmp_path / "seeds.txt"
    seeds.write_text("0 1")
    out = tmp_path / "out"
    code = main(["run", "--task", "block-search", "--seeds", str(seeds), "--max-iters", "10", "--out", str(out)])
    assert code == 0
    assert "success rate" in capsys.readouterr().out
    summary = json.loads((out / "summary.json").read_text())
    assert summary["trials"] == 2


def test_run_goal_file(tmp_path):
    goal = tmp_path / "goal.json"
    goal.write_text(json.dumps({"kind": "object", "payload": "village", "count": 1}))
    seeds = tmp_path / "seeds.txt"
    seeds.write_text("[5]")
    code = main(["run", "--goal", str(goal), "--seeds", str(seeds), "--max-iters", "5", "--agents", "4", "--out", str(tmp_path / "o")])
    assert code == 0


def test_run_bad_audio_goal_exits_2(tmp_path, capsys):
    goal = tmp_path / "goal.json"
    goal.write_text(json.dumps({"kind": "audio", "payload": "no_such_source", "count": 1}))
    world = tmp_path / "world.json"
    world.write_text(json.dumps(WorldConfig(seed=1, width=32, height=32).to_dict()))
    code = main(["run", "--goal", str(goal), "--world", str(world), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "hive-nav: error:" in capsys.readouterr().err


def test_run_missing_goal_exits_2(tmp_path):
    assert main(["run", "--task", "goal-search", "--out", str(tmp_path / "o")]) == 2


def test_world_dump(tmp_path, capsys):
    world = tmp_path / "world.json"
    world.write_text(json.dumps(WorldConfig(seed=2, width=12, height=7).to_dict()))
    assert main(["world", "dump", str(world)]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert len([r for r in rows if len(r) == 12]) >= 7


def test_curriculum_then_memory(tmp_path, capsys):
    world = tmp_path / "world.json"
    world.write_text(json.dumps(WorldConfig(seed=4, width=48, height=48).to_dict()))
    mem = tmp_path / "mem.jsonl"
    assert main(["curriculum", "--world", str(world), "--episodes", "1", "--agents", "2", "--memory", str(mem)]) == 0
    assert "memory:" in capsys.readouterr().out
    assert mem.exists()
    assert main(["memory", "inspect", str(mem)]) == 0
    assert "entries" in capsys.readouterr().out
    assert main(["memory", "query", str(mem), "--text", "explore", "-k", "2"]) == 0
    assert len(capsys.readouterr().out.splitlines()) <= 2
