"""Experiment harness: the three task families, ablations, traces and reports.

An iteration is one full system round. Every metric in ``summary.json`` can
be recomputed from ``trace.jsonl`` alone with :func:`replay_summary`.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

from .dynamic_map import explored_area
from .hierarchy import (
    Ablation,
    HierarchyConfig,
    SystemState,
    TickAborted,
    bootstrap,
    default_skills,
    tick,
)
from .memory import CurriculumLog, Episode, MemoryStore, compact_log
from .mlm.bundle import BackendBundle
from .mlm.http import HttpConfig
from .mlm.scripted import ScriptedConfig
from .rng import SplitMix64
from .types import Goal, GoalKind, Position
from .world import (
    DIAMOND,
    GoalPlacement,
    Layout,
    WorldConfig,
    WorldState,
    generate_world,
)

log = logging.getLogger(__name__)

MAX_ITERS = 100
DEFAULT_TRIALS = 30
EXPLORE_CHECKPOINT = 5
SPAWN_SALT = 0x5BD1E995
TRIAL_SALT = 0x9E3779B97F4A7C15


class TaskFamily(str, Enum):
    GOAL_SEARCH = "goal-search"
    BLOCK_SEARCH = "block-search"
    MAP_EXPLORATION = "map-exploration"


class SpawnMode(str, Enum):
    CLUSTERED = "clustered"
    SPREAD = "spread"


@dataclass(frozen=True)
class TaskSpec:
    family: TaskFamily
    n_agents: int = 8
    max_iters: int = MAX_ITERS
    seeds: tuple[int, ...] = tuple(range(DEFAULT_TRIALS))
    trials_per_seed: int = 1
    ablations: frozenset[Ablation] = frozenset()
    goal: Goal | None = None
    world: WorldConfig | None = None
    size: int | None = None
    spawn: SpawnMode | None = None
    target_blocks: int = 10
    area_target: int = 100
    full_horizon: bool = False
    backend: str = "scripted"
    http_url: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", TaskFamily(self.family))
        object.__setattr__(self, "ablations", frozenset(Ablation(a) for a in self.ablations))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 1 <= self.n_agents <= 8:
            raise ValueError("agent budget must be in [1, 8]")
        if self.family is TaskFamily.GOAL_SEARCH and self.goal is None:
            raise ValueError("goal search needs a goal")
        if self.spawn is not None:
            object.__setattr__(self, "spawn", SpawnMode(self.spawn))

    @property
    def spawn_mode(self) -> SpawnMode:
        if self.spawn is not None:
            return self.spawn
        return SpawnMode.SPREAD if self.family is TaskFamily.MAP_EXPLORATION else SpawnMode.CLUSTERED

    @property
    def world_size(self) -> int:
        if self.size is not None:
            return self.size
        return 256 if self.family is TaskFamily.MAP_EXPLORATION else 128


@dataclass
class RunMetrics:
    seed: int
    n_agents: int
    success: bool = False
    iters_to_success: int | None = None
    completed_iters: int = 0
    completed: bool = True
    initial_area: int = 0
    initial_found: int = 0
    area_per_iter: list[int] = field(default_factory=list)
    blocks_found_per_iter: list[int] = field(default_factory=list)
    backend_calls: Counter = field(default_factory=Counter)

    def area_at(self, it: int) -> int:
        if it <= 0 or not self.area_per_iter:
            return self.initial_area
        return self.area_per_iter[min(it, len(self.area_per_iter)) - 1]

    def first_iter(self, series: Sequence[int], initial: int, threshold: int) -> int | None:
        if initial >= threshold:
            return 0
        for i, v in enumerate(series, start=1):
            if v >= threshold:
                return i
        return None


# -- world and spawn -------------------------------------------------------


def trial_seed(seed: int, trial: int) -> int:
    if trial == 0:
        return seed
    return SplitMix64((seed ^ (trial * TRIAL_SALT)) & 0xFFFFFFFFFFFFFFFF).next_u64()


def spawn_positions(width: int, height: int, n: int, mode: SpawnMode, seed: int) -> list[Position]:
    """Deterministic spawn cells: a tight cluster, or one cell per tile of a grid."""
    rng = SplitMix64(seed ^ SPAWN_SALT)
    if SpawnMode(mode) is SpawnMode.CLUSTERED:
        cx = 2 + rng.below(max(1, width - 4))
        cy = 2 + rng.below(max(1, height - 4))
        box = [
            (x, y)
            for y in range(max(0, cy - 2), min(height, cy + 3))
            for x in range(max(0, cx - 2), min(width, cx + 3))
        ]
        rng.shuffle(box)
        return box[:n]
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    tw, th = width / cols, height / rows
    jx, jy = int(tw // 8), int(th // 8)
    out: list[Position] = []
    for i in range(n):
        r, c = divmod(i, cols)
        x = int((c + 0.5) * tw) + rng.below(2 * jx + 1) - jx
        y = int((r + 0.5) * th) + rng.below(2 * jy + 1) - jy
        p = (min(width - 1, max(0, x)), min(height - 1, max(0, y)))
        while p in out:
            p = ((p[0] + 1) % width, p[1])
        out.append(p)
    return out


def goal_placement(goal: Goal) -> GoalPlacement:
    if goal.kind is GoalKind.IMAGE:
        return GoalPlacement(GoalKind.IMAGE, "image_target", tuple(goal.payload), goal.count)
    if goal.kind is GoalKind.AUDIO:
        return GoalPlacement(GoalKind.AUDIO, "sound_source", (), 1, id=goal.payload)
    return GoalPlacement(GoalKind.OBJECT, goal.payload, (), goal.count)


def build_world(spec: TaskSpec, seed: int) -> tuple[WorldState, Goal | None]:
    size = spec.world_size
    if spec.world is not None:
        cfg = replace(spec.world, seed=seed)
    elif spec.family is TaskFamily.BLOCK_SEARCH:
        cfg = WorldConfig(seed=seed, width=size, height=size, layout=Layout.DIAMOND_GRID_16)
    elif spec.family is TaskFamily.GOAL_SEARCH:
        cfg = WorldConfig(seed=seed, width=size, height=size, goal_spec=(goal_placement(spec.goal),))
    else:
        cfg = WorldConfig(seed=seed, width=size, height=size)
    world = generate_world(cfg)
    if spec.family is TaskFamily.BLOCK_SEARCH:
        n_blocks = sum(1 for b in world.blocks.values() if b == DIAMOND)
        count = n_blocks if spec.full_horizon else min(spec.target_blocks, n_blocks)
        goal = Goal(GoalKind.OBJECT, DIAMOND, max(1, count))
    elif spec.family is TaskFamily.GOAL_SEARCH:
        goal = spec.goal
    else:
        goal = None
    for unit, pos in enumerate(spawn_positions(world.width, world.height, spec.n_agents, spec.spawn_mode, seed)):
        world.place_agent(unit, pos)
    return world, goal


def scripted_config(world: WorldState, hcfg: HierarchyConfig) -> ScriptedConfig:
    c = world.config
    return ScriptedConfig(
        width=c.width,
        height=c.height,
        sensing_radius=c.sensing_radius,
        goal_threshold=hcfg.goal_threshold,
        image_match_fraction=hcfg.image_match_fraction,
        perceptible_radius_audio=c.perceptible_radius_audio,
        seed=c.seed,
    )


def make_bundle(spec: TaskSpec, world: WorldState, hcfg: HierarchyConfig) -> BackendBundle:
    cfg = scripted_config(world, hcfg)
    if spec.backend == "http":
        return BackendBundle.http(HttpConfig.from_env(spec.http_url), cfg)
    if spec.backend != "scripted":
        raise ValueError(f"unknown backend {spec.backend!r}")
    return BackendBundle.scripted(cfg)


# -- trials ----------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _stop(spec: TaskSpec, state: SystemState, it: int) -> bool:
    if spec.full_horizon:
        return False
    if spec.family is TaskFamily.MAP_EXPLORATION:
        return it >= EXPLORE_CHECKPOINT and explored_area(state.map) >= spec.area_target
    return state.goal_satisfied()


def run_trial(
    spec: TaskSpec,
    seed: int,
    trial: int,
    trace: Callable[[str], None] | None = None,
    messages: Callable[[str], None] | None = None,
) -> RunMetrics:
    """One seeded trial; writes a header, one line per round and an end line to ``trace``."""
    world, goal = build_world(spec, seed)
    hcfg = HierarchyConfig(budget=spec.n_agents, ablations=spec.ablations)
    bundle = make_bundle(spec, world, hcfg)
    metrics = RunMetrics(seed=seed, n_agents=spec.n_agents)
    emit = trace or (lambda line: None)
    state, _ = bootstrap(goal, world, bundle, hcfg, skills=default_skills(goal))
    if messages is not None:
        state.router.log = []
    metrics.initial_area = explored_area(state.map)
    metrics.initial_found = state.progress()
    emit(
        _dumps(
            {
                "type": "trial",
                "trial": trial,
                "family": spec.family.value,
                "seed": seed,
                "n_agents": spec.n_agents,
                "ablations": sorted(a.value for a in spec.ablations),
                "max_iters": spec.max_iters,
                "goal": goal.to_dict() if goal is not None else None,
                "world": world.config.to_dict(),
                "spawn": [list(world.agents[u]) for u in sorted(world.agents)],
                "initial_area": metrics.initial_area,
                "initial_progress": metrics.initial_found,
                "area_target": spec.area_target,
            }
        )
    )
    for it in range(1, spec.max_iters + 1):
        try:
            state = tick(state, bundle)
        except TickAborted as exc:
            log.error("trial %d seed %d aborted in round %d: %s", trial, seed, it, exc)
            metrics.completed = False
            break
        metrics.completed_iters = it
        metrics.area_per_iter.append(explored_area(state.map))
        metrics.blocks_found_per_iter.append(state.progress())
        if goal is not None and metrics.iters_to_success is None and state.goal_satisfied():
            metrics.iters_to_success = it
            metrics.success = True
        emit(_dumps({"type": "tick", "trial": trial, **state.record}))
        if messages is not None and state.router.log:
            for line in state.router.log:
                messages(_dumps({"trial": trial, **line}))
            state.router.log = []
        if _stop(spec, state, it):
            break
    metrics.backend_calls = Counter(bundle.calls)
    emit(
        _dumps(
            {
                "type": "end",
                "trial": trial,
                "completed": metrics.completed,
                "iters": metrics.completed_iters,
                "backend_calls": dict(sorted(bundle.calls.items())),
            }
        )
    )
    return metrics


def iter_trials(spec: TaskSpec) -> Iterator[tuple[int, int]]:
    idx = 0
    for seed in spec.seeds:
        for t in range(spec.trials_per_seed):
            yield idx, trial_seed(seed, t)
            idx += 1


def run_task(
    spec: TaskSpec,
    trace: Callable[[str], None] | None = None,
    messages: Callable[[str], None] | None = None,
) -> tuple[dict, list[RunMetrics]]:
    trials = [run_trial(spec, seed, idx, trace, messages) for idx, seed in iter_trials(spec)]
    return summarize(spec.family, trials, spec), trials


def run_goal_search(spec: TaskSpec, **kw) -> dict:
    if spec.family is not TaskFamily.GOAL_SEARCH:
        raise ValueError("run_goal_search needs a goal-search spec")
    return run_task(spec, **kw)[0]


def run_block_search(spec: TaskSpec, **kw) -> dict:
    if spec.family is not TaskFamily.BLOCK_SEARCH:
        raise ValueError("run_block_search needs a block-search spec")
    return run_task(spec, **kw)[0]


def run_map_exploration(spec: TaskSpec, **kw) -> dict:
    if spec.family is not TaskFamily.MAP_EXPLORATION:
        raise ValueError("run_map_exploration needs a map-exploration spec")
    return run_task(spec, **kw)[0]


def apply_ablation(config: HierarchyConfig, flags: Iterable[str | Ablation]) -> HierarchyConfig:
    flags = frozenset(Ablation(f) for f in flags)
    if not flags:
        return config
    return replace(config, ablations=config.ablations | flags)


# -- aggregation -----------------------------------------------------------


def _mean(values: Sequence[float]) -> float | None:
    return round(sum(values) / len(values), 6) if values else None


def trial_row(family: TaskFamily, m: RunMetrics, area_target: int = 100) -> dict:
    row = {
        "seed": m.seed,
        "completed": m.completed,
        "iters": m.completed_iters,
        "initial_area": m.initial_area,
        "final_area": m.area_at(m.completed_iters),
        "backend_calls": sum(m.backend_calls.values()),
    }
    if family is TaskFamily.MAP_EXPLORATION:
        row["area_at_5"] = m.area_at(EXPLORE_CHECKPOINT)
        row["iters_to_area_target"] = m.first_iter(m.area_per_iter, m.initial_area, area_target)
    else:
        row["success"] = m.success
        row["iters_to_success"] = m.iters_to_success
        row["found"] = m.blocks_found_per_iter[-1] if m.blocks_found_per_iter else m.initial_found
    return row


def summarize(family: TaskFamily, trials: Sequence[RunMetrics], spec: TaskSpec | None = None) -> dict:
    family = TaskFamily(family)
    area_target = spec.area_target if spec is not None else 100
    rows = [trial_row(family, m, area_target) for m in trials]
    calls: Counter = Counter()
    for m in trials:
        calls.update(m.backend_calls)
    out: dict = {
        "family": family.value,
        "trials": len(rows),
        "completed": sum(1 for r in rows if r["completed"]),
        "backend_calls": dict(sorted(calls.items())),
        "per_trial": rows,
    }
    if family is TaskFamily.MAP_EXPLORATION:
        out["mean_area_at_5"] = _mean([r["area_at_5"] for r in rows])
        hits = [r["iters_to_area_target"] for r in rows if r["iters_to_area_target"] is not None]
        out["mean_iters_to_area_target"] = _mean(hits)
        out["area_target"] = area_target
    else:
        wins = [r for r in rows if r["success"]]
        out["successes"] = len(wins)
        out["success_rate"] = round(len(wins) / len(rows), 6) if rows else None
        # averaged over successful trials only
        out["mean_iters"] = _mean([r["iters_to_success"] for r in wins])
        out["mean_found"] = _mean([r["found"] for r in rows])
    return out


def replay_summary(lines: Iterable[str]) -> dict:
    """Rebuild the summary from trace lines alone."""
    trials: list[RunMetrics] = []
    family = None
    area_target = 100
    current: RunMetrics | None = None
    goal_count = None
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec["type"]
        if kind == "trial":
            family = TaskFamily(rec["family"])
            area_target = rec.get("area_target", 100)
            current = RunMetrics(seed=rec["seed"], n_agents=rec["n_agents"])
            current.initial_area = rec["initial_area"]
            current.initial_found = rec["initial_progress"]
            goal_count = rec["goal"]["count"] if rec["goal"] is not None else None
        elif kind == "tick":
            assert current is not None
            delta = rec["metrics_delta"]
            current.completed_iters = rec["round"]
            current.area_per_iter.append(delta["area"])
            current.blocks_found_per_iter.append(delta["progress"])
            if goal_count is not None and current.iters_to_success is None and delta["progress"] >= goal_count:
                current.iters_to_success = rec["round"]
                current.success = True
        elif kind == "end":
            assert current is not None
            current.completed = rec["completed"]
            current.backend_calls = Counter(rec["backend_calls"])
            trials.append(current)
            current = None
    if family is None:
        raise ValueError("trace has no trials")
    return summarize(family, trials, _AreaSpec(area_target))


@dataclass(frozen=True)
class _AreaSpec:
    area_target: int


def markdown_table(summary: dict, label: str = "") -> str:
    fam = TaskFamily(summary["family"])
    if fam is TaskFamily.MAP_EXPLORATION:
        head = f"| run | trials | mean area after {EXPLORE_CHECKPOINT} iters | mean iters to {summary['area_target']} cells |"
        row = f"| {label} | {summary['trials']} | {summary['mean_area_at_5']} | {summary['mean_iters_to_area_target']} |"
    else:
        head = "| run | trials | success rate | mean iters (successful) | mean found |"
        row = (
            f"| {label} | {summary['trials']} | {summary['success_rate']} | "
            f"{summary['mean_iters']} | {summary['mean_found']} |"
        )
    sep = "|" + "---|" * (head.count("|") - 1)
    return "\n".join([head, sep, row]) + "\n"


def write_reports(out_dir: Path, spec: TaskSpec, log_messages: bool = False) -> tuple[dict, bool]:
    """Run the task, writing summary.json, table.md, trace.jsonl (and messages.jsonl)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / "trace.jsonl"
    msg_path = out_dir / "messages.jsonl"
    with trace_path.open("w", encoding="utf-8") as tf:
        mf = msg_path.open("w", encoding="utf-8") if log_messages else None
        try:
            summary, trials = run_task(
                spec,
                trace=lambda s: tf.write(s + "\n"),
                messages=(lambda s: mf.write(s + "\n")) if mf is not None else None,
            )
        finally:
            if mf is not None:
                mf.close()
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    short = {Ablation.NO_DYNAMIC_MAP: "DM", Ablation.NO_AUTO_ORGANIZE: "AO"}
    label = f"{spec.n_agents} agents" + (f" w/o {','.join(sorted(short[a] for a in spec.ablations))}" if spec.ablations else "")
    (out_dir / "table.md").write_text(markdown_table(summary, label), encoding="utf-8")
    return summary, all(m.completed for m in trials)


# -- curriculum ------------------------------------------------------------


CURRICULUM_ROUNDS = 20


def _curriculum_spec(task: str, world: WorldState) -> tuple[Goal | None, Callable[[SystemState], bool]]:
    if task.startswith("explore"):
        return None, lambda s: explored_area(s.map) >= 100
    if task == "find 3 blocks" and any(b == DIAMOND for b in world.blocks.values()):
        goal = Goal(GoalKind.OBJECT, DIAMOND, 3)
        return goal, lambda s: s.goal_satisfied()
    objects = [e for e in world.entities if e.kind is GoalKind.OBJECT]
    if objects:
        goal = Goal(GoalKind.OBJECT, objects[0].name, 1)
        return goal, lambda s: s.goal_satisfied()
    return None, lambda s: explored_area(s.map) >= world.width * world.height // 2


def run_curriculum(
    config: WorldConfig,
    bundle_factory: Callable[[WorldState, HierarchyConfig], BackendBundle],
    episodes: int,
    n_agents: int = 8,
    memory: MemoryStore | None = None,
    token_budget: int = 512,
) -> tuple[CurriculumLog, MemoryStore]:
    """Self-proposed practice tasks that fill memory before evaluation."""
    memory = memory if memory is not None else MemoryStore()
    clog = CurriculumLog(token_budget=token_budget)
    hcfg = HierarchyConfig(budget=n_agents)
    for ep in range(episodes):
        world = generate_world(replace(config, seed=config.seed + ep))
        for u, p in enumerate(spawn_positions(world.width, world.height, n_agents, SpawnMode.CLUSTERED, world.config.seed)):
            world.place_agent(u, p)
        bundle = bundle_factory(world, hcfg)
        task = bundle.propose_next_task(clog, None)
        goal, solved = _curriculum_spec(task, world)
        state, _ = bootstrap(goal, world, bundle, hcfg, memory=memory, skills=default_skills(goal))
        outcomes = []
        for _ in range(CURRICULUM_ROUNDS):
            area0 = explored_area(state.map)
            state = tick(state, bundle)
            outcomes.append(f"round {state.round}: area +{explored_area(state.map) - area0}, goal progress +{len(state.record['metrics_delta']['found'])}")
            if solved(state):
                break
        verdict = bundle.critique_conductor(task, "\n".join(outcomes))
        result = "success" if solved(state) and verdict.verdict.value == "accept" else "failure"
        memory = state.memory
        summary = f"{task}: {result} after {state.round} rounds"
        clog = compact_log(clog.append(Episode(task, result, summary)), bundle.summarize)
    return clog, memory
