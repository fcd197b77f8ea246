"""Acceptance gate: one test per numbered criterion, each reporting PASS/FAIL.

Heavy runs are shared through module fixtures so each seeded trial runs once.
"""

from __future__ import annotations

import itertools
import json
import os
import random
import subprocess
import sys
import time
from collections import Counter
from fractions import Fraction
from pathlib import Path

import pytest

from hive_nav.comms import ROUTING_MATRIX, ForbiddenRoute, MsgKind, Router, violated_rule
from hive_nav.dynamic_map import (
    DynamicMap,
    MapImage,
    ReportEntry,
    parse_map_image,
    render_for_manager,
)
from hive_nav.harness import (
    TaskFamily,
    TaskSpec,
    build_world,
    make_bundle,
    replay_summary,
    run_task,
    run_trial,
    scripted_config,
    write_reports,
)
from hive_nav.hierarchy import (
    IDLE,
    Ablation,
    HierarchyConfig,
    bootstrap,
    default_skills,
    manager_image,
    reorganize,
    spent_cells,
    status_text,
    tick,
)
from hive_nav.memory import MemoryStore, retrieve_topk, store_success
from hive_nav.mlm import BackendError, HttpConfig
from hive_nav.mlm.bundle import BackendBundle
from hive_nav.mlm.scripted import MultimodalInfo, distinct_positions, skill_target
from hive_nav.stub_server import StubServer
from hive_nav.types import MANAGER, AgentId, Goal, GoalKind, Tier

SEEDS = tuple(range(30))
MIN_BLOCK_WINS = 27
AREA_RATIO = 3.0


def _traced(spec: TaskSpec) -> tuple[dict, list, list[str], float]:
    lines: list[str] = []
    start = time.perf_counter()
    summary, trials = run_task(spec, trace=lines.append)
    return summary, trials, lines, time.perf_counter() - start


@pytest.fixture(scope="module")
def block_runs():
    spec = lambda n: TaskSpec(TaskFamily.BLOCK_SEARCH, n_agents=n, seeds=SEEDS)  # noqa: E731
    return {n: _traced(spec(n)) for n in (8, 1)}


@pytest.fixture(scope="module")
def explore_runs():
    def spec(n, ablations=()):
        return TaskSpec(TaskFamily.MAP_EXPLORATION, n_agents=n, seeds=SEEDS, ablations=frozenset(ablations))

    return {
        "full": _traced(spec(8)),
        "single": _traced(spec(1)),
        "no_ao": _traced(spec(8, [Ablation.NO_AUTO_ORGANIZE])),
        "no_dm": _traced(spec(8, [Ablation.NO_DYNAMIC_MAP])),
    }


def _start(spec: TaskSpec, seed: int):
    world, goal = build_world(spec, seed)
    hcfg = HierarchyConfig(budget=spec.n_agents, ablations=spec.ablations)
    bundle = make_bundle(spec, world, hcfg)
    state, _ = bootstrap(goal, world, bundle, hcfg, skills=default_skills(goal))
    return state, bundle


# -- 1 routing -------------------------------------------------------------

ALLOWED = {
    ("manager", "conductor", "SubtaskDirective"),
    ("manager", "conductor", "Critique"),
    ("conductor", "manager", "StatusReport"),
    ("conductor", "manager", "MapDelta"),
    ("conductor", "subagent", "SubCommand"),
    ("subagent", "conductor", "MemberReport"),
}


def _agent(tier: Tier, index: int) -> AgentId:
    return MANAGER if tier is Tier.MANAGER else AgentId(tier, index)


def test_c1_routing_conformance(criterion):
    start = time.perf_counter()
    problems = []
    combos = list(itertools.product(Tier, Tier, MsgKind))
    for s, r, k in combos:
        allowed = (s.value, r.value, k.value) in ALLOWED
        if (violated_rule(s, r, k) is None) != allowed or ((s, r, k) in ROUTING_MATRIX) != allowed:
            problems.append(f"matrix {s.value}->{r.value} {k.value}")
        router = Router()
        router.set_roster({AgentId(Tier.CONDUCTOR, 0): [AgentId(Tier.SUBAGENT, 1)]}, idle=[AgentId(Tier.SUBAGENT, 2)])
        sender = _agent(s, 1 if s is Tier.SUBAGENT else 0)
        recipient = _agent(r, 1 if r is Tier.SUBAGENT else 0)
        if s is r is Tier.SUBAGENT:
            recipient = AgentId(Tier.SUBAGENT, 2)
        try:
            router.send(sender, recipient, k, {}, 1)
            delivered = True
        except ForbiddenRoute:
            delivered = False
        if delivered != allowed:
            problems.append(f"router {s.value}->{r.value} {k.value}")

    spec = TaskSpec(TaskFamily.MAP_EXPLORATION, n_agents=8, max_iters=100, seeds=(3,), size=128, full_horizon=True)
    state, bundle = _start(spec, 3)
    state.router.log = []
    deliveries = forbidden = 0
    for _ in range(100):
        state = tick(state, bundle)
        rec = state.record
        conductor_of = {m: g["conductor"] for g in rec["groups"] for m in g["members"]}
        for env in state.router.log:
            deliveries += 1
            s, r = AgentId.parse(env["from"]), AgentId.parse(env["to"])
            bad = (s.tier.value, r.tier.value, env["kind"]) not in ALLOWED
            if s.tier is Tier.SUBAGENT and conductor_of.get(s.index) != r.index:
                bad = True
            if r.tier is Tier.SUBAGENT and conductor_of.get(r.index) != s.index:
                bad = True
            forbidden += bad
        state.router.log = []
    elapsed = time.perf_counter() - start
    ok = not problems and forbidden == 0 and deliveries > 0 and elapsed < 5.0
    criterion(
        1,
        ok,
        f"{len(combos)} combinations, {len(problems)} mismatches; "
        f"{deliveries} deliveries in 100 rounds, {forbidden} forbidden; {elapsed:.2f}s (< 5s)",
    )


# -- 2 map algebra ---------------------------------------------------------

TOKENS = ("village", "tree", "diamond_block", "river")


def _rand_report(rng: random.Random, side: int, cells: list | None = None) -> ReportEntry:
    pool = cells if cells is not None else [(x, y) for x in range(side) for y in range(side)]
    chosen = rng.sample(pool, rng.randint(1, min(len(pool), 12)))
    return ReportEntry(
        agent=rng.randrange(4),
        step=rng.randrange(6),
        cells={p: tuple(sorted(rng.sample(TOKENS, rng.randint(0, 2)))) for p in chosen},
    )


def _oracle_map(reports) -> dict:
    best: dict = {}
    for rep in reports:
        for pos, toks in rep.cells.items():
            key = (rep.step, rep.agent, tuple(toks))
            if pos not in best or key > best[pos]:
                best[pos] = key
    return best


def _as_keys(dmap: DynamicMap) -> dict:
    return {p: (r.last_step, r.last_agent, r.annotations) for p, r in dmap.explored.items()}


def _fold(reports, bounds) -> DynamicMap:
    m = DynamicMap(bounds)
    for rep in reports:
        m.merge(rep)
    return m


def test_c2_map_algebra(criterion):
    start = time.perf_counter()
    rng = random.Random(20240)
    failures = Counter()
    cases = 1000
    for _ in range(cases):
        side = rng.randint(2, 10)
        bounds = (side, side)
        reports = [_rand_report(rng, side) for _ in range(rng.randint(1, 6))]
        m = DynamicMap(bounds)
        for rep in reports:
            before, version = dict(m.explored), m.version
            m.merge(rep)
            if not set(before) <= set(m.explored) or m.version < version:
                failures["monotonicity"] += 1
            snap, version = _as_keys(m), m.version
            m.merge(rep)
            if _as_keys(m) != snap or m.version != version:
                failures["idempotence"] += 1
        if _as_keys(m) != _oracle_map(reports):
            failures["oracle"] += 1
        shuffled = list(reports)
        rng.shuffle(shuffled)
        if _as_keys(_fold(shuffled, bounds)) != _as_keys(m):
            failures["order"] += 1
        # disjoint reports: the split of cells between reports must not matter
        cells = [(x, y) for x in range(side) for y in range(side)]
        rng.shuffle(cells)
        half = len(cells) // 2
        a, b = _rand_report(rng, side, cells[:half]), _rand_report(rng, side, cells[half:])
        if _as_keys(_fold([a, b], bounds)) != _as_keys(_fold([b, a], bounds)):
            failures["disjoint order"] += 1
        image = render_for_manager(m, bounds)
        explored, marks = parse_map_image(image)
        rebuilt = DynamicMap(bounds)
        rebuilt.merge(ReportEntry(0, 0, {p: marks.get(p, ()) for p in explored} or {(0, 0): ()}))
        if explored != set(m.explored) or marks != {p: tuple(sorted(t)) for p, t in m.annotated_cells().items() if t}:
            failures["parse"] += 1
        elif render_for_manager(rebuilt, bounds).text().encode() != image.text().encode():
            failures["render bytes"] += 1
        if MapImage(image.rows, image.legend).text() != image.text():
            failures["image text"] += 1
        if DynamicMap.from_json(m.to_json(), bounds).to_json() != m.to_json():
            failures["json bytes"] += 1
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 10.0
    criterion(2, ok, f"{cases} random cases, failures {dict(failures) or 'none'}; {elapsed:.2f}s (< 10s)")


# -- 3 retrieval -----------------------------------------------------------

VOCAB = ("find", "village", "tree", "river", "north", "south", "desert", "sound")


def _cos_sq(a: list[str], b: list[str]) -> Fraction:
    ca, cb = Counter(a), Counter(b)
    dot = sum(ca[t] * cb[t] for t in ca)
    na, nb = sum(v * v for v in ca.values()), sum(v * v for v in cb.values())
    return Fraction(0) if na == 0 or nb == 0 else Fraction(dot * dot, na * nb)


def test_c3_retrieval_oracle(criterion):
    start = time.perf_counter()
    rng = random.Random(777)
    cases, mismatches, tied = 500, 0, 0
    for _ in range(cases):
        store = MemoryStore()
        rows = []
        for _ in range(rng.randint(0, 100)):
            task = [rng.choice(VOCAB) for _ in range(rng.randint(1, 3))]
            obs = [rng.choice(VOCAB) for _ in range(rng.randint(0, 3))]
            store_success(store, " ".join(task), obs, {"subgoals": [{"kind": "explore"}]})
            rows.append(task + obs)
        query = [rng.choice(VOCAB) for _ in range(rng.randint(1, 4))]
        k = rng.randint(0, 12)
        scored = [(_cos_sq(query, words), i) for i, words in enumerate(rows)]
        want = [i for _, i in sorted(scored, key=lambda t: (-t[0], t[1]))[:k]]
        got = [e.id for e, _ in retrieve_topk(store, " ".join(query), k=k)]
        mismatches += got != want
        top = [s for s, i in scored if i in want]
        tied += len(top) != len(set(top))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10.0
    criterion(3, ok, f"{cases} cases ({tied} with tied scores), {mismatches} mismatches; {elapsed:.2f}s (< 10s)")


# -- 4 composition ---------------------------------------------------------


def _recompute_conductor_actions(snapshot, bundle) -> dict:
    s = snapshot.copy()
    s.router.log = None
    if s.goal_satisfied():
        return {}
    reorganize(s, bundle)
    info = MultimodalInfo(status_text(s), manager_image(s))
    spent = spent_cells(s)
    cfg = bundle.config
    out = {}
    for g in s.live_groups():
        directive = bundle.deploy_subtask(info, g.subgoal, g.subgoal.suggested_strategy)
        positions = distinct_positions(directive, 1 + len(g.members), cfg.width, cfg.height)
        cmd = bundle.deploy_subcommand(directive, positions[0])
        current = s.commands.get(g.conductor)
        if cmd.same_work(current):
            cmd = current
        macro = s.macros.get(g.conductor)
        if macro:
            out[g.conductor] = macro[0]
            continue
        if cmd.exhausted:
            out[g.conductor] = IDLE
            continue
        skills = ()
        if len(s.skills) and s.config.skill_k:
            query = directive.strategy + " " + (s.goal.text() if s.goal is not None else "")
            skills = tuple(bundle.lookup_skills(s.skills, query, s.config.skill_k))
        obs = s.observations[g.conductor]
        step = bundle.act(cmd, obs, skills, spent)
        if step.skill is not None:
            skill = next(k for k in skills if k.name == step.skill)
            spent.add(skill_target(skill, obs, spent))
        out[g.conductor] = step
    return {str(u): a.to_dict() for u, a in sorted(out.items())}


def test_c4_hierarchy_composition(criterion):
    village = Goal(GoalKind.OBJECT, "village", 1)
    runs = [(TaskSpec(TaskFamily.BLOCK_SEARCH, n_agents=8, max_iters=30), s) for s in range(4)]
    runs += [(TaskSpec(TaskFamily.MAP_EXPLORATION, n_agents=8, size=128), s) for s in range(3)]
    runs += [(TaskSpec(TaskFamily.GOAL_SEARCH, n_agents=6, goal=village), s) for s in range(3)]
    compared = mismatches = 0
    for spec, seed in runs:
        state, bundle = _start(spec, seed)
        for _ in range(12):
            want = _recompute_conductor_actions(state, bundle)
            state = tick(state, bundle)
            compared += len(want)
            mismatches += want != state.record["conductor_actions"]
    ok = mismatches == 0 and compared > 0
    criterion(4, ok, f"{len(runs)} seeded runs, {compared} conductor actions recomputed, {mismatches} rounds differ")


# -- 5 budget and membership ----------------------------------------------


def _audit(lines: list[str]) -> tuple[int, int]:
    rounds = violations = 0
    for line in lines:
        rec = json.loads(line)
        if rec["type"] != "tick":
            continue
        rounds += 1
        units = [u for g in rec["groups"] for u in (g["conductor"], *g["members"])]
        if len(units) != len(set(units)) or len(units) > 8 or len(rec["positions"]) > 8:
            violations += 1
    return rounds, violations


def test_c5_budget_and_membership(criterion, block_runs, explore_runs):
    rounds = violations = 0
    for _, _, lines, _ in [*block_runs.values(), *explore_runs.values()]:
        r, v = _audit(lines)
        rounds += r
        violations += v
    criterion(5, rounds > 0 and violations == 0, f"{rounds} traced rounds audited, {violations} violations")


# -- 6 determinism ---------------------------------------------------------


def _cli_run(out: Path, hash_seed: str, *args: str) -> bytes:
    env = dict(os.environ, PYTHONHASHSEED=hash_seed)
    subprocess.run(
        [sys.executable, "-m", "hive_nav.cli", "run", "--out", str(out), *args],
        check=True,
        env=env,
        capture_output=True,
    )
    return (out / "trace.jsonl").read_bytes()


def test_c6_determinism(criterion, tmp_path):
    seeds = tmp_path / "seeds.txt"
    seeds.write_text("0 1 2")
    goal = tmp_path / "goal.json"
    goal.write_text(json.dumps({"kind": "object", "payload": "village", "count": 1}))
    configs = {
        "block-search": ["--task", "block-search", "--seeds", str(seeds), "--max-iters", "20"],
        "map-exploration": ["--task", "map-exploration", "--seeds", str(seeds), "--size", "128", "--ablate", "ao"],
        "goal-search": ["--goal", str(goal), "--seeds", str(seeds), "--max-iters", "20", "--log-messages"],
    }
    same = []
    for name, args in configs.items():
        a = _cli_run(tmp_path / f"{name}-a", "1", *args)
        b = _cli_run(tmp_path / f"{name}-b", "99", *args)
        same.append(a == b and len(a) > 0)
    criterion(6, all(same), f"{sum(same)}/{len(same)} configurations byte-identical across separate processes")


# -- 7 diamond grid --------------------------------------------------------


def test_c7_diamond_grid(criterion, block_runs):
    eight, trials_8, _, t8 = block_runs[8]
    _, trials_1, _, t1 = block_runs[1]
    wins = eight["successes"]
    # a paired seed the single agent never finishes counts at the horizon
    horizon = 100
    mean8 = sum(m.iters_to_success or horizon for m in trials_8) / len(trials_8)
    mean1 = sum(m.iters_to_success or horizon for m in trials_1) / len(trials_1)
    elapsed = t8 + t1
    ok = wins >= MIN_BLOCK_WINS and mean8 < mean1 and elapsed < 120.0
    criterion(
        7,
        ok,
        f"8 agents found 10 diamonds on {wins}/30 seeds (>= {MIN_BLOCK_WINS}); "
        f"mean iters 8 agents {mean8:.2f} < 1 agent {mean1:.2f}; {elapsed:.1f}s (< 120s)",
    )


# -- 8 exploration ---------------------------------------------------------


def test_c8_exploration_trend(criterion, explore_runs):
    full, _, _, tf = explore_runs["full"]
    single, _, _, ts = explore_runs["single"]
    ratio = full["mean_area_at_5"] / single["mean_area_at_5"]
    elapsed = tf + ts
    ok = ratio >= AREA_RATIO and elapsed < 120.0
    criterion(
        8,
        ok,
        f"mean area after 5 iters: 8 agents {full['mean_area_at_5']:.0f}, 1 agent {single['mean_area_at_5']:.0f}, "
        f"ratio {ratio:.2f} (>= {AREA_RATIO}); {elapsed:.1f}s (< 120s)",
    )


# -- 9 ablations -----------------------------------------------------------


def test_c9_ablation_direction(criterion, explore_runs):
    full = explore_runs["full"][0]["mean_area_at_5"]
    no_ao = explore_runs["no_ao"][0]["mean_area_at_5"]
    no_dm = explore_runs["no_dm"][0]["mean_area_at_5"]
    trials = explore_runs["no_ao"][1]
    floor = sum(m.initial_area for m in trials) / len(trials)
    ok = full >= no_ao >= floor and full >= no_dm
    criterion(
        9,
        ok,
        f"mean area after 5 iters: full {full:.0f} >= no auto-organize {no_ao:.0f} >= spawn floor {floor:.0f}; "
        f"full >= no dynamic map {no_dm:.0f}",
    )


# -- 10 replay -------------------------------------------------------------


def test_c10_metric_replay(criterion, block_runs, explore_runs, tmp_path):
    runs = [*block_runs.values(), *explore_runs.values()]
    equal = sum(replay_summary(lines) == summary for summary, _, lines, _ in runs)
    # and through the files the CLI writes
    spec = TaskSpec(TaskFamily.BLOCK_SEARCH, n_agents=4, seeds=(5, 6), max_iters=30)
    summary, _ = write_reports(tmp_path, spec)
    on_disk = json.loads((tmp_path / "summary.json").read_text())
    replayed = replay_summary((tmp_path / "trace.jsonl").read_text().splitlines())
    files_ok = on_disk == replayed == summary
    total = len(runs) + 1
    criterion(10, equal == len(runs) and files_ok, f"{equal + files_ok}/{total} summaries equal their replay")


# -- 11 http contract -------------------------------------------------------


def test_c11_http_contract(criterion):
    goal = Goal(GoalKind.OBJECT, "village", 1)
    spec_kw = dict(family=TaskFamily.GOAL_SEARCH, n_agents=4, goal=goal, size=64, max_iters=40, backend="http")
    with StubServer(64, 64) as server:
        full = run_trial(TaskSpec(**spec_kw, http_url=server.url), 0, 0)
        full_requests = len(server.state.requests)
    with StubServer(64, 64) as server:
        world, _ = build_world(TaskSpec(**spec_kw), 0)
        bundle = BackendBundle.http(HttpConfig(server.url, timeout=5), scripted_config(world, HierarchyConfig(budget=4)))
        server.state.malformed = 1
        retried = bundle.summarize(["a b c"], 8) == "a b c" and len(server.state.requests) == 2
        server.state.malformed = 2
        try:
            bundle.summarize(["a b c"], 8)
            raised = False
        except BackendError:
            raised = True
        raised = raised and len(server.state.requests) == 4
    ok = full.completed and full_requests > 0 and retried and raised
    criterion(
        11,
        ok,
        f"stub goal-search trial completed={full.completed} (success={full.success}, {full_requests} requests); "
        f"one malformed reply retried={retried}; two malformed replies raised={raised}",
    )
