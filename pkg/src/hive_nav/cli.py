"""Command line entry point: ``hive-nav run|world|memory|curriculum|stub-server``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .harness import (
    DEFAULT_TRIALS,
    HierarchyConfig,
    SpawnMode,
    TaskFamily,
    TaskSpec,
    run_curriculum,
    scripted_config,
    write_reports,
)
from .hierarchy import Ablation
from .memory import MemoryStore, retrieve_topk
from .mlm.bundle import BackendBundle
from .mlm.http import HttpConfig
from .platform import InvalidGoal
from .types import Goal
from .world import WorldConfig, WorldError, dump_world, generate_world

ABLATION_FLAGS = {"dm": Ablation.NO_DYNAMIC_MAP, "ao": Ablation.NO_AUTO_ORGANIZE}


def read_seeds(path: str | None, fallback: list[int]) -> list[int]:
    if path is None:
        return fallback
    text = Path(path).read_text(encoding="utf-8").strip()
    if text.startswith("["):
        return [int(s) for s in json.loads(text)]
    return [int(tok) for tok in text.replace(",", " ").split()]


def parse_ablations(text: str | None) -> frozenset[Ablation]:
    if not text:
        return frozenset()
    out = set()
    for flag in text.split(","):
        flag = flag.strip()
        if flag not in ABLATION_FLAGS:
            raise argparse.ArgumentTypeError(f"unknown ablation {flag!r}; use dm and/or ao")
        out.add(ABLATION_FLAGS[flag])
    return frozenset(out)


def cmd_run(args: argparse.Namespace) -> int:
    goal = Goal.from_dict(json.loads(Path(args.goal).read_text(encoding="utf-8"))) if args.goal else None
    world = WorldConfig.load(args.world) if args.world else None
    family = TaskFamily(args.task) if args.task else TaskFamily.GOAL_SEARCH
    fallback = [world.seed] if world is not None else list(range(DEFAULT_TRIALS))
    spec = TaskSpec(
        family=family,
        n_agents=args.agents,
        max_iters=args.max_iters,
        seeds=tuple(read_seeds(args.seeds, fallback)),
        trials_per_seed=args.trials_per_seed,
        ablations=parse_ablations(args.ablate),
        goal=goal,
        world=world,
        size=args.size,
        spawn=SpawnMode(args.spawn) if args.spawn else None,
        full_horizon=args.full_horizon,
        backend=args.backend,
        http_url=args.url,
    )
    start = time.perf_counter()
    summary, all_completed = write_reports(Path(args.out), spec, log_messages=args.log_messages)
    logging.info("%d trials in %.1fs -> %s", summary["trials"], time.perf_counter() - start, args.out)
    print((Path(args.out) / "table.md").read_text(encoding="utf-8"), end="")
    return 0 if all_completed else 1


def cmd_world_dump(args: argparse.Namespace) -> int:
    world = generate_world(WorldConfig.load(args.config))
    sys.stdout.write(dump_world(world))
    return 0


def cmd_memory_inspect(args: argparse.Namespace) -> int:
    store = MemoryStore.load(args.file)
    for e in store.entries:
        print(f"{e.id}\tstep {e.created_step}\t{e.task_text}\t{' '.join(e.obs_descriptor)}")
    print(f"{len(store)} entries")
    return 0


def cmd_memory_query(args: argparse.Namespace) -> int:
    store = MemoryStore.load(args.file)
    for entry, score in retrieve_topk(store, args.text, k=args.k):
        print(f"{score.score:.4f}\t{entry.id}\t{entry.task_text}\t{json.dumps(entry.plan, sort_keys=True)}")
    return 0


def cmd_curriculum(args: argparse.Namespace) -> int:
    config = WorldConfig.load(args.world)

    def factory(world, hcfg: HierarchyConfig) -> BackendBundle:
        cfg = scripted_config(world, hcfg)
        if args.backend == "http":
            return BackendBundle.http(HttpConfig.from_env(args.url), cfg)
        return BackendBundle.scripted(cfg)

    memory = MemoryStore.load(args.memory) if args.memory else MemoryStore()
    clog, memory = run_curriculum(config, factory, args.episodes, args.agents, memory, args.token_budget)
    for ep in clog.episodes:
        print(f"{ep.proposed_task}\t{ep.result}")
    if clog.head_summary:
        print(f"(folded {clog.folded}) {clog.head_summary}")
    print(f"memory: {len(memory)} entries")
    return 0


def cmd_stub_server(args: argparse.Namespace) -> int:
    from .stub_server import StubServer

    server = StubServer(args.width, args.height, port=args.port)
    print(f"stub endpoint at {server.url}", flush=True)
    server.start()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hive-nav", description="Hierarchical multi-agent navigation harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a task family and write summary.json, table.md, trace.jsonl")
    run.add_argument("--task", choices=[f.value for f in TaskFamily])
    run.add_argument("--agents", type=int, default=8)
    run.add_argument("--seeds", help="file of integer seeds (JSON list or whitespace separated)")
    run.add_argument("--trials-per-seed", type=int, default=1)
    run.add_argument("--max-iters", type=int, default=100)
    run.add_argument("--backend", choices=["scripted", "http"], default="scripted")
    run.add_argument("--url", help="endpoint for the http backend (default: $HIVE_NAV_LLM_URL)")
    run.add_argument("--ablate", help="comma list of dm (dynamic map) and ao (auto-organizing)")
    run.add_argument("--goal", help="goal JSON file {kind, payload, count}")
    run.add_argument("--world", help="world config JSON file")
    run.add_argument("--size", type=int, help="square world side (default 128, or 256 for exploration)")
    run.add_argument("--spawn", choices=[m.value for m in SpawnMode])
    run.add_argument("--full-horizon", action="store_true", help="keep running to max-iters after the goal is met")
    run.add_argument("--log-messages", action="store_true", help="also write every routed message to messages.jsonl")
    run.add_argument("--out", default="out")
    run.set_defaults(func=cmd_run)

    world = sub.add_parser("world", help="world utilities")
    wsub = world.add_subparsers(dest="world_command", required=True)
    dump = wsub.add_parser("dump", help="print the generated grid, one glyph per cell")
    dump.add_argument("config")
    dump.set_defaults(func=cmd_world_dump)

    memory = sub.add_parser("memory", help="memory file utilities")
    msub = memory.add_subparsers(dest="memory_command", required=True)
    inspect = msub.add_parser("inspect")
    inspect.add_argument("file")
    inspect.set_defaults(func=cmd_memory_inspect)
    query = msub.add_parser("query")
    query.add_argument("file")
    query.add_argument("--text", required=True)
    query.add_argument("-k", type=int, default=5)
    query.set_defaults(func=cmd_memory_query)

    cur = sub.add_parser("curriculum", help="run self-proposed practice episodes to fill memory")
    cur.add_argument("--world", required=True)
    cur.add_argument("--episodes", type=int, default=4)
    cur.add_argument("--agents", type=int, default=8)
    cur.add_argument("--memory", help="JSONL memory file to extend")
    cur.add_argument("--token-budget", type=int, default=512)
    cur.add_argument("--backend", choices=["scripted", "http"], default="scripted")
    cur.add_argument("--url")
    cur.set_defaults(func=cmd_curriculum)

    stub = sub.add_parser("stub-server", help="serve canned model responses on localhost")
    stub.add_argument("--port", type=int, default=8765)
    stub.add_argument("--width", type=int, default=64)
    stub.add_argument("--height", type=int, default=64)
    stub.set_defaults(func=cmd_stub_server)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InvalidGoal, WorldError, ValueError, OSError) as exc:
        print(f"hive-nav: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
