"""Manager, conductors and sub-agents: group formation and the per-round loop.

A round runs in this order:

1. reorganize: dissolve finished or revising groups, plan for idle units,
   and form new groups;
2. the manager sends each group's conductor a subtask directive;
3. each conductor splits the work into one command per executor (the
   conductor executes too) with distinct target cells;
4. every executor takes one action; conductors decide first;
5. the world clock advances;
6. executors observe, members report to their conductor, conductors
   describe and record into the shared map, then report to the manager;
7. goal progress, group completion and critiques are settled, and
   successful subtasks are written to memory.

Sensing closes the round so that the map at the end of round ``r`` already
reflects the moves made in round ``r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .comms import MsgKind, Router, summarize_and_distribute
from .dynamic_map import MapImage, blank_image, explored_area, render_for_manager
from .memory import (
    MemoryStore,
    PromptContext,
    SkillLibrary,
    SkillRecord,
    augment_plan_context,
    retrieve_topk,
    store_success,
)
from .mlm.bundle import BackendBundle
from .mlm.scripted import MultimodalInfo, skill_target
from .mlm.status import StatusView, format_status
from .platform import Platform, validate_goal
from .protocol import (
    ActionKind,
    ActionStep,
    Critique,
    MemberReport,
    Plan,
    StatusReport,
    SubCommand,
    SubGoal,
    SubGoalKind,
    SubtaskDirective,
    Verdict,
)
from .types import MANAGER, AgentId, Goal, GoalKind, Position, Tier, tokenize
from .world import (
    Observation,
    WorldState,
    apply_move,
    chebyshev,
    goal_targets,
    observe,
    pick_up,
    targets_in_reach,
)

MAX_AGENTS = 8
IDLE = ActionStep(ActionKind.IDLE)


class GroupState(str, Enum):
    FORMING = "forming"
    EXECUTING = "executing"
    DONE = "done"
    REVISING = "revising"


class Ablation(str, Enum):
    NO_DYNAMIC_MAP = "no_dynamic_map"
    NO_AUTO_ORGANIZE = "no_auto_organize"


class BudgetError(ValueError):
    pass


class TickAborted(RuntimeError):
    """A round failed part way; the state passed to :func:`tick` is unchanged."""


@dataclass(frozen=True)
class HierarchyConfig:
    budget: int = MAX_AGENTS
    ablations: frozenset[Ablation] = frozenset()
    memory_k: int = 5
    skill_k: int = 3
    static_groups: int = 2
    audio_history: int = 8
    goal_threshold: int = 3
    image_match_fraction: float = 0.75

    def __post_init__(self) -> None:
        object.__setattr__(self, "ablations", frozenset(Ablation(a) for a in self.ablations))
        if not 1 <= self.budget <= MAX_AGENTS:
            raise BudgetError(f"agent budget must be in [1, {MAX_AGENTS}]")

    @property
    def dynamic_map(self) -> bool:
        return Ablation.NO_DYNAMIC_MAP not in self.ablations

    @property
    def auto_organize(self) -> bool:
        return Ablation.NO_AUTO_ORGANIZE not in self.ablations


@dataclass
class GroupSpec:
    id: int
    conductor: int
    members: tuple[int, ...]
    subgoal: SubGoal
    state: GroupState = GroupState.FORMING
    formed_round: int = 0
    outcomes: tuple[str, ...] = ()
    grown: int = 0
    found: int = 0
    replacements: tuple[SubGoal, ...] = ()
    heading: tuple[float, float] | None = None

    @property
    def units(self) -> tuple[int, ...]:
        return (self.conductor,) + self.members

    @property
    def conductor_id(self) -> AgentId:
        return AgentId(Tier.CONDUCTOR, self.conductor)

    @property
    def member_ids(self) -> tuple[AgentId, ...]:
        return tuple(AgentId(Tier.SUBAGENT, m) for m in self.members)

    @property
    def live(self) -> bool:
        return self.state in (GroupState.FORMING, GroupState.EXECUTING)

    def copy(self) -> GroupSpec:
        return replace(self)

    def to_dict(self) -> dict:
        sg = self.subgoal
        return {
            "id": self.id,
            "conductor": self.conductor,
            "members": list(self.members),
            "state": self.state.value,
            "subgoal": {
                "id": sg.id,
                "kind": sg.kind.value,
                "target": list(sg.target),
                "region": list(sg.region),
            },
        }


@dataclass
class SystemState:
    world: WorldState
    platform: Platform
    goal: Goal | None
    config: HierarchyConfig
    memory: MemoryStore = field(default_factory=MemoryStore)
    skills: SkillLibrary = field(default_factory=SkillLibrary)
    router: Router = field(default_factory=Router)
    groups: list[GroupSpec] = field(default_factory=list)
    queue: list[SubGoal] = field(default_factory=list)
    round: int = 0
    next_group_id: int = 0
    commands: dict[int, SubCommand] = field(default_factory=dict)
    macros: dict[int, tuple[ActionStep, ...]] = field(default_factory=dict)
    observations: dict[int, Observation] = field(default_factory=dict)
    inbound: dict[int, tuple[MemberReport, ...]] = field(default_factory=dict)
    found: dict[str, Position] = field(default_factory=dict)
    claimed: set[Position] = field(default_factory=set)
    sightings: dict[Position, tuple[str, ...]] = field(default_factory=dict)
    audio_log: list[tuple[str, float, Position]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    last_plan: Plan | None = None
    errors: list[str] = field(default_factory=list)
    record: dict | None = None

    @property
    def map(self):
        return self.platform.map

    @property
    def bounds(self) -> tuple[int, int]:
        return (self.world.width, self.world.height)

    @property
    def units(self) -> list[int]:
        return sorted(self.world.agents)

    def live_groups(self) -> list[GroupSpec]:
        return [g for g in self.groups if g.live]

    def idle_units(self) -> list[int]:
        busy = {u for g in self.live_groups() for u in g.units}
        return [u for u in self.units if u not in busy]

    def progress(self) -> int:
        return len(self.found)

    def goal_satisfied(self) -> bool:
        return self.goal is not None and self.progress() >= self.goal.count

    def copy(self) -> SystemState:
        world = self.world.copy()
        router = Router(
            inboxes={a: type(b)(b) for a, b in self.router.inboxes.items()},
            conductor_of=dict(self.router.conductor_of),
            next_msg_id=self.router.next_msg_id,
            delivered=self.router.delivered.copy(),
            refused=self.router.refused.copy(),
            log=None if self.router.log is None else list(self.router.log),
        )
        return SystemState(
            world=world,
            platform=self.platform.copy(world),
            goal=self.goal,
            config=self.config,
            memory=self.memory.copy(),
            skills=self.skills,
            router=router,
            groups=[g.copy() for g in self.groups],
            queue=list(self.queue),
            round=self.round,
            next_group_id=self.next_group_id,
            commands=dict(self.commands),
            macros=dict(self.macros),
            observations=dict(self.observations),
            inbound=dict(self.inbound),
            found=dict(self.found),
            claimed=set(self.claimed),
            sightings=dict(self.sightings),
            audio_log=list(self.audio_log),
            notes=list(self.notes),
            last_plan=self.last_plan,
            errors=list(self.errors),
            record=self.record,
        )


# -- manager-side views ----------------------------------------------------


def manager_image(state: SystemState) -> MapImage:
    """The map as the manager sees it; blank when the dynamic map is ablated."""
    if not state.config.dynamic_map:
        return blank_image(state.bounds)
    return render_for_manager(state.map, state.bounds)


def engaged_positions(state: SystemState) -> list[Position]:
    return sorted(set(state.found.values()), key=lambda p: (p[1], p[0]))


def status_text(state: SystemState) -> str:
    roles: dict[int, str] = {u: "idle" for u in state.units}
    for g in state.live_groups():
        roles[g.conductor] = "conductor"
        for m in g.members:
            roles[m] = "member"
    engaged = set(state.found.values())
    view = StatusView(
        round=state.round,
        progress=state.progress(),
        needed=state.goal.count if state.goal is not None else 0,
        units={u: (roles[u], state.world.agents[u]) for u in state.units},
        active=[(g.subgoal.kind.value, g.subgoal.target, g.subgoal.anchors) for g in state.live_groups()],
        engaged=engaged_positions(state),
        sightings=[
            (tok, pos)
            for pos, toks in sorted(state.sightings.items(), key=lambda kv: (kv[0][1], kv[0][0]))
            if pos not in engaged
            for tok in toks
        ],
        audio=list(state.audio_log),
        notes=list(state.notes),
    )
    return format_status(view)


def memory_context(state: SystemState, bundle: BackendBundle, image: MapImage) -> PromptContext:
    instruction = state.goal.text() if state.goal is not None else "explore the map"
    if len(state.memory) == 0 or state.config.memory_k == 0:
        return augment_plan_context([], instruction)
    hits = retrieve_topk(state.memory, instruction, image, state.config.memory_k, describer=bundle.describe)
    return augment_plan_context(hits, instruction)


# -- group formation -------------------------------------------------------


def _d2(a: Position, b: Position) -> int:
    return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2


def group_sizes(n_units: int, n_subgoals: int) -> tuple[list[int], int]:
    """Sizes (conductor included) for the first subgoals and how many are queued."""
    if n_subgoals < 1:
        raise ValueError("need at least one subgoal")
    active = min(n_units, n_subgoals)
    if active == 0:
        return [], n_subgoals
    spare = n_units - active
    base, extra = divmod(spare, active)
    return [1 + base + (1 if i < extra else 0) for i in range(active)], n_subgoals - active


def auto_organize(
    idle: Mapping[int, Position],
    subgoals: Sequence[SubGoal],
    next_group_id: int = 0,
    round: int = 0,
) -> tuple[list[GroupSpec], list[SubGoal]]:
    """Split the idle units over the subgoals in priority order.

    Every subgoal that gets units has one conductor plus an equal share of
    the rest; leftovers go to the highest-priority subgoals. Subgoals beyond
    the number of idle units are returned as a queue.
    """
    sizes, _ = group_sizes(len(idle), len(subgoals))
    free = sorted(idle)
    groups = []
    for i, size in enumerate(sizes):
        target = subgoals[i].target
        free.sort(key=lambda u: (_d2(idle[u], target), u))
        picked, free = free[:size], free[size:]
        groups.append(
            GroupSpec(
                id=next_group_id + i,
                conductor=picked[0],
                members=tuple(sorted(picked[1:])),
                subgoal=subgoals[i],
                formed_round=round,
            )
        )
    return groups, list(subgoals[len(sizes) :])


def check_budget(groups: Iterable[GroupSpec], budget: int = MAX_AGENTS) -> None:
    seen: set[int] = set()
    for g in groups:
        if not g.live:
            continue
        for u in g.units:
            if u in seen:
                raise BudgetError(f"unit {u} is in two groups")
            seen.add(u)
    if len(seen) > budget:
        raise BudgetError(f"{len(seen)} agents exceed the budget of {budget}")


def regroup(state: SystemState, group: GroupSpec, critique: Critique) -> None:
    """Mark a group for re-formation; its units return to the idle pool next round."""
    if critique.verdict is not Verdict.REVISE:
        return
    group.state = GroupState.REVISING
    group.replacements = tuple(critique.suggested_edits or ())
    state.notes.append(f"group {group.id} revised: {critique.reasons}")
    del state.notes[:-4]


def _stale(state: SystemState, sg: SubGoal) -> bool:
    if sg.kind is SubGoalKind.EXPLORE:
        return sg.target in state.map.explored
    return sg.target in set(state.found.values())


def _continue_heading(state: SystemState, group: GroupSpec) -> SubGoal:
    """Next subgoal for a fixed group when automatic organization is off."""
    w, h = state.bounds
    engaged = set(state.found.values())
    active = {g.subgoal.target for g in state.live_groups()}
    if state.goal is not None:
        from .mlm.scripted import goal_matches_tokens

        hits = sorted(
            (p for p, toks in state.sightings.items()
             if p not in engaged and p not in active
             and goal_matches_tokens(state.goal, toks, state.config.image_match_fraction)),
            key=lambda p: (_d2(p, state.world.agents[group.conductor]), p[1], p[0]),
        )
        if hits:
            p = hits[0]
            r = state.config.goal_threshold
            region = (max(0, p[0] - r), max(0, p[1] - r), min(w - 1, p[0] + r), min(h - 1, p[1] + r))
            return SubGoal(0, SubGoalKind.SEARCH, p, region, "converge on sighting", payload=state.goal.payload)
    sensing = state.world.config.sensing_radius
    cx = sum(state.world.agents[u][0] for u in group.units) / len(group.units)
    cy = sum(state.world.agents[u][1] for u in group.units) / len(group.units)
    hx, hy = group.heading or (1.0, 0.0)
    for _ in range(4):
        tx, ty = cx + hx * 2 * sensing, cy + hy * 2 * sensing
        if 0 <= tx < w and 0 <= ty < h:
            break
        hx, hy = -hy, hx
    group.heading = (hx, hy)
    t = (int(min(w - 1, max(0, round(tx)))), int(min(h - 1, max(0, round(ty)))))
    region = (max(0, t[0] - sensing), max(0, t[1] - sensing), min(w - 1, t[0] + sensing), min(h - 1, t[1] + sensing))
    return SubGoal(0, SubGoalKind.EXPLORE, t, region, "keep heading", anchors=(t,))


def reorganize(state: SystemState, bundle: BackendBundle) -> None:
    """Dissolve finished groups and give every idle unit a group."""
    cfg = state.config
    if not cfg.auto_organize and state.groups:
        for g in state.groups:
            if not g.live:
                g.subgoal = _continue_heading(state, g)
                g.state = GroupState.FORMING
                g.formed_round = state.round
                g.outcomes, g.grown, g.found = (), 0, 0
        _activate(state)
        return
    ended = [g for g in state.groups if not g.live]
    replacements = [sg for g in ended for sg in g.replacements]
    state.groups = state.live_groups()
    idle = state.idle_units()
    if not idle:
        _activate(state)
        return
    state.queue = [sg for sg in state.queue if not _stale(state, sg)]
    if replacements:
        subgoals = replacements
    elif state.queue:
        subgoals, state.queue = state.queue, []
    else:
        image = manager_image(state)
        context = memory_context(state, bundle, image)
        plan = bundle.plan(state.goal, image, status_text(state), context)
        if not 1 <= len(plan.subgoals) <= MAX_AGENTS:
            raise BudgetError(f"planner returned {len(plan.subgoals)} subgoals")
        state.last_plan = plan
        subgoals = list(plan.subgoals)
    if not cfg.auto_organize:
        subgoals = subgoals[: cfg.static_groups]
    positions = {u: state.world.agents[u] for u in idle}
    new, queued = auto_organize(positions, subgoals, state.next_group_id, state.round)
    for g in new:
        if not cfg.auto_organize:
            g.heading = _unit_heading(state, g)
    state.next_group_id += len(new)
    state.queue.extend(queued)
    state.groups.extend(new)
    _activate(state)


def _unit_heading(state: SystemState, g: GroupSpec) -> tuple[float, float]:
    ux = sum(state.world.agents[u][0] for u in g.units) / len(g.units)
    uy = sum(state.world.agents[u][1] for u in g.units) / len(g.units)
    dx, dy = g.subgoal.target[0] - ux, g.subgoal.target[1] - uy
    n = math.hypot(dx, dy)
    return (dx / n, dy / n) if n > 0 else (1.0, 0.0)


def _activate(state: SystemState) -> None:
    check_budget(state.groups, state.config.budget)
    for g in state.groups:
        if g.state is GroupState.FORMING:
            g.state = GroupState.EXECUTING
    state.router.set_roster(
        {g.conductor_id: g.member_ids for g in state.live_groups()},
        idle=[AgentId(Tier.SUBAGENT, u) for u in state.idle_units()],
    )


# -- deployment and acting -------------------------------------------------


def group_skills(state: SystemState, bundle: BackendBundle, directive: SubtaskDirective) -> tuple[SkillRecord, ...]:
    if len(state.skills) == 0 or state.config.skill_k == 0:
        return ()
    query = directive.strategy + " " + (state.goal.text() if state.goal is not None else "")
    return tuple(bundle.lookup_skills(state.skills, query, state.config.skill_k))


def deploy(state: SystemState, bundle: BackendBundle) -> dict[int, SubtaskDirective]:
    """Manager sends directives, conductors distribute commands; returns directives by group."""
    r = state.round + 1
    info = MultimodalInfo(status_text(state), manager_image(state))
    for g in state.live_groups():
        directive = bundle.deploy_subtask(info, g.subgoal, g.subgoal.suggested_strategy)
        state.router.send(MANAGER, g.conductor_id, MsgKind.SUBTASK_DIRECTIVE, directive, r)
    directives: dict[int, SubtaskDirective] = {}
    for g in state.live_groups():
        inbox = state.router.drain_inbox(g.conductor_id)
        directive = [e.payload for e in inbox if e.kind is MsgKind.SUBTASK_DIRECTIVE][-1]
        directives[g.id] = directive
        dist = summarize_and_distribute(
            state.router,
            g.conductor_id,
            g.member_ids,
            state.inbound.get(g.conductor, ()),
            directive,
            bundle,
            r,
            state.commands,
        )
        state.commands[g.conductor] = dist.own
        for m in g.member_ids:
            for env in state.router.drain_inbox(m):
                state.commands[m.index] = env.payload
    return directives


def spent_cells(state: SystemState) -> set[Position]:
    """Cells no skill may fire on: reached targets, claimed cells, live search targets."""
    out = set(state.found.values()) | state.claimed
    out.update(g.subgoal.target for g in state.live_groups() if g.subgoal.kind is SubGoalKind.SEARCH)
    return out


def decide(
    state: SystemState,
    bundle: BackendBundle,
    unit: int,
    skills: Sequence[SkillRecord],
    spent: set[Position],
) -> tuple[ActionStep, str]:
    """One executor's action for this round and where it came from."""
    macro = state.macros.get(unit)
    if macro:
        return macro[0], "macro"
    cmd = state.commands.get(unit)
    if cmd is None or cmd.exhausted:
        return IDLE, "idle"
    step = bundle.act(cmd, state.observations[unit], skills, spent)
    if step.skill is None:
        return step, "command"
    skill = next(s for s in skills if s.name == step.skill)
    pos = skill_target(skill, state.observations[unit], spent)
    spent.add(pos)
    state.claimed.add(pos)
    state.macros[unit] = skill.expand(target=pos)
    return step, "macro"


def execute(state: SystemState, unit: int, step: ActionStep, source: str) -> list[ActionStep]:
    """Carry out ``step`` and any following instantaneous steps from the same source."""
    done: list[ActionStep] = []
    while True:
        if step.kind is ActionKind.MOVE_TO:
            result = apply_move(state.world, unit, step.args)
            done.append(step)
            if result.truncated:
                return done
        else:
            if step.kind is ActionKind.PICK_UP:
                pick_up(state.world, unit)
            done.append(step)
        if source == "macro":
            rest = state.macros[unit][1:]
            if rest:
                state.macros[unit] = rest
            else:
                del state.macros[unit]
                return done
            step = rest[0]
        elif source == "command":
            cmd = state.commands[unit].advance()
            state.commands[unit] = cmd
            if cmd.exhausted:
                return done
            step = cmd.steps[cmd.executed]
        else:
            return done
        if step.kind is ActionKind.MOVE_TO:
            return done


def executor_done(state: SystemState, unit: int) -> bool:
    cmd = state.commands.get(unit)
    return (cmd is None or cmd.exhausted) and not state.macros.get(unit)


# -- sensing ---------------------------------------------------------------


def sense(state: SystemState, bundle: BackendBundle) -> dict[int, int]:
    """Observe, report up the hierarchy, merge into the map; returns cells gained per group."""
    step = state.world.clock
    router = state.router
    gained: dict[int, int] = {}
    goal_src = state.goal.payload if state.goal is not None and state.goal.kind is GoalKind.AUDIO else None
    for g in state.live_groups():
        for u in g.units:
            state.observations[u] = observe(state.world, u, g.id)
        for m in g.member_ids:
            obs = state.observations[m.index]
            report = MemberReport(m.index, step, obs.position, executor_done(state, m.index), obs)
            router.send(m, g.conductor_id, MsgKind.MEMBER_REPORT, report, step)
        inbound = tuple(e.payload for e in router.drain_inbox(g.conductor_id) if e.kind is MsgKind.MEMBER_REPORT)
        state.inbound[g.conductor] = inbound
        grown = 0
        tokens: set[str] = set()
        for u in g.units:
            obs = state.observations[u]
            grown += state.platform.record_state(u, obs, bundle.describe(obs))
            for pos, toks in obs.annotated:
                state.sightings[pos] = toks
                tokens.update(toks)
            if goal_src is not None:
                for src, level in obs.audio:
                    if src == goal_src:
                        _log_audio(state, (src, round(level, 4), obs.position))
        gained[g.id] = grown
        done = all(executor_done(state, u) for u in g.units)
        text = f"group {g.id}: area +{grown}; sees: {' '.join(sorted(tokens)) or 'none'}"
        router.send(g.conductor_id, MANAGER, MsgKind.STATUS_REPORT, StatusReport(g.conductor, g.id, text, done, grown), step)
        router.send(g.conductor_id, MANAGER, MsgKind.MAP_DELTA, {"group": g.id, "grown": grown, "version": state.map.version}, step)
    router.drain_inbox(MANAGER)
    return gained


def _log_audio(state: SystemState, reading: tuple[str, float, Position]) -> None:
    log = [r for r in state.audio_log if r[2] != reading[2]]
    log.append(reading)
    state.audio_log = log[-state.config.audio_history :]


def update_progress(state: SystemState) -> dict[int, list[str]]:
    """Record newly reached targets; returns the new target ids per unit."""
    out: dict[int, list[str]] = {}
    if state.goal is None:
        return out
    cfg = state.config
    for u in state.units:
        hits = targets_in_reach(state.world, u, state.goal, cfg.goal_threshold, cfg.image_match_fraction)
        new = sorted(h for h in hits if h not in state.found)
        if new:
            targets = goal_targets(state.world, state.goal, cfg.image_match_fraction)
            for tid in new:
                state.found[tid] = targets[tid]
            out[u] = new
    return out


# -- bootstrap and tick ----------------------------------------------------


def bootstrap(
    goal: Goal | None,
    world: WorldState,
    bundle: BackendBundle,
    config: HierarchyConfig = HierarchyConfig(),
    memory: MemoryStore | None = None,
    skills: SkillLibrary | None = None,
    router: Router | None = None,
) -> tuple[SystemState, dict[int, ActionStep]]:
    """Build the initial map from spawn observations, plan, and form the first groups.

    Returns the state and each conductor's first action, computed without
    executing anything.
    """
    if not world.agents:
        raise BudgetError("no agents placed in the world")
    if len(world.agents) > config.budget:
        raise BudgetError(f"{len(world.agents)} agents exceed the budget of {config.budget}")
    if goal is not None:
        validate_goal(goal, world)
    platform = Platform(world)
    state = SystemState(
        world=world,
        platform=platform,
        goal=goal,
        config=config,
        memory=memory if memory is not None else MemoryStore(),
        skills=skills if skills is not None else SkillLibrary(),
        router=router if router is not None else Router(),
    )
    state.router.register(MANAGER)
    for u in state.units:
        obs = observe(world, u)
        state.observations[u] = obs
        platform.record_state(u, obs, bundle.describe(obs))
        for pos, toks in obs.annotated:
            state.sightings[pos] = toks
        if goal is not None and goal.kind is GoalKind.AUDIO:
            for src, level in obs.audio:
                if src == goal.payload:
                    _log_audio(state, (src, round(level, 4), obs.position))
    update_progress(state)
    reorganize(state, bundle)
    preview = state.copy()
    preview.router.log = None
    return state, first_actions(preview, bundle, deploy(preview, bundle))


def first_actions(
    state: SystemState, bundle: BackendBundle, directives: Mapping[int, SubtaskDirective]
) -> dict[int, ActionStep]:
    """Each conductor's decision for the coming round; skill claims mutate ``state``."""
    out: dict[int, ActionStep] = {}
    spent = spent_cells(state)
    for g in state.live_groups():
        skills = group_skills(state, bundle, directives[g.id])
        out[g.conductor], _ = decide(state, bundle, g.conductor, skills, spent)
    return out


def tick(state: SystemState, bundle: BackendBundle) -> SystemState:
    """Run one round on a copy of ``state``; on failure the input state is left as it was."""
    new = state.copy()
    try:
        _run_round(new, bundle)
    except Exception as exc:
        state.errors.append(f"round {state.round + 1}: {type(exc).__name__}: {exc}")
        raise TickAborted(str(exc)) from exc
    return new


def _run_round(state: SystemState, bundle: BackendBundle) -> None:
    r = state.round + 1
    area_before = explored_area(state.map)
    actions: dict[int, list[ActionStep]] = {}
    conductor_actions: dict[int, ActionStep] = {}
    gained: dict[int, int] = {}
    new_found: dict[int, list[str]] = {}
    if state.goal_satisfied():
        for g in state.groups:
            if g.live:
                g.state = GroupState.DONE
    else:
        reorganize(state, bundle)
        directives = deploy(state, bundle)
        spent = spent_cells(state)
        skills = {g.id: group_skills(state, bundle, directives[g.id]) for g in state.live_groups()}
        decisions: dict[int, tuple[ActionStep, str]] = {}
        groups = state.live_groups()
        # conductors decide before members so their choice depends only on the round's inputs
        for g in groups:
            decisions[g.conductor] = decide(state, bundle, g.conductor, skills[g.id], spent)
            conductor_actions[g.conductor] = decisions[g.conductor][0]
        for g in groups:
            for m in g.members:
                decisions[m] = decide(state, bundle, m, skills[g.id], spent)
        for u in sorted(decisions):
            step, source = decisions[u]
            actions[u] = execute(state, u, step, source)
        state.world.clock += 1
        gained = sense(state, bundle)
        new_found = update_progress(state)
        _settle_groups(state, bundle, gained, new_found, r)
    state.round = r
    state.record = {
        "round": r,
        "groups": [g.to_dict() for g in state.groups],
        "queued": len(state.queue),
        "actions": {str(u): [s.to_dict() for s in steps] for u, steps in sorted(actions.items())},
        "conductor_actions": {str(u): s.to_dict() for u, s in sorted(conductor_actions.items())},
        "positions": {str(u): list(state.world.agents[u]) for u in state.units},
        "map_version": state.map.version,
        "manager_map_version": state.map.version if state.config.dynamic_map else 0,
        "metrics_delta": {
            "area": explored_area(state.map),
            "grown": explored_area(state.map) - area_before,
            "found": sorted(t for ts in new_found.values() for t in ts),
            "progress": state.progress(),
        },
    }


def _settle_groups(
    state: SystemState,
    bundle: BackendBundle,
    gained: Mapping[int, int],
    new_found: Mapping[int, list[str]],
    r: int,
) -> None:
    cfg = state.config
    for g in state.live_groups():
        hits = sum(len(new_found.get(u, ())) for u in g.units)
        g.grown += gained.get(g.id, 0)
        g.found += hits
        g.outcomes = g.outcomes + (f"round {r}: area +{gained.get(g.id, 0)}, goal progress +{hits}",)
        reached = g.subgoal.kind is SubGoalKind.SEARCH and any(
            chebyshev(state.world.agents[u], g.subgoal.target) <= cfg.goal_threshold for u in g.units
        )
        if reached or all(executor_done(state, u) for u in g.units):
            g.state = GroupState.DONE
            if reached or g.found or (g.subgoal.kind is SubGoalKind.EXPLORE and g.grown):
                _remember(state, bundle, g, r)
            continue
        if not cfg.auto_organize:
            continue
        critique = bundle.critique_manager(g.subgoal.describe(), "\n".join(g.outcomes))
        if critique.verdict is Verdict.REVISE:
            state.router.send(MANAGER, g.conductor_id, MsgKind.CRITIQUE, critique, r)
            state.router.drain_inbox(g.conductor_id)
            regroup(state, g, critique)


def _remember(state: SystemState, bundle: BackendBundle, g: GroupSpec, r: int) -> None:
    task = state.goal.text() if state.goal is not None else "explore the map"
    obs = state.observations.get(g.conductor)
    descriptor = tuple(tokenize(bundle.describe(obs))) if obs is not None else ()
    store_success(state.memory, task, descriptor, {"subgoals": [g.subgoal.to_dict()]}, created_step=r)


def default_skills(goal: Goal | None) -> SkillLibrary:
    """An approach macro that fires when the goal's tokens come into view."""
    if goal is None:
        return SkillLibrary()
    if goal.kind is GoalKind.IMAGE:
        trigger = tuple(goal.payload)
        name = "approach_image"
    else:
        trigger = (goal.payload,)
        name = f"approach_{goal.payload}"
    body = (ActionStep(ActionKind.MOVE_TO, ("$target",)), ActionStep(ActionKind.SCAN))
    return SkillLibrary([SkillRecord(name, body, f"approach {' '.join(trigger)} when seen", trigger=trigger)])
