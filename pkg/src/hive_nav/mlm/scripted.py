"""Deterministic heuristic backend.

Every method is a pure function of its inputs and the config, so runs built
on it replay byte for byte. The planner reads only the rendered map and the
status text, the same material an LLM backend receives.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any, Collection, Sequence

import numpy as np

from ..dynamic_map import MapImage, Region, frontier_mask
from ..memory import CurriculumLog, PromptContext, SkillRecord, default_summarize
from ..protocol import (
    ActionKind,
    ActionStep,
    Critique,
    Plan,
    PlanSource,
    SubCommand,
    SubGoal,
    SubGoalKind,
    SubtaskDirective,
    Verdict,
    region_contains,
)
from ..types import Goal, GoalKind, Position
from ..world import Observation, image_matches
from .status import StatusView, parse_status

MAX_SUBGOALS = 8
CURRICULUM_LADDER = (
    "explore 100 cells",
    "find any object goal",
    "find 3 blocks",
    "composite search",
)
FREE_EXPLORE = "free explore"
FAINT, CLEAR = 0.33, 0.66

_AREA = re.compile(r"area \+(\d+)")
_PROGRESS = re.compile(r"goal progress \+(\d+)")


class CommandExhausted(Exception):
    """The command has no steps left; the executor's subtask is complete."""


def intensity_band(level: float) -> str:
    if level < FAINT:
        return "faint"
    if level < CLEAR:
        return "clear"
    return "loud"


@dataclass(frozen=True)
class ScriptedConfig:
    width: int
    height: int
    sensing_radius: int = 16
    area_quota: int = 16
    max_subgoals: int = MAX_SUBGOALS
    stall_window: int = 3
    goal_threshold: int = 3
    image_match_fraction: float = 0.75
    perceptible_radius_audio: float = 48.0
    seed: int = 0


@dataclass(frozen=True)
class MultimodalInfo:
    """What the manager hands its deployer: status text plus the map image."""

    text: str
    image: MapImage


def _clamp(v: float, lo: int, hi: int) -> int:
    return int(min(hi, max(lo, round(v))))


def _box(center: Position, radius: int, width: int, height: int) -> Region:
    x, y = center
    return (max(0, x - radius), max(0, y - radius), min(width - 1, x + radius), min(height - 1, y + radius))


def _d2(a: Position, b: tuple[float, float]) -> float:
    return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2


def goal_matches_tokens(goal: Goal, tokens: Sequence[str], fraction: float) -> bool:
    if goal.kind is GoalKind.IMAGE:
        return image_matches(tuple(tokens), goal.payload, fraction)
    return goal.payload in tokens


class ScriptedBackend:
    def __init__(self, config: ScriptedConfig) -> None:
        self.cfg = config

    # -- Describer -----------------------------------------------------

    def describe(self, item: Any) -> str:
        if isinstance(item, Observation):
            x, y = item.position
            seen = sorted(item.visible_tokens())
            heard = [f"{src}:{intensity_band(level)}" for src, level in item.audio]
            return (
                f"at ({x},{y}); sees: {' '.join(seen) if seen else 'none'}; "
                f"hears: {' '.join(heard) if heard else 'none'}"
            )
        if isinstance(item, MapImage):
            explored = int(item.explored_mask().sum())
            toks = sorted({t for toks in item.landmarks().values() for t in toks})
            return f"map {item.width}x{item.height}; explored {explored}; sees: {' '.join(toks) if toks else 'none'}"
        if isinstance(item, Goal):
            return item.text()
        if isinstance(item, str):
            return item
        toks = sorted(set(item))
        return f"sees: {' '.join(toks) if toks else 'none'}"

    def summarize(self, texts: Sequence[str], max_tokens: int) -> str:
        return default_summarize(texts, max_tokens)

    # -- Planner -------------------------------------------------------

    def plan_subgoals(self, goal: Goal | None, image: MapImage, status: str, context: PromptContext | None = None) -> Plan:
        cfg = self.cfg
        view = parse_status(status)
        cap = min(cfg.max_subgoals, MAX_SUBGOALS)
        blank = image.is_blank() or not image.rows
        mask = image.explored_mask() if not blank else np.zeros((cfg.height, cfg.width), dtype=bool)
        landmarks = image.landmarks() if not blank else {}
        ref = self._reference(view, mask)
        active_targets = {t for _, t, _ in view.active}
        active_search = sum(1 for kind, _, _ in view.active if kind == SubGoalKind.SEARCH.value)

        subgoals: list[SubGoal] = []
        if goal is None:
            needed = cap
        else:
            needed = max(0, goal.count - view.progress - active_search)
            engaged = set(view.engaged)
            seen: dict[Position, str] = {}
            for pos, toks in landmarks.items():
                if goal_matches_tokens(goal, toks, cfg.image_match_fraction):
                    seen[pos] = " ".join(toks)
            grouped: dict[Position, list[str]] = {}
            for tok, pos in view.sightings:
                grouped.setdefault(pos, []).append(tok)
            for pos, toks in grouped.items():
                if pos not in seen and goal_matches_tokens(goal, toks, cfg.image_match_fraction):
                    seen[pos] = " ".join(sorted(toks))
            sightings = sorted(
                (p for p in seen if p not in engaged and p not in active_targets),
                key=lambda p: (_d2(p, ref), p[1], p[0]),
            )
            for p in sightings[: min(cap, needed)]:
                subgoals.append(
                    SubGoal(
                        id=0,
                        kind=SubGoalKind.SEARCH,
                        target=p,
                        region=_box(p, cfg.goal_threshold, cfg.width, cfg.height),
                        suggested_strategy=f"converge on {seen[p]} at ({p[0]},{p[1]})",
                        quantity=1,
                        payload=goal.payload,
                    )
                )
            if goal.kind is GoalKind.AUDIO and not sightings and needed > 0 and len(subgoals) < cap:
                est = self._audio_estimate(goal, view, mask if not blank else None, active_targets)
                if est is not None:
                    subgoals.append(est)

        slots = cap - len(subgoals)
        if needed > len(subgoals) and slots > 0:
            if blank:
                subgoals.extend(self._radial(view, ref, slots))
            else:
                subgoals.extend(self._frontier(mask, view, ref, slots))

        rationale = "frontier sweep" if subgoals else "empty-world"
        if not subgoals:
            subgoals.append(self._fallback())
        source = PlanSource.FRESH
        if context is not None and any(s.score > 0 for _, s in context.retrieved):
            source = PlanSource.MEMORY_AUGMENTED
            top = context.retrieved[0][0]
            rationale += f"; recalled memory {top.id}"
        out = tuple(
            SubGoal(i, s.kind, s.target, s.region, s.suggested_strategy, s.quantity, s.anchors, s.payload)
            for i, s in enumerate(subgoals[:MAX_SUBGOALS])
        )
        return Plan(out, rationale, source)

    def _reference(self, view: StatusView, mask: np.ndarray) -> tuple[float, float]:
        pts = view.idle_positions() or view.all_positions()
        if pts:
            return (sum(p[0] for p in pts) / len(pts), sum(p[1] for p in pts) / len(pts))
        if mask.any():
            ys, xs = np.nonzero(mask)
            return (float(xs.mean()), float(ys.mean()))
        return ((self.cfg.width - 1) / 2, (self.cfg.height - 1) / 2)

    def _fallback(self) -> SubGoal:
        cfg = self.cfg
        r = max(1, cfg.sensing_radius)
        target = (min(cfg.width - 1, r), min(cfg.height - 1, r))
        return SubGoal(
            0,
            SubGoalKind.EXPLORE,
            target,
            (0, 0, min(cfg.width - 1, 2 * r), min(cfg.height - 1, 2 * r)),
            "empty-world: sweep the origin region",
            anchors=(target,),
        )

    def _frontier(self, mask: np.ndarray, view: StatusView, ref: tuple[float, float], slots: int) -> list[SubGoal]:
        cfg = self.cfg
        fys, fxs = np.nonzero(frontier_mask(mask))
        if len(fxs) == 0:
            return []
        busy = [a for _, t, anchors in view.active for a in (anchors or (t,))]
        if busy:
            keep = np.ones(len(fxs), dtype=bool)
            reach = (2 * cfg.sensing_radius) ** 2
            for bx, by in busy:
                keep &= (fxs - bx) ** 2 + (fys - by) ** 2 > reach
            if keep.any():
                fxs, fys = fxs[keep], fys[keep]
        ys, xs = np.nonzero(mask)
        cx, cy = float(xs.mean()), float(ys.mean())
        k = max(1, min(slots, math.ceil(len(fxs) / cfg.area_quota)))
        angles = np.arctan2(fys - cy, fxs - cx)
        order = np.lexsort((fxs, fys, angles))
        push = cfg.sensing_radius

        def pushed(i: int) -> Position:
            x, y = float(fxs[i]), float(fys[i])
            vx, vy = x - cx, y - cy
            n = math.hypot(vx, vy)
            if n > 0:
                x, y = x + vx / n * push, y + vy / n * push
            return (_clamp(x, 0, cfg.width - 1), _clamp(y, 0, cfg.height - 1))

        out = []
        for chunk in np.array_split(order, k):
            if len(chunk) == 0:
                continue
            target = pushed(int(chunk[len(chunk) // 2]))
            picks = np.unique(np.round(np.linspace(0, len(chunk) - 1, min(MAX_SUBGOALS, len(chunk)))).astype(int))
            anchors: list[Position] = []
            for j in picks:
                a = pushed(int(chunk[j]))
                if a not in anchors:
                    anchors.append(a)
            cxs = np.concatenate([fxs[chunk], [a[0] for a in anchors]])
            cys = np.concatenate([fys[chunk], [a[1] for a in anchors]])
            region = (int(cxs.min()), int(cys.min()), int(cxs.max()), int(cys.max()))
            out.append(
                SubGoal(
                    0,
                    SubGoalKind.EXPLORE,
                    target,
                    region,
                    f"sweep {len(chunk)} frontier cells beyond ({target[0]},{target[1]})",
                    anchors=tuple(anchors),
                )
            )
        out.sort(key=lambda s: (_d2(s.target, ref), s.target[1], s.target[0]))
        return out

    def _radial(self, view: StatusView, ref: tuple[float, float], slots: int) -> list[SubGoal]:
        # no map: fan out around the reported units, blind to what is explored
        cfg = self.cfg
        pts = view.all_positions()
        if not pts:
            return []
        cx = sum(p[0] for p in pts) / len(pts)
        cy = sum(p[1] for p in pts) / len(pts)
        spread = max(math.hypot(p[0] - cx, p[1] - cy) for p in pts)
        r = spread + 2 * cfg.sensing_radius
        k = max(1, min(slots, len(pts)))
        busy = [t for _, t, _ in view.active]
        out = []
        for j in range(k):
            theta = 2 * math.pi * j / k
            a = (_clamp(cx + r * math.cos(theta), 0, cfg.width - 1), _clamp(cy + r * math.sin(theta), 0, cfg.height - 1))
            if any(math.dist(a, b) <= cfg.sensing_radius for b in busy):
                continue
            out.append(
                SubGoal(
                    0,
                    SubGoalKind.EXPLORE,
                    a,
                    _box(a, cfg.sensing_radius, cfg.width, cfg.height),
                    f"head out to ({a[0]},{a[1]})",
                    anchors=(a,),
                )
            )
        out.sort(key=lambda s: (_d2(s.target, ref), s.target[1], s.target[0]))
        return out

    def _audio_estimate(
        self, goal: Goal, view: StatusView, mask: np.ndarray | None, busy: set[Position]
    ) -> SubGoal | None:
        cfg = self.cfg
        readings = [(lvl, pos) for src, lvl, pos in view.audio if src == goal.payload]
        if not readings:
            return None
        R = cfg.perceptible_radius_audio
        lvl, (bx, by) = max(readings, key=lambda r: (r[0], -r[1][1], -r[1][0]))
        reach = int(math.ceil(R * (1 - lvl))) + 2
        x0, y0, x1, y1 = _box((bx, by), reach, cfg.width, cfg.height)
        ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        resid = np.zeros(xs.shape)
        worst = np.zeros(xs.shape)
        for level, (lx, ly) in readings:
            err = np.hypot(xs - lx, ys - ly) - R * (1 - level)
            resid += err * err
            worst = np.maximum(worst, np.abs(err))
        ok = worst <= 1.5
        if mask is not None:
            unexplored = ~mask[y0 : y1 + 1, x0 : x1 + 1]
            if (ok & unexplored).any():
                ok &= unexplored
        if not ok.any():
            ok = resid <= resid.min()
        score = np.where(ok, resid, np.inf)
        iy, ix = np.unravel_index(int(np.argmin(score)), score.shape)
        target = (int(xs[iy, ix]), int(ys[iy, ix]))
        if target in busy:
            return None
        cys, cxs = np.nonzero(ok)
        region = (
            int(x0 + cxs.min()), int(y0 + cys.min()), int(x0 + cxs.max()), int(y0 + cys.max())
        )
        region = (
            min(region[0], target[0]), min(region[1], target[1]),
            max(region[2], target[0]), max(region[3], target[1]),
        )
        return SubGoal(
            0,
            SubGoalKind.SEARCH,
            target,
            region,
            f"follow the sound of {goal.payload} toward ({target[0]},{target[1]})",
            payload=goal.payload,
            anchors=(target,),
        )

    # -- Deployer ------------------------------------------------------

    def deploy_subtask(self, info: MultimodalInfo, subgoal: SubGoal, strategy: str) -> SubtaskDirective:
        excerpt = info.image.excerpt(subgoal.region) if info.image.rows else None
        return SubtaskDirective(
            subgoal_id=subgoal.id,
            kind=subgoal.kind,
            target=subgoal.target,
            region=subgoal.region,
            quantity=subgoal.quantity,
            strategy=strategy or subgoal.suggested_strategy,
            anchors=subgoal.anchors,
            map_excerpt=excerpt,
            context=info.text,
        )

    def deploy_subcommand(self, task: SubtaskDirective, position: Position) -> SubCommand:
        steps = (
            ActionStep.move_to(position),
            ActionStep(ActionKind.SCAN),
            ActionStep(ActionKind.REPORT_MAP),
        )
        return SubCommand(task.subgoal_id, (int(position[0]), int(position[1])), steps)

    # -- Critic --------------------------------------------------------

    def critique(self, subject: Any, outcome_report: str) -> Critique:
        lines = [ln for ln in outcome_report.splitlines() if ln.strip()]
        window = self.cfg.stall_window
        if len(lines) < window:
            return Critique(Verdict.ACCEPT, "insufficient history")
        for ln in lines[-window:]:
            area = _AREA.search(ln)
            prog = _PROGRESS.search(ln)
            grown = int(area.group(1)) if area else 0
            progress = int(prog.group(1)) if prog else (1 if "goal found" in ln else 0)
            if grown or progress:
                return Critique(Verdict.ACCEPT, "making progress")
        return Critique(Verdict.REVISE, f"stalled: no map growth or goal progress for {window} rounds")

    def critique_conductor(self, subject: Any, outcome_report: str) -> Critique:
        return self.critique(subject, outcome_report)

    # -- Actor ---------------------------------------------------------

    def act(
        self,
        command: SubCommand,
        observation: Observation,
        skills: Sequence[SkillRecord] = (),
        spent: Collection[Position] = frozenset(),
    ) -> ActionStep:
        """Next step of ``command``, unless a skill's trigger is in view.

        ``spent`` cells (already claimed or reached) never trigger a skill.
        """
        if command.exhausted:
            raise CommandExhausted(f"command for subgoal {command.subgoal_id} is exhausted")
        for skill in skills:
            pos = skill_target(skill, observation, spent)
            if pos is not None:
                return skill.expand(target=pos)[0]
        return command.steps[command.executed]

    # -- Curriculum ----------------------------------------------------

    def propose_next_task(self, log: CurriculumLog, image: MapImage | None = None) -> str:
        done = log.succeeded()
        for task in CURRICULUM_LADDER:
            if task not in done:
                return task
        return FREE_EXPLORE

    # -- Skill ---------------------------------------------------------

    def lookup_skills(self, library, query_tokens, k: int) -> list[SkillRecord]:
        from ..memory import lookup_skill

        return lookup_skill(library, query_tokens, k)


def skill_target(skill: SkillRecord, observation: Observation, spent: Collection[Position] = frozenset()) -> Position | None:
    """Nearest visible cell whose tokens include all of the skill's trigger tokens."""
    if not skill.trigger:
        return None
    need = set(skill.trigger)
    here = observation.position
    hits = [pos for pos, toks in observation.annotated if pos not in spent and need <= set(toks)]
    if not hits:
        return None
    return min(hits, key=lambda p: (max(abs(p[0] - here[0]), abs(p[1] - here[1])), p[1], p[0]))


def distinct_positions(directive: SubtaskDirective, n: int, width: int, height: int) -> list[Position]:
    """``n`` pairwise-distinct cells inside the directive's region, anchors first."""
    if n <= 0:
        return []
    x0, y0, x1, y1 = directive.region
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(width - 1, x1), min(height - 1, y1)
    cells = (x1 - x0 + 1) * (y1 - y0 + 1)
    if cells < n:
        raise ValueError(f"region {directive.region} too small for {n} distinct positions")
    inside = lambda p: x0 <= p[0] <= x1 and y0 <= p[1] <= y1  # noqa: E731
    anchors = [a for a in directive.anchors if inside(a)]
    candidates: list[Position] = []
    if directive.kind is SubGoalKind.SEARCH and inside(directive.target):
        candidates.append(directive.target)
        tx, ty = directive.target
        for r in range(1, max(x1 - x0, y1 - y0) + 1):
            ring = [
                (tx + dx, ty + dy)
                for dy in range(-r, r + 1)
                for dx in range(-r, r + 1)
                if max(abs(dx), abs(dy)) == r and inside((tx + dx, ty + dy))
            ]
            candidates.extend(sorted(ring, key=lambda p: (p[1], p[0])))
            if len(candidates) >= n:
                break
    else:
        if anchors:
            if n == 1:
                candidates.append(directive.target if inside(directive.target) else anchors[len(anchors) // 2])
            elif n <= len(anchors):
                idx = sorted({round(i * (len(anchors) - 1) / (n - 1)) for i in range(n)})
                candidates.extend(anchors[i] for i in idx)
            candidates.extend(anchors)
        if inside(directive.target):
            candidates.append(directive.target)
        step = max(1, int(math.sqrt(cells / n)))
        candidates.extend((x, y) for y in range(y0, y1 + 1, step) for x in range(x0, x1 + 1, step))
    out: list[Position] = []
    seen: set[Position] = set()
    for p in candidates:
        if p not in seen:
            seen.add(p)
            out.append(p)
            if len(out) == n:
                return out
    for y in range(y0, y1 + 1):
        for x in range(x0, x1 + 1):
            if (x, y) not in seen:
                seen.add((x, y))
                out.append((x, y))
                if len(out) == n:
                    return out
    return out


def inside_directive(directive: SubtaskDirective, p: Position) -> bool:
    return region_contains(directive.region, p)
