"""Information platform: goal intake, per-agent state buffers, and the shared map.

The platform is the only writer of the global map; everything that grows
the map goes through :meth:`Platform.record_state`.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

from .dynamic_map import DynamicMap, ReportEntry
from .types import Goal, GoalKind, check_name, tokenize
from .world import Observation, UnknownAgent, WorldState

DEFAULT_CAPACITY = 256


class InvalidGoal(ValueError):
    pass


class RunInProgress(RuntimeError):
    pass


class SubmittedBy(str, Enum):
    HUMAN_CLI = "human_cli"
    CONFIG_FILE = "config_file"


@dataclass(frozen=True)
class GoalIntake:
    goal: Goal
    submitted_by: SubmittedBy
    submitted_at: int
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class StateRecord:
    step: int
    text: str
    observation: Observation | None = field(default=None, compare=False)


class StateStore:
    """Per-agent ring buffers of described observations, ordered by step."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buffers: dict[int, deque[StateRecord]] = {}

    def append(self, agent: int, record: StateRecord) -> None:
        buf = self._buffers.setdefault(agent, deque(maxlen=self.capacity))
        if buf and record.step <= buf[-1].step:
            raise ValueError(f"agent {agent}: step {record.step} does not follow {buf[-1].step}")
        buf.append(record)

    def history(self, agent: int) -> tuple[StateRecord, ...]:
        return tuple(self._buffers.get(agent, ()))

    def latest(self, agent: int) -> StateRecord | None:
        buf = self._buffers.get(agent)
        return buf[-1] if buf else None

    def agents(self) -> list[int]:
        return sorted(self._buffers)

    def copy(self) -> StateStore:
        out = StateStore(self.capacity)
        out._buffers = {a: deque(b, maxlen=self.capacity) for a, b in self._buffers.items()}
        return out


@dataclass
class RunHandle:
    run_id: int
    intake: GoalIntake
    state: Any = None


def validate_goal(goal: Goal, world: WorldState) -> None:
    if goal.count < 1:
        raise InvalidGoal("goal count must be >= 1")
    if goal.kind is GoalKind.AUDIO:
        sources = {e.id for e in world.entities if e.kind is GoalKind.AUDIO}
        if goal.payload not in sources:
            raise InvalidGoal(f"unknown audio source {goal.payload!r}")
    elif goal.kind is GoalKind.IMAGE:
        if not goal.payload:
            raise InvalidGoal("image goal needs at least one feature token")
        for tok in goal.payload:
            check_name(tok)
    else:
        check_name(goal.payload)


class Platform:
    def __init__(self, world: WorldState, capacity: int = DEFAULT_CAPACITY) -> None:
        self.world = world
        self.map = DynamicMap(bounds=(world.width, world.height))
        self.states = StateStore(capacity)
        self.active: RunHandle | None = None
        self._runs = 0

    def submit_goal(
        self,
        goal: Goal,
        submitted_by: SubmittedBy = SubmittedBy.CONFIG_FILE,
        bootstrap: Callable[[Goal], Any] | None = None,
        describer: Callable[[Any], str] | None = None,
    ) -> RunHandle:
        if self.active is not None:
            raise RunInProgress(f"run {self.active.run_id} is still active")
        try:
            validate_goal(goal, self.world)
        except ValueError as exc:
            raise InvalidGoal(str(exc)) from exc
        text = describer(goal) if describer is not None else goal.text()
        intake = GoalIntake(goal, SubmittedBy(submitted_by), self.world.clock, tuple(tokenize(text)))
        handle = RunHandle(self._runs, intake)
        self._runs += 1
        self.active = handle
        if bootstrap is not None:
            handle.state = bootstrap(goal)
        return handle

    def finish_run(self) -> None:
        self.active = None

    def record_state(self, agent: int, observation: Observation, described_text: str) -> int:
        """Buffer the observation and merge its cells into the map; returns cells gained."""
        if agent not in self.world.agents:
            raise UnknownAgent(agent)
        self.states.append(agent, StateRecord(observation.step, described_text, observation))
        report = ReportEntry(agent, observation.step, observation.cells())
        return self.map.merge(report)

    def copy(self, world: WorldState) -> Platform:
        out = Platform.__new__(Platform)
        out.world = world
        out.map = self.map.copy()
        out.states = self.states.copy()
        out.active = self.active
        out._runs = self._runs
        return out
