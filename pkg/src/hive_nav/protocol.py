"""Message and plan vocabulary: subgoals, plans, directives, commands, reports."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from .dynamic_map import MapImage, Region
from .types import Position


class SubGoalKind(str, Enum):
    IMAGE = "image"
    OBJECT = "object"
    AUDIO = "audio"
    EXPLORE = "explore"
    SEARCH = "search"


class PlanSource(str, Enum):
    FRESH = "fresh"
    MEMORY_AUGMENTED = "memory_augmented"


class Verdict(str, Enum):
    ACCEPT = "accept"
    REVISE = "revise"


class ActionKind(str, Enum):
    MOVE_TO = "MoveTo"
    SCAN = "Scan"
    REPORT_MAP = "ReportMap"
    PICK_UP = "PickUp"
    IDLE = "Idle"


def _pos(p: Any) -> Position:
    return (int(p[0]), int(p[1]))


def region_contains(region: Region, p: Position) -> bool:
    x0, y0, x1, y1 = region
    return x0 <= p[0] <= x1 and y0 <= p[1] <= y1


@dataclass(frozen=True)
class SubGoal:
    """One unit of manager-level work.

    ``target`` is the focal cell, ``anchors`` the spread points an explore
    group fans out to, ``region`` the inclusive box the work is confined to.
    """

    id: int
    kind: SubGoalKind
    target: Position
    region: Region
    suggested_strategy: str = ""
    quantity: int = 1
    anchors: tuple[Position, ...] = ()
    payload: Any = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SubGoalKind(self.kind))
        object.__setattr__(self, "target", _pos(self.target))
        object.__setattr__(self, "region", tuple(int(v) for v in self.region))
        object.__setattr__(self, "anchors", tuple(_pos(a) for a in self.anchors))
        if self.quantity < 1:
            raise ValueError("subgoal quantity must be >= 1")
        x0, y0, x1, y1 = self.region
        if x1 < x0 or y1 < y0:
            raise ValueError(f"empty region {self.region}")

    def within(self, width: int, height: int) -> bool:
        x0, y0, x1, y1 = self.region
        return x0 >= 0 and y0 >= 0 and x1 < width and y1 < height

    def describe(self) -> str:
        x0, y0, x1, y1 = self.region
        return (
            f"{self.kind.value} target ({self.target[0]},{self.target[1]}) "
            f"region ({x0},{y0})-({x1},{y1}) quantity {self.quantity}"
        )

    def to_dict(self) -> dict:
        payload = list(self.payload) if isinstance(self.payload, tuple) else self.payload
        return {
            "id": self.id,
            "kind": self.kind.value,
            "target": list(self.target),
            "region": list(self.region),
            "suggested_strategy": self.suggested_strategy,
            "quantity": self.quantity,
            "anchors": [list(a) for a in self.anchors],
            "payload": payload,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SubGoal:
        payload = d.get("payload")
        if isinstance(payload, list):
            payload = tuple(payload)
        return cls(
            id=int(d["id"]),
            kind=SubGoalKind(d["kind"]),
            target=_pos(d["target"]),
            region=tuple(d["region"]),
            suggested_strategy=d.get("suggested_strategy", ""),
            quantity=int(d.get("quantity", 1)),
            anchors=tuple(_pos(a) for a in d.get("anchors", ())),
            payload=payload,
        )


@dataclass(frozen=True)
class Plan:
    subgoals: tuple[SubGoal, ...]
    rationale: str = ""
    source: PlanSource = PlanSource.FRESH

    def __post_init__(self) -> None:
        object.__setattr__(self, "subgoals", tuple(self.subgoals))
        object.__setattr__(self, "source", PlanSource(self.source))

    def to_dict(self) -> dict:
        return {
            "subgoals": [s.to_dict() for s in self.subgoals],
            "rationale": self.rationale,
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Plan:
        return cls(
            tuple(SubGoal.from_dict(s) for s in d["subgoals"]),
            d.get("rationale", ""),
            PlanSource(d.get("source", "fresh")),
        )


@dataclass(frozen=True)
class Critique:
    verdict: Verdict
    reasons: str = ""
    suggested_edits: tuple[SubGoal, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "verdict", Verdict(self.verdict))
        if self.verdict is Verdict.REVISE and not self.reasons.strip():
            raise ValueError("a revise critique needs reasons")

    def to_dict(self) -> dict:
        edits = None if self.suggested_edits is None else [s.to_dict() for s in self.suggested_edits]
        return {"verdict": self.verdict.value, "reasons": self.reasons, "suggested_edits": edits}

    @classmethod
    def from_dict(cls, d: dict) -> Critique:
        edits = d.get("suggested_edits")
        return cls(
            Verdict(d["verdict"]),
            d.get("reasons", ""),
            None if edits is None else tuple(SubGoal.from_dict(s) for s in edits),
        )


@dataclass(frozen=True)
class ActionStep:
    kind: ActionKind
    args: tuple = ()
    skill: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ActionKind(self.kind))
        object.__setattr__(self, "args", tuple(self.args))

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind.value, "args": list(self.args)}
        if self.skill is not None:
            d["skill"] = self.skill
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ActionStep:
        return cls(ActionKind(d["kind"]), tuple(d.get("args", ())), d.get("skill"))

    @staticmethod
    def move_to(p: Position) -> ActionStep:
        return ActionStep(ActionKind.MOVE_TO, (int(p[0]), int(p[1])))


@dataclass(frozen=True)
class SubtaskDirective:
    """Manager-to-conductor task package."""

    subgoal_id: int
    kind: SubGoalKind
    target: Position
    region: Region
    quantity: int
    strategy: str
    anchors: tuple[Position, ...] = ()
    map_excerpt: MapImage | None = None
    context: str = ""

    def to_dict(self) -> dict:
        return {
            "subgoal_id": self.subgoal_id,
            "kind": self.kind.value,
            "target": list(self.target),
            "region": list(self.region),
            "quantity": self.quantity,
            "strategy": self.strategy,
            "anchors": [list(a) for a in self.anchors],
            "map_excerpt": None if self.map_excerpt is None else self.map_excerpt.text(),
            "context": self.context,
        }


@dataclass(frozen=True)
class SubCommand:
    """Flat step list for one executor; ``executed`` counts finished steps."""

    subgoal_id: int
    position: Position
    steps: tuple[ActionStep, ...]
    executed: int = 0

    @property
    def exhausted(self) -> bool:
        return self.executed >= len(self.steps)

    def advance(self) -> SubCommand:
        return replace(self, executed=self.executed + 1)

    def same_work(self, other: SubCommand | None) -> bool:
        return other is not None and (self.subgoal_id, self.position, self.steps) == (
            other.subgoal_id,
            other.position,
            other.steps,
        )

    def to_dict(self) -> dict:
        return {
            "subgoal_id": self.subgoal_id,
            "position": list(self.position),
            "steps": [s.to_dict() for s in self.steps],
            "executed": self.executed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SubCommand:
        return cls(
            int(d["subgoal_id"]),
            _pos(d["position"]),
            tuple(ActionStep.from_dict(s) for s in d["steps"]),
            int(d.get("executed", 0)),
        )


@dataclass(frozen=True)
class MemberReport:
    unit: int
    step: int
    position: Position
    done: bool
    observation: Any = field(default=None, compare=False)


@dataclass(frozen=True)
class StatusReport:
    conductor: int
    group_id: int
    text: str
    done: bool = False
    grown: int = 0
    progress: int = 0
