"""Identifiers and goal types shared by every layer."""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Any

Position = tuple[int, int]

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")
_NAME_OK = re.compile(r"^[a-z0-9_]+$")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not ``[a-z0-9]``."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def check_name(name: str) -> str:
    """Entity names and ids double as map tokens, so keep them legend-safe."""
    if not _NAME_OK.match(name):
        raise ValueError(f"name {name!r} must match [a-z0-9_]+")
    return name


class Tier(str, Enum):
    MANAGER = "manager"
    CONDUCTOR = "conductor"
    SUBAGENT = "subagent"


@dataclass(frozen=True, order=True)
class AgentId:
    """Role-qualified agent handle.

    Physical agents ("units") keep their ``index`` for the whole run; the tier
    reflects the role the unit currently plays, so a unit promoted to conductor
    after a regroup keeps its index and body.
    """

    tier: Tier
    index: int

    def __str__(self) -> str:
        return f"{self.tier.value}#{self.index}"

    @classmethod
    def parse(cls, text: str) -> AgentId:
        tier, _, index = text.partition("#")
        return cls(Tier(tier), int(index))


MANAGER = AgentId(Tier.MANAGER, 0)


class GoalKind(str, Enum):
    IMAGE = "image"
    OBJECT = "object"
    AUDIO = "audio"


@dataclass(frozen=True)
class Goal:
    """A navigation goal.

    ``payload`` is a feature-token tuple for image goals, an object name for
    object goals and a source entity id for audio goals.
    """

    kind: GoalKind
    payload: Any
    count: int = 1

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("goal count must be >= 1")
        if self.kind is GoalKind.IMAGE:
            tokens = tuple(sorted(set(self.payload)))
            if not tokens:
                raise ValueError("image goal needs at least one feature token")
            for t in tokens:
                check_name(t)
            object.__setattr__(self, "payload", tokens)
        else:
            if not isinstance(self.payload, str) or not self.payload:
                raise ValueError(f"{self.kind.value} goal payload must be a non-empty name")
            check_name(self.payload)

    def text(self) -> str:
        if self.kind is GoalKind.IMAGE:
            what = " ".join(self.payload)
        else:
            what = self.payload
        return f"find {self.kind.value} {what} count {self.count}"

    def to_dict(self) -> dict:
        payload = list(self.payload) if self.kind is GoalKind.IMAGE else self.payload
        return {"kind": self.kind.value, "payload": payload, "count": self.count}

    @classmethod
    def from_dict(cls, data: dict) -> Goal:
        kind = GoalKind(data["kind"])
        payload = data["payload"]
        if kind is GoalKind.IMAGE:
            payload = tuple(payload)
        return cls(kind, payload, int(data.get("count", 1)))
