"""Message router for the two-layer protocol.

Manager and conductors talk in both directions; a conductor sends its own
group members flat commands; members only report back to their conductor.
Anything else is refused with the rule it breaks.
"""

from __future__ import annotations

import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .mlm.bundle import BackendBundle
from .mlm.scripted import distinct_positions
from .protocol import MemberReport, SubCommand, SubtaskDirective
from .types import MANAGER, AgentId, Tier

SUMMARY_BUDGET = 64


class MsgKind(str, Enum):
    SUBTASK_DIRECTIVE = "SubtaskDirective"
    STATUS_REPORT = "StatusReport"
    SUB_COMMAND = "SubCommand"
    MEMBER_REPORT = "MemberReport"
    CRITIQUE = "Critique"
    MAP_DELTA = "MapDelta"


ROUTING_MATRIX: frozenset[tuple[Tier, Tier, MsgKind]] = frozenset(
    {
        (Tier.MANAGER, Tier.CONDUCTOR, MsgKind.SUBTASK_DIRECTIVE),
        (Tier.MANAGER, Tier.CONDUCTOR, MsgKind.CRITIQUE),
        (Tier.CONDUCTOR, Tier.MANAGER, MsgKind.STATUS_REPORT),
        (Tier.CONDUCTOR, Tier.MANAGER, MsgKind.MAP_DELTA),
        (Tier.CONDUCTOR, Tier.SUBAGENT, MsgKind.SUB_COMMAND),
        (Tier.SUBAGENT, Tier.CONDUCTOR, MsgKind.MEMBER_REPORT),
    }
)


class RouteError(Exception):
    pass


class ForbiddenRoute(RouteError):
    def __init__(self, rule: str, envelope: Envelope) -> None:
        super().__init__(f"{rule}: {envelope.sender} -> {envelope.recipient} {envelope.kind.value}")
        self.rule = rule


class UnknownRecipient(RouteError, KeyError):
    pass


def violated_rule(sender: Tier, recipient: Tier, kind: MsgKind) -> str | None:
    """Name of the protocol rule a (sender, recipient, kind) triple breaks, or None."""
    if (sender, recipient, kind) in ROUTING_MATRIX:
        return None
    if sender is Tier.SUBAGENT and recipient is Tier.SUBAGENT:
        return "sub-agents never message each other"
    if Tier.SUBAGENT in (sender, recipient) and Tier.MANAGER in (sender, recipient):
        return "the manager and sub-agents never talk directly"
    if sender is recipient:
        return f"no {sender.value}-to-{recipient.value} channel"
    return f"{kind.value} is not carried from {sender.value} to {recipient.value}"


def _payload_json(payload: Any) -> Any:
    if hasattr(payload, "to_dict"):
        return payload.to_dict()
    if isinstance(payload, MemberReport):
        return {"unit": payload.unit, "step": payload.step, "position": list(payload.position), "done": payload.done}
    if hasattr(payload, "__dataclass_fields__"):
        out = {}
        for k in payload.__dataclass_fields__:
            v = getattr(payload, k)
            out[k] = list(v) if isinstance(v, tuple) else v
        return out
    return payload


@dataclass(frozen=True)
class Envelope:
    msg_id: int
    sender: AgentId
    recipient: AgentId
    kind: MsgKind
    payload: Any
    round: int

    def to_dict(self) -> dict:
        return {
            "msg_id": self.msg_id,
            "from": str(self.sender),
            "to": str(self.recipient),
            "kind": self.kind.value,
            "round": self.round,
            "payload": _payload_json(self.payload),
        }


@dataclass(frozen=True)
class Delivery:
    msg_id: int
    recipient: AgentId


@dataclass
class Router:
    """Single serialization point; one FIFO inbox per registered agent."""

    inboxes: dict[AgentId, deque] = field(default_factory=dict)
    conductor_of: dict[AgentId, AgentId] = field(default_factory=dict)
    next_msg_id: int = 0
    delivered: Counter = field(default_factory=Counter)
    refused: Counter = field(default_factory=Counter)
    log: list[dict] | None = None
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    def register(self, agent: AgentId) -> None:
        self.inboxes.setdefault(agent, deque())

    def set_roster(self, groups: Mapping[AgentId, Sequence[AgentId]], idle: Iterable[AgentId] = ()) -> None:
        """Replace the known agents with the manager, the given groups and idle units."""
        keep = {MANAGER: self.inboxes.get(MANAGER, deque())}
        self.conductor_of = {}
        for conductor, members in groups.items():
            keep[conductor] = self.inboxes.get(conductor, deque())
            for m in members:
                keep[m] = self.inboxes.get(m, deque())
                self.conductor_of[m] = conductor
        for a in idle:
            keep.setdefault(a, self.inboxes.get(a, deque()))
        self.inboxes = keep

    def route(self, env: Envelope) -> Delivery:
        with self._lock:
            return self._route(env)

    def _route(self, env: Envelope) -> Delivery:
        rule = violated_rule(env.sender.tier, env.recipient.tier, env.kind)
        if rule is None and env.sender.tier is Tier.SUBAGENT and self.conductor_of.get(env.sender) != env.recipient:
            rule = "a sub-agent reports only to its own conductor"
        if rule is None and env.recipient.tier is Tier.SUBAGENT and self.conductor_of.get(env.recipient) != env.sender:
            rule = "a conductor commands only its own members"
        if rule is not None:
            self.refused[rule] += 1
            raise ForbiddenRoute(rule, env)
        if env.recipient not in self.inboxes:
            raise UnknownRecipient(str(env.recipient))
        self.inboxes[env.recipient].append(env)
        self.delivered[(env.sender.tier.value, env.recipient.tier.value, env.kind.value)] += 1
        if self.log is not None:
            self.log.append(env.to_dict())
        return Delivery(env.msg_id, env.recipient)

    def send(self, sender: AgentId, recipient: AgentId, kind: MsgKind, payload: Any, round: int) -> Envelope:
        with self._lock:
            env = Envelope(self.next_msg_id, sender, recipient, MsgKind(kind), payload, round)
            # ids are consumed only by deliveries, so refused sends leave no gaps
            self._route(env)
            self.next_msg_id += 1
            return env

    def drain_inbox(self, agent: AgentId) -> list[Envelope]:
        with self._lock:
            box = self.inboxes.get(agent)
            if not box:
                return []
            out = sorted(box, key=lambda e: e.msg_id)
            box.clear()
            return out

    def pending(self) -> int:
        return sum(len(b) for b in self.inboxes.values())


@dataclass(frozen=True)
class Distribution:
    summary: str
    own: SubCommand
    envelopes: tuple[Envelope, ...]
    positions: tuple[tuple[int, int], ...]


def summarize_and_distribute(
    router: Router,
    conductor: AgentId,
    members: Sequence[AgentId],
    inbound: Sequence[MemberReport],
    directive: SubtaskDirective,
    bundle: BackendBundle,
    round: int,
    current: Mapping[int, SubCommand] | None = None,
) -> Distribution:
    """One shared summary, then one command per executor with distinct target cells.

    The conductor executes too and keeps the first cell; members get the
    rest in index order. An executor whose new command is the same work as
    its current one keeps its progress through the steps.
    """
    if conductor.tier is not Tier.CONDUCTOR:
        raise RouteError(f"{conductor} is not a conductor")
    current = current or {}
    lines = [directive.strategy] + [
        f"unit {r.unit} at ({r.position[0]},{r.position[1]}) {'done' if r.done else 'busy'}"
        for r in sorted(inbound, key=lambda r: r.unit)
    ]
    summary = bundle.summarize(lines, SUMMARY_BUDGET)
    cfg = bundle.config
    executors = [conductor.index] + [m.index for m in members]
    positions = distinct_positions(directive, len(executors), cfg.width, cfg.height)
    commands = []
    for unit, pos in zip(executors, positions):
        cmd = bundle.deploy_subcommand(directive, pos)
        if cmd.same_work(current.get(unit)):
            cmd = current[unit]
        commands.append(cmd)
    envelopes = []
    for member, cmd in zip(members, commands[1:]):
        envelopes.append(router.send(conductor, member, MsgKind.SUB_COMMAND, cmd, round))
    return Distribution(summary, commands[0], tuple(envelopes), tuple(positions))
