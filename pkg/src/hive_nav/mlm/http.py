"""JSON-over-HTTP client for a live language-model endpoint.

Each planning operation is one POST of ``{role, prompt, schema_hint, inputs}``.
The response body must be a JSON object matching the role's schema; a body
that fails to parse or validate is retried once, then the call errors out.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from string import Template
from typing import Any, Collection, Sequence

import jsonschema

from ..dynamic_map import MapImage
from ..memory import CurriculumLog, PromptContext, SkillRecord, lookup_skill
from ..protocol import ActionKind, ActionStep, Critique, Plan, PlanSource, SubCommand, SubGoal, SubtaskDirective
from ..types import Goal, Position
from ..world import Observation
from .scripted import CommandExhausted, MultimodalInfo, ScriptedBackend, ScriptedConfig

log = logging.getLogger(__name__)

ENDPOINT_ENV = "HIVE_NAV_LLM_URL"

_STEP = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": [k.value for k in ActionKind]},
        "args": {"type": "array", "items": {"type": "integer"}},
    },
}
_XY = {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}
_SUBGOAL = {
    "type": "object",
    "required": ["kind", "target", "region"],
    "properties": {
        "id": {"type": "integer"},
        "kind": {"enum": ["image", "object", "audio", "explore", "search"]},
        "target": _XY,
        "region": {"type": "array", "items": {"type": "integer"}, "minItems": 4, "maxItems": 4},
        "suggested_strategy": {"type": "string"},
        "quantity": {"type": "integer", "minimum": 1},
        "anchors": {"type": "array", "items": _XY},
    },
}
_TEXT = {"type": "object", "required": ["text"], "properties": {"text": {"type": "string"}}}

SCHEMAS: dict[str, dict] = {
    "describer": _TEXT,
    "summarizer": _TEXT,
    "planner": {
        "type": "object",
        "required": ["subgoals"],
        "properties": {
            "subgoals": {"type": "array", "minItems": 1, "maxItems": 8, "items": _SUBGOAL},
            "rationale": {"type": "string"},
        },
    },
    "deployer_subtask": {
        "type": "object",
        "required": ["strategy"],
        "properties": {"strategy": {"type": "string"}},
    },
    "deployer_subcommand": {
        "type": "object",
        "required": ["steps"],
        "properties": {"steps": {"type": "array", "minItems": 1, "items": _STEP}},
    },
    "critic_manager": {
        "type": "object",
        "required": ["verdict"],
        "properties": {"verdict": {"enum": ["accept", "revise"]}, "reasons": {"type": "string"}},
    },
    "actor": {"type": "object", "required": ["step"], "properties": {"step": _STEP}},
    "curriculum": {"type": "object", "required": ["task"], "properties": {"task": {"type": "string"}}},
}
SCHEMAS["critic_conductor"] = SCHEMAS["critic_manager"]


class BackendError(RuntimeError):
    """The endpoint was unreachable or kept returning unusable responses."""


class BadResponse(ValueError):
    pass


def load_prompt(role: str) -> Template:
    text = resources.files(__package__).joinpath("prompts", f"{role}.txt").read_text(encoding="utf-8")
    body = "\n".join(ln for ln in text.splitlines() if not ln.startswith("# version:"))
    return Template(body.lstrip("\n"))


def prompt_version(role: str) -> int:
    first = resources.files(__package__).joinpath("prompts", f"{role}.txt").read_text(encoding="utf-8").splitlines()[0]
    return int(first.split(":", 1)[1])


@dataclass(frozen=True)
class HttpConfig:
    url: str
    timeout: float = 30.0
    max_in_flight: int = 4

    @classmethod
    def from_env(cls, url: str | None = None, **kw: Any) -> HttpConfig:
        url = url or os.environ.get(ENDPOINT_ENV)
        if not url:
            raise BackendError(f"no endpoint given and ${ENDPOINT_ENV} is unset")
        return cls(url, **kw)


class HttpBackend:
    """Same surface as :class:`ScriptedBackend`, answered by a remote model.

    Bookkeeping that has a single correct answer (region pass-through,
    command cursors, skill triggers) stays local; the endpoint supplies the
    judgement calls.
    """

    def __init__(self, http: HttpConfig, world: ScriptedConfig) -> None:
        self.http = http
        self.cfg = world
        self._gate = threading.BoundedSemaphore(http.max_in_flight)
        self._local = ScriptedBackend(world)
        self.requests = 0

    # -- transport -----------------------------------------------------

    def _post(self, body: dict) -> Any:
        data = json.dumps(body, sort_keys=True).encode("utf-8")
        req = urllib.request.Request(self.http.url, data=data, headers={"Content-Type": "application/json"})
        with self._gate:
            self.requests += 1
            try:
                with urllib.request.urlopen(req, timeout=self.http.timeout) as resp:
                    raw = resp.read()
            except (urllib.error.URLError, OSError) as exc:
                raise BackendError(f"endpoint {self.http.url} unreachable: {exc}") from exc
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise BadResponse(f"response is not JSON: {exc}") from exc

    def call(self, role: str, inputs: dict, convert=lambda r: r) -> Any:
        prompt = load_prompt(role).safe_substitute({k: _flat(v) for k, v in inputs.items()})
        body = {"role": role, "prompt": prompt, "schema_hint": SCHEMAS[role], "inputs": inputs}
        last: Exception | None = None
        for attempt in range(2):
            try:
                reply = self._post(body)
                jsonschema.validate(reply, SCHEMAS[role])
                return convert(reply)
            except (BadResponse, jsonschema.ValidationError, ValueError, KeyError, TypeError) as exc:
                last = exc
                log.warning("%s: unusable response on attempt %d: %s", role, attempt + 1, exc)
        raise BackendError(f"{role}: no valid response after retry: {last}")

    def _in_bounds(self, p: Sequence[int]) -> bool:
        return 0 <= p[0] < self.cfg.width and 0 <= p[1] < self.cfg.height

    def _step(self, d: dict) -> ActionStep:
        step = ActionStep.from_dict(d)
        if step.kind is ActionKind.MOVE_TO and (len(step.args) != 2 or not self._in_bounds(step.args)):
            raise BadResponse(f"MoveTo target {step.args} outside the world")
        return step

    # -- operations ----------------------------------------------------

    def describe(self, item: Any) -> str:
        seed = self._local.describe(item)
        text = self.call("describer", {"input": seed}, lambda r: r["text"])
        return " ".join("".join(ch for ch in text if ch.isprintable()).split())

    def summarize(self, texts: Sequence[str], max_tokens: int) -> str:
        notes = "\n".join(texts)
        return self.call("summarizer", {"notes": notes, "max_tokens": max_tokens}, lambda r: r["text"])

    def plan_subgoals(self, goal: Goal | None, image: MapImage, status: str, context: PromptContext | None = None) -> Plan:
        inputs = {
            "goal": goal.text() if goal is not None else "explore as much of the map as possible",
            "width": self.cfg.width,
            "height": self.cfg.height,
            "status": status,
            "map": image.text(),
            "context": context.text() if context is not None else "none",
        }

        def convert(r: dict) -> Plan:
            subgoals = []
            for i, d in enumerate(r["subgoals"]):
                sg = SubGoal.from_dict({**d, "id": i})
                if not sg.within(self.cfg.width, self.cfg.height) or not self._in_bounds(sg.target):
                    raise BadResponse(f"subgoal {i} leaves the world")
                subgoals.append(sg)
            source = PlanSource.MEMORY_AUGMENTED if context is not None and context.retrieved else PlanSource.FRESH
            return Plan(tuple(subgoals), r.get("rationale", ""), source)

        return self.call("planner", inputs, convert)

    def deploy_subtask(self, info: MultimodalInfo, subgoal: SubGoal, strategy: str) -> SubtaskDirective:
        inputs = {"subgoal": subgoal.describe(), "strategy": strategy or subgoal.suggested_strategy, "info": info.text}
        text = self.call("deployer_subtask", inputs, lambda r: r["strategy"])
        base = self._local.deploy_subtask(info, subgoal, strategy)
        return SubtaskDirective(
            base.subgoal_id, base.kind, base.target, base.region, base.quantity, text, base.anchors,
            base.map_excerpt, base.context,
        )

    def deploy_subcommand(self, task: SubtaskDirective, position) -> SubCommand:
        inputs = {
            "task": json.dumps({k: v for k, v in task.to_dict().items() if k != "map_excerpt"}, sort_keys=True),
            "position": [int(position[0]), int(position[1])],
        }
        steps = self.call("deployer_subcommand", inputs, lambda r: tuple(self._step(s) for s in r["steps"]))
        return SubCommand(task.subgoal_id, (int(position[0]), int(position[1])), steps)

    def _critique(self, role: str, subject: Any, outcome: str) -> Critique:
        inputs = {"subject": str(subject), "outcome": outcome}
        return self.call(role, inputs, lambda r: Critique.from_dict(r))

    def critique(self, subject: Any, outcome_report: str) -> Critique:
        return self._critique("critic_manager", subject, outcome_report)

    def critique_conductor(self, subject: Any, outcome_report: str) -> Critique:
        return self._critique("critic_conductor", subject, outcome_report)

    def act(
        self,
        command: SubCommand,
        observation: Observation,
        skills: Sequence[SkillRecord] = (),
        spent: Collection[Position] = frozenset(),
    ) -> ActionStep:
        if command.exhausted:
            raise CommandExhausted(f"command for subgoal {command.subgoal_id} is exhausted")
        default = self._local.act(command, observation, skills, spent)
        if default.skill is not None:
            return default
        inputs = {
            "command": json.dumps(command.to_dict(), sort_keys=True),
            "next_step": default.to_dict(),
            "observation": self._local.describe(observation),
        }
        return self.call("actor", inputs, lambda r: self._step(r["step"]))

    def propose_next_task(self, log_: CurriculumLog, image: MapImage | None = None) -> str:
        done = sorted(log_.succeeded())
        inputs = {"log": "\n".join(done) or "none", "map": self._local.describe(image) if image is not None else "none"}
        return self.call("curriculum", inputs, lambda r: r["task"])

    def lookup_skills(self, library, query_tokens, k: int) -> list[SkillRecord]:
        return lookup_skill(library, query_tokens, k)


def _flat(v: Any) -> str:
    if isinstance(v, str):
        return v
    return json.dumps(v, sort_keys=True)
