"""The backend bundle: every planning role bound to one backend, with call counts."""

from __future__ import annotations

from collections import Counter
from enum import Enum
from typing import Any, Collection, Sequence

from ..dynamic_map import MapImage
from ..memory import CurriculumLog, PromptContext, SkillRecord
from ..protocol import ActionStep, Critique, Plan, SubCommand, SubGoal, SubtaskDirective
from ..types import Goal, Position
from ..world import Observation
from .http import HttpBackend, HttpConfig
from .scripted import MultimodalInfo, ScriptedBackend, ScriptedConfig

MANAGER_ROLES = ("planner", "describer", "critic_manager", "deployer")
CONDUCTOR_ROLES = ("actor", "curriculum", "critic_conductor", "skill_resolver", "conductor_deployer")


class BackendKind(str, Enum):
    SCRIPTED = "scripted"
    HTTP = "http"


class BackendBundle:
    """Manager roles (planner, describer, critic, deployer) and conductor roles
    (actor, curriculum, critic, skill, deployer) served by a single backend."""

    def __init__(self, backend: ScriptedBackend | HttpBackend, kind: BackendKind) -> None:
        self.backend = backend
        self.kind = BackendKind(kind)
        self.calls: Counter = Counter()

    @property
    def config(self) -> ScriptedConfig:
        return self.backend.cfg

    @classmethod
    def scripted(cls, config: ScriptedConfig) -> BackendBundle:
        return cls(ScriptedBackend(config), BackendKind.SCRIPTED)

    @classmethod
    def http(cls, http: HttpConfig, config: ScriptedConfig) -> BackendBundle:
        return cls(HttpBackend(http, config), BackendKind.HTTP)

    def describe(self, item: Any) -> str:
        self.calls["describer"] += 1
        return self.backend.describe(item)

    def summarize(self, texts: Sequence[str], max_tokens: int) -> str:
        self.calls["describer"] += 1
        return self.backend.summarize(texts, max_tokens)

    def plan(self, goal: Goal | None, image: MapImage, status: str, context: PromptContext | None = None) -> Plan:
        self.calls["planner"] += 1
        return self.backend.plan_subgoals(goal, image, status, context)

    def deploy_subtask(self, info: MultimodalInfo, subgoal: SubGoal, strategy: str) -> SubtaskDirective:
        self.calls["deployer"] += 1
        return self.backend.deploy_subtask(info, subgoal, strategy)

    def deploy_subcommand(self, task: SubtaskDirective, position: Position) -> SubCommand:
        self.calls["conductor_deployer"] += 1
        return self.backend.deploy_subcommand(task, position)

    def critique_manager(self, subject: Any, outcome: str) -> Critique:
        self.calls["critic_manager"] += 1
        return self.backend.critique(subject, outcome)

    def critique_conductor(self, subject: Any, outcome: str) -> Critique:
        self.calls["critic_conductor"] += 1
        return self.backend.critique_conductor(subject, outcome)

    def act(
        self,
        command: SubCommand,
        observation: Observation,
        skills: Sequence[SkillRecord] = (),
        spent: Collection[Position] = frozenset(),
    ) -> ActionStep:
        self.calls["actor"] += 1
        return self.backend.act(command, observation, skills, spent)

    def propose_next_task(self, log: CurriculumLog, image: MapImage | None = None) -> str:
        self.calls["curriculum"] += 1
        return self.backend.propose_next_task(log, image)

    def lookup_skills(self, library, query_tokens, k: int) -> list[SkillRecord]:
        self.calls["skill_resolver"] += 1
        return self.backend.lookup_skills(library, query_tokens, k)
