"""Multi-modal key-value memory, skill library and curriculum log.

Keys are (task text, observation descriptor) token bags; values are plans
that were executed successfully. Retrieval is exhaustive cosine scoring with
ties broken toward older entries.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .protocol import ActionStep
from .types import tokenize

DEFAULT_K = 5


class EmptyPlan(ValueError):
    pass


def _bag(tokens: Iterable[str] | str) -> Counter:
    if isinstance(tokens, str):
        return Counter(tokenize(tokens))
    bag: Counter = Counter()
    for t in tokens:
        bag.update(tokenize(t))
    return bag


def _cosine_parts(ca: Counter, cb: Counter) -> tuple[int, int]:
    """``(dot, |a|^2 * |b|^2)``; the cosine is ``dot / sqrt(second)``."""
    if not ca or not cb:
        return 0, 1
    if len(ca) > len(cb):
        ca, cb = cb, ca
    dot = sum(n * cb[t] for t, n in ca.items() if t in cb)
    na = sum(n * n for n in ca.values())
    nb = sum(n * n for n in cb.values())
    return dot, na * nb


def rank_key(ca: Counter, cb: Counter) -> Fraction:
    """Exact squared cosine, so mathematically equal scores tie exactly."""
    dot, norms = _cosine_parts(ca, cb)
    return Fraction(dot * dot, norms)


def similarity(a: Iterable[str] | str, b: Iterable[str] | str) -> float:
    """Cosine similarity of lowercase alphanumeric token counts, in ``[0, 1]``."""
    ca, cb = (a if isinstance(a, Counter) else _bag(a)), (b if isinstance(b, Counter) else _bag(b))
    dot, norms = _cosine_parts(ca, cb)
    if dot == 0:
        return 0.0
    return min(1.0, dot / math.sqrt(norms))


@dataclass(frozen=True)
class MemoryEntry:
    id: int
    task_text: str
    obs_descriptor: tuple[str, ...]
    plan: Any
    created_step: int = 0
    outcome: str = "success"

    def key_tokens(self) -> list[str]:
        return [self.task_text, *self.obs_descriptor]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "task_text": self.task_text,
            "obs_descriptor": list(self.obs_descriptor),
            "plan": self.plan,
            "created_step": self.created_step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MemoryEntry:
        return cls(
            int(d["id"]),
            d["task_text"],
            tuple(d["obs_descriptor"]),
            d["plan"],
            int(d.get("created_step", 0)),
        )


@dataclass(frozen=True)
class RetrievalScore:
    entry_id: int
    score: float


class MemoryStore:
    """Append-only store; optionally mirrored to a JSONL file."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._entries: list[MemoryEntry] = []
        self._bags: list[Counter] = []

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[MemoryEntry, ...]:
        return tuple(self._entries)

    @property
    def version(self) -> int:
        return len(self._entries)

    def append(self, entry: MemoryEntry) -> None:
        if self._entries and entry.id <= self._entries[-1].id:
            raise ValueError("memory ids must strictly increase")
        self._entries.append(entry)
        self._bags.append(_bag(entry.key_tokens()))
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")

    def next_id(self) -> int:
        return self._entries[-1].id + 1 if self._entries else 0

    def scored(self, query: Counter) -> list[tuple[MemoryEntry, RetrievalScore, Fraction]]:
        return [
            (e, RetrievalScore(e.id, similarity(query, bag)), rank_key(query, bag))
            for e, bag in zip(self._entries, self._bags)
        ]

    def copy(self) -> MemoryStore:
        out = MemoryStore()
        out.path = self.path
        out._entries = list(self._entries)
        out._bags = list(self._bags)
        return out

    @classmethod
    def load(cls, path: str | Path) -> MemoryStore:
        store = cls()
        p = Path(path)
        if p.exists():
            for line in p.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    store.append(MemoryEntry.from_dict(json.loads(line)))
        store.path = p
        return store


def store_success(
    store: MemoryStore,
    task_text: str,
    obs_descriptor: Sequence[str],
    plan: Any,
    created_step: int = 0,
) -> int:
    if not plan or (isinstance(plan, dict) and not plan.get("subgoals", True)):
        raise EmptyPlan("only non-empty successful plans are stored")
    entry = MemoryEntry(store.next_id(), task_text, tuple(obs_descriptor), plan, created_step)
    store.append(entry)
    return entry.id


def retrieve_topk(
    store: MemoryStore,
    query_text: Iterable[str] | str,
    query_visual: Any = None,
    k: int = DEFAULT_K,
    describer: Callable[[Any], Sequence[str]] | None = None,
) -> list[tuple[MemoryEntry, RetrievalScore]]:
    """Top-``k`` entries by similarity to ``query_text`` plus the described visual query."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []
    query = _bag(query_text)
    if query_visual is not None:
        if describer is None:
            raise ValueError("a visual query needs a describer")
        query.update(_bag(describer(query_visual)))
    ranked = sorted(store.scored(query), key=lambda es: (-es[2], es[0].id))
    return [(e, score) for e, score, _ in ranked[:k]]


@dataclass(frozen=True)
class PromptContext:
    instruction: str
    retrieved: tuple[tuple[MemoryEntry, RetrievalScore], ...] = ()

    def text(self) -> str:
        lines = [f"instruction: {self.instruction}"]
        for rank, (entry, score) in enumerate(self.retrieved, start=1):
            plan = json.dumps(entry.plan, sort_keys=True, separators=(",", ":"))
            lines.append(
                f"memory[{rank}] score={score.score:.4f} id={entry.id} "
                f"task: {entry.task_text} | obs: {' '.join(entry.obs_descriptor)} | plan: {plan}"
            )
        return "\n".join(lines) + "\n"


def augment_plan_context(
    retrieved: Sequence[tuple[MemoryEntry, RetrievalScore]], instruction: str
) -> PromptContext:
    return PromptContext(instruction, tuple(retrieved))


@dataclass(frozen=True)
class SkillRecord:
    """A named action macro; ``$target`` in a step's args is bound at expansion."""

    name: str
    body: tuple[ActionStep, ...]
    description: str = ""
    parameters: tuple[str, ...] = ("target",)
    trigger: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "body", tuple(self.body))
        if not self.body:
            raise ValueError(f"skill {self.name!r} has an empty body")

    def expand(self, **bindings: Any) -> tuple[ActionStep, ...]:
        out = []
        for step in self.body:
            args: list = []
            for a in step.args:
                if isinstance(a, str) and a.startswith("$"):
                    value = bindings[a[1:]]
                    args.extend(value if isinstance(value, tuple) else (value,))
                else:
                    args.append(a)
            out.append(ActionStep(step.kind, tuple(args), skill=self.name))
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "parameters": list(self.parameters),
            "body": [s.to_dict() for s in self.body],
            "description": self.description,
            "trigger": list(self.trigger),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SkillRecord:
        return cls(
            name=d["name"],
            body=tuple(ActionStep.from_dict(s) for s in d["body"]),
            description=d.get("description", ""),
            parameters=tuple(d.get("parameters", ("target",))),
            trigger=tuple(d.get("trigger", ())),
        )


class SkillLibrary:
    def __init__(self, skills: Iterable[SkillRecord] = ()) -> None:
        self._skills: list[SkillRecord] = []
        for s in skills:
            self.add(s)

    def __len__(self) -> int:
        return len(self._skills)

    def __iter__(self):
        return iter(self._skills)

    def add(self, skill: SkillRecord) -> None:
        if any(s.name == skill.name for s in self._skills):
            raise ValueError(f"duplicate skill name {skill.name!r}")
        self._skills.append(skill)

    def to_json(self) -> str:
        return json.dumps([s.to_dict() for s in self._skills], indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> SkillLibrary:
        return cls(SkillRecord.from_dict(d) for d in json.loads(text))


def lookup_skill(library: SkillLibrary, query_tokens: Iterable[str] | str, k: int) -> list[SkillRecord]:
    """Skills ranked by description similarity; ties go to the earlier skill."""
    if k < 0:
        raise ValueError("k must be >= 0")
    query = _bag(query_tokens)
    scored = [(rank_key(query, _bag([s.description, s.name])), i, s) for i, s in enumerate(library)]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [s for _, _, s in scored[:k]]


@dataclass(frozen=True)
class Episode:
    proposed_task: str
    result: str
    summary_text: str


def count_tokens(text: str) -> int:
    return len(text.split())


def truncate_tokens(text: str, limit: int) -> str:
    return " ".join(text.split()[: max(0, limit)])


@dataclass(frozen=True)
class CurriculumLog:
    episodes: tuple[Episode, ...] = ()
    token_budget: int = 512
    head_summary: str | None = None
    folded: int = 0
    folded_successes: tuple[str, ...] = ()

    def total_tokens(self) -> int:
        head = count_tokens(self.head_summary) if self.head_summary else 0
        return head + sum(count_tokens(e.summary_text) for e in self.episodes)

    def append(self, episode: Episode) -> CurriculumLog:
        return replace(self, episodes=self.episodes + (episode,))

    def succeeded(self) -> set[str]:
        return set(self.folded_successes) | {
            e.proposed_task for e in self.episodes if e.result == "success"
        }


def default_summarize(texts: Sequence[str], max_tokens: int) -> str:
    return truncate_tokens(" ".join(t for t in texts if t), max_tokens)


def compact_log(
    log: CurriculumLog,
    summarize: Callable[[Sequence[str], int], str] = default_summarize,
) -> CurriculumLog:
    """Fold the oldest episodes into one head summary until the log fits its budget."""
    if log.total_tokens() <= log.token_budget:
        return log
    # keep the longest suffix that fits on its own; the head gets what is left
    kept: list[Episode] = []
    used = 0
    for ep in reversed(log.episodes):
        n = count_tokens(ep.summary_text)
        if used + n > log.token_budget:
            break
        kept.append(ep)
        used += n
    kept.reverse()
    folded = log.episodes[: len(log.episodes) - len(kept)]
    room = log.token_budget - used
    texts = ([log.head_summary] if log.head_summary else []) + [e.summary_text for e in folded]
    head = truncate_tokens(summarize(texts, room), room)
    wins = tuple(e.proposed_task for e in folded if e.result == "success")
    return CurriculumLog(
        tuple(kept), log.token_budget, head, log.folded + len(folded), log.folded_successes + wins
    )
