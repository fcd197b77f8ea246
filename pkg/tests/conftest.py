from __future__ import annotations

import pytest

from hive_nav.harness import TaskFamily, TaskSpec
from hive_nav.types import Goal, GoalKind


@pytest.fixture
def village_goal() -> Goal:
    return Goal(GoalKind.OBJECT, "village", 1)


@pytest.fixture
def small_block_spec() -> TaskSpec:
    return TaskSpec(TaskFamily.BLOCK_SEARCH, n_agents=8, max_iters=20, seeds=(0, 1))


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance verdict; the summary prints one line each."""
    book = request.config.stash.setdefault(_VERDICTS, {})

    def record(number: int, ok: bool, detail: str) -> None:
        book[number] = (ok, detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    book = config.stash.get(_VERDICTS, {})
    if not book:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(book):
        ok, detail = book[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
