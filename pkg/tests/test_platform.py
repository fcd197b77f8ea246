from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hive_nav.platform import (
    InvalidGoal,
    Platform,
    RunInProgress,
    StateRecord,
    StateStore,
    SubmittedBy,
    validate_goal,
)
from hive_nav.types import Goal, GoalKind
from hive_nav.world import GoalPlacement, UnknownAgent, WorldConfig, generate_world, observe


def make_platform(**kw) -> Platform:
    spec = (
        GoalPlacement(GoalKind.OBJECT, "pyramid", position=(10, 10)),
        GoalPlacement(GoalKind.AUDIO, "bell", position=(40, 40), id="bell"),
    )
    world = generate_world(WorldConfig(seed=2, width=64, height=64, goal_spec=spec))
    world.place_agent(0, (8, 8))
    world.place_agent(1, (50, 50))
    return Platform(world, **kw)


def test_submit_object_goal():
    p = make_platform()
    handle = p.submit_goal(Goal(GoalKind.OBJECT, "village"), SubmittedBy.HUMAN_CLI)
    assert handle.run_id == 0 and p.active is handle
    assert handle.intake.submitted_by is SubmittedBy.HUMAN_CLI


def test_unknown_audio_source_rejected():
    p = make_platform()
    with pytest.raises(InvalidGoal):
        p.submit_goal(Goal(GoalKind.AUDIO, "horn"))
    assert p.active is None
    p.submit_goal(Goal(GoalKind.AUDIO, "bell"))


def test_image_goal_tags_round_trip():
    p = make_platform()
    goal = Goal(GoalKind.IMAGE, ("red", "roof", "tall", "tower"))
    handle = p.submit_goal(goal)
    assert handle.intake.goal == goal
    assert set(goal.payload) <= set(handle.intake.tags)


def test_one_active_run():
    p = make_platform()
    p.submit_goal(Goal(GoalKind.OBJECT, "village"))
    with pytest.raises(RunInProgress):
        p.submit_goal(Goal(GoalKind.OBJECT, "village"))
    p.finish_run()
    assert p.submit_goal(Goal(GoalKind.OBJECT, "village")).run_id == 1


def test_bootstrap_hook_runs_on_submit():
    p = make_platform()
    handle = p.submit_goal(Goal(GoalKind.OBJECT, "village"), bootstrap=lambda g: ("booted", g.payload))
    assert handle.state == ("booted", "village")


def test_validate_goal_payloads():
    world = make_platform().world
    validate_goal(Goal(GoalKind.OBJECT, "pyramid"), world)
    validate_goal(Goal(GoalKind.AUDIO, "bell"), world)
    with pytest.raises(InvalidGoal):
        validate_goal(Goal(GoalKind.AUDIO, "pyramid"), world)
    with pytest.raises(ValueError):
        Goal(GoalKind.OBJECT, "Bad Name")


def test_record_state_buffer_and_map():
    p = make_platform()
    o = observe(p.world, 0)
    gained = p.record_state(0, o, "at (8,8)")
    assert len(p.states.history(0)) == 1
    assert gained == len(o.cells())
    assert p.map.explored[(10, 10)].annotations == ("pyramid",)
    with pytest.raises(UnknownAgent):
        p.record_state(9, o, "x")


def test_map_version_only_moves_through_platform():
    p = make_platform()
    v0 = p.map.version
    p.record_state(0, observe(p.world, 0), "x")
    assert p.map.version == v0 + 1
    p.world.clock += 1
    p.record_state(1, observe(p.world, 1), "y")
    assert p.map.version == v0 + 2


def test_ring_capacity():
    store = StateStore(capacity=3)
    for step in range(5):
        store.append(0, StateRecord(step, f"s{step}"))
    assert [r.step for r in store.history(0)] == [2, 3, 4]
    with pytest.raises(ValueError):
        store.append(0, StateRecord(4, "again"))
    with pytest.raises(ValueError):
        StateStore(0)


@given(st.lists(st.integers(0, 3), max_size=60), st.integers(1, 10))
@settings(max_examples=200, deadline=None)
def test_buffers_ordered_and_bounded(agents, capacity):
    store = StateStore(capacity)
    for step, agent in enumerate(agents):
        store.append(agent, StateRecord(step, ""))
    for agent in store.agents():
        steps = [r.step for r in store.history(agent)]
        assert steps == sorted(set(steps)) and len(steps) <= capacity


def test_copy_is_independent():
    p = make_platform()
    q = p.copy(p.world.copy())
    q.record_state(0, observe(q.world, 0), "x")
    assert p.map.version == 0 and p.states.history(0) == ()
