from __future__ import annotations

import itertools
import json
import sys
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hive_nav.comms import (
    ROUTING_MATRIX,
    ForbiddenRoute,
    MsgKind,
    RouteError,
    Router,
    UnknownRecipient,
    summarize_and_distribute,
    violated_rule,
)
from hive_nav.mlm import BackendBundle, ScriptedConfig
from hive_nav.protocol import MemberReport, SubGoalKind, SubtaskDirective
from hive_nav.types import MANAGER, AgentId, Tier

ALLOWED = {
    (Tier.MANAGER, Tier.CONDUCTOR): {MsgKind.SUBTASK_DIRECTIVE, MsgKind.CRITIQUE},
    (Tier.CONDUCTOR, Tier.MANAGER): {MsgKind.STATUS_REPORT, MsgKind.MAP_DELTA},
    (Tier.CONDUCTOR, Tier.SUBAGENT): {MsgKind.SUB_COMMAND},
    (Tier.SUBAGENT, Tier.CONDUCTOR): {MsgKind.MEMBER_REPORT},
}

C0, C1 = AgentId(Tier.CONDUCTOR, 0), AgentId(Tier.CONDUCTOR, 1)
S2, S3, S4 = AgentId(Tier.SUBAGENT, 2), AgentId(Tier.SUBAGENT, 3), AgentId(Tier.SUBAGENT, 4)


def router() -> Router:
    r = Router()
    r.set_roster({C0: [S2, S3], C1: [S4]})
    return r


def agent_of(tier: Tier) -> tuple[AgentId, AgentId]:
    """A (sender, recipient) pair of the tier that share a group where that matters."""
    return {Tier.MANAGER: MANAGER, Tier.CONDUCTOR: C0, Tier.SUBAGENT: S2}[tier]


def test_matrix_exhaustive():
    assert len(list(itertools.product(Tier, Tier, MsgKind))) == 54
    for src, dst, kind in itertools.product(Tier, Tier, MsgKind):
        allowed = kind in ALLOWED.get((src, dst), set())
        assert ((src, dst, kind) in ROUTING_MATRIX) == allowed
        assert (violated_rule(src, dst, kind) is None) == allowed
        r = router()
        sender = agent_of(src)
        recipient = agent_of(dst)
        if sender == recipient:
            recipient = {Tier.MANAGER: MANAGER, Tier.CONDUCTOR: C1, Tier.SUBAGENT: S3}[dst]
        if allowed:
            env = r.send(sender, recipient, kind, {}, 0)
            assert r.drain_inbox(recipient) == [env]
        else:
            with pytest.raises(ForbiddenRoute) as err:
                r.send(sender, recipient, kind, {}, 0)
            assert err.value.rule
            assert r.pending() == 0


def test_routing_examples():
    r = router()
    with pytest.raises(ForbiddenRoute, match="sub-agents never message each other"):
        r.send(S2, S3, MsgKind.MEMBER_REPORT, {}, 0)
    r.send(C0, S2, MsgKind.SUB_COMMAND, {}, 0)
    r.send(MANAGER, C0, MsgKind.SUBTASK_DIRECTIVE, {}, 0)
    r.send(C0, MANAGER, MsgKind.STATUS_REPORT, {}, 0)
    assert len(r.drain_inbox(C0)) == 1 and len(r.drain_inbox(MANAGER)) == 1


def test_group_membership_enforced():
    r = router()
    with pytest.raises(ForbiddenRoute, match="its own members"):
        r.send(C1, S2, MsgKind.SUB_COMMAND, {}, 0)
    with pytest.raises(ForbiddenRoute, match="its own conductor"):
        r.send(S4, C0, MsgKind.MEMBER_REPORT, {}, 0)
    with pytest.raises(ForbiddenRoute):
        r.send(C0, C1, MsgKind.STATUS_REPORT, {}, 0)


def test_unknown_recipient():
    r = router()
    with pytest.raises(UnknownRecipient):
        r.send(MANAGER, AgentId(Tier.CONDUCTOR, 7), MsgKind.CRITIQUE, {}, 0)


def test_refused_sends_consume_no_id():
    r = router()
    with pytest.raises(RouteError):
        r.send(S2, S3, MsgKind.MEMBER_REPORT, {}, 0)
    assert r.send(C0, S2, MsgKind.SUB_COMMAND, {}, 0).msg_id == 0


def test_drain_examples():
    r = router()
    assert r.drain_inbox(C0) == []
    a = r.send(S2, C0, MsgKind.MEMBER_REPORT, {"n": 1}, 0)
    b = r.send(S2, C0, MsgKind.MEMBER_REPORT, {"n": 2}, 0)
    assert r.drain_inbox(C0) == [a, b]
    assert r.drain_inbox(C0) == []


@given(st.lists(st.sampled_from([(S2, C0), (S3, C0), (MANAGER, C0)]), max_size=40))
@settings(max_examples=200, deadline=None)
def test_interleaved_senders_sorted_by_id(sends):
    r = router()
    sent = []
    for i, (src, dst) in enumerate(sends):
        kind = MsgKind.MEMBER_REPORT if src.tier is Tier.SUBAGENT else MsgKind.CRITIQUE
        sent.append(r.send(src, dst, kind, {"i": i}, 0))
    got = r.drain_inbox(C0)
    assert [e.msg_id for e in got] == sorted(e.msg_id for e in sent)
    for src in (S2, S3, MANAGER):
        assert [e for e in got if e.sender == src] == [e for e in sent if e.sender == src]


def test_concurrent_senders_conserve_messages():
    old = sys.getswitchinterval()
    sys.setswitchinterval(1e-6)
    r = router()
    r.log = []

    def worker(src):
        for _ in range(300):
            r.send(src, C0, MsgKind.MEMBER_REPORT, {}, 0)

    threads = [threading.Thread(target=worker, args=(s,)) for s in (S2, S3, S2, S3)]
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        sys.setswitchinterval(old)
    got = r.drain_inbox(C0)
    assert len(got) == 1200 == len({e.msg_id for e in got})
    assert [e.msg_id for e in got] == list(range(1200))


def test_envelope_serializes():
    r = router()
    r.log = []
    r.send(S2, C0, MsgKind.MEMBER_REPORT, MemberReport(2, 1, (3, 4), False), 1)
    line = json.dumps(r.log[0], sort_keys=True)
    assert json.loads(line)["payload"] == {"unit": 2, "step": 1, "position": [3, 4], "done": False}
    assert json.loads(line)["from"] == str(S2)


def directive(region=(0, 0, 20, 20)):
    return SubtaskDirective(0, SubGoalKind.EXPLORE, (10, 10), region, 1, "sweep", ((2, 2), (18, 18)))


BUNDLE = BackendBundle.scripted(ScriptedConfig(64, 64))


def test_distribute_three_members():
    r = Router()
    members = [AgentId(Tier.SUBAGENT, i) for i in (1, 2, 3)]
    r.set_roster({C0: members})
    out = summarize_and_distribute(r, C0, members, [], directive(), BUNDLE, 4)
    assert len(out.envelopes) == 3
    assert all(e.round == 4 and e.kind is MsgKind.SUB_COMMAND for e in out.envelopes)
    targets = [out.own.position] + [e.payload.position for e in out.envelopes]
    assert len(set(targets)) == 4


def test_distribute_one_member_and_none():
    r = Router()
    r.set_roster({C0: [S2]})
    assert len(summarize_and_distribute(r, C0, [S2], [], directive(), BUNDLE, 0).envelopes) == 1
    r.set_roster({C0: []})
    solo = summarize_and_distribute(r, C0, [], [], directive(), BUNDLE, 0)
    assert solo.envelopes == () and solo.own.position == solo.positions[0]


def test_distribute_keeps_cursor_for_same_work():
    r = Router()
    r.set_roster({C0: [S2]})
    first = summarize_and_distribute(r, C0, [S2], [], directive(), BUNDLE, 0)
    advanced = first.envelopes[0].payload.advance()
    again = summarize_and_distribute(r, C0, [S2], [], directive(), BUNDLE, 1, {S2.index: advanced})
    assert again.envelopes[0].payload.executed == 1


def test_distribute_summary_reflects_reports():
    r = Router()
    r.set_roster({C0: [S2]})
    reports = [MemberReport(2, 0, (5, 6), True)]
    out = summarize_and_distribute(r, C0, [S2], reports, directive(), BUNDLE, 0)
    assert "unit 2 at (5,6) done" in out.summary


def test_distribute_requires_conductor():
    with pytest.raises(RouteError):
        summarize_and_distribute(Router(), S2, [], [], directive(), BUNDLE, 0)


@given(st.integers(0, 7), st.integers(0, 50), st.integers(0, 50), st.integers(3, 13), st.integers(3, 13))
@settings(max_examples=1000, deadline=None)
def test_distribution_distinct(n_members, x0, y0, w, h):
    region = (x0, y0, x0 + w - 1, y0 + h - 1)
    members = [AgentId(Tier.SUBAGENT, i + 1) for i in range(n_members)]
    r = Router()
    r.set_roster({C0: members})
    d = SubtaskDirective(0, SubGoalKind.SEARCH, (x0 + w // 2, y0 + h // 2), region, 1, "s")
    out = summarize_and_distribute(r, C0, members, [], d, BUNDLE, 0)
    assert len(set(out.positions)) == n_members + 1
