import random

import pytest
from hypothesis import given, strategies as st

from awima.core import SERVER_ID, Address, AddrKind, CLIENT_VPN_BASE, sp_id
from awima.crypto import KeyRegistry
from awima.handoff import (BeaconWatch, DrainMode, HandoffError, HandoffPlan, Initiator, PlanState, ResidualQueue,
                           complete, drain_residual, execute_handoff, preauthenticate, request_handoff, sp_withdraw)
from awima.handshake import MissingSession, SessionState
from awima.nodes import Beacon, admit_client, associate
from awima.policy import UtilityWeights
from awima.tunnel import Tunnel, TunnelState

from helpers import make_client, make_sp, server_session

W = UtilityWeights()


def _beacon(sp, good=0.5):
    return Beacon(sp.id, good, 100_000.0, 0.05, 600.0, 0, sp.position)


@pytest.fixture
def world():
    sp1, sp2, sp3 = make_sp(0), make_sp(1, (60, 0)), make_sp(2, (60, 20))
    c = make_client(position=(40, 0))
    c.tunnel = Tunnel(c.id, Address(AddrKind.CLIENT_VPN, CLIENT_VPN_BASE), KeyRegistry().keygen(random.Random(1)))
    admit_client(sp1, c.id, c.needs, 0, W)
    associate(c, sp1)
    return c, sp1, sp2, sp3


def _plan(c, sp1, sp2, sp3, mode=DrainMode.VIA_SERVER):
    cands = [(_beacon(sp1), 0.9), (_beacon(sp2), 0.5), (_beacon(sp3, 0.4), 0.5)]
    return request_handoff(Initiator.CLIENT, c, cands, server_session(c.id), W, 2_500_000.0, 10, drain_mode=mode)


def test_full_handoff_walks_every_state(world):
    c, sp1, sp2, sp3 = world
    plan = _plan(*world)
    assert plan.to_sp == sp2.id and plan.from_sp == sp1.id
    session, msgs = preauthenticate(plan, sp2, server_session(c.id), server_session(sp2.id), KeyRegistry(),
                                    random.Random(0), 20)
    assert session.joins(c.id, sp2.id) and len(msgs) == 3
    addr = execute_handoff(plan, c, sp1, sp2, 30, True, W)
    assert addr is not None and c.association == sp2.id and c.consistent()
    rq = ResidualQueue(sp1.id, deadline=5_000_030)
    rq.downlink.extend(["p1", "p2"])
    step = drain_residual(plan, rq, 40, direct_ok=False)
    assert step.forwarded == ("p1", "p2") and step.route is DrainMode.VIA_SERVER
    assert complete(plan, c, 50)
    assert [s for s, _ in plan.history] == [PlanState.REQUESTED, PlanState.PREAUTHED, PlanState.EXECUTING,
                                            PlanState.DRAINING, PlanState.COMPLETE]
    with pytest.raises(HandoffError):
        plan.advance(PlanState.DRAINING, 60)


def test_execute_requires_preauth(world):
    c, sp1, sp2, _ = world
    plan = _plan(*world)
    with pytest.raises(HandoffError):
        execute_handoff(plan, c, sp1, sp2, 30, True, W)


def test_preauth_against_unregistered_target_aborts(world):
    c, _, sp2, _ = world
    plan = _plan(*world)
    sp2.registered = False
    assert preauthenticate(plan, sp2, server_session(c.id), server_session(sp2.id), KeyRegistry(),
                           random.Random(0), 20) == (None, [])
    assert plan.state is PlanState.ABORTED and plan.reason == "TargetInvalid"


def test_out_of_range_execution_keeps_old_path(world):
    c, sp1, sp2, _ = world
    plan = _plan(*world)
    preauthenticate(plan, sp2, server_session(c.id), server_session(sp2.id), KeyRegistry(), random.Random(0), 20)
    assert execute_handoff(plan, c, sp1, sp2, 30, False, W) is None
    assert plan.state is PlanState.ABORTED
    assert c.association == sp1.id and c.tunnel.state is TunnelState.UP
    # with the old SP gone the tunnel drops to rebinding instead
    plan2 = _plan(*world)
    preauthenticate(plan2, sp2, server_session(c.id), server_session(sp2.id), KeyRegistry(), random.Random(0), 20)
    execute_handoff(plan2, c, sp1, sp2, 30, False, W, sp1_available=False)
    assert c.tunnel.state is TunnelState.REBINDING


def test_no_candidate_aborts(world):
    c, sp1, _, _ = world
    plan = request_handoff(Initiator.SERVER, c, [(_beacon(sp1), 1.0)], server_session(c.id), W, 1.0, 0)
    assert plan.state is PlanState.ABORTED and plan.reason == "NoProvider"
    closed = server_session(c.id)
    closed.state = SessionState.CLOSED
    with pytest.raises(MissingSession):
        request_handoff(Initiator.CLIENT, c, [], closed, W, 1.0, 0)


def test_direct_drain_and_deadline(world):
    c, sp1, sp2, sp3 = world
    plan = _plan(c, sp1, sp2, sp3, DrainMode.DIRECT_LINK)
    preauthenticate(plan, sp2, server_session(c.id), server_session(sp2.id), KeyRegistry(), random.Random(0), 20)
    execute_handoff(plan, c, sp1, sp2, 30, True, W)
    rq = ResidualQueue(sp1.id, deadline=100)
    rq.uplink.append("u")
    assert drain_residual(plan, rq, 40, direct_ok=True).route is DrainMode.DIRECT_LINK
    rq.downlink.append("d")
    assert drain_residual(plan, rq, 50, direct_ok=False).route is DrainMode.VIA_SERVER
    rq.downlink.append("late")
    late = drain_residual(plan, rq, 100, direct_ok=True)
    assert late.dropped == ("late",) and late.finished and late.route is None


def test_withdraw_sets_clients_rebinding(world):
    c, sp1, _, _ = world
    w = sp_withdraw(sp1, [c], 5)
    assert w.clients == (c.id,) and not sp1.registered
    assert c.tunnel.state is TunnelState.REBINDING


@given(st.lists(st.integers(0, 10_000_000), min_size=1, max_size=20))
def test_beacon_watch(times):
    watch = BeaconWatch(interval_us=1_000_000)
    for t in times:
        watch.heard(sp_id(0), t)
    last = max(times)
    assert not watch.vanished(sp_id(0), last + 3_000_000)
    assert watch.vanished(sp_id(0), last + 3_000_001)
    assert not watch.vanished(sp_id(1), 10**12)


@given(st.lists(st.sampled_from(list(PlanState)), max_size=8))
def test_plan_states_only_move_forward(moves):
    plan = HandoffPlan(make_client().id, sp_id(0), sp_id(1), Initiator.SP)
    for i, new in enumerate(moves):
        before = plan.state
        try:
            plan.advance(new, i)
        except HandoffError:
            assert plan.terminal or (new is not PlanState.ABORTED and new <= before)
            assert plan.state is before
        else:
            assert new is PlanState.ABORTED or new > before
