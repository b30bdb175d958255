import pytest
from hypothesis import given, settings, strategies as st

from awima.core import ADHOC_DHCP_BASE, SERVER_ID, AddrKind, QosPromise, client_id, sp_id
from awima.handshake import Rejected, SessionKind
from awima.nodes import (Beacon, NoProvider, ServerState, admit_client, assign_dhcp, associate, client_discover,
                         close_session, disassociate, emit_beacon, link_quality, open_lightweight, release,
                         report_neighborhood, reserve_standby, settle_record, sp_register, update_graph)
from awima.policy import RevenuePolicy, UtilityWeights

from helpers import make_client, make_sp, server_session

W = UtilityWeights()


def _req(bw=20_000.0):
    return QosPromise(bw, 600.0, 0.05)


def test_registration_needs_session_and_credentials():
    sp = make_sp(registered=False)
    server = ServerState(SERVER_ID, credentials={sp.id: b"x"})
    with pytest.raises(Rejected):
        sp_register(sp, server)
    server.sessions[sp.id] = server_session(sp.id)
    assert sp_register(sp, server) and sp.registered
    assert emit_beacon(sp, 0) is not None


def test_admission_reasons():
    assert admit_client(make_sp(registered=False), client_id(0), _req(), 0, W).reason == "unregistered"
    assert admit_client(make_sp(manual=False), client_id(0), _req(), 0, W).reason == "manual deny"
    sp = make_sp()
    assert admit_client(sp, client_id(0), _req(sp.capacity + 1), 0, W).reason == "capacity"
    sp = make_sp()
    sp.energy = 10.0
    assert admit_client(sp, client_id(0), _req(), 0, W).reason == "energy"
    sp = make_sp()
    d = admit_client(sp, client_id(0), _req(), 0, W)
    assert d.admit and client_id(0) in sp.admitted
    assert admit_client(sp, client_id(0), _req(), 5, W).reason == "already admitted"


@settings(max_examples=25)
@given(st.lists(st.tuples(st.sampled_from(["join", "leave"]), st.integers(0, 30)), max_size=120))
def test_dhcp_addresses_stay_unique(ops):
    sp = make_sp()
    sp.provisioned_fraction = 1.0
    for op, i in ops:
        c = client_id(i)
        if op == "join":
            if admit_client(sp, c, _req(1000.0), 0, W).admit:
                addr = assign_dhcp(sp, c)
                assert addr.kind is AddrKind.ADHOC_DHCP
        else:
            release(sp, c)
        values = [a.value for a in sp.dhcp.values()]
        assert len(values) == len(set(values))
        assert set(sp.dhcp) <= set(sp.admitted)


def test_association_is_exclusive():
    sp0, sp1, c = make_sp(0), make_sp(1, (50, 0)), make_client()
    for sp in (sp0, sp1):
        admit_client(sp, c.id, _req(), 0, W)
    open_lightweight(c, sp1)
    associate(c, sp0)
    assert c.consistent() and c.lightweight == {sp1.id}
    disassociate(c, sp0)
    associate(c, sp1)
    assert c.association == sp1.id and sp1.id not in c.lightweight and c.consistent()
    with pytest.raises(Rejected):
        assign_dhcp(sp0, client_id(9))


def test_lightweight_slots_are_bounded():
    sp = make_sp(lightweight_slots=2)
    reserve_standby(sp, client_id(0))
    reserve_standby(sp, client_id(1))
    reserve_standby(sp, client_id(1))
    with pytest.raises(Rejected):
        reserve_standby(sp, client_id(2))


def test_link_quality_proxy():
    assert link_quality((0, 0), (0, 0), 70) == 1.0
    assert link_quality((0, 0), (35, 0), 70) == 0.5
    assert link_quality((0, 0), (80, 0), 70) == 0.0


def _beacon(i, at=0, pos=(0.0, 0.0), goodness=0.5, bw=100_000.0):
    return Beacon(sp_id(i), goodness, bw, 0.05, 600.0, at, pos)


def test_discovery_ranks_fresh_in_range_beacons():
    c = make_client(position=(10, 0))
    heard = [_beacon(0, pos=(0, 0)), _beacon(1, pos=(60, 0)), _beacon(2, pos=(500, 0)),
             _beacon(3, at=-5_000_000, pos=(5, 0))]
    ranked = client_discover(c, heard, 0, W, 2_500_000.0)
    assert [b.sp for b, _ in ranked] == [sp_id(0), sp_id(1)]
    with pytest.raises(NoProvider):
        client_discover(c, heard, 0, W, 2_500_000.0, exclude=[sp_id(0), sp_id(1)])


def test_graph_ignores_unauthenticated_reporters():
    server = ServerState(SERVER_ID)
    rep = report_neighborhood(client_id(0), (0, 0), [_beacon(0)], 0, 70)
    assert update_graph(server, rep) is None
    server.sessions[client_id(0)] = server_session(client_id(0))
    g = update_graph(server, rep)
    assert (client_id(0), sp_id(0)) in g.edges


def test_settlement_conserves_revenue():
    sp = make_sp()
    server = ServerState(SERVER_ID)
    admit_client(sp, client_id(0), _req(), 0, W)
    sp.admitted[client_id(0)].bytes_carried = 20_000 * 10
    r = close_session(sp, client_id(0), 10_000_000, "end")
    g, split = settle_record(server, r, RevenuePolicy())
    assert r.revenue_milli == 500
    assert sum(split.parts()) == split.total == 500
    assert g.value == 0.75  # session scored 1.0 against a prior of 0.5
