import random

import pytest
from hypothesis import given, settings, strategies as st

from awima.core import (ADHOC_DHCP_BASE, CLIENT_VPN_BASE, AddrKind, Address, FlowId, InnerPacket, client_id,
                        internet_address, sp_id, sp_public_address)
from awima.crypto import Envelope, Keyring, AuthFailure
from awima.handshake import SessionKind, run_handshake
from awima.tunnel import (NAT_PORT_FIRST, NAT_PORT_LAST, AddressViolation, Datagram, NatExhausted, NatTable,
                          NoMapping, RecordKind, SecurityAlert, TunnelExists, TunnelPacket, TunnelServer,
                          client_open, decapsulate, encapsulate, nat_inbound, nat_outbound, open_tunnel,
                          server_forward, server_return)

from conftest import make_cast, with_sp_session


def _env():
    return Envelope(0, 1, b"x", b"\0" * 8)


def _outer(host_value, port):
    return TunnelPacket(Address(AddrKind.ADHOC_DHCP, host_value, port), Address.of(0xCB007201, 1194), _env())


def test_ten_thousand_mappings_stay_bijective():
    nat = NatTable(sp_id(0), sp_public_address(0))
    rng = random.Random(5)
    seen = {}
    for i in range(10_000):
        host, port = ADHOC_DHCP_BASE + 2 + rng.randrange(400), rng.randrange(1, 65536)
        out, created = nat_outbound(nat, _outer(host, port), now=i)
        assert created == ((host, port) not in seen)
        assert seen.setdefault((host, port), out.outer_src.port) == out.outer_src.port
        assert NAT_PORT_FIRST <= out.outer_src.port <= NAT_PORT_LAST
    assert nat.is_bijective()
    assert len(nat.forward) == len(seen)
    assert len(set(seen.values())) == len(seen)


@settings(max_examples=200)
@given(st.integers(2, 0xFFFD), st.integers(0, 0xFFFF), st.integers(0, 0xFFFF))
def test_inbound_undoes_outbound(host, port, dst_port):
    nat = NatTable(sp_id(1), sp_public_address(1))
    tp = TunnelPacket(Address(AddrKind.ADHOC_DHCP, ADHOC_DHCP_BASE + host, port),
                      Address.of(0xCB007201, dst_port), _env())
    out, _ = nat_outbound(nat, tp, now=0)
    assert out.outer_src.kind is AddrKind.SP_PUBLIC
    reply = TunnelPacket(out.outer_dst, out.outer_src, tp.inner)
    back = nat_inbound(nat, reply)
    assert back.outer_dst == tp.outer_src
    assert back.outer_src == tp.outer_dst


def test_nat_rejects_unknown_and_foreign_traffic():
    nat = NatTable(sp_id(0), sp_public_address(0))
    with pytest.raises(NoMapping):
        nat_inbound(nat, TunnelPacket(Address.of(0xCB007201, 1194), sp_public_address(0).with_port(50000), _env()))
    with pytest.raises(AddressViolation):
        nat_outbound(nat, TunnelPacket(sp_public_address(2), sp_public_address(0), _env()), 0)


def test_nat_idle_eviction_and_exhaustion():
    nat = NatTable(sp_id(0), sp_public_address(0), idle_us=10, first_port=50000, last_port=50001)
    nat_outbound(nat, _outer(ADHOC_DHCP_BASE + 2, 1), 0)
    nat_outbound(nat, _outer(ADHOC_DHCP_BASE + 3, 1), 5)
    with pytest.raises(NatExhausted):
        nat_outbound(nat, _outer(ADHOC_DHCP_BASE + 4, 1), 6)
    assert len(nat.evict_idle(now=12)) == 1
    nat_outbound(nat, _outer(ADHOC_DHCP_BASE + 4, 1), 12)
    assert nat.is_bijective()


@pytest.fixture
def tunnel_setup():
    cast = with_sp_session(make_cast(4))
    run = run_handshake(SessionKind.CLIENT_SERVER, cast.client, cast.server, cast.rng, relay_sp=cast.sp.node)
    x_cs = run.active_sessions[0]
    server = TunnelServer(cast.server.registry)
    t = open_tunnel(server, cast.client.node, x_cs, cast.rng)
    return cast, server, t, x_cs


def _uplink(t, seq=0):
    return InnerPacket(t.vpn_addr.with_port(4000), internet_address(1, 80), FlowId(t.client, 0), seq, b"hi")


def test_tunnel_round_trip_and_address_persistence(tunnel_setup):
    cast, server, t, x_cs = tunnel_setup
    assert t.vpn_addr.kind is AddrKind.CLIENT_VPN
    with pytest.raises(TunnelExists):
        open_tunnel(server, cast.client.node, x_cs, cast.rng)
    for dhcp in (ADHOC_DHCP_BASE + 2, ADHOC_DHCP_BASE + 9):
        tp = encapsulate(t, Address(AddrKind.ADHOC_DHCP, dhcp, 1194), _uplink(t))
        assert decapsulate(server, tp) == _uplink(t)
    d = server_forward(server, _uplink(t, 3))
    assert d.src.kind is AddrKind.SERVER_PUBLIC
    t.path = sp_public_address(0).with_port(50000)
    down = server_return(server, Datagram(d.dst, d.src, 3, b"reply"))
    kind, body = client_open(t, down)
    assert kind is RecordKind.DATA


def test_sp_cannot_open_tunnel_records(tunnel_setup):
    cast, server, t, _ = tunnel_setup
    tp = encapsulate(t, Address(AddrKind.ADHOC_DHCP, ADHOC_DHCP_BASE + 2, 1194), _uplink(t))
    sp_ring = Keyring(cast.sp.node, cast.server.registry)
    with pytest.raises(AuthFailure):
        sp_ring.open(tp.inner)
    assert not any(a.ok for a in cast.server.registry.attempts if a.node == cast.sp.node)


def test_spoofed_inner_source_is_refused(tunnel_setup):
    _, server, t, _ = tunnel_setup
    other = Address(AddrKind.CLIENT_VPN, CLIENT_VPN_BASE + 77, 4000)
    p = InnerPacket(other, internet_address(1, 80), FlowId(client_id(0), 0), 0, b"")
    with pytest.raises(AddressViolation):
        encapsulate(t, Address(AddrKind.ADHOC_DHCP, ADHOC_DHCP_BASE + 2, 1194), p)


def test_tampered_record_raises_security_alert(tunnel_setup):
    _, server, t, _ = tunnel_setup
    tp = encapsulate(t, Address(AddrKind.ADHOC_DHCP, ADHOC_DHCP_BASE + 2, 1194), _uplink(t))
    raw = bytearray(tp.encode())
    raw[-1] ^= 0x40
    with pytest.raises(SecurityAlert):
        decapsulate(server, TunnelPacket.decode(bytes(raw)))
