import pytest
from hypothesis import given, strategies as st

from awima.core import (CLIENT_VPN_BASE, INTERNET_BASE, MTU, AddrKind, Address, DecodeError, EncodeError, FlowId,
                        InnerPacket, NodeId, Reliability, Role, client_id, decode_inner, encode_inner,
                        internet_address, sp_id)

node_ids = st.builds(NodeId, st.sampled_from(list(Role)), st.integers(0, 2**32 - 1))


@given(node_ids)
def test_node_id_round_trips(n):
    assert NodeId.decode(n.encode()) == n
    assert NodeId.parse(str(n)) == n


def test_sp_prefix_is_not_read_as_server():
    assert NodeId.parse("SP3") == sp_id(3)
    assert NodeId.parse("S0").role is Role.SERVER
    with pytest.raises(ValueError):
        NodeId.parse("X1")


def test_address_kind_must_match_range():
    with pytest.raises(ValueError):
        Address(AddrKind.SP_PUBLIC, CLIENT_VPN_BASE)
    assert Address.of(CLIENT_VPN_BASE + 5).kind is AddrKind.CLIENT_VPN


def _packet(seq, payload, up=True, rel=Reliability.RELIABLE):
    vpn = Address.of(CLIENT_VPN_BASE + 1, 0)
    host = internet_address(7, 80)
    src, dst = (vpn, host) if up else (host, vpn)
    return InnerPacket(src, dst, FlowId(client_id(2), 1), seq, payload, rel)


@given(st.integers(0, 2**64 - 1), st.binary(max_size=MTU), st.booleans(), st.sampled_from(list(Reliability)))
def test_inner_packet_round_trips(seq, payload, up, rel):
    p = _packet(seq, payload, up, rel)
    assert decode_inner(encode_inner(p)) == p
    assert p.vpn_address.kind is AddrKind.CLIENT_VPN


def test_inner_packet_limits():
    with pytest.raises(EncodeError):
        encode_inner(_packet(0, b"x" * (MTU + 1)))
    raw = encode_inner(_packet(0, b"abc"))
    with pytest.raises(DecodeError):
        decode_inner(raw[:-1])
    with pytest.raises(DecodeError):
        decode_inner(raw[:10])


def test_inner_packet_needs_vpn_and_internet_ends():
    host = Address.of(INTERNET_BASE + 1, 80)
    with pytest.raises(ValueError):
        InnerPacket(host, host, FlowId(client_id(0), 0), 0, b"")
