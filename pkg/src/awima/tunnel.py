"""Client-server data tunnel, the SP's NAT stage, and the server's NAT toward the internet.

Uplink: the client seals a record under the tunnel key and addresses the
outer packet from its adhoc DHCP address to the server. The SP rewrites the
outer source to its public address and a mapped port. The server opens the
record, and for application data rewrites the source to its own public
address before handing the datagram to the internet. Downlink reverses this.
"""

from __future__ import annotations

import enum
import random
import struct
from dataclasses import dataclass, field
from typing import Optional

from .core import (CLIENT_VPN_BASE, CLIENT_VPN_LAST, SERVER_ID, AddrKind, Address, DecodeError, FlowId,
                   InnerPacket, NodeId, Reliability, decode_inner, encode_inner, server_address)
from .crypto import AuthFailure, Envelope, KeyRegistry, SymmetricKey, WrongSealType, open_envelope, seal
from .handshake import ControlSession

NAT_PORT_FIRST = 49152
NAT_PORT_LAST = 65535
NAT_IDLE_US = 120_000_000
SNAT_PORT_FIRST = 20000
SNAT_PORT_LAST = 65535


class TunnelError(Exception):
    pass


class AddressExhausted(TunnelError):
    pass


class TunnelExists(TunnelError):
    pass


class AddressViolation(TunnelError):
    pass


class NatExhausted(TunnelError):
    pass


class NoMapping(TunnelError):
    pass


class SecurityAlert(TunnelError):
    pass


class TunnelState(enum.Enum):
    UP = "Up"
    REBINDING = "Rebinding"
    DOWN = "Down"


class RecordKind(enum.IntEnum):
    DATA = 1     # an encoded InnerPacket
    ACK = 2      # flow + seq acknowledgement
    SHARD = 3    # one shard of a coded group
    REBIND = 4   # client announces its current SP path
    OPEN = 5     # client opens a downlink flow


@dataclass
class Tunnel:
    client: NodeId
    vpn_addr: Address
    key: SymmetricKey
    state: TunnelState = TunnelState.UP
    path: Optional[Address] = None  # server side: (SP public, mapped port) of the latest rebind

    def __post_init__(self):
        if self.vpn_addr.kind is not AddrKind.CLIENT_VPN:
            raise AddressViolation("tunnel address must come from the client VPN pool")


@dataclass(frozen=True)
class TunnelPacket:
    outer_src: Address
    outer_dst: Address
    inner: Envelope

    @property
    def size(self) -> int:
        # 20 byte IP + 8 byte UDP outer header on top of the envelope
        return 28 + len(self.inner.encode())

    _OUTER = struct.Struct(">IHIH")

    def encode(self) -> bytes:
        a, b = self.outer_src, self.outer_dst
        return self._OUTER.pack(a.value, a.port, b.value, b.port) + self.inner.encode()

    @classmethod
    def decode(cls, raw: bytes) -> TunnelPacket:
        if len(raw) < cls._OUTER.size:
            raise DecodeError("truncated tunnel packet")
        sv, sp, dv, dp = cls._OUTER.unpack_from(raw)
        try:
            return cls(Address.of(sv, sp), Address.of(dv, dp), Envelope.decode(raw[cls._OUTER.size:]))
        except ValueError as exc:
            raise DecodeError(str(exc)) from None

    def with_src(self, a: Address) -> TunnelPacket:
        return TunnelPacket(a, self.outer_dst, self.inner)

    def with_dst(self, a: Address) -> TunnelPacket:
        return TunnelPacket(self.outer_src, a, self.inner)


@dataclass(frozen=True)
class Datagram:
    """What crosses the server's internet side. The host sees no tunnel state."""

    src: Address
    dst: Address
    seq: int
    payload: bytes
    reliability: Reliability = Reliability.RELIABLE


@dataclass
class NatTable:
    owner: NodeId
    public: Address
    idle_us: int = NAT_IDLE_US
    first_port: int = NAT_PORT_FIRST
    last_port: int = NAT_PORT_LAST
    forward: dict[tuple[int, int], int] = field(default_factory=dict)
    reverse: dict[int, tuple[int, int]] = field(default_factory=dict)
    last_used: dict[int, int] = field(default_factory=dict)
    cursor: int = 0

    def __post_init__(self):
        if self.public.kind is not AddrKind.SP_PUBLIC:
            raise ValueError("NAT public side must be an SP public address")

    def evict_idle(self, now: int) -> list[tuple[tuple[int, int], int]]:
        gone = [(self.reverse[p], p) for p, t in self.last_used.items() if now - t > self.idle_us]
        for inner, port in gone:
            del self.forward[inner], self.reverse[port], self.last_used[port]
        return gone

    def remove_address(self, addr_value: int) -> None:
        for inner in [k for k in self.forward if k[0] == addr_value]:
            port = self.forward.pop(inner)
            del self.reverse[port], self.last_used[port]

    def _allocate(self) -> int:
        span = self.last_port - self.first_port + 1
        for step in range(span):
            port = self.first_port + (self.cursor + step) % span
            if port not in self.reverse:
                self.cursor = (port - self.first_port + 1) % span
                return port
        raise NatExhausted(f"{self.owner} has no free NAT ports")

    def is_bijective(self) -> bool:
        return (len(self.forward) == len(self.reverse)
                and all(self.reverse.get(p) == k for k, p in self.forward.items()))


def nat_outbound(n: NatTable, tp: TunnelPacket, now: int) -> tuple[TunnelPacket, bool]:
    """Rewrite the outer source; returns the packet and whether a new entry was made."""
    if tp.outer_src.kind is not AddrKind.ADHOC_DHCP:
        raise AddressViolation("only adhoc DHCP sources are NATed")
    key = (tp.outer_src.value, tp.outer_src.port)
    port = n.forward.get(key)
    created = port is None
    if created:
        port = n._allocate()
        n.forward[key] = port
        n.reverse[port] = key
    n.last_used[port] = now
    return tp.with_src(n.public.with_port(port)), created


def nat_inbound(n: NatTable, tp: TunnelPacket, now: Optional[int] = None) -> TunnelPacket:
    if tp.outer_dst.value != n.public.value or tp.outer_dst.port not in n.reverse:
        raise NoMapping(f"{n.owner} has no mapping for {tp.outer_dst}")
    value, port = n.reverse[tp.outer_dst.port]
    if now is not None:
        n.last_used[tp.outer_dst.port] = now
    return tp.with_dst(Address(AddrKind.ADHOC_DHCP, value, port))


@dataclass
class ServerNatTable:
    forward: dict[tuple[Address, FlowId], int] = field(default_factory=dict)
    reverse: dict[int, tuple[Address, FlowId]] = field(default_factory=dict)
    cursor: int = 0

    def port_for(self, vpn: Address, flow: FlowId) -> int:
        key = (vpn, flow)
        if key in self.forward:
            return self.forward[key]
        span = SNAT_PORT_LAST - SNAT_PORT_FIRST + 1
        for step in range(span):
            port = SNAT_PORT_FIRST + (self.cursor + step) % span
            if port not in self.reverse:
                self.cursor = (port - SNAT_PORT_FIRST + 1) % span
                self.forward[key] = port
                self.reverse[port] = key
                return port
        raise NatExhausted("server NAT ports exhausted")

    def is_bijective(self) -> bool:
        return (len(self.forward) == len(self.reverse)
                and all(self.reverse.get(p) == k for k, p in self.forward.items()))


@dataclass
class TunnelServer:
    """The server's tunnel anchor: address pool, live tunnels and its NAT."""

    registry: KeyRegistry
    node: NodeId = SERVER_ID
    tunnels: dict[NodeId, Tunnel] = field(default_factory=dict)
    by_key: dict[int, Tunnel] = field(default_factory=dict)
    snat: ServerNatTable = field(default_factory=ServerNatTable)
    next_vpn: int = CLIENT_VPN_BASE

    @property
    def address(self) -> Address:
        return server_address()


def open_tunnel(server: TunnelServer, client: NodeId, over: Optional[ControlSession],
                rng: random.Random) -> Tunnel:
    if over is None or not over.active or not over.joins(client, server.node):
        raise TunnelError(f"{client} has no Active control session with the server")
    if client in server.tunnels and server.tunnels[client].state is not TunnelState.DOWN:
        raise TunnelExists(f"{client} already has a data tunnel")
    if server.next_vpn > CLIENT_VPN_LAST:
        raise AddressExhausted("client VPN pool exhausted")
    vpn = Address(AddrKind.CLIENT_VPN, server.next_vpn)
    server.next_vpn += 1
    t = Tunnel(client, vpn, server.registry.keygen(rng))
    server.tunnels[client] = t
    server.by_key[t.key.key_id] = t
    return t


def seal_record(t: Tunnel, kind: RecordKind, body: bytes) -> Envelope:
    return seal(t.key, bytes([kind]) + body)


def open_record(key: SymmetricKey, e: Envelope) -> tuple[RecordKind, bytes]:
    plain = open_envelope(key, e)
    try:
        return RecordKind(plain[0]), plain[1:]
    except (IndexError, ValueError):
        raise DecodeError("bad tunnel record") from None


def encapsulate_record(t: Tunnel, client_dhcp: Address, kind: RecordKind, body: bytes) -> TunnelPacket:
    if t.state is TunnelState.DOWN:
        raise TunnelError(f"tunnel of {t.client} is down")
    if client_dhcp.kind is not AddrKind.ADHOC_DHCP:
        raise AddressViolation("outer source must be the client's adhoc DHCP address")
    return TunnelPacket(client_dhcp, server_address(), seal_record(t, kind, body))


def encapsulate(t: Tunnel, client_dhcp: Address, p: InnerPacket) -> TunnelPacket:
    if p.src != t.vpn_addr.with_port(p.src.port) or p.src.kind is not AddrKind.CLIENT_VPN:
        raise AddressViolation(f"inner source {p.src} is not {t.client}'s VPN address")
    return encapsulate_record(t, client_dhcp, RecordKind.DATA, encode_inner(p))


def decapsulate_record(server: TunnelServer, tp: TunnelPacket) -> tuple[Tunnel, RecordKind, bytes]:
    t = server.by_key.get(tp.inner.key_ref)
    if t is None or t.state is TunnelState.DOWN:
        raise SecurityAlert(f"no live tunnel for key {tp.inner.key_ref:#x}")
    try:
        kind, body = open_record(t.key, tp.inner)
    except (AuthFailure, WrongSealType, DecodeError) as exc:
        raise SecurityAlert(f"tunnel record from {tp.outer_src} failed: {exc}") from None
    return t, kind, body


def decapsulate(server: TunnelServer, tp: TunnelPacket) -> InnerPacket:
    t, kind, body = decapsulate_record(server, tp)
    if kind is not RecordKind.DATA:
        raise SecurityAlert(f"expected a data record, got {kind.name}")
    try:
        p = decode_inner(body)
    except DecodeError as exc:
        raise SecurityAlert(str(exc)) from None
    if p.src.value != t.vpn_addr.value:
        raise SecurityAlert(f"{t.client} sent with a foreign source {p.src}")
    return p


def server_forward(server: TunnelServer, ip: InnerPacket) -> Datagram:
    if ip.src.kind is not AddrKind.CLIENT_VPN:
        raise AddressViolation("only client traffic is forwarded to the internet")
    port = server.snat.port_for(ip.src, ip.flow)
    return Datagram(server.address.with_port(port), ip.dst, ip.seq, ip.payload, ip.reliability)


def server_inbound(server: TunnelServer, d: Datagram) -> tuple[Tunnel, InnerPacket]:
    """Map an internet reply back to its tunnel and inner packet."""
    entry = server.snat.reverse.get(d.dst.port)
    if d.dst.kind is not AddrKind.SERVER_PUBLIC or entry is None:
        raise NoMapping(f"no server NAT entry for {d.dst}")
    vpn, flow = entry
    t = server.tunnels.get(flow.client)
    if t is None or t.vpn_addr.value != vpn.value:
        raise NoMapping(f"tunnel for {flow.client} is gone")
    return t, InnerPacket(d.src, vpn, flow, d.seq, d.payload, d.reliability)


def server_return(server: TunnelServer, d: Datagram) -> TunnelPacket:
    """Re-seal an internet reply toward the client's current SP path."""
    t, ip = server_inbound(server, d)
    if t.path is None:
        raise NoMapping(f"{t.client} has no current path")
    return TunnelPacket(server.address, t.path, seal_record(t, RecordKind.DATA, encode_inner(ip)))


def client_open(t: Tunnel, tp: TunnelPacket) -> tuple[RecordKind, bytes]:
    """Client side: open a downlink record with the tunnel key."""
    if tp.inner.key_ref != t.key.key_id:
        raise SecurityAlert("downlink record under a foreign key")
    try:
        return open_record(t.key, tp.inner)
    except (AuthFailure, WrongSealType, DecodeError) as exc:
        raise SecurityAlert(str(exc)) from None
