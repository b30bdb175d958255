"""Identifiers, addresses, packets and their canonical byte encoding."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

MTU = 1400

# Simulation-internal address plan. Ranges are disjoint so a bare value
# classifies back to its kind.
CLIENT_VPN_BASE = 0x0A400000
CLIENT_VPN_LAST = 0x0A40FFFF
ADHOC_DHCP_BASE = 0x0A000000
ADHOC_DHCP_LAST = 0x0A00FFFF
SP_PUBLIC_BASE = 0xCB007100
SP_PUBLIC_LAST = 0xCB0071FF
SERVER_PUBLIC = 0xCB007201
INTERNET_BASE = 0x5B000000
INTERNET_LAST = 0x5BFFFFFF

TUNNEL_PORT = 1194


class EncodeError(ValueError):
    pass


class DecodeError(ValueError):
    pass


class Role(enum.IntEnum):
    CLIENT = 0
    SERVICE_PROVIDER = 1
    SERVER = 2
    INTERNET_HOST = 3


_ROLE_PREFIX = {
    Role.CLIENT: "C",
    Role.SERVICE_PROVIDER: "SP",
    Role.SERVER: "S",
    Role.INTERNET_HOST: "H",
}


@dataclass(frozen=True, order=True)
class NodeId:
    role: Role
    index: int

    def __post_init__(self):
        if not isinstance(self.role, Role):
            object.__setattr__(self, "role", Role(self.role))
        if self.index < 0 or self.index > 0xFFFFFFFF:
            raise ValueError(f"node index out of range: {self.index}")

    def __str__(self) -> str:
        return f"{_ROLE_PREFIX[self.role]}{self.index}"

    @classmethod
    def parse(cls, text: str) -> NodeId:
        # longest prefix first so "SP" wins over "S"
        for role, prefix in sorted(_ROLE_PREFIX.items(), key=lambda kv: -len(kv[1])):
            if text.startswith(prefix) and text[len(prefix):].isdigit():
                return cls(role, int(text[len(prefix):]))
        raise ValueError(f"not a node id: {text!r}")

    def encode(self) -> bytes:
        return struct.pack(">BI", self.role, self.index)

    @classmethod
    def decode(cls, b: bytes) -> NodeId:
        if len(b) != 5:
            raise DecodeError("node id must be 5 bytes")
        role, index = struct.unpack(">BI", b)
        try:
            return cls(Role(role), index)
        except ValueError as exc:
            raise DecodeError(str(exc)) from None


SERVER_ID = NodeId(Role.SERVER, 0)
HOST_ID = NodeId(Role.INTERNET_HOST, 0)


def client_id(i: int) -> NodeId:
    return NodeId(Role.CLIENT, i)


def sp_id(i: int) -> NodeId:
    return NodeId(Role.SERVICE_PROVIDER, i)


class AddrKind(enum.IntEnum):
    CLIENT_VPN = 0
    ADHOC_DHCP = 1
    SP_PUBLIC = 2
    SERVER_PUBLIC = 3
    INTERNET = 4


def classify_address(value: int) -> AddrKind:
    if CLIENT_VPN_BASE <= value <= CLIENT_VPN_LAST:
        return AddrKind.CLIENT_VPN
    if ADHOC_DHCP_BASE <= value <= ADHOC_DHCP_LAST:
        return AddrKind.ADHOC_DHCP
    if SP_PUBLIC_BASE <= value <= SP_PUBLIC_LAST:
        return AddrKind.SP_PUBLIC
    if value == SERVER_PUBLIC:
        return AddrKind.SERVER_PUBLIC
    if INTERNET_BASE <= value <= INTERNET_LAST:
        return AddrKind.INTERNET
    raise ValueError(f"address {value:#010x} is outside every range")


@dataclass(frozen=True)
class Address:
    kind: AddrKind
    value: int
    port: int = 0

    def __post_init__(self):
        if not 0 <= self.port <= 0xFFFF:
            raise ValueError(f"port out of range: {self.port}")
        if classify_address(self.value) != self.kind:
            raise ValueError(f"{self.value:#010x} is not a {AddrKind(self.kind).name} address")

    @classmethod
    def of(cls, value: int, port: int = 0) -> Address:
        return cls(classify_address(value), value, port)

    def with_port(self, port: int) -> Address:
        return Address(self.kind, self.value, port)

    def __str__(self) -> str:
        v = self.value
        dotted = ".".join(str((v >> s) & 0xFF) for s in (24, 16, 8, 0))
        return f"{dotted}:{self.port}"


def sp_public_address(sp_index: int) -> Address:
    if not 0 <= sp_index <= 0xFF:
        raise ValueError("at most 256 service providers are addressable")
    return Address(AddrKind.SP_PUBLIC, SP_PUBLIC_BASE + sp_index)


def server_address(port: int = TUNNEL_PORT) -> Address:
    return Address(AddrKind.SERVER_PUBLIC, SERVER_PUBLIC, port)


def internet_address(host: int = 1, port: int = 80) -> Address:
    return Address(AddrKind.INTERNET, INTERNET_BASE + host, port)


class Reliability(enum.IntEnum):
    RELIABLE = 0
    UNRELIABLE = 1


@dataclass(frozen=True, order=True)
class FlowId:
    client: NodeId
    index: int

    def __str__(self) -> str:
        return f"{self.client}/f{self.index}"


@dataclass(frozen=True)
class QosPromise:
    avg_bandwidth: float  # bytes/sec
    duration: float  # seconds
    cost: float  # currency units per second

    def __post_init__(self):
        if self.avg_bandwidth <= 0 or self.duration <= 0 or self.cost <= 0:
            raise ValueError("QoS promise fields must all be positive")


@dataclass(frozen=True)
class InnerPacket:
    """An application datagram as seen inside the tunnel.

    Uplink packets carry the client VPN address as source; downlink replies
    carry it as destination. The other end is always an internet address.
    """

    src: Address
    dst: Address
    flow: FlowId
    seq: int
    payload: bytes
    reliability: Reliability = Reliability.RELIABLE

    def __post_init__(self):
        ends = {self.src.kind, self.dst.kind}
        if ends != {AddrKind.CLIENT_VPN, AddrKind.INTERNET}:
            raise ValueError("inner packets run between a client VPN address and an internet address")
        if self.flow.client.role != Role.CLIENT:
            raise ValueError("flows belong to clients")
        if self.seq < 0 or self.seq > 0xFFFFFFFFFFFFFFFF:
            raise ValueError("seq out of range")

    @property
    def vpn_address(self) -> Address:
        return self.src if self.src.kind == AddrKind.CLIENT_VPN else self.dst


# src addr, src port, dst addr, dst port, flow client role, flow client index,
# flow index, seq, reliability, payload length
_INNER = struct.Struct(">IHIHBIIQBH")
INNER_HEADER_SIZE = _INNER.size


def encode_inner(p: InnerPacket, mtu: int = MTU) -> bytes:
    if len(p.payload) > mtu:
        raise EncodeError(f"payload of {len(p.payload)} bytes exceeds MTU {mtu}")
    head = _INNER.pack(
        p.src.value, p.src.port, p.dst.value, p.dst.port,
        p.flow.client.role, p.flow.client.index, p.flow.index,
        p.seq, p.reliability, len(p.payload),
    )
    return head + p.payload


def decode_inner(b: bytes, mtu: int = MTU) -> InnerPacket:
    if len(b) < INNER_HEADER_SIZE:
        raise DecodeError(f"truncated inner packet ({len(b)} bytes)")
    (src, sport, dst, dport, role, cidx, fidx, seq, rel, plen) = _INNER.unpack_from(b)
    if plen > mtu:
        raise DecodeError("payload length exceeds MTU")
    if len(b) != INNER_HEADER_SIZE + plen:
        raise DecodeError("length field does not match buffer")
    try:
        return InnerPacket(
            src=Address.of(src, sport),
            dst=Address.of(dst, dport),
            flow=FlowId(NodeId(Role(role), cidx), fidx),
            seq=seq,
            payload=bytes(b[INNER_HEADER_SIZE:]),
            reliability=Reliability(rel),
        )
    except ValueError as exc:
        raise DecodeError(str(exc)) from None
