"""Client, service provider and server state: registration, beacons, admission, sessions.

Everything here is plain state plus functions over it; the simulator decides
when they run and carries their messages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .core import ADHOC_DHCP_BASE, ADHOC_DHCP_LAST, TUNNEL_PORT, AddrKind, Address, NodeId, QosPromise, Role
from .handshake import ControlSession, Rejected
from .parallel import NoProvider
from .policy import (GoodnessMetric, RevenuePolicy, RevenueSplit, SessionRecord, UtilityWeights,
                     allocate_revenue, client_utility, score_session, sp_utility, update_goodness)
from .tunnel import Tunnel

BEACON_INTERVAL_US = 1_000_000
BEACON_FRESH_US = 3_000_000
GRAPH_STALE_US = 30_000_000
LIGHTWEIGHT_SLOTS = 4
ENERGY_RESERVE = 0.10
DHCP_POOL = ADHOC_DHCP_LAST - ADHOC_DHCP_BASE - 1

# closures the SP is responsible for; anything else counts as a fully served session
SP_FAULT_REASONS = frozenset({"withdraw", "vanish"})


@dataclass(frozen=True)
class WwanLink:
    protocol: str
    bandwidth: float  # bytes/sec
    latency: float  # seconds


@dataclass
class Admission:
    client: NodeId
    promise: QosPromise
    opened_at: int
    bytes_carried: int = 0


@dataclass
class SpState:
    id: NodeId
    public_addr: Address
    wwan: WwanLink
    energy: float
    energy_rate_per_client: float
    local_load: float = 0.0
    price: float = 0.01
    available_until: float = math.inf  # seconds of sim time
    provisioned_fraction: float = 0.5
    lightweight_slots: int = LIGHTWEIGHT_SLOTS
    reserve_fraction: float = ENERGY_RESERVE
    position: tuple[float, float] = (0.0, 0.0)
    radio_range: float = 50.0
    manual: Optional[bool] = None  # scripted accept (True) or deny (False); None is seamless mode
    registered: bool = False
    goodness: GoodnessMetric = field(default_factory=GoodnessMetric)
    admitted: dict[NodeId, Admission] = field(default_factory=dict)
    standby: set[NodeId] = field(default_factory=set)
    dhcp: dict[NodeId, Address] = field(default_factory=dict)
    next_dhcp: int = 0
    initial_energy: float = 0.0

    def __post_init__(self):
        if self.public_addr.kind is not AddrKind.SP_PUBLIC:
            raise ValueError("SP public address has the wrong kind")
        if not self.initial_energy:
            self.initial_energy = self.energy

    @property
    def backhaul(self) -> float:
        return self.wwan.bandwidth

    @property
    def promised_total(self) -> float:
        return sum(a.promise.avg_bandwidth for a in self.admitted.values())

    @property
    def capacity(self) -> float:
        return self.backhaul * self.provisioned_fraction

    @property
    def avail_bandwidth(self) -> float:
        return max(0.0, self.backhaul - self.promised_total - self.local_load)

    def client_at(self, dhcp_value: int) -> Optional[NodeId]:
        return next((c for c, a in self.dhcp.items() if a.value == dhcp_value), None)


@dataclass
class ClientState:
    id: NodeId
    needs: QosPromise
    radios: int = 1
    position: tuple[float, float] = (0.0, 0.0)
    radio_range: float = 50.0
    dhcp_addr: Optional[Address] = None
    association: Optional[NodeId] = None
    lightweight: set[NodeId] = field(default_factory=set)
    tunnel: Optional[Tunnel] = None

    def consistent(self) -> bool:
        return (self.association not in self.lightweight
                and (self.dhcp_addr is None) == (self.association is None))


@dataclass(frozen=True)
class Beacon:
    sp: NodeId
    goodness: float
    avail_bandwidth: float
    cost: float
    remaining_duration: float
    at: int
    position: tuple[float, float]

    def __post_init__(self):
        if not 0.0 <= self.goodness <= 1.0:
            raise ValueError("beacon goodness outside [0, 1]")


@dataclass(frozen=True)
class Edge:
    observer: NodeId
    sp: NodeId
    rssi: float
    at: int
    beacon: Optional[Beacon] = None


@dataclass
class ConnectivityGraph:
    positions: dict[NodeId, tuple[float, float]] = field(default_factory=dict)
    edges: dict[tuple[NodeId, NodeId], Edge] = field(default_factory=dict)

    def prune(self, now: int, stale_us: int = GRAPH_STALE_US) -> list[Edge]:
        gone = [e for e in self.edges.values() if now - e.at > stale_us]
        for e in gone:
            del self.edges[(e.observer, e.sp)]
        return gone

    def near(self, node: NodeId, now: int, stale_us: int = GRAPH_STALE_US) -> list[Edge]:
        """Fresh edges observed by ``node``, strongest first, ties to the lower SP id."""
        found = [e for (o, _), e in self.edges.items() if o == node and now - e.at <= stale_us]
        return sorted(found, key=lambda e: (-e.rssi, e.sp))


@dataclass
class ServerState:
    node: NodeId
    credentials: dict[NodeId, bytes] = field(default_factory=dict)
    approved: set[NodeId] = field(default_factory=set)
    sessions: dict[NodeId, ControlSession] = field(default_factory=dict)
    records: list[SessionRecord] = field(default_factory=list)
    graph: ConnectivityGraph = field(default_factory=ConnectivityGraph)
    goodness: dict[NodeId, GoodnessMetric] = field(default_factory=dict)
    revenue: list[RevenueSplit] = field(default_factory=list)

    def active_with(self, node: NodeId) -> bool:
        s = self.sessions.get(node)
        return s is not None and s.active


def distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def sp_register(sp: SpState, server: ServerState, alpha: float = 0.5) -> bool:
    """Approve an SP over its Active session. Idempotent for an approved SP."""
    if not server.active_with(sp.id) or sp.id not in server.credentials:
        raise Rejected(f"{sp.id} is not a registered service provider")
    server.approved.add(sp.id)
    server.goodness.setdefault(sp.id, GoodnessMetric(alpha=alpha))
    sp.registered = True
    return True


def emit_beacon(sp: SpState, now: int) -> Optional[Beacon]:
    if not sp.registered or sp.energy <= 0:
        return None
    remaining = max(0.0, sp.available_until - now / 1e6)
    return Beacon(sp.id, sp.goodness.value, sp.avail_bandwidth, sp.price, remaining, now, sp.position)


def link_quality(a: tuple[float, float], b: tuple[float, float], radio_range: float) -> float:
    """Distance-based signal proxy in [0, 1]: 1 next to the SP, 0 at the edge of range."""
    if radio_range <= 0:
        return 0.0
    return max(0.0, 1.0 - distance(a, b) / radio_range)


def client_discover(c: ClientState, heard: Iterable[Beacon], now: int, w: UtilityWeights,
                    link_capacity: float, exclude: Iterable[NodeId] = ()) -> list[tuple[Beacon, float]]:
    """Rank fresh, in-range beacons by client utility; ties go to the lower SP id."""
    skip = set(exclude)
    newest: dict[NodeId, Beacon] = {}
    for b in heard:
        if b.sp in skip or now - b.at > BEACON_FRESH_US:
            continue
        if distance(c.position, b.position) > c.radio_range:
            continue
        if b.sp not in newest or b.at > newest[b.sp].at:
            newest[b.sp] = b
    scored = []
    for b in newest.values():
        link = link_quality(c.position, b.position, c.radio_range)
        scored.append((b, client_utility(c.needs, b, link, w, link_capacity)))
    if not scored:
        raise NoProvider(f"{c.id} hears no service provider")
    scored.sort(key=lambda bu: (-bu[1], bu[0].sp))
    return scored


@dataclass(frozen=True)
class Decision:
    admit: bool
    reason: str
    promise: Optional[QosPromise] = None


def admit_client(sp: SpState, client: NodeId, request: QosPromise, now: int, w: UtilityWeights) -> Decision:
    if not sp.registered:
        return Decision(False, "unregistered")
    if client in sp.admitted:
        return Decision(True, "already admitted", sp.admitted[client].promise)
    if sp.manual is False:
        return Decision(False, "manual deny")
    if sp.capacity - sp.promised_total < request.avg_bandwidth:
        return Decision(False, "capacity")
    need = sp.energy_rate_per_client * request.duration
    if need > sp.energy - sp.reserve_fraction * sp.initial_energy:
        return Decision(False, "energy")
    if sp.manual is None and sp_utility(sp, request, w) <= w.sp_threshold:
        return Decision(False, "utility")
    sp.admitted[client] = Admission(client, request, now)
    return Decision(True, "admitted", request)


def assign_dhcp(sp: SpState, client: NodeId) -> Address:
    """SP side of association: a fresh adhoc address for an admitted client."""
    if client not in sp.admitted:
        raise Rejected(f"{sp.id} has not admitted {client}")
    if client not in sp.dhcp:
        used = {a.value for a in sp.dhcp.values()}
        for step in range(DHCP_POOL):
            value = ADHOC_DHCP_BASE + 2 + (sp.next_dhcp + step) % DHCP_POOL
            if value not in used:
                sp.next_dhcp = (value - ADHOC_DHCP_BASE - 2 + 1) % DHCP_POOL
                sp.dhcp[client] = Address(AddrKind.ADHOC_DHCP, value, TUNNEL_PORT)
                break
        else:
            raise Rejected(f"{sp.id} has no free DHCP address")
    sp.standby.discard(client)
    return sp.dhcp[client]


def bind(c: ClientState, sp: NodeId, addr: Address) -> None:
    """Client side of association."""
    c.association = sp
    c.dhcp_addr = addr
    c.lightweight.discard(sp)


def associate(c: ClientState, sp: SpState) -> Address:
    """Hand out an adhoc DHCP address. The caller tears down any previous association first."""
    addr = assign_dhcp(sp, c.id)
    bind(c, sp.id, addr)
    return addr


def disassociate(c: ClientState, sp: SpState) -> None:
    if c.association == sp.id:
        c.association = None
        c.dhcp_addr = None


def release(sp: SpState, client: NodeId) -> None:
    """The SP forgets a departed client's address and admission."""
    sp.dhcp.pop(client, None)
    sp.admitted.pop(client, None)


def reserve_standby(sp: SpState, client: NodeId) -> None:
    """SP side of a lightweight session: a zero-bandwidth slot kept for fast promotion."""
    if client in sp.dhcp:
        return
    if client not in sp.standby and len(sp.standby) >= sp.lightweight_slots:
        raise Rejected(f"{sp.id} has no free lightweight slot")
    sp.standby.add(client)


def open_lightweight(c: ClientState, sp: SpState) -> None:
    if c.association == sp.id:
        return
    reserve_standby(sp, c.id)
    c.lightweight.add(sp.id)


@dataclass(frozen=True)
class NeighborhoodReport:
    reporter: NodeId
    position: tuple[float, float]
    at: int
    heard: tuple[tuple[Beacon, float], ...]  # beacon and signal proxy


def report_neighborhood(node: NodeId, position: tuple[float, float], heard: Iterable[Beacon], now: int,
                        radio_range: float) -> NeighborhoodReport:
    newest: dict[NodeId, Beacon] = {}
    for b in heard:
        if now - b.at <= BEACON_FRESH_US and (b.sp not in newest or b.at > newest[b.sp].at):
            newest[b.sp] = b
    items = tuple((b, link_quality(position, b.position, radio_range))
                  for _, b in sorted(newest.items()))
    return NeighborhoodReport(node, position, now, items)


def update_graph(server: ServerState, report: NeighborhoodReport) -> Optional[ConnectivityGraph]:
    """Fold a report into the graph; reports from unauthenticated nodes are ignored."""
    if not server.active_with(report.reporter):
        return None
    g = server.graph
    g.positions[report.reporter] = report.position
    for b, rssi in report.heard:
        g.positions[b.sp] = b.position
        g.edges[(report.reporter, b.sp)] = Edge(report.reporter, b.sp, rssi, b.at, b)
    return g


def close_session(sp: SpState, client: NodeId, now: int, reason: str) -> SessionRecord:
    a = sp.admitted.pop(client)
    return make_record(sp.id, a, now, reason)


def make_record(sp: NodeId, a: Admission, now: int, reason: str) -> SessionRecord:
    elapsed = (now - a.opened_at) / 1e6
    completion = 1.0
    if reason in SP_FAULT_REASONS:
        completion = min(1.0, elapsed / a.promise.duration)
    return SessionRecord(
        sp=sp,
        client=a.client,
        promised_bandwidth=a.promise.avg_bandwidth,
        promised_duration=a.promise.duration,
        cost_milli_per_s=int(round(a.promise.cost * 1000)),
        opened_at=a.opened_at,
        closed_at=now,
        bytes_carried=a.bytes_carried,
        completion_ratio=completion,
        reason=reason,
    )


def settle_record(server: ServerState, r: SessionRecord, policy: RevenuePolicy,
                  alpha: float = 0.5) -> tuple[GoodnessMetric, RevenueSplit]:
    """Server bookkeeping for a closed session: goodness update and revenue split."""
    g = server.goodness.get(r.sp, GoodnessMetric(alpha=alpha))
    g = update_goodness(g, score_session(r))
    server.goodness[r.sp] = g
    split = allocate_revenue(r, policy)
    server.records.append(r)
    server.revenue.append(split)
    return g, split


def drain_energy(sp: SpState, dt_us: int) -> None:
    sp.energy = max(0.0, sp.energy - sp.energy_rate_per_client * len(sp.admitted) * dt_us / 1e6)


def candidates_of(beacons: Sequence[Beacon], exclude: Iterable[NodeId] = ()) -> list[NodeId]:
    skip = set(exclude)
    return sorted({b.sp for b in beacons if b.sp not in skip})


def is_sp(node: NodeId) -> bool:
    return node.role is Role.SERVICE_PROVIDER
