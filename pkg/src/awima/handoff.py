"""Soft handoff of a client between service providers.

The data tunnel never moves: only the SP carrying it changes. The server
stages K_SP2,C at the target and at the client before the client leaves its
old SP, and the old SP keeps forwarding residual downlink for a bounded time.
"""

from __future__ import annotations

import enum
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .core import NodeId, QosPromise
from .crypto import KeyRegistry
from .handshake import ControlSession, Generator, MissingSession, establish_sp_client
from .nodes import Beacon, ClientState, SpState, admit_client, associate, disassociate
from .policy import UtilityWeights, client_utility
from .tunnel import TunnelState

DRAIN_TIMER_US = 5_000_000
MISSED_BEACONS = 3


class HandoffError(Exception):
    pass


class TargetInvalid(HandoffError):
    pass


class Initiator(enum.Enum):
    CLIENT = "Client"
    SERVER = "Server"
    SP = "Sp"


class DrainMode(enum.Enum):
    VIA_SERVER = "ViaServer"
    DIRECT_LINK = "DirectLink"


class PlanState(enum.IntEnum):
    REQUESTED = 0
    PREAUTHED = 1
    EXECUTING = 2
    DRAINING = 3
    COMPLETE = 4
    ABORTED = 5


@dataclass
class HandoffPlan:
    client: NodeId
    from_sp: Optional[NodeId]
    to_sp: Optional[NodeId]
    initiator: Initiator
    drain_mode: DrainMode = DrainMode.VIA_SERVER
    drain_timer_us: int = DRAIN_TIMER_US
    state: PlanState = PlanState.REQUESTED
    reason: str = ""
    history: list[tuple[PlanState, int]] = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return self.state in (PlanState.COMPLETE, PlanState.ABORTED)

    def advance(self, new: PlanState, now: int, reason: str = "") -> None:
        if self.terminal:
            raise HandoffError(f"plan for {self.client} already {self.state.name}")
        if new is not PlanState.ABORTED and new <= self.state:
            raise HandoffError(f"plan cannot go from {self.state.name} to {new.name}")
        self.state = new
        if reason:
            self.reason = reason
        self.history.append((new, now))

    def abort(self, now: int, reason: str) -> None:
        self.advance(PlanState.ABORTED, now, reason)

    def snapshot(self) -> dict:
        return {
            "client": str(self.client),
            "from": str(self.from_sp) if self.from_sp else None,
            "to": str(self.to_sp) if self.to_sp else None,
            "initiator": self.initiator.value,
            "drain_mode": self.drain_mode.value,
            "state": self.state.name,
            "reason": self.reason,
        }


@dataclass
class ResidualQueue:
    at: NodeId
    deadline: int
    uplink: deque = field(default_factory=deque)
    downlink: deque = field(default_factory=deque)

    def __len__(self) -> int:
        return len(self.uplink) + len(self.downlink)


def request_handoff(initiator: Initiator, client: ClientState, candidates: Sequence[tuple[Beacon, float]],
                    x_cs: Optional[ControlSession], w: UtilityWeights, link_capacity: float, now: int,
                    from_sp: Optional[NodeId] = None, drain_mode: DrainMode = DrainMode.VIA_SERVER,
                    drain_timer_us: int = DRAIN_TIMER_US) -> HandoffPlan:
    """Server side: pick the target among candidate beacons (with signal proxies).

    The chosen target maximizes client utility, ties to the lower SP id.
    """
    if x_cs is None or not x_cs.active:
        raise MissingSession(f"{client.id} has no Active session with the server")
    origin = from_sp if from_sp is not None else client.association
    plan = HandoffPlan(client.id, origin, None, initiator, drain_mode, drain_timer_us)
    plan.history.append((PlanState.REQUESTED, now))
    scored = [(b, client_utility(client.needs, b, link, w, link_capacity))
              for b, link in candidates if b.sp != origin]
    if not scored:
        plan.abort(now, "NoProvider")
        return plan
    scored.sort(key=lambda bu: (-bu[1], bu[0].sp))
    plan.to_sp = scored[0][0].sp
    return plan


def preauthenticate(plan: HandoffPlan, sp2: SpState, x_cs: Optional[ControlSession],
                    x_sp2s: Optional[ControlSession], registry: KeyRegistry, rng: random.Random, now: int,
                    generator: Generator = Generator.SERVER):
    """Stage K_SP2,C at both ends. Returns (session, messages), or (None, []) when aborted."""
    if plan.state is not PlanState.REQUESTED:
        raise HandoffError(f"pre-authentication needs a Requested plan, not {plan.state.name}")
    if not sp2.registered:
        plan.abort(now, "TargetInvalid")
        return None, []
    try:
        session, msgs = establish_sp_client(plan.client, sp2.id, x_cs, x_sp2s, registry, rng, generator)
    except MissingSession:
        plan.abort(now, "TargetInvalid")
        return None, []
    plan.advance(PlanState.PREAUTHED, now)
    return session, msgs


def execute_handoff(plan: HandoffPlan, client: ClientState, sp1: Optional[SpState], sp2: SpState, now: int,
                    in_range: bool, w: UtilityWeights, sp1_available: bool = True,
                    request: Optional[QosPromise] = None):
    """Move the client's association to the target. Returns the new DHCP address or None on abort.

    On abort the client stays with its old SP when that SP is still
    reachable; otherwise its tunnel drops to Rebinding.
    """
    if plan.state is not PlanState.PREAUTHED:
        raise HandoffError(f"execute needs a PreAuthed plan, not {plan.state.name}")
    decision = None
    if in_range:
        decision = admit_client(sp2, client.id, request or service_request(client, sp2), now, w)
    if decision is None or not decision.admit:
        plan.abort(now, "out of range" if decision is None else f"denied: {decision.reason}")
        if not (sp1 is not None and sp1_available and client.association == sp1.id) and client.tunnel:
            client.tunnel.state = TunnelState.REBINDING
        return None
    if sp1 is not None:
        disassociate(client, sp1)
    addr = associate(client, sp2)
    plan.advance(PlanState.EXECUTING, now)
    return addr


def service_request(client: ClientState, sp: SpState, share: float = 1.0) -> QosPromise:
    """What a client asks of an SP: its demand (or a share of it) at the SP's price."""
    return QosPromise(client.needs.avg_bandwidth * share, client.needs.duration, sp.price)


@dataclass(frozen=True)
class DrainStep:
    forwarded: tuple
    dropped: tuple
    route: Optional[DrainMode]
    finished: bool


def drain_residual(plan: HandoffPlan, rq: ResidualQueue, now: int, direct_ok: bool,
                   closed: bool = False) -> DrainStep:
    """Decide what the old SP does with its residual packets right now.

    ``closed`` says no more residual traffic can arrive (the server's end
    marker and the client's departure have both been seen).
    """
    if plan.state is PlanState.EXECUTING:
        plan.advance(PlanState.DRAINING, now)
    if plan.state is not PlanState.DRAINING:
        raise HandoffError(f"drain needs a Draining plan, not {plan.state.name}")
    items = tuple(rq.downlink) + tuple(rq.uplink)
    rq.downlink.clear()
    rq.uplink.clear()
    if now >= rq.deadline:
        return DrainStep((), items, None, True)
    route = DrainMode.DIRECT_LINK if plan.drain_mode is DrainMode.DIRECT_LINK and direct_ok else DrainMode.VIA_SERVER
    return DrainStep(items, (), route, closed)


def complete(plan: HandoffPlan, client: ClientState, now: int) -> bool:
    """Finish a drained plan if the client sits on the target with its tunnel Up."""
    if (plan.state is PlanState.DRAINING and client.association == plan.to_sp
            and client.tunnel is not None and client.tunnel.state is TunnelState.UP):
        plan.advance(PlanState.COMPLETE, now)
        return True
    return False


@dataclass(frozen=True)
class Withdrawal:
    sp: NodeId
    clients: tuple[NodeId, ...]
    at: int


def sp_withdraw(sp: SpState, clients: Iterable[ClientState], now: int) -> Withdrawal:
    """The SP stops offering service: it stops beaconing and every client it serves starts rebinding."""
    sp.registered = False
    served = []
    for c in clients:
        if c.association == sp.id:
            served.append(c.id)
            if c.tunnel is not None and c.tunnel.state is TunnelState.UP:
                c.tunnel.state = TunnelState.REBINDING
    return Withdrawal(sp.id, tuple(sorted(served)), now)


@dataclass
class BeaconWatch:
    """Declares an SP gone after a number of missed beacon intervals."""

    interval_us: int
    missed: int = MISSED_BEACONS
    last: dict[NodeId, int] = field(default_factory=dict)

    def heard(self, sp: NodeId, at: int) -> None:
        self.last[sp] = max(at, self.last.get(sp, at))

    def silent_for(self, sp: NodeId, now: int) -> int:
        return now - self.last.get(sp, now)

    def vanished(self, sp: NodeId, now: int) -> bool:
        return sp in self.last and now - self.last[sp] > self.missed * self.interval_us
