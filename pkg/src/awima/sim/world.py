"""The simulated world: every node, its message handlers, and the run loop.

Nodes only touch their own state. Anything that crosses nodes is a message
scheduled on a link, so the trace records the whole conversation. Control
traffic after a handshake is lossless but still range checked; handshake
messages and data take the link's loss draws.
"""

from __future__ import annotations

import json
import math
import random
import struct
from dataclasses import asdict, dataclass, field
from types import SimpleNamespace
from typing import Callable, Optional

from ..core import (HOST_ID, SERVER_ID, TUNNEL_PORT, AddrKind, Address, DecodeError, FlowId, InnerPacket, NodeId, QosPromise,
                    Reliability, Role, decode_inner, encode_inner, internet_address, sp_public_address)
from ..crypto import AuthFailure, Envelope, Keyring, KeyRegistry, SymmetricKey, TrustRoot, WrongSealType, seal
from ..endpoint import (GROUP_FLUSH_US, DropOldestQueue, GroupAssembler, GroupCollector, ReliableSender,
                        Resequencer, decode_ack, decode_rebind, decode_shard, encode_ack, encode_rebind,
                        encode_shard)
from ..handoff import (BeaconWatch, DrainMode, HandoffPlan, Initiator, PlanState, ResidualQueue, complete,
                       drain_residual, preauthenticate, request_handoff)
from ..handshake import (MAX_RETRANSMITS, RETRANSMIT_TIMEOUT_US, ControlMessage, ControlSession, HandshakeState,
                         HsStatus, MsgKind, Principal, Rejected, SessionKind, SessionState, accept_message,
                         establish_link_key, establish_sp_sp, key_message, parse_accept_plain, parse_key_plain,
                         relay_control, RelayState, responder_for, start_handshake, step_handshake)
from ..nodes import (Admission, Beacon, ClientState, ServerState, SpState, WwanLink, admit_client, assign_dhcp,
                     bind, client_discover, close_session, distance, drain_energy, emit_beacon, link_quality,
                     make_record, release, report_neighborhood, reserve_standby, settle_record, sp_register,
                     update_graph)
from ..parallel import (AllLegsLost, LegLost, NoProvider, ParallelMode, ParallelPlan, WeightedPicker,
                        assign_shards, plan_parallel, reallocate, schedule_tdm)
from ..policy import GoodnessMetric, SessionRecord, score_session
from ..tunnel import (NatTable, NoMapping, RecordKind, SecurityAlert, Tunnel, TunnelPacket, TunnelServer,
                      TunnelState, Datagram, AddressViolation, TunnelExists, NatExhausted, client_open, decapsulate_record,
                      encapsulate_record, nat_inbound, nat_outbound, open_tunnel, seal_record, server_forward,
                      server_inbound)
from .engine import EventLoop, split_rng, to_us
from .links import Link, LinkKind, deliver
from .scenario import ClientConfig, FlowConfig, Scenario, SpConfig
from .trace import Trace

HS_RETRY_US = 5_000_000
HS_MAX_TRIES = 3
ADMIT_TIMEOUT_US = 1_000_000
AVOID_US = 5_000_000
PLAN_TIMEOUT_US = 5_000_000
REPORT_EVERY = 2  # decision ticks between neighborhood reports
SILENCE_PAUSE = 1.5  # beacon intervals of silence before reliable senders hold off
CTL_OVERHEAD = 16
BEACON_SIZE = 48
DGRAM_OVERHEAD = 28


class InvariantViolation(Exception):
    pass


def _pack(d: dict) -> bytes:
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode()


def _unpack(b: bytes) -> dict:
    return json.loads(b.decode())


def app_payload(flow: FlowId, seq: int, size: int) -> bytes:
    head = struct.pack(">IQ", flow.index, seq)
    return (head + bytes([(seq * 7 + flow.index) & 0xFF]) * size)[:size]


def interpolate(start: tuple[float, float], waypoints, t: float) -> tuple[float, float]:
    pts = list(waypoints)
    if not pts:
        return start
    if pts[0][0] > 0:
        pts.insert(0, (0.0, start[0], start[1]))
    if t <= pts[0][0]:
        return (pts[0][1], pts[0][2])
    for (t0, x0, y0), (t1, x1, y1) in zip(pts, pts[1:]):
        if t <= t1:
            f = (t - t0) / (t1 - t0)
            return (x0 + (x1 - x0) * f, y0 + (y1 - y0) * f)
    return (pts[-1][1], pts[-1][2])


def _record_dict(r: SessionRecord) -> dict:
    d = asdict(r)
    d["sp"], d["client"] = str(r.sp), str(r.client)
    return d


def _record_from(d: dict) -> SessionRecord:
    d = dict(d)
    d["sp"], d["client"] = NodeId.parse(d["sp"]), NodeId.parse(d["client"])
    return SessionRecord(**d)


def _session_id(sp, client, opened_at: int) -> str:
    return f"{sp}>{client}@{opened_at}"


def _beacon_dict(b: Beacon, link: float) -> dict:
    return {"sp": str(b.sp), "goodness": b.goodness, "avail": b.avail_bandwidth, "cost": b.cost,
            "remaining": b.remaining_duration if math.isfinite(b.remaining_duration) else None,
            "at": b.at, "pos": list(b.position), "link": link}


def _beacon_from(d: dict) -> Beacon:
    remaining = math.inf if d["remaining"] is None else d["remaining"]
    return Beacon(NodeId.parse(d["sp"]), d["goodness"], d["avail"], d["cost"], remaining, d["at"], tuple(d["pos"]))


# Node records ---------------------------------------------------------------

@dataclass
class DrainCtx:
    plan: HandoffPlan
    rq: ResidualQueue
    dhcp: int
    to: Optional[NodeId]
    marker: bool = False


@dataclass
class SpNode:
    cfg: SpConfig
    state: SpState
    principal: Principal
    keyring: Keyring
    nat: NatTable
    rng: random.Random
    link: Link
    hs: Optional[HandshakeState] = None
    hs_epoch: int = 0
    hs_retx: int = 0
    hs_tries: int = 0
    x: Optional[ControlSession] = None
    relays: dict = field(default_factory=dict)
    authorized: set = field(default_factory=set)
    spc: dict = field(default_factory=dict)
    wk: dict = field(default_factory=dict)
    peers: dict = field(default_factory=dict)
    peer_pos: dict = field(default_factory=dict)  # where the server last saw each peer
    drains: dict = field(default_factory=dict)
    audited: set = field(default_factory=set)
    parked: dict = field(default_factory=dict)  # client -> residual packets waiting for its link key
    down: bool = False
    withdrawn: bool = False

    @property
    def id(self) -> NodeId:
        return self.cfg.id


@dataclass
class UpFlow:
    cfg: FlowConfig
    fid: FlowId
    port: int
    sender: Optional[ReliableSender]
    queue: DropOldestQueue = field(default_factory=DropOldestQueue)
    packets: dict = field(default_factory=dict)
    next_seq: int = 0
    timer_at: Optional[int] = None
    failed_seen: int = 0


@dataclass
class ClientNode:
    cfg: ClientConfig
    state: ClientState
    principal: Principal
    keyring: Keyring
    rng: random.Random
    watch: BeaconWatch
    hs: Optional[HandshakeState] = None
    hs_epoch: int = 0
    hs_retx: int = 0
    hs_tries: int = 0
    x: Optional[ControlSession] = None
    phase: str = "scan"  # scan, admitting, auth, keys, tunnel, up, idle
    heard: dict = field(default_factory=dict)
    legs: dict = field(default_factory=dict)  # SP -> our adhoc address there
    spc: dict = field(default_factory=dict)
    wk: dict = field(default_factory=dict)
    pending_wk: dict = field(default_factory=dict)
    pending: dict = field(default_factory=dict)  # SP -> (purpose, share, token)
    avoid: dict = field(default_factory=dict)
    plan: Optional[ParallelPlan] = None
    plan_active: bool = False
    picker: Optional[WeightedPicker] = None
    slot_sp: Optional[NodeId] = None
    tdm_epoch: int = 0
    up: list = field(default_factory=list)
    down_rx: dict = field(default_factory=dict)
    epoch: int = 0
    handoff: Optional[dict] = None
    assembler: Optional[GroupAssembler] = None
    flush_token: int = 0
    collector: GroupCollector = field(default_factory=GroupCollector)
    ticks: int = 0
    tokens: int = 0
    first_tunnel: Optional[tuple] = None

    @property
    def id(self) -> NodeId:
        return self.cfg.id

    @property
    def primary(self) -> Optional[NodeId]:
        return self.state.association


@dataclass
class DownFlow:
    sender: Optional[ReliableSender]
    queue: DropOldestQueue = field(default_factory=DropOldestQueue)
    packets: dict = field(default_factory=dict)
    timer_at: Optional[int] = None
    failed_seen: int = 0
    coded: bool = False


@dataclass
class ServerNode:
    state: ServerState
    principal: Principal
    keyring: Keyring
    rng: random.Random
    tun: TunnelServer
    responders: dict = field(default_factory=dict)
    ctl_via: dict = field(default_factory=dict)
    admissions: dict = field(default_factory=dict)  # (sp, client) -> Admission
    needs: dict = field(default_factory=dict)
    plans: dict = field(default_factory=dict)
    staged: dict = field(default_factory=dict)
    dead: set = field(default_factory=set)
    down: dict = field(default_factory=dict)  # FlowId -> DownFlow
    up_rx: dict = field(default_factory=dict)  # FlowId -> Resequencer or set of seqs
    collectors: dict = field(default_factory=dict)
    assemblers: dict = field(default_factory=dict)  # client -> GroupAssembler for coded downlink
    flush_tokens: dict = field(default_factory=dict)
    epochs: dict = field(default_factory=dict)
    held: dict = field(default_factory=dict)  # client -> residual envelopes waiting for a path
    sp_by_addr: dict = field(default_factory=dict)
    settled: set = field(default_factory=set)  # session ids already scored and split


@dataclass
class HostFlow:
    fid: FlowId
    src: Address
    dst: Address
    count: int
    size: int
    interval_us: int
    reliability: Reliability
    next_seq: int = 0


class World:
    def __init__(self, scenario: Scenario, seed: Optional[int] = None, check: bool = False,
                 dump_bytes: bool = False, sink=None):
        self.sc = scenario
        self.seed = scenario.seed if seed is None else seed
        self.check = check
        self.dump_bytes = dump_bytes
        self.loop = EventLoop()
        self.trace = Trace(sink=sink)
        self.registry = KeyRegistry()
        self.trust = TrustRoot(self.seed)
        self.w = scenario.policy.weights
        self.alpha = scenario.policy.alpha
        self.beacon_us = to_us(scenario.beacon_interval)
        self.end_us = to_us(scenario.duration)
        self.adhoc = Link(LinkKind.ADHOC, scenario.adhoc.latency, scenario.adhoc.bandwidth, scenario.adhoc.loss, True)
        self.internet = Link(LinkKind.SERVER_INTERNET, scenario.internet.latency, scenario.internet.bandwidth,
                             scenario.internet.loss)
        self.direct = Link(LinkKind.SP_SP_DIRECT, scenario.direct.latency, scenario.direct.bandwidth,
                           scenario.direct.loss, True)
        self._mid = 0
        self._fifo: dict = {}
        self._link_rngs: dict = {}
        self._attempts_seen = 0
        self._tunnel_keys: set = set()
        self._unsettled: dict = {}
        self.finished = False

        srv_rng = split_rng(self.seed, str(SERVER_ID))
        kp = self.registry.keypair(srv_rng)
        principal = Principal(SERVER_ID, self.registry, self.trust, keypair=kp,
                              certificate=self.trust.issue_certificate(SERVER_ID, kp.public_id))
        self.server = ServerNode(ServerState(SERVER_ID), principal, Keyring(SERVER_ID, self.registry), srv_rng,
                                 TunnelServer(self.registry))
        self.sps: dict[NodeId, SpNode] = {}
        for cfg in scenario.sps:
            self.sps[cfg.id] = self._make_sp(cfg)
        self.clients: dict[NodeId, ClientNode] = {}
        for cfg in scenario.clients:
            self.clients[cfg.id] = self._make_client(cfg)
        self.host_flows: dict[int, HostFlow] = {}

    # construction ---------------------------------------------------------

    def _secret(self, node: NodeId, credentials: str) -> bytes:
        own = split_rng(self.seed, f"secret:{node}").randbytes(8)
        if credentials == "valid":
            self.server.state.credentials[node] = own
            self.server.principal.directory[node] = own
        elif credentials == "invalid":
            wrong = bytes(b ^ 0x5A for b in own)
            self.server.state.credentials[node] = wrong
            self.server.principal.directory[node] = wrong
        return own

    def _make_sp(self, cfg: SpConfig) -> SpNode:
        public = sp_public_address(cfg.id.index)
        self.server.sp_by_addr[public.value] = cfg.id
        state = SpState(cfg.id, public, WwanLink(cfg.protocol, cfg.bandwidth, cfg.latency), cfg.energy,
                        cfg.energy_rate, local_load=cfg.local_load, price=cfg.price,
                        available_until=cfg.available_for, provisioned_fraction=cfg.provisioned_fraction,
                        lightweight_slots=cfg.lightweight_slots, position=cfg.position, radio_range=cfg.radio_range,
                        manual=cfg.manual, goodness=GoodnessMetric(alpha=self.alpha))
        principal = Principal(cfg.id, self.registry, self.trust, secret=self._secret(cfg.id, cfg.credentials))
        link = Link(LinkKind.WWAN, cfg.latency, cfg.bandwidth, cfg.wwan_loss)
        return SpNode(cfg, state, principal, Keyring(cfg.id, self.registry), NatTable(cfg.id, public),
                      split_rng(self.seed, str(cfg.id)), link)

    def _make_client(self, cfg: ClientConfig) -> ClientNode:
        state = ClientState(cfg.id, cfg.needs, radios=cfg.radios, position=cfg.position, radio_range=cfg.radio_range)
        principal = Principal(cfg.id, self.registry, self.trust, secret=self._secret(cfg.id, cfg.credentials))
        c = ClientNode(cfg, state, principal, Keyring(cfg.id, self.registry), split_rng(self.seed, str(cfg.id)),
                       BeaconWatch(self.beacon_us))
        ups = [f for f in cfg.flows if f.direction == "up"]
        for i, f in enumerate(cfg.flows):
            fid = FlowId(cfg.id, i)
            if f.direction == "up":
                sender = ReliableSender() if f.reliability is Reliability.RELIABLE else None
                c.up.append(UpFlow(f, fid, 40000 + i, sender))
            else:
                c.down_rx[fid] = Resequencer() if f.reliability is Reliability.RELIABLE else set()
        if self.sc.coding is not None and any(f.coded for f in ups):
            c.assembler = GroupAssembler(self.sc.coding, GROUP_FLUSH_US)
        return c

    # time, place, links -----------------------------------------------------

    @property
    def now(self) -> int:
        return self.loop.now

    def emit(self, cat: str, node, **d) -> None:
        self.trace.emit(self.now, cat, node, **d)

    def _pos(self, node: NodeId) -> Optional[tuple[float, float]]:
        t = self.now / 1e6
        if node in self.sps:
            sp = self.sps[node]
            sp.state.position = interpolate(sp.cfg.position, sp.cfg.waypoints, t)
            return sp.state.position
        if node in self.clients:
            c = self.clients[node]
            c.state.position = interpolate(c.cfg.position, c.cfg.waypoints, t)
            return c.state.position
        return None

    def _range(self, node: NodeId) -> float:
        if node in self.sps:
            return self.sps[node].cfg.radio_range
        return self.clients[node].cfg.radio_range

    def _in_range(self, a: NodeId, b: NodeId) -> bool:
        return distance(self._pos(a), self._pos(b)) <= min(self._range(a), self._range(b))

    def _link_for(self, a: NodeId, b: NodeId) -> Link:
        roles = {a.role, b.role}
        if roles == {Role.CLIENT, Role.SERVICE_PROVIDER}:
            return self.adhoc
        if roles == {Role.SERVICE_PROVIDER}:
            return self.direct
        if roles == {Role.SERVICE_PROVIDER, Role.SERVER}:
            return self.sps[a if a.role is Role.SERVICE_PROVIDER else b].link
        if roles == {Role.SERVER, Role.INTERNET_HOST}:
            return self.internet
        raise ValueError(f"no link between {a} and {b}")

    def _rng_for(self, a: NodeId, b: NodeId) -> random.Random:
        key = (a, b)
        if key not in self._link_rngs:
            self._link_rngs[key] = split_rng(self.seed, f"link:{a}>{b}")
        return self._link_rngs[key]

    def _is_down(self, node: NodeId) -> bool:
        return node in self.sps and self.sps[node].down

    def _send(self, src: NodeId, dst: NodeId, kind: str, size: int, on_arrive: Callable[[], None],
              lossless: bool = False, raw: Optional[bytes] = None, extra: Optional[dict] = None) -> None:
        link = self._link_for(src, dst)
        dist = rr = None
        if link.range_limited:
            dist = distance(self._pos(src), self._pos(dst))
            rr = min(self._range(src), self._range(dst))
        dv = deliver(link, size, self._rng_for(src, dst), dist, rr, lossless)
        self._mid += 1
        mid = self._mid
        d = {"id": mid, "kind": kind, "dst": str(dst), "size": size, "link": link.kind.value, "verdict": dv.verdict}
        if extra:
            d.update(extra)
        if raw is not None and self.dump_bytes:
            d["bytes"] = raw.hex()
        self.emit("TX", src, **d)
        if dv.verdict == "range":
            self.emit("RANGE_DROP", src, id=mid, dst=str(dst), dist=round(dist, 3), range=rr)
        if not dv.ok:
            return
        key = (src, dst)
        at = max(self.now + dv.delay_us, self._fifo.get(key, 0))
        self._fifo[key] = at
        self.loop.schedule(at, self._arrive, mid, dst, on_arrive, kind="msg")

    def _arrive(self, mid: int, dst: NodeId, on_arrive: Callable[[], None]) -> None:
        if self._is_down(dst):
            self.emit("DROP", dst, id=mid, reason="node_down")
            return
        self.emit("RX", dst, id=mid)
        on_arrive()

    def _msg(self, hops, kind: str, payload, handler: Callable, size: int, lossless: bool = True,
             raw: Optional[bytes] = None, extra: Optional[dict] = None) -> None:
        """Carry ``payload`` hop by hop; ``handler(payload)`` runs at the last node."""
        hops = tuple(hops)

        def step(i: int) -> None:
            a, b = hops[i], hops[i + 1]
            if i + 2 == len(hops):
                cb = lambda: handler(payload)
            else:
                cb = lambda: step(i + 1)
            self._send(a, b, kind, size, cb, lossless, raw, extra)

        step(0)

    def _sealed(self, hops, kind: str, key: SymmetricKey, body: dict, handler: Callable) -> None:
        env = seal(key, _pack(body))
        raw = env.encode()
        self._msg(hops, kind, env, handler, len(raw) + CTL_OVERHEAD, raw=raw, extra={"key_ref": f"{env.key_ref:016x}"})

    def _control(self, hops, kind: str, m: ControlMessage, handler: Callable, lossless: bool = True) -> None:
        raw = m.encode()
        extra = {"msg": m.kind.name, "src": str(m.src), "to": str(m.dst)}
        if m.key_ref is not None:
            extra["key_ref"] = f"{m.key_ref:016x}"
        self._msg(hops, kind, m, handler, len(raw), lossless, raw, extra)

    # run --------------------------------------------------------------------

    def run(self) -> Trace:
        self.emit("START", "S0", scenario=self.sc.name, seed=self.seed, duration_us=self.end_us,
                  sps=[str(s) for s in self.sps], clients=[str(c) for c in self.clients])
        for i, sp in enumerate(self.sps.values()):
            self.loop.schedule(1_000 * (i + 1), self._sp_boot, sp)
        for i, c in enumerate(self.clients.values()):
            self.loop.schedule(self.beacon_us // 2 + 13_000 * i, self._c_tick, c)
        for ev in self.sc.timeline:
            self.loop.schedule(to_us(ev.at), self._timeline, ev)
        self.loop.run(self.end_us, self._check if self.check else None)
        self._finish()
        return self.trace

    def _timeline(self, ev) -> None:
        if ev.event == "sp_withdraw":
            self._sp_withdraw(self.sps[ev.target])
        elif ev.event == "sp_vanish":
            sp = self.sps[ev.target]
            if not sp.down:
                sp.down = True
                self.emit("VANISH", sp.id)
        elif ev.event == "demand":
            c = self.clients[ev.target]
            c.state.needs = QosPromise(ev.value, c.state.needs.duration, c.state.needs.cost)
            self.emit("DEMAND", c.id, bandwidth=ev.value)
        elif ev.event in ("manual_accept", "manual_deny"):
            sp = self.sps[ev.target]
            sp.state.manual = ev.event == "manual_accept"
            self.emit("MANUAL", sp.id, accept=sp.state.manual)

    # handshakes (initiator side) ----------------------------------------------

    def _hs_begin(self, node) -> None:
        is_sp = isinstance(node, SpNode)
        kind = SessionKind.SP_SERVER if is_sp else SessionKind.CLIENT_SERVER
        relay = None if is_sp else node.primary
        node.hs, first = start_handshake(kind, node.principal, SERVER_ID, node.rng, relay=relay)
        node.hs_tries += 1
        node.hs_retx = 0
        self.emit("HS_START", node.id, kind=kind.name, attempt=node.hs_tries, relay=str(relay) if relay else None)
        self._hs_out(node.id, [first])
        self._hs_arm(node)

    def _hs_arm(self, node) -> None:
        node.hs_epoch += 1
        self.loop.after(RETRANSMIT_TIMEOUT_US, self._hs_timer, node, node.hs_epoch)

    def _hs_timer(self, node, epoch: int) -> None:
        if epoch != node.hs_epoch or node.hs is None or node.hs.status is not HsStatus.RUNNING:
            return
        if getattr(node, "down", False):
            return
        if node.hs_retx < MAX_RETRANSMITS:
            node.hs_retx += 1
            self.emit("HS_RETRANSMIT", node.id, step=node.hs.step)
            self._hs_out(node.id, list(node.hs.last_out))
            self._hs_arm(node)
        else:
            self._hs_failed(node, "timeout")

    def _hs_failed(self, node, reason: str) -> None:
        node.hs = None
        node.hs_epoch += 1
        self.emit("HS_ABORT", node.id, reason=reason, attempt=node.hs_tries)
        if node.hs_tries < HS_MAX_TRIES:
            self.loop.after(HS_RETRY_US, self._hs_retry, node, node.hs_epoch)
        else:
            self.emit("HS_GIVEUP", node.id)
            if isinstance(node, ClientNode):
                self._c_reset(node, "handshake")

    def _hs_retry(self, node, epoch: int) -> None:
        if epoch != node.hs_epoch or node.x is not None or getattr(node, "down", False):
            return
        if isinstance(node, ClientNode) and (node.phase != "auth" or node.primary is None):
            return
        self._hs_begin(node)

    def _hs_in(self, node, m: ControlMessage) -> None:
        if node.hs is None or node.hs.status is not HsStatus.RUNNING:
            self.emit("DROP", node.id, reason="no_handshake", msg=m.kind.name)
            return
        before = node.hs.step
        node.hs, outs, session = step_handshake(node.hs, m, node.principal, node.rng)
        if outs:
            self._hs_out(node.id, outs)
        if node.hs.aborted:
            self._hs_failed(node, type(node.hs.error).__name__)
            return
        if node.hs.step != before and session is None:
            node.hs_retx = 0
            self._hs_arm(node)
        if session is not None:
            node.hs_epoch += 1
            node.x = session
            node.keyring.add(session.key)
            self.emit("SESSION_UP", node.id, peer=str(SERVER_ID), kind=session.kind.name, state=session.state.value,
                      sid=f"{session.session_id:016x}", key_ref=f"{session.key.key_id:016x}")
            if isinstance(node, SpNode):
                self._sealed([node.id, SERVER_ID], "REGISTER", session.key, {"sp": str(node.id)},
                             lambda env, sp=node.id: self._srv_register(sp, env))
            else:
                self._c_session_up(node)

    def _hs_out(self, src: NodeId, msgs) -> None:
        for m in msgs:
            if src.role is Role.SERVICE_PROVIDER:
                self._control([src, SERVER_ID], "HS", m, self._srv_hs, lossless=False)
            elif src.role is Role.CLIENT:
                c = self.clients[src]
                relay = c.hs.relay if c.hs is not None else c.primary
                if relay is None:
                    continue
                self._control([src, relay], "HS", m, lambda m, sp=relay: self._sp_relay_up(sp, m), lossless=False)
            else:
                if m.dst.role is Role.SERVICE_PROVIDER:
                    self._control([SERVER_ID, m.dst], "HS", m, lambda m, sp=m.dst: self._sp_hs_from_server(sp, m),
                                  lossless=False)
                else:
                    st = self.server.responders.get(m.dst)
                    relay = st.relay if st is not None else None
                    if relay is None:
                        continue
                    self._control([SERVER_ID, relay], "HS", m,
                                  lambda m, sp=relay: self._sp_hs_from_server(sp, m), lossless=False)

    # handshakes (server side and relay) -----------------------------------------

    def _srv_hs(self, m: ControlMessage) -> None:
        srv = self.server
        st = srv.responders.get(m.src)
        if m.kind is MsgKind.CERT_REQUEST and (
                st is None or (st.status is not HsStatus.RUNNING and m.digest() not in st.last_in)):
            st = responder_for(srv.principal, m)
        if st is None:
            self.emit("DROP", SERVER_ID, reason="no_handshake", msg=m.kind.name, src=str(m.src))
            return
        new, outs, session = step_handshake(st, m, srv.principal, srv.rng)
        srv.responders[m.src] = new
        if new.aborted and not st.aborted:
            self.emit("HS_ABORT", SERVER_ID, peer=str(m.src), reason=type(new.error).__name__)
        if session is not None:
            srv.state.sessions[m.src] = session
            srv.keyring.add(session.key)
            self.emit("SESSION_UP", SERVER_ID, peer=str(m.src), kind=session.kind.name, state=session.state.value,
                      sid=f"{session.session_id:016x}", key_ref=f"{session.key.key_id:016x}")
            if new.relay is not None:
                srv.ctl_via[m.src] = new.relay
        self._hs_out(SERVER_ID, outs)

    def _sp_relay_up(self, spid: NodeId, m: ControlMessage) -> None:
        sp = self.sps[spid]
        if m.src not in sp.state.admitted:
            self.emit("DROP", spid, reason="not_admitted", src=str(m.src))
            return
        r = sp.relays.setdefault(m.src, RelayState(spid, m.src))
        for f in relay_control(r, m, sp.keyring.open):
            self._control([spid, SERVER_ID], "HS", f, self._srv_hs, lossless=False)

    def _sp_hs_from_server(self, spid: NodeId, m: ControlMessage) -> None:
        sp = self.sps[spid]
        if m.dst == spid and m.kind is MsgKind.AUTH_NOTIFY:
            try:
                plain = sp.keyring.open(m.body)
                client = NodeId.decode(plain[:5])
            except (AuthFailure, WrongSealType, DecodeError):
                self.emit("SECURITY_ALERT", spid, reason="auth notify does not open")
                return
            r = sp.relays.get(client)
            if r is None:
                return
            released = relay_control(r, m, lambda e: plain)
            if r.authenticated:
                sp.authorized.add(client)
                self.emit("AUTH_NOTIFY", spid, client=str(client))
            for f in released:
                self._control([spid, f.dst], "HS", f, lambda m, c=f.dst: self._hs_in(self.clients[c], m),
                              lossless=False)
            return
        if m.dst == spid:
            self._hs_in(sp, m)
            return
        r = sp.relays.get(m.dst)
        if r is None:
            return
        for f in relay_control(r, m, sp.keyring.open):
            self._control([spid, f.dst], "HS", f, lambda m, c=f.dst: self._hs_in(self.clients[c], m),
                          lossless=False)

    # service providers ----------------------------------------------------------

    def _sp_boot(self, sp: SpNode) -> None:
        self._pos(sp.id)
        self._hs_begin(sp)

    def _srv_register(self, spid: NodeId, env: Envelope) -> None:
        srv = self.server
        session = srv.state.sessions.get(spid)
        if session is None or not session.confirm(env):
            self.emit("SECURITY_ALERT", SERVER_ID, reason="register without a session", src=str(spid))
            return
        view = SimpleNamespace(id=spid, registered=False)
        try:
            sp_register(view, srv.state, self.alpha)
        except Rejected as exc:
            self.emit("DENY", SERVER_ID, sp=str(spid), reason=str(exc))
            return
        srv.principal.sp_keys[spid] = session.key
        srv.dead.discard(spid)
        self.emit("REGISTER", SERVER_ID, sp=str(spid))
        self._sealed([SERVER_ID, spid], "REGISTER_OK", session.key, {"goodness": srv.state.goodness[spid].value},
                     lambda env, sp=spid: self._sp_registered(sp, env))

    def _sp_registered(self, spid: NodeId, env: Envelope) -> None:
        sp = self.sps[spid]
        _unpack(sp.keyring.open(env))
        first = not sp.state.registered
        sp.state.registered = True
        self.emit("REGISTERED", spid)
        if first:
            offset = (spid.index * 7_919) % self.beacon_us
            self.loop.after(offset, self._sp_tick, sp)

    def _sp_tick(self, sp: SpNode) -> None:
        if sp.down:
            return
        self._pos(sp.id)
        drain_energy(sp.state, self.beacon_us)
        for inner, port in sp.nat.evict_idle(self.now):
            self.emit("NAT_EVICT", sp.id, inner=f"{Address.of(*inner)}", port=port, reason="idle")
        b = emit_beacon(sp.state, self.now)
        if b is not None and not sp.withdrawn:
            heard_by = [c for c in self.clients if self._in_range(sp.id, c)]
            self.emit("BEACON", sp.id, avail=round(b.avail_bandwidth, 3), goodness=b.goodness,
                      energy=round(sp.state.energy, 6), to=[str(c) for c in heard_by])
            for cid in heard_by:
                self._msg([sp.id, cid], "BEACON", b, lambda b, c=cid: self._c_beacon(self.clients[c], b),
                          BEACON_SIZE, lossless=False)
        self.loop.after(self.beacon_us, self._sp_tick, sp)

    def _sp_admit(self, spid: NodeId, req: dict) -> None:
        sp = self.sps[spid]
        c = NodeId.parse(req["client"])
        promise = QosPromise(*req["promise"])
        fresh = c not in sp.state.admitted
        if sp.withdrawn:
            decision = SimpleNamespace(admit=False, reason="withdrawn")
        else:
            decision = admit_client(sp.state, c, promise, self.now, self.w)
        resp = {"ok": decision.admit, "reason": decision.reason, "token": req["token"]}
        if decision.admit:
            addr = assign_dhcp(sp.state, c)
            resp["addr"] = addr.value
            self.emit("ADMIT", spid, client=str(c), bandwidth=promise.avg_bandwidth, dhcp=str(addr))
            if fresh:
                a = sp.state.admitted[c]
                self._sealed([spid, SERVER_ID], "SESSION_OPEN", sp.x.key,
                             {"client": str(c), "promise": list(req["promise"]), "opened_at": a.opened_at},
                             lambda env, s=spid: self._srv_session_open(s, env))
        else:
            self.emit("DENY", spid, client=str(c), reason=decision.reason)
        self._msg([spid, c], "ADMIT_RESP", resp, lambda r, s=spid, cc=c: self._c_admit_resp(self.clients[cc], s, r),
                  64)

    def _sp_standby(self, spid: NodeId, c: NodeId) -> None:
        sp = self.sps[spid]
        ok = True
        try:
            if sp.withdrawn or not sp.state.registered:
                raise Rejected("not serving")
            reserve_standby(sp.state, c)
        except Rejected:
            ok = False
        self.emit("LIGHTWEIGHT", spid, client=str(c), ok=ok)
        self._msg([spid, c], "LIGHTWEIGHT_RESP", ok, lambda ok, s=spid, cc=c: self._c_standby(self.clients[cc], s, ok),
                  32)

    def _sp_key_relay(self, spid: NodeId, m: ControlMessage, purpose: str) -> None:
        """A key the server relays over X_SP,S: K_SP,C for a client or K_SP,SP for a peer."""
        sp = self.sps[spid]
        try:
            plain = sp.keyring.open(m.body)
            about, k = parse_key_plain(plain[:29])
        except (AuthFailure, WrongSealType, DecodeError):
            self.emit("SECURITY_ALERT", spid, reason="relayed key does not open")
            return
        sp.keyring.add(k)
        if about.role is Role.SERVICE_PROVIDER:
            sp.peers[about] = k
            extra = _unpack(plain[29:]) if len(plain) > 29 else {}
            self.emit("PEER_KEY", spid, peer=str(about), key_ref=f"{k.key_id:016x}")
            if extra.get("pos") is not None:
                sp.peer_pos[about] = tuple(extra["pos"])
            return
        # the server vouches for the client by handing out this key
        sp.spc[about] = ControlSession(k.key_id, (about, spid), k, SessionKind.SP_CLIENT)
        sp.authorized.add(about)
        self.emit("KEY_STAGE", spid, client=str(about), sp=str(spid), key_ref=f"{k.key_id:016x}", purpose=purpose)
        if purpose == "preauth":
            self._sealed([spid, SERVER_ID], "KEY_ACK", sp.x.key, {"client": str(about)},
                         lambda env, s=spid: self._srv_key_ack(s, env))
        else:
            acc = accept_message(spid, about, k, k.key_id)
            self._control([spid, about], "ACCEPT", acc, lambda m, s=spid: self._c_spc_accept(self.clients[m.dst], s, m))

    def _sp_link_key(self, spid: NodeId, m: ControlMessage) -> None:
        sp = self.sps[spid]
        s = sp.spc.get(m.src)
        if s is None:
            self.emit("DROP", spid, reason="no_sp_client_session", src=str(m.src))
            return
        try:
            _, wk = parse_key_plain(sp.keyring.open(m.body))
        except (AuthFailure, WrongSealType, DecodeError):
            self.emit("SECURITY_ALERT", spid, reason="link key does not open", src=str(m.src))
            return
        sp.wk[m.src] = wk
        sp.keyring.add(wk)
        self.emit("LINK_KEY", spid, client=str(m.src), key_ref=f"{wk.key_id:016x}")
        acc = accept_message(spid, m.src, wk, s.session_id)
        self._control([spid, m.src], "ACCEPT", acc, lambda a, s=spid: self._c_wk_accept(self.clients[a.dst], s, a))
        for tp in sp.parked.pop(m.src, []):
            self._sp_to_client(sp, m.src, tp)

    def _sp_withdraw(self, sp: SpNode) -> None:
        if sp.down or sp.withdrawn:
            return
        sp.withdrawn = True
        sp.state.registered = False
        clients = sorted(sp.state.admitted)
        self.emit("WITHDRAW", sp.id, clients=[str(c) for c in clients])
        for c in clients:
            s = sp.spc.get(c)
            if s is not None:
                self._sealed([sp.id, c], "WITHDRAW_NOTICE", s.key, {"sp": str(sp.id)},
                             lambda env, cc=c, spid=sp.id: self._c_withdraw_notice(self.clients[cc], spid, env))
        if sp.x is not None:
            self._sealed([sp.id, SERVER_ID], "WITHDRAW", sp.x.key, {"clients": [str(c) for c in clients]},
                         lambda env, s=sp.id: self._srv_withdraw(s, env))

    def _sp_close(self, sp: SpNode, c: NodeId, reason: str) -> None:
        if c not in sp.state.admitted:
            return
        r = close_session(sp.state, c, self.now, reason)
        self.emit("SESSION_CLOSE", sp.id, client=str(c), reason=reason, opened_at=r.opened_at,
                  bytes=r.bytes_carried, revenue_milli=r.revenue_milli, score=score_session(r),
                  session=_session_id(sp.id, c, r.opened_at))
        self._unsettled[_session_id(sp.id, c, r.opened_at)] = r
        if self.finished:
            self._srv_settle(r)
        elif sp.x is not None:
            self._sealed([sp.id, SERVER_ID], "SESSION_CLOSE", sp.x.key, _record_dict(r),
                         lambda env, s=sp.id: self._srv_session_close(s, env))

    # server control -------------------------------------------------------------

    def _srv_open(self, peer: NodeId, env: Envelope) -> Optional[dict]:
        """Open a sealed control body from ``peer``; the first one confirms an Establishing session."""
        session = self.server.state.sessions.get(peer)
        if session is None or not session.confirm(env):
            self.emit("SECURITY_ALERT", SERVER_ID, reason="control under an unknown session", src=str(peer))
            return None
        try:
            return _unpack(self.server.keyring.open(env))
        except (AuthFailure, WrongSealType):
            self.emit("SECURITY_ALERT", SERVER_ID, reason="control does not open", src=str(peer))
            return None

    def _srv_to_client(self, c: NodeId, kind: str, body: dict, handler: Callable) -> None:
        session = self.server.state.sessions.get(c)
        via = self.server.ctl_via.get(c)
        if session is None or via is None:
            return
        self._sealed([SERVER_ID, via, c], kind, session.key, body, handler)

    def _srv_to_sp(self, sp: NodeId, kind: str, body: dict, handler: Callable) -> None:
        session = self.server.state.sessions.get(sp)
        if session is None or sp in self.server.dead:
            return
        self._sealed([SERVER_ID, sp], kind, session.key, body, handler)

    def _srv_session_open(self, spid: NodeId, env: Envelope) -> None:
        d = self._srv_open(spid, env)
        if d is None:
            return
        c = NodeId.parse(d["client"])
        promise = QosPromise(*d["promise"])
        self.server.admissions[(spid, c)] = Admission(c, promise, d["opened_at"])
        self.emit("SESSION_OPEN", SERVER_ID, sp=str(spid), client=str(c), bandwidth=promise.avg_bandwidth,
                  opened_at=d["opened_at"])

    def _srv_session_close(self, spid: NodeId, env: Envelope) -> None:
        d = self._srv_open(spid, env)
        if d is None:
            return
        self._srv_settle(_record_from(d))

    def _srv_settle(self, r) -> None:
        srv = self.server
        sid = _session_id(r.sp, r.client, r.opened_at)
        self._unsettled.pop(sid, None)
        if sid in srv.settled:
            return
        srv.settled.add(sid)
        srv.admissions.pop((r.sp, r.client), None)
        g, split = settle_record(srv.state, r, self.sc.policy.revenue, self.alpha)
        self.emit("GOODNESS", SERVER_ID, sp=str(r.sp), value=g.value, session=sid, score=score_session(r))
        self.emit("REVENUE", SERVER_ID, sp=str(r.sp), client=str(r.client), session=sid, total=split.total,
                  sp_part=split.service_provider, server_part=split.server, carrier_part=split.carrier)
        if not self.finished:
            self._srv_to_sp(r.sp, "GOODNESS", {"value": g.value, "seen": g.sessions_seen},
                            lambda env, s=r.sp: self._sp_goodness(s, env))

    def _sp_goodness(self, spid: NodeId, env: Envelope) -> None:
        sp = self.sps[spid]
        d = _unpack(sp.keyring.open(env))
        sp.state.goodness = GoodnessMetric(d["value"], self.alpha, d["seen"])

    def _srv_sp_lost(self, spid: NodeId) -> None:
        """Settle every session the server knows at an SP that vanished."""
        srv = self.server
        if spid in srv.dead:
            return
        srv.dead.add(spid)
        srv.state.approved.discard(spid)
        self.emit("SP_LOST", SERVER_ID, sp=str(spid))
        for (s, c) in sorted(k for k in srv.admissions if k[0] == spid):
            a = srv.admissions[(s, c)]
            r = make_record(s, a, self.now, "vanish")
            self.emit("SESSION_CLOSE", SERVER_ID, sp=str(s), client=str(c), reason="vanish", opened_at=a.opened_at,
                      bytes=r.bytes_carried, revenue_milli=r.revenue_milli, score=score_session(r),
                      session=_session_id(s, c, a.opened_at))
            self._srv_settle(r)

    def _srv_key_proposal(self, c: NodeId, m: ControlMessage) -> None:
        """Client-generated K_SP,C: pass it on to the named SP over X_SP,S."""
        srv = self.server
        session = srv.state.sessions.get(c)
        if session is None or not session.confirm(m.body):
            self.emit("SECURITY_ALERT", SERVER_ID, reason="key proposal under an unknown session", src=str(c))
            return
        try:
            sp, k = parse_key_plain(srv.keyring.open(m.body))
        except (AuthFailure, WrongSealType, DecodeError):
            self.emit("SECURITY_ALERT", SERVER_ID, reason="key proposal does not open", src=str(c))
            return
        x_sps = srv.state.sessions.get(sp)
        if x_sps is None or not x_sps.active or sp in srv.dead:
            self.emit("DROP", SERVER_ID, reason="no_sp_session", sp=str(sp))
            return
        fwd = key_message(MsgKind.KEY_RELAY, SERVER_ID, sp, x_sps.key, c, k)
        self._control([SERVER_ID, sp], "KEY_RELAY", fwd, lambda m, s=sp: self._sp_key_relay(s, m, "client"))

    def _srv_tunnel_req(self, c: NodeId, env: Envelope) -> None:
        d = self._srv_open(c, env)
        if d is None:
            return
        srv = self.server
        srv.needs[c] = QosPromise(*d["needs"])
        t = srv.tun.tunnels.get(c)
        if t is None:
            try:
                t = open_tunnel(srv.tun, c, srv.state.sessions.get(c), srv.rng)
            except TunnelExists:
                return
            self._tunnel_keys.add(t.key.key_id)
            self.emit("TUNNEL_OPEN", SERVER_ID, client=str(c), vpn=str(t.vpn_addr), key_ref=f"{t.key.key_id:016x}")
        body = {"vpn": t.vpn_addr.value, "key": t.key.to_bytes().hex()}
        self._srv_to_client(c, "TUNNEL_OK", body, lambda env, cc=c: self._c_tunnel_ok(self.clients[cc], env))

    def _srv_client_ctl(self, c: NodeId, via: NodeId, env: Envelope) -> None:
        """Sealed client control: reports, handoff requests and aborts, leg losses."""
        d = self._srv_open(c, env)
        if d is None:
            return
        srv = self.server
        srv.ctl_via[c] = via
        op = d["op"]
        if op == "report":
            heard = tuple((_beacon_from(b), b["link"]) for b in d["heard"])
            rep = SimpleNamespace(reporter=c, position=tuple(d["pos"]), at=self.now, heard=heard)
            if update_graph(srv.state, rep) is not None:
                self.emit("GRAPH_UPDATE", SERVER_ID, reporter=str(c), heard=[str(b.sp) for b, _ in heard])
        elif op == "handoff":
            srv.needs[c] = QosPromise(*d["needs"])
            origin = NodeId.parse(d["from"]) if d["from"] else None
            if d["reason"] == "vanish" and origin is not None:
                self._srv_sp_lost(origin)
            cands = [(_beacon_from(b), b["link"]) for b in d["cands"]]
            self._srv_handoff(c, Initiator.CLIENT, origin, cands, d["reason"])
        elif op == "abort":
            plan = srv.plans.get(c)
            if plan is not None and not plan.terminal:
                plan.abort(self.now, d["reason"])
                self.emit("HANDOFF_ABORT", SERVER_ID, **plan.snapshot())
        elif op == "leg_lost":
            self._srv_sp_lost(NodeId.parse(d["sp"]))

    def _srv_withdraw(self, spid: NodeId, env: Envelope) -> None:
        d = self._srv_open(spid, env)
        if d is None:
            return
        srv = self.server
        srv.state.approved.discard(spid)
        self.emit("WITHDRAW", SERVER_ID, sp=str(spid))
        for name in d["clients"]:
            c = NodeId.parse(name)
            cands = [(e.beacon, e.rssi) for e in srv.state.graph.near(c, self.now)
                     if e.beacon is not None and e.sp != spid]
            self._srv_handoff(c, Initiator.SP, spid, cands, "withdraw")

    def _srv_handoff(self, c: NodeId, initiator: Initiator, origin: Optional[NodeId], cands, reason: str) -> None:
        srv = self.server
        old = srv.plans.get(c)
        if old is not None and not old.terminal:
            return
        needs = srv.needs.get(c)
        x_cs = srv.state.sessions.get(c)
        if needs is None:
            return
        view = ClientState(c, needs, association=origin)
        plan = request_handoff(initiator, view, cands, x_cs, self.w, self.adhoc.bandwidth, self.now, origin,
                               self.sc.handoff.drain_mode, to_us(self.sc.handoff.drain_timer))
        plan.reason = reason
        srv.plans[c] = plan
        self.emit("HANDOFF_REQUEST", SERVER_ID, **plan.snapshot())
        if plan.state is PlanState.ABORTED:
            self._srv_plan_aborted(c, plan)
            return
        sp2 = plan.to_sp
        target = SimpleNamespace(id=sp2, registered=sp2 in srv.state.approved and sp2 not in srv.dead)
        session, msgs = preauthenticate(plan, target, x_cs, srv.state.sessions.get(sp2), self.registry, srv.rng,
                                        self.now)
        if session is None:
            self._srv_plan_aborted(c, plan)
            return
        self.emit("HANDOFF_PREAUTH", SERVER_ID, **plan.snapshot())
        to_client, to_sp = msgs[0], msgs[1]
        srv.staged[c] = to_client
        self._control([SERVER_ID, sp2], "PREAUTH", to_sp, lambda m, s=sp2: self._sp_key_relay(s, m, "preauth"))
        if (plan.drain_mode is DrainMode.DIRECT_LINK and origin is not None and origin not in srv.dead
                and srv.state.active_with(origin)):
            _, pmsgs = establish_sp_sp(origin, sp2, srv.state.sessions[origin], srv.state.sessions[sp2],
                                       self.registry, srv.rng)
            where = srv.state.graph.positions
            for m, dst, other in ((pmsgs[0], origin, sp2), (pmsgs[1], sp2, origin)):
                extra = _pack({"pos": list(where[other]) if other in where else None})
                session_key = srv.state.sessions[dst].key
                plain = srv.keyring.open(m.body) + extra
                m = ControlMessage(MsgKind.KEY_RELAY, SERVER_ID, dst, seal(session_key, plain))
                self._control([SERVER_ID, dst], "PEER_KEY", m, lambda m, s=dst: self._sp_key_relay(s, m, "peer"))
        self.loop.after(PLAN_TIMEOUT_US, self._srv_plan_timeout, c, plan)

    def _srv_plan_aborted(self, c: NodeId, plan: HandoffPlan) -> None:
        self.emit("HANDOFF_ABORT", SERVER_ID, **plan.snapshot())
        self._srv_to_client(c, "HANDOFF_ABORT", {"reason": plan.reason},
                            lambda env, cc=c: self._c_handoff_abort(self.clients[cc], env))

    def _srv_plan_timeout(self, c: NodeId, plan: HandoffPlan) -> None:
        if plan.state is PlanState.PREAUTHED and self.server.plans.get(c) is plan:
            plan.abort(self.now, "timeout")
            self._srv_plan_aborted(c, plan)

    def _srv_key_ack(self, spid: NodeId, env: Envelope) -> None:
        d = self._srv_open(spid, env)
        if d is None:
            return
        c = NodeId.parse(d["client"])
        plan = self.server.plans.get(c)
        m = self.server.staged.pop(c, None)
        if plan is None or plan.state is not PlanState.PREAUTHED or plan.to_sp != spid or m is None:
            return
        via = self.server.ctl_via.get(c)
        if via is None:
            return
        self._control([SERVER_ID, via, c], "KEY_STAGE", m, lambda m, cc=c: self._c_key_stage(self.clients[cc], m))

    def _srv_residual(self, spid: NodeId, env: Envelope) -> None:
        d = self._srv_open(spid, env)
        if d is None:
            return
        tp = TunnelPacket.decode(bytes.fromhex(d["packet"]))
        t = self.server.tun.by_key.get(tp.inner.key_ref)
        if t is None:
            return
        self.emit("RESIDUAL", SERVER_ID, client=str(t.client), via=str(spid))
        if t.path is None or self.server.sp_by_addr.get(t.path.value) == spid:
            self.server.held.setdefault(t.client, []).append(tp.inner)
            return
        self._srv_push(t, tp.inner)

    def _srv_drain_done(self, spid: NodeId, env: Envelope) -> None:
        d = self._srv_open(spid, env)
        if d is None:
            return
        c = NodeId.parse(d["client"])
        self._srv_try_complete(c)

    def _srv_try_complete(self, c: NodeId) -> None:
        srv = self.server
        plan = srv.plans.get(c)
        t = srv.tun.tunnels.get(c)
        if plan is None or plan.state is not PlanState.DRAINING or t is None or t.path is None:
            return
        view = ClientState(c, srv.needs[c], association=srv.sp_by_addr.get(t.path.value), tunnel=t)
        if complete(plan, view, self.now):
            self.emit("HANDOFF_COMPLETE", SERVER_ID, **plan.snapshot())

    # SP data plane and residual drain ---------------------------------------------

    def _sp_from_client(self, spid: NodeId, c: NodeId, env: Envelope) -> None:
        sp = self.sps[spid]
        if c not in sp.authorized or c not in sp.wk or env.key_ref != sp.wk[c].key_id:
            self.emit("DROP", spid, reason="unauthorized", src=str(c))
            return
        try:
            tp = TunnelPacket.decode(sp.keyring.open(env))
        except (AuthFailure, WrongSealType, DecodeError):
            self.emit("SECURITY_ALERT", spid, reason="frame does not open", src=str(c))
            return
        self._sp_audit(sp, tp.inner)
        own = sp.state.dhcp.get(c)
        if own is None or tp.outer_src.value != own.value:
            self.emit("DROP", spid, reason="spoofed_source", src=str(c))
            return
        try:
            out, created = nat_outbound(sp.nat, tp, self.now)
        except (AddressViolation, NatExhausted) as exc:
            self.emit("DROP", spid, reason=type(exc).__name__)
            return
        if created:
            self.emit("NAT_CREATE", spid, client=str(c), inner=str(tp.outer_src), port=out.outer_src.port)
        a = sp.state.admitted.get(c)
        if a is not None:
            a.bytes_carried += tp.size
        raw = out.encode()
        self._msg([spid, SERVER_ID], "TUNNEL", out, lambda tp, s=spid: self._srv_tunnel_in(s, tp), out.size,
                  lossless=False, raw=raw, extra={"key_ref": f"{tp.inner.key_ref:016x}"})

    def _sp_audit(self, sp: SpNode, inner: Envelope) -> None:
        """The SP carries the tunnel envelope it cannot read; record that it indeed cannot."""
        if inner.key_ref in sp.audited and not self.check:
            return
        first = inner.key_ref not in sp.audited
        sp.audited.add(inner.key_ref)
        try:
            sp.keyring.open(inner)
            opened = True
        except (AuthFailure, WrongSealType):
            opened = False
        if first or opened:
            self.emit("KEY_AUDIT", sp.id, key_ref=f"{inner.key_ref:016x}", opened=opened)

    def _sp_from_server(self, spid: NodeId, tp: TunnelPacket) -> None:
        sp = self.sps[spid]
        try:
            inb = nat_inbound(sp.nat, tp, self.now)
        except NoMapping:
            self.emit("DROP", spid, reason="no_mapping", port=tp.outer_dst.port)
            return
        self._sp_audit(sp, inb.inner)
        c = sp.state.client_at(inb.outer_dst.value)
        ctx = None
        for cid in sorted(sp.drains):
            if sp.drains[cid].dhcp == inb.outer_dst.value:
                c, ctx = cid, sp.drains[cid]
        if c is None:
            self.emit("DROP", spid, reason="no_client", dst=str(inb.outer_dst))
            return
        a = sp.state.admitted.get(c)
        if a is not None:
            a.bytes_carried += inb.size
        if ctx is not None:
            ctx.rq.downlink.append(inb)
            self._sp_drain(sp, c)
            return
        self._sp_to_client(sp, c, inb)

    def _sp_to_client(self, sp: SpNode, c: NodeId, tp: TunnelPacket) -> None:
        wk = sp.wk.get(c)
        if wk is None:
            sp.parked.setdefault(c, []).append(tp)
            return
        env = seal(wk, tp.encode())
        raw = env.encode()
        self._msg([sp.id, c], "FRAME", env, lambda e, s=sp.id, cc=c: self._c_from_sp(self.clients[cc], s, e),
                  len(raw) + DGRAM_OVERHEAD, lossless=False, raw=raw)

    def _sp_disassoc(self, spid: NodeId, c: NodeId, env: Envelope) -> None:
        sp = self.sps[spid]
        s = sp.spc.get(c)
        if s is None or env.key_ref != s.key.key_id:
            return
        d = _unpack(sp.keyring.open(env))
        self._sp_depart(sp, c, NodeId.parse(d["to"]) if d["to"] else None, d["initiator"])

    def _sp_depart(self, sp: SpNode, c: NodeId, to: Optional[NodeId], initiator: str) -> None:
        """The client left: close its session, forget it, and start draining what is still coming."""
        self._sp_close(sp, c, "withdraw" if sp.withdrawn else "handoff")
        dhcp = sp.state.dhcp.get(c)
        release(sp.state, c)
        for key in (sp.wk.pop(c, None), ):
            if key is not None:
                sp.keyring.discard(key.key_id)
        s = sp.spc.pop(c, None)
        if s is not None:
            sp.keyring.discard(s.key.key_id)
        sp.authorized.discard(c)
        sp.relays.pop(c, None)
        self.emit("RELEASE", sp.id, client=str(c))
        if dhcp is None or c in sp.drains:
            return
        mirror = HandoffPlan(c, sp.id, to, Initiator(initiator), self.sc.handoff.drain_mode,
                             to_us(self.sc.handoff.drain_timer), PlanState.EXECUTING)
        ctx = DrainCtx(mirror, ResidualQueue(sp.id, self.now + mirror.drain_timer_us), dhcp.value, to)
        sp.drains[c] = ctx
        self.emit("DRAIN_START", sp.id, client=str(c), to=str(to) if to else None, mode=mirror.drain_mode.value,
                  deadline=ctx.rq.deadline)
        self.loop.schedule(ctx.rq.deadline, self._sp_drain_deadline, sp, c, ctx)
        self._sp_drain(sp, c)

    def _sp_drain_end(self, spid: NodeId, env: Envelope) -> None:
        sp = self.sps[spid]
        d = _unpack(sp.keyring.open(env))
        c = NodeId.parse(d["client"])
        if c not in sp.drains:
            if c in sp.state.admitted:
                # the client never said goodbye here; it is gone all the same
                self._sp_depart(sp, c, NodeId.parse(d["to"]), "Server")
            else:
                self._sealed([spid, SERVER_ID], "DRAIN_DONE", sp.x.key, {"client": str(c)},
                             lambda env, s=spid: self._srv_drain_done(s, env))
                return
        ctx = sp.drains.get(c)
        if ctx is None:
            return
        ctx.marker = True
        self._sp_drain(sp, c)

    def _sp_drain_deadline(self, sp: SpNode, c: NodeId, ctx: DrainCtx) -> None:
        if sp.drains.get(c) is ctx and not sp.down:
            self._sp_drain(sp, c)

    def _sp_drain(self, sp: SpNode, c: NodeId) -> None:
        ctx = sp.drains[c]
        where = sp.peer_pos.get(ctx.to)
        direct_ok = (ctx.to in sp.peers and where is not None
                     and distance(self._pos(sp.id), where) <= sp.cfg.radio_range)
        step = drain_residual(ctx.plan, ctx.rq, self.now, direct_ok, closed=ctx.marker)
        if step.forwarded:
            self.emit("DRAIN_FWD", sp.id, client=str(c), count=len(step.forwarded), route=step.route.value)
        for tp in step.forwarded:
            body = {"client": str(c), "packet": tp.encode().hex()}
            if step.route is DrainMode.DIRECT_LINK:
                self._sealed([sp.id, ctx.to], "RESIDUAL", sp.peers[ctx.to], body,
                             lambda env, s=ctx.to: self._sp_residual_direct(s, env))
            elif sp.x is not None:
                self._sealed([sp.id, SERVER_ID], "RESIDUAL", sp.x.key, body,
                             lambda env, s=sp.id: self._srv_residual(s, env))
        if step.dropped:
            self.emit("DRAIN_DROP", sp.id, client=str(c), count=len(step.dropped))
        if step.finished:
            del sp.drains[c]
            sp.nat.remove_address(ctx.dhcp)
            self.emit("DRAIN_DONE", sp.id, client=str(c), marker=ctx.marker)
            if ctx.marker and sp.x is not None:
                self._sealed([sp.id, SERVER_ID], "DRAIN_DONE", sp.x.key, {"client": str(c)},
                             lambda env, s=sp.id: self._srv_drain_done(s, env))

    def _sp_residual_direct(self, spid: NodeId, env: Envelope) -> None:
        sp = self.sps[spid]
        try:
            d = _unpack(sp.keyring.open(env))
        except (AuthFailure, WrongSealType):
            self.emit("SECURITY_ALERT", spid, reason="residual does not open")
            return
        c = NodeId.parse(d["client"])
        tp = TunnelPacket.decode(bytes.fromhex(d["packet"]))
        own = sp.state.dhcp.get(c)
        if own is None:
            self.emit("DROP", spid, reason="residual_for_stranger", client=str(c))
            return
        self.emit("RESIDUAL", spid, client=str(c), via="direct")
        self._sp_to_client(sp, c, tp.with_dst(own))

    # server data plane -------------------------------------------------------------

    def _srv_tunnel_in(self, spid: NodeId, tp: TunnelPacket) -> None:
        srv = self.server
        try:
            t, kind, body = decapsulate_record(srv.tun, tp)
        except SecurityAlert as exc:
            self.emit("SECURITY_ALERT", SERVER_ID, reason=str(exc), via=str(spid))
            return
        try:
            if kind is RecordKind.DATA:
                ip = decode_inner(body)
                if ip.src.value != t.vpn_addr.value:
                    raise DecodeError("foreign inner source")
                if ip.reliability is Reliability.RELIABLE:
                    ack = seal_record(t, RecordKind.ACK, encode_ack(ip.flow, ip.seq))
                    self._srv_push(t, ack, TunnelPacket(srv.tun.address, tp.outer_src, ack))
                self._srv_app_in(t, ip)
            elif kind is RecordKind.SHARD:
                gid, cfg, shard, lengths = decode_shard(body)
                col = srv.collectors.setdefault(t.client, GroupCollector())
                for index, pkt, recovered in col.receive(gid, cfg, shard, lengths):
                    ip = decode_inner(pkt)
                    if recovered:
                        self.emit("CODE_RECOVER", SERVER_ID, client=str(t.client), group=gid, index=index,
                                  flow=str(ip.flow), seq=ip.seq)
                    self._srv_app_in(t, ip)
            elif kind is RecordKind.ACK:
                flow, seq = decode_ack(body)
                df = srv.down.get(flow)
                if df is not None and df.sender is not None and df.sender.ack(seq):
                    self._srv_pump(t, flow, df)
            elif kind is RecordKind.OPEN:
                self._srv_open_flow(t, _unpack(body))
            elif kind is RecordKind.REBIND:
                sp, epoch = decode_rebind(body)
                self._srv_rebind(t, sp, epoch, tp.outer_src)
        except DecodeError as exc:
            self.emit("SECURITY_ALERT", SERVER_ID, reason=f"bad {kind.name} record: {exc}", via=str(spid))

    def _srv_app_in(self, t: Tunnel, ip: InnerPacket) -> None:
        srv = self.server
        if ip.flow.client != t.client:
            self.emit("SECURITY_ALERT", SERVER_ID, reason="flow of another client", client=str(t.client))
            return
        if ip.reliability is Reliability.RELIABLE:
            rx = srv.up_rx.setdefault(ip.flow, Resequencer())
            released, verdict = rx.receive(ip.seq, ip)
        else:
            rx = srv.up_rx.setdefault(ip.flow, set())
            verdict = "dup" if ip.seq in rx else "new"
            rx.add(ip.seq)
            released = [ip] if verdict == "new" else []
        if verdict != "new":
            self.emit("APP_DUP" if verdict == "dup" else "DROP", SERVER_ID, flow=str(ip.flow), seq=ip.seq,
                      reason=verdict)
        for p in released:
            self.emit("APP_DELIVER", SERVER_ID, flow=str(p.flow), seq=p.seq, vpn=str(p.src.with_port(0)))
            dg = server_forward(srv.tun, p)
            self._msg([SERVER_ID, HOST_ID], "DGRAM", dg, lambda dg: None, len(dg.payload) + DGRAM_OVERHEAD,
                      lossless=False)

    def _srv_open_flow(self, t: Tunnel, d: dict) -> None:
        fid = FlowId(t.client, d["flow"])
        if fid.index in self.host_flows.get(t.client, {}):
            return
        port = self.server.tun.snat.port_for(t.vpn_addr, fid)
        rel = Reliability(d["reliability"])
        hf = HostFlow(fid, internet_address(1, 80), self.server.tun.address.with_port(port), d["count"], d["size"],
                      to_us(d["interval"]), rel)
        self.host_flows.setdefault(t.client, {})[fid.index] = hf
        coded = bool(d.get("coded")) and self.sc.coding is not None and rel is Reliability.UNRELIABLE
        if coded:
            self.server.assemblers.setdefault(t.client, GroupAssembler(self.sc.coding, GROUP_FLUSH_US))
        self.server.down[fid] = DownFlow(ReliableSender() if rel is Reliability.RELIABLE else None, coded=coded)
        self.emit("FLOW_OPEN", SERVER_ID, flow=str(fid), port=port)
        self.loop.schedule(max(self.now, to_us(d["start"])), self._host_send, hf)

    def _host_send(self, hf: HostFlow) -> None:
        if hf.next_seq >= hf.count:
            return
        seq = hf.next_seq
        hf.next_seq += 1
        dg = Datagram(hf.src, hf.dst, seq, app_payload(hf.fid, seq, hf.size), hf.reliability)
        self.emit("APP_SEND", HOST_ID, flow=str(hf.fid), seq=seq)
        self._msg([HOST_ID, SERVER_ID], "DGRAM", dg, self._srv_dgram, hf.size + DGRAM_OVERHEAD, lossless=False)
        self.loop.after(hf.interval_us, self._host_send, hf)

    def _srv_dgram(self, dg: Datagram) -> None:
        srv = self.server
        try:
            t, ip = server_inbound(srv.tun, dg)
        except NoMapping:
            self.emit("DROP", SERVER_ID, reason="no_snat", dst=str(dg.dst))
            return
        df = srv.down.get(ip.flow)
        if df is None:
            return
        if df.sender is not None:
            df.packets[ip.seq] = ip
            df.sender.push(ip.seq)
            self._srv_pump(t, ip.flow, df)
        elif t.path is None or t.state is not TunnelState.UP:
            if df.queue.push(ip) is not None:
                self.emit("QUEUE_DROP", SERVER_ID, flow=str(ip.flow))
        else:
            self._srv_unreliable_out(t, df, ip)

    def _srv_unreliable_out(self, t: Tunnel, df: DownFlow, ip: InnerPacket) -> None:
        asm = self.server.assemblers.get(t.client)
        if not df.coded or asm is None:
            self._srv_push(t, seal_record(t, RecordKind.DATA, encode_inner(ip)))
            return
        g = asm.add(encode_inner(ip), self.now)
        if g is not None:
            self._srv_send_group(t, g)
        elif len(asm.pending) == 1:
            token = self.server.flush_tokens.get(t.client, 0) + 1
            self.server.flush_tokens[t.client] = token
            self.loop.schedule(asm.flush_at(), self._srv_flush, t, token)

    def _srv_flush(self, t: Tunnel, token: int) -> None:
        if token != self.server.flush_tokens.get(t.client):
            return
        g = self.server.assemblers[t.client].flush(self.now)
        if g is not None:
            self._srv_send_group(t, g)

    def _srv_send_group(self, t: Tunnel, g) -> None:
        cfg = self.sc.coding
        sp = self.server.sp_by_addr.get(t.path.value) if t.path is not None else None
        for i in range(cfg.n):
            self._srv_push(t, seal_record(t, RecordKind.SHARD, encode_shard(g, cfg, i)))
        self.emit("CODE_ENCODE", SERVER_ID, client=str(t.client), group=g.group_id, legs=[str(sp)] * cfg.n)

    def _srv_pump(self, t: Tunnel, fid: FlowId, df: DownFlow) -> None:
        can = t.path is not None and t.state is TunnelState.UP
        if df.sender is None:
            if can:
                for ip in df.queue.drain():
                    self._srv_unreliable_out(t, df, ip)
            return
        for seq, attempt in df.sender.due(self.now, can):
            if attempt > 1:
                self.emit("RETX", SERVER_ID, flow=str(fid), seq=seq, attempt=attempt)
            self._srv_push(t, seal_record(t, RecordKind.DATA, encode_inner(df.packets[seq])))
        for seq in df.sender.failed[df.failed_seen:]:
            self.emit("FLOW_FAIL", SERVER_ID, flow=str(fid), seq=seq)
            df.packets.pop(seq, None)
        df.failed_seen = len(df.sender.failed)
        for seq in [s for s in df.packets if s not in df.sender.inflight and s not in df.sender.backlog]:
            del df.packets[seq]
        nt = df.sender.next_timer()
        if can and nt is not None and (df.timer_at is None or nt < df.timer_at):
            df.timer_at = nt
            self.loop.schedule(max(nt, self.now), self._srv_pump_timer, t, fid, df, nt)

    def _srv_pump_timer(self, t: Tunnel, fid: FlowId, df: DownFlow, at: int) -> None:
        if df.timer_at != at:
            return
        df.timer_at = None
        self._srv_pump(t, fid, df)

    def _srv_push(self, t: Tunnel, env: Envelope, tp: Optional[TunnelPacket] = None) -> None:
        """Send a sealed record down the client's current path (or the given packet's path)."""
        if tp is None:
            if t.path is None:
                return
            tp = TunnelPacket(self.server.tun.address, t.path, env)
        sp = self.server.sp_by_addr.get(tp.outer_dst.value)
        if sp is None or sp in self.server.dead:
            return
        self._msg([SERVER_ID, sp], "TUNNEL", tp, lambda tp, s=sp: self._sp_from_server(s, tp), tp.size,
                  lossless=False, raw=tp.encode(), extra={"key_ref": f"{env.key_ref:016x}"})

    def _srv_rebind(self, t: Tunnel, sp: NodeId, epoch: int, path: Address) -> None:
        srv = self.server
        c = t.client
        if epoch <= srv.epochs.get(c, 0):
            self.emit("REBIND_STALE", SERVER_ID, client=str(c), sp=str(sp), epoch=epoch)
            return
        if srv.sp_by_addr.get(path.value) != sp:
            self.emit("SECURITY_ALERT", SERVER_ID, reason="rebind path does not match its SP", client=str(c))
            return
        srv.epochs[c] = epoch
        srv.ctl_via[c] = sp
        old = t.path
        t.path = path
        t.state = TunnelState.UP
        self.emit("TUNNEL_REBIND", SERVER_ID, client=str(c), sp=str(sp), path=str(path), epoch=epoch,
                  vpn=str(t.vpn_addr))
        plan = srv.plans.get(c)
        if plan is not None and plan.state is PlanState.PREAUTHED and plan.to_sp == sp:
            plan.advance(PlanState.EXECUTING, self.now)
            self.emit("HANDOFF_EXECUTE", SERVER_ID, **plan.snapshot())
            plan.advance(PlanState.DRAINING, self.now)
            self.emit("HANDOFF_DRAIN", SERVER_ID, **plan.snapshot())
            origin = plan.from_sp
            if origin is None or origin in srv.dead or not srv.state.active_with(origin):
                self._srv_try_complete(c)
            else:
                self._srv_to_sp(origin, "DRAIN_END", {"client": str(c), "to": str(sp)},
                                lambda env, s=origin: self._sp_drain_end(s, env))
        elif old is not None and srv.sp_by_addr.get(old.value) not in (None, sp):
            # a path change outside a plan (leg promotion or re-attachment): the old SP lets go
            prev = srv.sp_by_addr[old.value]
            if prev not in srv.dead:
                self._srv_to_sp(prev, "DRAIN_END", {"client": str(c), "to": str(sp)},
                                lambda env, s=prev: self._sp_drain_end(s, env))
        for env in srv.held.pop(c, []):
            self._srv_push(t, env)
        for fid in sorted(f for f in srv.down if f.client == c):
            self._srv_pump(t, fid, srv.down[fid])

    # clients: discovery and attachment ------------------------------------------------

    def _c_tick(self, c: ClientNode) -> None:
        self._pos(c.id)
        c.ticks += 1
        for sp, until in list(c.avoid.items()):
            if until <= self.now:
                del c.avoid[sp]
        for sp in sorted(c.legs):
            if c.watch.vanished(sp, self.now):
                self._c_leg_lost(c, sp)
        if c.phase == "scan":
            self._c_attach(c)
        elif c.phase == "up":
            self._c_watch(c)
        if c.x is not None and c.primary is not None and c.ticks % REPORT_EVERY == 0:
            rep = report_neighborhood(c.id, c.state.position, c.heard.values(), self.now, c.cfg.radio_range)
            self._c_ctl(c, {"op": "report", "pos": list(rep.position),
                            "heard": [_beacon_dict(b, q) for b, q in rep.heard]})
        self._c_pump_all(c)
        self.loop.after(self.beacon_us, self._c_tick, c)

    def _c_beacon(self, c: ClientNode, b: Beacon) -> None:
        c.heard[b.sp] = b
        c.watch.heard(b.sp, self.now)
        if b.sp in c.wk:
            self._c_pump_all(c)

    def _c_ranked(self, c: ClientNode, exclude=()) -> list:
        self._pos(c.id)
        skip = set(exclude) | set(c.avoid)
        try:
            return client_discover(c.state, c.heard.values(), self.now, self.w, self.adhoc.bandwidth, skip)
        except NoProvider:
            return []

    def _c_offer(self, c: ClientNode, b: Beacon) -> float:
        q = link_quality(c.state.position, b.position, c.cfg.radio_range)
        return min(b.avail_bandwidth, q * self.adhoc.bandwidth)

    def _c_attach(self, c: ClientNode) -> None:
        ranked = self._c_ranked(c)
        if not ranked:
            return
        share = 1.0
        if c.cfg.parallel:
            offers = [(b.sp, self._c_offer(c, b)) for b, _ in ranked if self._c_offer(c, b) > 0]
            if not offers:
                return
            c.plan = plan_parallel(c.id, offers, c.state.needs.avg_bandwidth, c.cfg.radios)
            c.plan_active = False
            primary, share = c.plan.legs[0].sp, c.plan.legs[0].fraction
        else:
            primary = ranked[0][0].sp
        c.phase = "admitting"
        self._c_admit(c, primary, share, "attach")

    def _c_admit(self, c: ClientNode, sp: NodeId, share: float, purpose: str) -> None:
        c.tokens += 1
        token = c.tokens
        c.pending[sp] = (purpose, share, token)
        b = c.heard.get(sp)
        cost = b.cost if b is not None else c.state.needs.cost
        promise = QosPromise(c.state.needs.avg_bandwidth * share, c.state.needs.duration, cost)
        req = {"client": str(c.id), "promise": [promise.avg_bandwidth, promise.duration, promise.cost],
               "token": token}
        self.emit("ADMIT_REQ", c.id, sp=str(sp), purpose=purpose, bandwidth=promise.avg_bandwidth)
        self._msg([c.id, sp], "ADMIT_REQ", req, lambda r, s=sp: self._sp_admit(s, r), 64, lossless=False)
        self.loop.after(ADMIT_TIMEOUT_US, self._c_admit_timeout, c, sp, token)

    def _c_admit_timeout(self, c: ClientNode, sp: NodeId, token: int) -> None:
        p = c.pending.get(sp)
        if p is not None and p[2] == token:
            self._c_admit_resp(c, sp, {"ok": False, "reason": "timeout", "token": token})

    def _c_admit_resp(self, c: ClientNode, sp: NodeId, resp: dict) -> None:
        p = c.pending.get(sp)
        if p is None or p[2] != resp["token"]:
            return
        del c.pending[sp]
        purpose, share, _ = p
        if not resp["ok"]:
            self.emit("ADMIT_FAIL", c.id, sp=str(sp), purpose=purpose, reason=resp["reason"])
            if purpose == "attach":
                c.avoid[sp] = self.now + AVOID_US
                c.phase = "scan"
                c.plan = None
            elif purpose == "leg":
                self._c_leg_gone(c, sp)
            elif purpose == "handoff":
                self._c_handoff_failed(c, f"denied: {resp['reason']}")
            return
        addr = Address.of(resp["addr"], TUNNEL_PORT)
        if purpose == "attach":
            bind(c.state, sp, addr)
            c.legs[sp] = addr
            self.emit("ASSOCIATE", c.id, sp=str(sp), dhcp=str(addr))
            c.phase = "auth"
            c.hs_tries = 0
            self._hs_begin(c)
        elif purpose == "leg":
            c.legs[sp] = addr
            self.emit("LEG_ADMIT", c.id, sp=str(sp), dhcp=str(addr), fraction=share)
            self._c_propose_spc(c, sp)
        elif purpose == "handoff":
            self._c_handoff_execute(c, sp, addr)

    def _c_session_up(self, c: ClientNode) -> None:
        c.phase = "keys"
        self._c_propose_spc(c, c.primary)

    def _c_propose_spc(self, c: ClientNode, sp: NodeId) -> None:
        """Client-generated K_SP,C, carried to the SP by the server over X_C,S and X_SP,S."""
        if c.x is None or c.primary is None:
            return
        k = self.registry.keygen(c.rng)
        c.keyring.add(k)
        c.spc[sp] = ControlSession(k.key_id, (c.id, sp), k, SessionKind.SP_CLIENT, SessionState.ESTABLISHING)
        m = key_message(MsgKind.KEY_PROPOSAL, c.id, SERVER_ID, c.x.key, sp, k)
        self._control([c.id, c.primary, SERVER_ID], "KEY_PROPOSAL", m, lambda m, cc=c.id: self._srv_key_proposal(cc, m))

    def _c_spc_accept(self, c: ClientNode, sp: NodeId, m: ControlMessage) -> None:
        s = c.spc.get(sp)
        if s is None:
            return
        try:
            parse_accept_plain(c.keyring.open(m.body))
        except (AuthFailure, WrongSealType, DecodeError):
            self.emit("SECURITY_ALERT", c.id, reason="bad accept", src=str(sp))
            return
        s.state = SessionState.ACTIVE
        self.emit("SPC_UP", c.id, sp=str(sp), key_ref=f"{s.key.key_id:016x}")
        self._c_link_key(c, sp)

    def _c_link_key(self, c: ClientNode, sp: NodeId) -> None:
        lk, msgs = establish_link_key(c.id, sp, c.spc[sp], self.registry, c.rng)
        c.keyring.add(lk.key)
        c.pending_wk[sp] = lk.key
        self._control([c.id, sp], "LINK_KEY", msgs[0], lambda m, s=sp: self._sp_link_key(s, m))

    def _c_wk_accept(self, c: ClientNode, sp: NodeId, m: ControlMessage) -> None:
        wk = c.pending_wk.pop(sp, None)
        if wk is None or sp not in c.legs:
            return
        try:
            parse_accept_plain(c.keyring.open(m.body))
        except (AuthFailure, WrongSealType, DecodeError):
            self.emit("SECURITY_ALERT", c.id, reason="bad link accept", src=str(sp))
            return
        c.wk[sp] = wk
        self.emit("LEG_READY", c.id, sp=str(sp), key_ref=f"{wk.key_id:016x}")
        if c.handoff is not None and c.handoff.get("to") == sp and c.primary == sp:
            self._c_rebind(c, sp, handoff=True)
            c.handoff = None
        elif sp == c.primary and c.phase == "keys":
            c.phase = "tunnel"
            self._sealed([c.id, sp, SERVER_ID], "TUNNEL_REQ", c.x.key,
                         {"needs": [c.state.needs.avg_bandwidth, c.state.needs.duration, c.state.needs.cost]},
                         lambda env, cc=c.id: self._srv_tunnel_req(cc, env))
        else:
            self._c_plan_check(c)

    def _c_tunnel_ok(self, c: ClientNode, env: Envelope) -> None:
        d = _unpack(c.keyring.open(env))
        key = SymmetricKey.from_bytes(bytes.fromhex(d["key"]))
        vpn = Address(AddrKind.CLIENT_VPN, d["vpn"])
        old = c.state.tunnel
        c.state.tunnel = Tunnel(c.id, vpn, key)
        if c.first_tunnel is None:
            c.first_tunnel = (vpn.value, key.key_id)
        first_time = old is None
        self._c_rebind(c, c.primary, handoff=False)
        c.phase = "up"
        if first_time:
            for i, f in enumerate(c.cfg.flows):
                if f.direction == "down":
                    body = _pack({"flow": i, "count": f.count, "size": f.size, "interval": f.interval,
                                  "reliability": int(f.reliability), "start": f.start, "coded": f.coded})
                    self._c_record(c, RecordKind.OPEN, body, lossless=True)
            for uf in c.up:
                self.loop.schedule(max(self.now, to_us(uf.cfg.start)), self._c_app, c, uf)
        if c.cfg.parallel and c.plan is not None:
            for leg in c.plan.legs[1:]:
                if leg.sp not in c.legs and leg.sp not in c.pending:
                    self._c_admit(c, leg.sp, leg.fraction, "leg")
            self._c_plan_check(c)
        else:
            for b, _ in self._c_ranked(c, exclude=[c.primary])[:2]:
                self._msg([c.id, b.sp], "LIGHTWEIGHT_REQ", c.id, lambda cc, s=b.sp: self._sp_standby(s, cc), 32)

    def _c_rebind(self, c: ClientNode, sp: NodeId, handoff: bool) -> None:
        c.epoch += 1
        c.state.tunnel.state = TunnelState.UP
        self._c_record(c, RecordKind.REBIND, encode_rebind(sp, c.epoch), sp=sp, lossless=True)
        t = c.state.tunnel
        self.emit("TUNNEL_UP", c.id, sp=str(sp), vpn=str(t.vpn_addr), key_ref=f"{t.key.key_id:016x}",
                  epoch=c.epoch, handoff=handoff)
        self._c_pump_all(c)

    def _c_standby(self, c: ClientNode, sp: NodeId, ok: bool) -> None:
        if ok and sp != c.primary:
            c.state.lightweight.add(sp)

    def _c_ctl(self, c: ClientNode, body: dict) -> None:
        via = c.primary
        if c.x is None or via is None:
            return
        self._sealed([c.id, via, SERVER_ID], "CLIENT_CTL", c.x.key, body,
                     lambda env, cc=c.id, v=via: self._srv_client_ctl(cc, v, env))

    def _c_reset(self, c: ClientNode, reason: str) -> None:
        self.emit("RESET", c.id, reason=reason)
        for sp in sorted(set(c.legs) | set(c.spc)):
            self._c_forget(c, sp)
        c.pending.clear()
        if c.x is not None:
            c.keyring.discard(c.x.key.key_id)
        c.x = None
        c.hs = None
        c.hs_epoch += 1
        c.hs_tries = 0
        c.plan = None
        c.plan_active = False
        c.picker = None
        c.slot_sp = None
        c.tdm_epoch += 1
        c.handoff = None
        if c.state.tunnel is not None:
            c.state.tunnel.state = TunnelState.REBINDING
        c.phase = "scan"

    def _c_forget(self, c: ClientNode, sp: NodeId) -> None:
        c.legs.pop(sp, None)
        for store in (c.wk, c.pending_wk):
            k = store.pop(sp, None)
            if k is not None:
                c.keyring.discard(k.key_id)
        s = c.spc.pop(sp, None)
        if s is not None:
            c.keyring.discard(s.key.key_id)
        c.state.lightweight.discard(sp)
        if c.state.association == sp:
            c.state.association = None
            c.state.dhcp_addr = None

    # clients: parallel legs ---------------------------------------------------------

    def _c_plan_check(self, c: ClientNode) -> None:
        if c.plan is None or c.state.tunnel is None:
            return
        if any(l.sp not in c.wk for l in c.plan.legs):
            return
        if not c.plan_active:
            c.plan_active = True
            self._c_plan_apply(c)

    def _c_plan_apply(self, c: ClientNode) -> None:
        plan = c.plan
        c.picker = WeightedPicker([l.fraction for l in plan.legs])
        c.tdm_epoch += 1
        c.slot_sp = None
        self.emit("PARALLEL_PLAN", c.id, mode=plan.mode.value, best_effort=plan.best_effort,
                  legs=[[str(l.sp), l.fraction, l.bandwidth, l.radio] for l in plan.legs])
        if plan.mode is ParallelMode.SINGLE_RADIO_TDM and len(plan.legs) > 1:
            horizon = (self.end_us - self.now) / 1e6
            for slot in schedule_tdm(plan, self.sc.tdm_quantum, horizon, self.now / 1e6):
                self.loop.schedule(slot.start, self._c_slot, c, c.tdm_epoch, slot)

    def _c_slot(self, c: ClientNode, epoch: int, slot) -> None:
        if epoch != c.tdm_epoch:
            return
        c.slot_sp = slot.sp
        self.emit("TDM_SLOT", c.id, sp=str(slot.sp), start=slot.start, end=slot.end)
        self._c_pump_all(c)

    def _c_leg_gone(self, c: ClientNode, sp: NodeId) -> None:
        """Drop a leg from the plan (lost or refused) and spread its share over the rest."""
        if c.plan is None or sp not in c.plan.sps:
            return
        try:
            c.plan = reallocate(c.plan, LegLost(sp))
        except AllLegsLost:
            self._c_reset(c, "all legs lost")
            return
        if c.plan_active:
            self._c_plan_apply(c)
        else:
            self._c_plan_check(c)

    def _c_leg_lost(self, c: ClientNode, sp: NodeId) -> None:
        self.emit("LEG_LOST", c.id, sp=str(sp), silent_us=c.watch.silent_for(sp, self.now))
        c.watch.last.pop(sp, None)
        c.heard.pop(sp, None)
        c.avoid[sp] = self.now + AVOID_US
        was_primary = sp == c.primary
        self._c_forget(c, sp)
        if c.handoff is not None and c.handoff.get("to") == sp:
            self._c_handoff_failed(c, "target lost")
            return
        if c.plan is not None and len(c.plan.legs) > 1:
            self._c_leg_gone(c, sp)
            if c.plan is None:
                return
            if was_primary:
                new = next((l.sp for l in c.plan.legs if l.sp in c.wk), None)
                if new is None:
                    self._c_reset(c, "vanish")
                    return
                bind(c.state, new, c.legs[new])
                self.emit("PROMOTE", c.id, sp=str(new))
                self._c_rebind(c, new, handoff=False)
            self._c_ctl(c, {"op": "leg_lost", "sp": str(sp)})
        elif was_primary:
            self._c_reset(c, "vanish")

    # clients: handoff ---------------------------------------------------------------

    def _c_watch(self, c: ClientNode) -> None:
        """Ask the server for a handoff once the serving link fades and someone better is in reach."""
        if c.handoff is not None:
            if self.now - c.handoff["at"] > PLAN_TIMEOUT_US + ADMIT_TIMEOUT_US:
                self._c_handoff_failed(c, "no plan")
            return
        if c.cfg.parallel or c.primary is None or c.primary not in c.heard:
            return
        here = c.heard[c.primary]
        q = link_quality(c.state.position, here.position, c.cfg.radio_range)
        if q >= self.sc.handoff.trigger_quality:
            return
        cands = [(b, link_quality(c.state.position, b.position, c.cfg.radio_range))
                 for b, _ in self._c_ranked(c, exclude=[c.primary])]
        cands = [(b, l) for b, l in cands if l > q]
        if not cands:
            return
        self._c_handoff_request(c, cands, "signal")

    def _c_handoff_request(self, c: ClientNode, cands, reason: str) -> None:
        c.handoff = {"to": None, "from": c.primary, "at": self.now, "reason": reason}
        n = c.state.needs
        self.emit("HANDOFF_ASK", c.id, sp=str(c.primary), reason=reason, cands=[str(b.sp) for b, _ in cands])
        self._c_ctl(c, {"op": "handoff", "needs": [n.avg_bandwidth, n.duration, n.cost],
                        "from": str(c.primary) if c.primary else None, "reason": reason,
                        "cands": [_beacon_dict(b, l) for b, l in cands]})

    def _c_withdraw_notice(self, c: ClientNode, spid: NodeId, env: Envelope) -> None:
        s = c.spc.get(spid)
        if s is None or env.key_ref != s.key.key_id:
            return
        c.keyring.open(env)
        self.emit("WITHDRAW_NOTICE", c.id, sp=str(spid))
        c.avoid[spid] = self.end_us
        if c.handoff is None:
            c.handoff = {"to": None, "from": spid, "at": self.now, "reason": "withdraw"}

    def _c_key_stage(self, c: ClientNode, m: ControlMessage) -> None:
        if c.x is None:
            return
        try:
            sp, k = parse_key_plain(c.keyring.open(m.body))
        except (AuthFailure, WrongSealType, DecodeError):
            self.emit("SECURITY_ALERT", c.id, reason="staged key does not open")
            return
        c.keyring.add(k)
        c.spc[sp] = ControlSession(k.key_id, (c.id, sp), k, SessionKind.SP_CLIENT)
        self.emit("KEY_STAGE", c.id, client=str(c.id), sp=str(sp), key_ref=f"{k.key_id:016x}", purpose="preauth")
        if c.handoff is None:
            c.handoff = {"from": c.primary, "reason": "server"}
        c.handoff.update(to=sp, at=self.now)
        self._c_admit(c, sp, 1.0, "handoff")

    def _c_handoff_execute(self, c: ClientNode, sp: NodeId, addr: Address) -> None:
        old = c.primary
        self.emit("DISASSOC", c.id, sp=str(old) if old else None, to=str(sp))
        if old is not None and old in c.spc:
            self._sealed([c.id, old], "DISASSOC", c.spc[old].key,
                         {"to": str(sp), "initiator": "Client" if c.handoff.get("reason") == "signal" else "Sp"},
                         lambda env, s=old, cc=c.id: self._sp_disassoc(s, cc, env))
        if old is not None:
            self._c_forget(c, old)
        bind(c.state, sp, addr)
        c.legs[sp] = addr
        self.emit("ASSOCIATE", c.id, sp=str(sp), dhcp=str(addr), handoff=True)
        if c.state.tunnel is not None:
            c.state.tunnel.state = TunnelState.REBINDING
        self._c_link_key(c, sp)

    def _c_handoff_failed(self, c: ClientNode, reason: str) -> None:
        h = c.handoff
        c.handoff = None
        self.emit("HANDOFF_FAIL", c.id, reason=reason)
        if h is not None and h.get("to") is not None:
            self._c_ctl(c, {"op": "abort", "reason": reason})
            if h["to"] != c.primary:
                self._c_forget(c, h["to"])
        if c.primary is None or c.primary in c.avoid:
            self._c_reset(c, "handoff failed")

    def _c_handoff_abort(self, c: ClientNode, env: Envelope) -> None:
        d = _unpack(c.keyring.open(env))
        self.emit("HANDOFF_ABORT", c.id, reason=d["reason"])
        h = c.handoff
        c.handoff = None
        if c.primary is None or (h is not None and h.get("reason") == "withdraw"):
            self._c_reset(c, "handoff aborted")

    # clients: data plane ----------------------------------------------------------------

    def _c_ready(self, c: ClientNode) -> list:
        order = c.plan.sps if c.plan is not None else []
        rest = sorted(sp for sp in c.wk if sp not in order)
        return [sp for sp in list(order) + rest if sp in c.wk and sp in c.legs]

    def _c_pick(self, c: ClientNode) -> Optional[NodeId]:
        ready = self._c_ready(c)
        if not ready:
            return None
        if c.plan_active and c.plan is not None:
            if c.plan.mode is ParallelMode.SINGLE_RADIO_TDM and len(c.plan.legs) > 1:
                if c.slot_sp in ready:
                    return c.slot_sp
            elif c.picker is not None:
                sp = c.plan.legs[c.picker.next()].sp
                if sp in ready:
                    return sp
        return c.primary if c.primary in ready else ready[0]

    def _c_can_send(self, c: ClientNode, reliable: bool) -> bool:
        t = c.state.tunnel
        if t is None or t.state is not TunnelState.UP or c.handoff is not None and c.primary not in c.wk:
            return False
        ready = self._c_ready(c)
        if not ready:
            return False
        if reliable:
            limit = SILENCE_PAUSE * self.beacon_us
            return any(c.watch.silent_for(sp, self.now) <= limit for sp in ready)
        return True

    def _c_record(self, c: ClientNode, kind: RecordKind, body: bytes, sp: Optional[NodeId] = None,
                  lossless: bool = False) -> Optional[NodeId]:
        sp = sp or self._c_pick(c)
        if sp is None or sp not in c.wk or c.state.tunnel is None:
            return None
        tp = encapsulate_record(c.state.tunnel, c.legs[sp], kind, body)
        env = seal(c.wk[sp], tp.encode())
        raw = env.encode()
        self._msg([c.id, sp], "FRAME", env, lambda e, s=sp, cc=c.id: self._sp_from_client(s, cc, e),
                  len(raw) + DGRAM_OVERHEAD, lossless=lossless, raw=raw, extra={"record": kind.name})
        return sp

    def _c_app(self, c: ClientNode, uf: UpFlow) -> None:
        if uf.next_seq >= uf.cfg.count:
            return
        seq = uf.next_seq
        uf.next_seq += 1
        t = c.state.tunnel
        ip = InnerPacket(t.vpn_addr.with_port(uf.port), internet_address(1, 80), uf.fid, seq,
                         app_payload(uf.fid, seq, uf.cfg.size), uf.cfg.reliability)
        self.emit("APP_SEND", c.id, flow=str(uf.fid), seq=seq)
        if uf.sender is not None:
            uf.packets[seq] = ip
            uf.sender.push(seq)
            self._c_pump(c, uf)
        elif self._c_can_send(c, False):
            self._c_unreliable_out(c, uf, ip)
        else:
            if uf.queue.push(ip) is not None:
                self.emit("QUEUE_DROP", c.id, flow=str(uf.fid))
        self.loop.after(to_us(uf.cfg.interval), self._c_app, c, uf)

    def _c_unreliable_out(self, c: ClientNode, uf: UpFlow, ip: InnerPacket) -> None:
        if uf.cfg.coded and c.assembler is not None:
            g = c.assembler.add(encode_inner(ip), self.now)
            if g is not None:
                self._c_send_group(c, g)
            elif len(c.assembler.pending) == 1:
                c.flush_token += 1
                self.loop.schedule(c.assembler.flush_at(), self._c_flush, c, c.flush_token)
            return
        self._c_record(c, RecordKind.DATA, encode_inner(ip))

    def _c_flush(self, c: ClientNode, token: int) -> None:
        if token != c.flush_token:
            return
        g = c.assembler.flush(self.now)
        if g is not None:
            self._c_send_group(c, g)

    def _c_send_group(self, c: ClientNode, g) -> None:
        cfg = self.sc.coding
        legs = self._c_ready(c)
        if not legs:
            return
        if c.plan is not None and c.plan_active:
            fr = [c.plan.fraction_of(sp) for sp in legs]
            if sum(fr) <= 0:
                fr = [1.0] * len(legs)
        else:
            fr = [1.0] + [0.0] * (len(legs) - 1)
        pick = assign_shards(fr, cfg.n)
        sent = []
        for i, leg in enumerate(pick):
            sent.append(str(self._c_record(c, RecordKind.SHARD, encode_shard(g, cfg, i), sp=legs[leg])))
        self.emit("CODE_ENCODE", c.id, group=g.group_id, legs=sent)

    def _c_pump(self, c: ClientNode, uf: UpFlow) -> None:
        can = self._c_can_send(c, True)
        for seq, attempt in uf.sender.due(self.now, can):
            if attempt > 1:
                self.emit("RETX", c.id, flow=str(uf.fid), seq=seq, attempt=attempt)
            self._c_record(c, RecordKind.DATA, encode_inner(uf.packets[seq]))
        for seq in uf.sender.failed[uf.failed_seen:]:
            self.emit("FLOW_FAIL", c.id, flow=str(uf.fid), seq=seq)
            uf.packets.pop(seq, None)
        uf.failed_seen = len(uf.sender.failed)
        nt = uf.sender.next_timer()
        if can and nt is not None and (uf.timer_at is None or nt < uf.timer_at):
            uf.timer_at = nt
            self.loop.schedule(max(nt, self.now), self._c_pump_timer, c, uf, nt)

    def _c_pump_timer(self, c: ClientNode, uf: UpFlow, at: int) -> None:
        if uf.timer_at != at:
            return
        uf.timer_at = None
        self._c_pump(c, uf)

    def _c_pump_all(self, c: ClientNode) -> None:
        if c.state.tunnel is None:
            return
        for uf in c.up:
            if uf.sender is not None:
                if not uf.sender.idle:
                    self._c_pump(c, uf)
            elif len(uf.queue) and self._c_can_send(c, False):
                for ip in uf.queue.drain():
                    self._c_unreliable_out(c, uf, ip)

    def _c_from_sp(self, c: ClientNode, spid: NodeId, env: Envelope) -> None:
        wk = c.wk.get(spid)
        t = c.state.tunnel
        if wk is None or env.key_ref != wk.key_id or t is None:
            self.emit("DROP", c.id, reason="no_link_key", src=str(spid))
            return
        try:
            tp = TunnelPacket.decode(c.keyring.open(env))
            kind, body = client_open(t, tp)
        except (AuthFailure, WrongSealType, DecodeError, SecurityAlert) as exc:
            self.emit("SECURITY_ALERT", c.id, reason=str(exc), src=str(spid))
            return
        if kind is RecordKind.ACK:
            flow, seq = decode_ack(body)
            uf = next((u for u in c.up if u.fid == flow), None)
            if uf is not None and uf.sender is not None and uf.sender.ack(seq):
                uf.packets.pop(seq, None)
                self._c_pump(c, uf)
            return
        if kind is RecordKind.SHARD:
            gid, cfg, shard, lengths = decode_shard(body)
            for index, pkt, recovered in c.collector.receive(gid, cfg, shard, lengths):
                ip = decode_inner(pkt)
                if recovered:
                    self.emit("CODE_RECOVER", c.id, client=str(c.id), group=gid, index=index, flow=str(ip.flow),
                              seq=ip.seq)
                self._c_app_in(c, ip)
            return
        if kind is not RecordKind.DATA:
            return
        ip = decode_inner(body)
        if ip.reliability is Reliability.RELIABLE:
            self._c_record(c, RecordKind.ACK, encode_ack(ip.flow, ip.seq), sp=spid if spid in c.wk else None)
        self._c_app_in(c, ip)

    def _c_app_in(self, c: ClientNode, ip: InnerPacket) -> None:
        rx = c.down_rx.get(ip.flow)
        if rx is None:
            return
        if isinstance(rx, Resequencer):
            released, verdict = rx.receive(ip.seq, ip)
        else:
            verdict = "dup" if ip.seq in rx else "new"
            rx.add(ip.seq)
            released = [ip] if verdict == "new" else []
        if verdict != "new":
            self.emit("APP_DUP" if verdict == "dup" else "DROP", c.id, flow=str(ip.flow), seq=ip.seq,
                      reason=verdict)
        for p in released:
            self.emit("APP_DELIVER", c.id, flow=str(p.flow), seq=p.seq, vpn=str(p.dst.with_port(0)))

    # invariants and wrap-up ------------------------------------------------------------

    def _check(self) -> None:
        problems = []
        for sp in self.sps.values():
            if not sp.nat.is_bijective():
                problems.append(f"{sp.id} NAT is not a bijection")
            if len({a.value for a in sp.state.dhcp.values()}) != len(sp.state.dhcp):
                problems.append(f"{sp.id} handed out a DHCP address twice")
            if not set(sp.state.dhcp) <= set(sp.state.admitted):
                problems.append(f"{sp.id} has an address for a client it never admitted")
        if not self.server.tun.snat.is_bijective():
            problems.append("server NAT is not a bijection")
        attempts = self.registry.attempts
        for a in attempts[self._attempts_seen:]:
            if a.ok and a.node.role is Role.SERVICE_PROVIDER and a.key_ref in self._tunnel_keys:
                problems.append(f"{a.node} opened a tunnel envelope")
        self._attempts_seen = len(attempts)
        for c in self.clients.values():
            if not c.state.consistent():
                problems.append(f"{c.id} association state is inconsistent")
            t = c.state.tunnel
            if t is not None and c.first_tunnel != (t.vpn_addr.value, t.key.key_id):
                problems.append(f"{c.id} tunnel changed")
        for c, t in self.server.tun.tunnels.items():
            if t.vpn_addr.kind is not AddrKind.CLIENT_VPN:
                problems.append(f"{c} tunnel has a non-VPN address")
        if problems:
            self.emit("INVARIANT", SERVER_ID, problems=problems)
            raise InvariantViolation("; ".join(problems))

    def _finish(self) -> None:
        self.finished = True
        for sp in self.sps.values():
            if sp.down and sp.id not in self.server.dead:
                self._srv_sp_lost(sp.id)
        for sp in self.sps.values():
            if not sp.down:
                for c in sorted(sp.state.admitted):
                    self._sp_close(sp, c, "end")
        for sid in sorted(self._unsettled):
            self.emit("LATE_SETTLE", SERVER_ID, session=sid)
            self._srv_settle(self._unsettled[sid])
        collectors = [(SERVER_ID, c, col) for c, col in sorted(self.server.collectors.items())]
        collectors += [(c, c, self.clients[c].collector) for c in sorted(self.clients)]
        for node, c, col in collectors:
            for gid, missing in sorted(col.unrecovered().items()):
                if missing:
                    self.emit("CODE_FAIL", node, client=str(c), group=gid, missing=missing)
        sp_opens = sum(1 for a in self.registry.attempts
                       if a.ok and a.node.role is Role.SERVICE_PROVIDER and a.key_ref in self._tunnel_keys)
        self.emit("END", SERVER_ID, inflight=len(self.loop.pending("msg")), events=self.loop.processed,
                  energy={str(s): round(sp.state.energy, 6) for s, sp in self.sps.items()},
                  sp_tunnel_opens=sp_opens)
        if self.check and sp_opens:
            raise InvariantViolation(f"{sp_opens} tunnel envelope opens by service providers")


def run_scenario(scenario: Scenario, seed: Optional[int] = None, check: bool = False, dump_bytes: bool = False,
                 sink=None) -> tuple[Trace, dict]:
    """Run one scenario; the report is derived from the trace it produced."""
    from .report import report_from_trace

    trace = World(scenario, seed, check, dump_bytes, sink).run()
    return trace, report_from_trace(trace.events())
