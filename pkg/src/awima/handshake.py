"""Control-session establishment between Service Providers, Clients and the Server.

SpServer script (5 messages):
    1 SP->S CertRequest   2 S->SP CertResponse   3 SP->S KeyProposal (asym, server key)
    4 SP->S Credentials (sealed, new key)        5 S->SP Accept (sealed, new key)
ClientServer runs the same script relayed through the client's SP and adds
    6 S->SP AuthNotify (sealed under the SP's own server session)
The SP holds the relayed Accept until AuthNotify checks out, so a client can
only finish its handshake once its SP will also serve it.

The responder's copy of a session stays Establishing until the initiator's
first sealed message under the new key arrives (``ControlSession.confirm``).
A tampered Accept therefore leaves no Active session on either side.
"""

from __future__ import annotations

import enum
import hashlib
import random
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

from .core import SERVER_ID, DecodeError, NodeId, Role
from .crypto import (AuthFailure, Certificate, Envelope, KeyPair, KeyRegistry, SealType,
                     SymmetricKey, TrustRoot, WrongSealType, open_envelope, seal)

RETRANSMIT_TIMEOUT_US = 2_000_000
MAX_RETRANSMITS = 1

_NO_NODE = b"\xff" * 5


class HandshakeError(Exception):
    pass


class NoPath(HandshakeError):
    pass


class CertInvalid(HandshakeError):
    pass


class Rejected(HandshakeError):
    pass


class ProtocolViolation(HandshakeError):
    pass


class MissingSession(HandshakeError):
    pass


class SelfSession(HandshakeError):
    pass


class SessionKind(enum.IntEnum):
    SP_SERVER = 0
    CLIENT_SERVER = 1
    SP_CLIENT = 2
    SP_SP = 3


class SessionState(enum.Enum):
    ESTABLISHING = "Establishing"
    ACTIVE = "Active"
    CLOSED = "Closed"


@dataclass
class ControlSession:
    session_id: int
    principals: tuple[NodeId, NodeId]
    key: SymmetricKey
    kind: SessionKind
    state: SessionState = SessionState.ACTIVE

    @property
    def active(self) -> bool:
        return self.state is SessionState.ACTIVE

    def peer_of(self, node: NodeId) -> NodeId:
        a, b = self.principals
        return b if node == a else a

    def joins(self, a: NodeId, b: NodeId) -> bool:
        return set(self.principals) == {a, b}

    def confirm(self, e: Envelope) -> bool:
        """Promote an Establishing session on the first valid envelope under its key."""
        if self.state is not SessionState.ESTABLISHING:
            return self.active
        try:
            open_envelope(self.key, e)
        except (AuthFailure, WrongSealType):
            return False
        self.state = SessionState.ACTIVE
        return True

    def close(self) -> None:
        self.state = SessionState.CLOSED


class MsgKind(enum.IntEnum):
    CERT_REQUEST = 1
    CERT_RESPONSE = 2
    KEY_PROPOSAL = 3
    CREDENTIALS = 4
    ACCEPT = 5
    REJECT = 6
    AUTH_NOTIFY = 7
    KEY_RELAY = 8


Body = Union[bytes, Envelope, Certificate]

_PLAIN, _ENVELOPE, _CERT = 0, 1, 2
_BODY_TYPES = {
    MsgKind.CERT_REQUEST: _PLAIN,
    MsgKind.REJECT: _PLAIN,
    MsgKind.CERT_RESPONSE: _CERT,
    MsgKind.KEY_PROPOSAL: _ENVELOPE,
    MsgKind.CREDENTIALS: _ENVELOPE,
    MsgKind.ACCEPT: _ENVELOPE,
    MsgKind.AUTH_NOTIFY: _ENVELOPE,
    MsgKind.KEY_RELAY: _ENVELOPE,
}
_HEAD = struct.Struct(">B5s5sBH")


@dataclass(frozen=True)
class ControlMessage:
    kind: MsgKind
    src: NodeId
    dst: NodeId
    body: Body

    def __post_init__(self):
        want = _BODY_TYPES[self.kind]
        got = _ENVELOPE if isinstance(self.body, Envelope) else _CERT if isinstance(self.body, Certificate) else _PLAIN
        if want != got:
            raise ValueError(f"{self.kind.name} cannot carry that body")
        if got == _ENVELOPE and self.kind is not MsgKind.KEY_PROPOSAL and self.body.seal_type is not SealType.SYM:
            raise ValueError(f"{self.kind.name} bodies are symmetric envelopes")

    def encode(self) -> bytes:
        btype = _BODY_TYPES[self.kind]
        raw = self.body.encode() if btype != _PLAIN else bytes(self.body)
        return _HEAD.pack(self.kind, self.src.encode(), self.dst.encode(), btype, len(raw)) + raw

    @classmethod
    def decode(cls, b: bytes) -> ControlMessage:
        if len(b) < _HEAD.size:
            raise DecodeError("truncated control message")
        kind, src, dst, btype, n = _HEAD.unpack_from(b)
        if len(b) != _HEAD.size + n:
            raise DecodeError("control message length mismatch")
        try:
            kind = MsgKind(kind)
        except ValueError:
            raise DecodeError(f"unknown message kind {kind}") from None
        if btype != _BODY_TYPES[kind]:
            raise DecodeError("body type does not fit message kind")
        raw = bytes(b[_HEAD.size:])
        body: Body = raw
        if btype == _ENVELOPE:
            body = Envelope.decode(raw)
        elif btype == _CERT:
            body = Certificate.decode(raw)
        try:
            return cls(kind, NodeId.decode(src), NodeId.decode(dst), body)
        except ValueError as exc:
            raise DecodeError(str(exc)) from None

    def digest(self) -> bytes:
        return hashlib.blake2b(self.encode(), digest_size=16).digest()

    @property
    def key_ref(self) -> Optional[int]:
        return self.body.key_ref if isinstance(self.body, Envelope) else None


@dataclass
class Principal:
    """What one node brings to a handshake."""

    node: NodeId
    registry: KeyRegistry
    trust: TrustRoot
    secret: bytes = b""
    keypair: Optional[KeyPair] = None
    certificate: Optional[Certificate] = None
    directory: dict[NodeId, bytes] = field(default_factory=dict)
    sp_keys: dict[NodeId, SymmetricKey] = field(default_factory=dict)


class HsRole(enum.Enum):
    INITIATOR = "Initiator"
    RESPONDER = "Responder"


class HsStatus(enum.Enum):
    RUNNING = "running"
    DONE = "done"
    ABORTED = "aborted"


@dataclass(frozen=True)
class HandshakeState:
    owner: NodeId
    role: HsRole
    kind: SessionKind
    peer: NodeId
    step: int = 0
    pending: Optional[SymmetricKey] = None
    relay: Optional[NodeId] = None
    transcript: tuple[bytes, ...] = ()
    inbox: tuple[bytes, ...] = ()
    last_in: tuple[bytes, ...] = ()
    last_out: tuple[ControlMessage, ...] = ()
    status: HsStatus = HsStatus.RUNNING
    error: Optional[HandshakeError] = None
    session_id: Optional[int] = None

    @property
    def aborted(self) -> bool:
        return self.status is HsStatus.ABORTED

    @property
    def done(self) -> bool:
        return self.status is HsStatus.DONE


def _abort(s: HandshakeState, err: HandshakeError, out=()) -> tuple[HandshakeState, list, None]:
    return replace(s, status=HsStatus.ABORTED, error=err, pending=None), list(out), None


def _request_body(kind: SessionKind, node: NodeId, relay: Optional[NodeId]) -> bytes:
    return bytes([kind]) + node.encode() + (relay.encode() if relay else _NO_NODE)


def start_handshake(kind: SessionKind, initiator: Principal, peer: NodeId, rng: random.Random,
                    relay: Optional[NodeId] = None,
                    over: Optional[ControlSession] = None) -> tuple[HandshakeState, ControlMessage]:
    """Open a handshake; returns the initiator state and the first message.

    ``relay`` is the SP carrying a client's messages. For SP_CLIENT the first
    message proposes a fresh K_SP,C to the server over ``over`` (X_C,S).
    """
    me = initiator.node
    if kind is SessionKind.CLIENT_SERVER and relay is None:
        raise NoPath(f"{me} has no associated service provider to relay through")
    if kind in (SessionKind.SP_SERVER, SessionKind.CLIENT_SERVER):
        s = HandshakeState(me, HsRole.INITIATOR, kind, peer, step=1, relay=relay)
        m = ControlMessage(MsgKind.CERT_REQUEST, me, peer, _request_body(kind, me, relay))
        return replace(s, last_out=(m,)), m
    if kind is SessionKind.SP_CLIENT:
        if over is None or not over.active or not over.joins(me, SERVER_ID):
            raise MissingSession("SP_CLIENT needs an Active client-server session")
        k = initiator.registry.keygen(rng)
        m = ControlMessage(MsgKind.KEY_PROPOSAL, me, SERVER_ID, seal(over.key, peer.encode() + k.to_bytes()))
        return HandshakeState(me, HsRole.INITIATOR, kind, peer, step=1, pending=k, last_out=(m,)), m
    raise ValueError(f"use establish_sp_sp for {kind.name}")


def responder_for(ctx: Principal, m: ControlMessage) -> HandshakeState:
    """Fresh server-side state for an incoming CertRequest."""
    kind = SessionKind.SP_SERVER if m.src.role is Role.SERVICE_PROVIDER else SessionKind.CLIENT_SERVER
    return HandshakeState(ctx.node, HsRole.RESPONDER, kind, m.src)


def step_handshake(s: HandshakeState, m: ControlMessage, ctx: Principal,
                   rng: random.Random) -> tuple[HandshakeState, list[ControlMessage], Optional[ControlSession]]:
    """Advance ``s`` by one received message.

    Returns the new state, messages to send and, on the terminal step, the
    ControlSession. Failures come back as an ABORTED state carrying the error.
    """
    d = m.digest()
    if s.role is HsRole.RESPONDER and d in s.last_in:
        # retransmitted flight: answer its last message again, ignore the rest
        return s, (list(s.last_out) if d == s.last_in[-1] else []), None
    if s.status is not HsStatus.RUNNING:
        return _abort(s, ProtocolViolation(f"{m.kind.name} after handshake finished"))
    if m.dst != s.owner or m.src != s.peer:
        return _abort(s, ProtocolViolation(f"{m.kind.name} from {m.src} to {m.dst} does not belong here"))
    if d in s.transcript:
        return _abort(s, ProtocolViolation(f"replayed {m.kind.name}"))
    s = replace(s, transcript=s.transcript + (d,))
    if m.kind is MsgKind.REJECT:
        return _abort(s, Rejected(f"{m.src} rejected the handshake"))
    if s.role is HsRole.INITIATOR:
        return _initiator_step(s, m, ctx, rng)
    return _responder_step(s, m, ctx, rng)


def _initiator_step(s, m, ctx, rng):
    me = s.owner
    if s.step == 1 and m.kind is MsgKind.CERT_RESPONSE:
        cert = m.body
        if cert.subject != s.peer or not ctx.trust.validate_certificate(cert):
            return _abort(s, CertInvalid(f"certificate for {cert.subject} does not validate"))
        k = ctx.registry.keygen(rng)
        try:
            proposal = ctx.registry.asym_seal(cert.subject_public_id, k.to_bytes() + me.encode())
        except AuthFailure as exc:
            return _abort(s, CertInvalid(str(exc)))
        relay = s.relay.encode() if s.relay else _NO_NODE
        out = (
            ControlMessage(MsgKind.KEY_PROPOSAL, me, s.peer, proposal),
            ControlMessage(MsgKind.CREDENTIALS, me, s.peer, seal(k, me.encode() + ctx.secret + relay)),
        )
        return replace(s, step=2, pending=k, last_out=out), list(out), None
    if s.step == 2 and m.kind is MsgKind.ACCEPT:
        try:
            plain = open_envelope(s.pending, m.body)
        except (AuthFailure, WrongSealType) as exc:
            return _abort(s, Rejected(f"accept does not open: {exc}"))
        if len(plain) != 19 or plain[:6] != b"ACCEPT" or plain[14:] != me.encode():
            return _abort(s, Rejected("malformed accept"))
        sid = struct.unpack(">Q", plain[6:14])[0]
        session = ControlSession(sid, (me, s.peer), s.pending, s.kind, SessionState.ACTIVE)
        return replace(s, step=3, status=HsStatus.DONE, session_id=sid), [], session
    return _abort(s, ProtocolViolation(f"{m.kind.name} not expected at step {s.step}"))


def _responder_step(s, m, ctx, rng):
    me = s.owner
    reject = [ControlMessage(MsgKind.REJECT, me, s.peer, b"REJECT")]
    if s.step == 0 and m.kind is MsgKind.CERT_REQUEST:
        body = bytes(m.body)
        if len(body) != 11 or body[0] != s.kind or body[1:6] != m.src.encode():
            return _abort(s, Rejected("malformed certificate request"), reject)
        relay = None
        if body[6:] != _NO_NODE:
            try:
                relay = NodeId.decode(body[6:])
            except DecodeError:
                return _abort(s, Rejected("bad relay id"), reject)
        if (s.kind is SessionKind.CLIENT_SERVER) != (relay is not None):
            return _abort(s, Rejected("relay does not match session kind"), reject)
        if relay is not None and relay.role is not Role.SERVICE_PROVIDER:
            return _abort(s, Rejected("relay must be a service provider"), reject)
        out = (ControlMessage(MsgKind.CERT_RESPONSE, me, s.peer, ctx.certificate),)
        return replace(s, step=1, relay=relay, last_in=s.inbox + (m.digest(),), inbox=(), last_out=out), list(out), None
    if s.step == 1 and m.kind is MsgKind.KEY_PROPOSAL:
        if m.body.seal_type is not SealType.ASYM:
            return _abort(s, ProtocolViolation("key proposal must be sealed to the server's public key"), reject)
        try:
            plain = ctx.registry.asym_open(ctx.keypair.private_id, m.body)
            k = SymmetricKey.from_bytes(plain[:24])
        except (AuthFailure, WrongSealType, DecodeError) as exc:
            return _abort(s, Rejected(f"key proposal does not open: {exc}"), reject)
        if plain[24:] != s.peer.encode():
            return _abort(s, Rejected("key proposal names another node"), reject)
        return replace(s, step=2, pending=k, inbox=s.inbox + (m.digest(),)), [], None
    if s.step == 2 and m.kind is MsgKind.CREDENTIALS:
        try:
            plain = open_envelope(s.pending, m.body)
        except (AuthFailure, WrongSealType) as exc:
            return _abort(s, Rejected(f"credentials do not open: {exc}"), reject)
        node, secret, relay = plain[:5], plain[5:-5], plain[-5:]
        expected_relay = s.relay.encode() if s.relay else _NO_NODE
        if (len(plain) < 10 or node != s.peer.encode() or relay != expected_relay
                or s.peer not in ctx.directory or ctx.directory[s.peer] != secret):
            return _abort(s, Rejected(f"credentials for {s.peer} do not check out"), reject)
        sid = rng.getrandbits(64)
        out = [ControlMessage(MsgKind.ACCEPT, me, s.peer,
                              seal(s.pending, b"ACCEPT" + struct.pack(">Q", sid) + s.peer.encode()))]
        if s.kind is SessionKind.CLIENT_SERVER:
            sp_key = ctx.sp_keys.get(s.relay)
            if sp_key is None:
                return _abort(s, MissingSession(f"no active session with relay {s.relay}"), reject)
            out.append(ControlMessage(MsgKind.AUTH_NOTIFY, me, s.relay,
                                      seal(sp_key, s.peer.encode() + struct.pack(">Q", sid))))
        session = ControlSession(sid, (s.peer, me), s.pending, s.kind, SessionState.ESTABLISHING)
        s = replace(s, step=3, status=HsStatus.DONE, session_id=sid,
                    last_in=s.inbox + (m.digest(),), inbox=(), last_out=tuple(out))
        return s, out, session
    return _abort(s, ProtocolViolation(f"{m.kind.name} not expected at step {s.step}"), reject)


@dataclass
class RelayState:
    """An SP's view of one client's ClientServer handshake passing through it."""

    sp: NodeId
    client: NodeId
    authenticated: bool = False
    failed: bool = False
    held: list[ControlMessage] = field(default_factory=list)
    session_id: Optional[int] = None


def relay_control(r: RelayState, m: ControlMessage, open_sealed: Callable[[Envelope], bytes]) -> list[ControlMessage]:
    """Decide what the SP forwards. ``open_sealed`` opens envelopes with the SP's keys."""
    if m.src == r.client and m.dst.role is Role.SERVER:
        if m.kind is MsgKind.CERT_REQUEST:
            r.failed, r.held, r.authenticated = False, [], False
            return [m]
        if r.failed:
            return []
        if m.kind in (MsgKind.KEY_PROPOSAL, MsgKind.CREDENTIALS) or r.authenticated:
            return [m]
        return []
    if m.dst == r.client and m.src.role is Role.SERVER:
        if r.failed:
            return []
        if m.kind is MsgKind.ACCEPT and not r.authenticated:
            r.held.append(m)
            return []
        return [m]
    if m.dst == r.sp and m.src == SERVER_ID and m.kind is MsgKind.AUTH_NOTIFY:
        try:
            plain = open_sealed(m.body)
        except (AuthFailure, WrongSealType):
            r.failed, r.held = True, []
            return []
        if plain[:5] != r.client.encode() or len(plain) != 13:
            r.failed, r.held = True, []
            return []
        r.authenticated = True
        r.session_id = struct.unpack(">Q", plain[5:])[0]
        released, r.held = r.held, []
        return released
    return []


class Generator(enum.Enum):
    CLIENT = "Client"
    SERVER = "Server"
    SP = "Sp"


def _require(session: Optional[ControlSession], a: NodeId, b: NodeId, what: str) -> ControlSession:
    if session is None or not session.active or not session.joins(a, b):
        raise MissingSession(f"{what} between {a} and {b} is not Active")
    return session


def key_message(kind: MsgKind, src: NodeId, dst: NodeId, over: SymmetricKey, about: NodeId,
                k: SymmetricKey) -> ControlMessage:
    """Carry key ``k`` (meant for a session with ``about``) sealed under an existing session key."""
    return ControlMessage(kind, src, dst, seal(over, about.encode() + k.to_bytes()))


def parse_key_plain(plain: bytes) -> tuple[NodeId, SymmetricKey]:
    if len(plain) != 29:
        raise DecodeError("key message has the wrong length")
    return NodeId.decode(plain[:5]), SymmetricKey.from_bytes(plain[5:])


def read_key_message(m: ControlMessage, over: SymmetricKey) -> tuple[NodeId, SymmetricKey]:
    return parse_key_plain(open_envelope(over, m.body))


def accept_message(src: NodeId, dst: NodeId, k: SymmetricKey, sid: int) -> ControlMessage:
    return ControlMessage(MsgKind.ACCEPT, src, dst, seal(k, b"ACCEPT" + struct.pack(">Q", sid)))


def read_accept(m: ControlMessage, k: SymmetricKey) -> int:
    return parse_accept_plain(open_envelope(k, m.body))


def parse_accept_plain(plain: bytes) -> int:
    if len(plain) != 14 or plain[:6] != b"ACCEPT":
        raise DecodeError("malformed accept")
    return struct.unpack(">Q", plain[6:])[0]


def establish_sp_client(client: NodeId, sp: NodeId, x_cs: Optional[ControlSession],
                        x_sps: Optional[ControlSession], registry: KeyRegistry, rng: random.Random,
                        generator: Generator = Generator.CLIENT,
                        server: NodeId = SERVER_ID) -> tuple[ControlSession, list[ControlMessage]]:
    """Create K_SP,C at ``generator`` and carry it to both ends through the server."""
    _require(x_cs, client, server, "X_C,S")
    _require(x_sps, sp, server, "X_SP,S")
    k = registry.keygen(rng)
    if generator is Generator.CLIENT:
        first = key_message(MsgKind.KEY_PROPOSAL, client, server, x_cs.key, sp, k)
        second = key_message(MsgKind.KEY_RELAY, server, sp, x_sps.key, client, k)
    elif generator is Generator.SERVER:
        first = key_message(MsgKind.KEY_RELAY, server, client, x_cs.key, sp, k)
        second = key_message(MsgKind.KEY_RELAY, server, sp, x_sps.key, client, k)
    else:
        first = key_message(MsgKind.KEY_PROPOSAL, sp, server, x_sps.key, client, k)
        second = key_message(MsgKind.KEY_RELAY, server, client, x_cs.key, sp, k)
    msgs = [first, second]
    # both ends recover the same key from what they were sent
    for msg in msgs:
        over = x_cs.key if client in (msg.src, msg.dst) else x_sps.key
        if read_key_message(msg, over)[1] != k:
            raise ProtocolViolation("relayed key differs from the generated one")
    sid = rng.getrandbits(64)
    confirmer, confirmee = (sp, client) if generator is not Generator.SP else (client, sp)
    msgs.append(accept_message(confirmer, confirmee, k, sid))
    return ControlSession(sid, (client, sp), k, SessionKind.SP_CLIENT), msgs


@dataclass(frozen=True)
class LinkKey:
    key: SymmetricKey
    client: NodeId
    sp: NodeId


def establish_link_key(client: NodeId, sp: NodeId, x_spc: Optional[ControlSession], registry: KeyRegistry,
                       rng: random.Random) -> tuple[LinkKey, list[ControlMessage]]:
    _require(x_spc, client, sp, "X_SP,C")
    wk = registry.keygen(rng)
    msgs = [
        key_message(MsgKind.KEY_PROPOSAL, client, sp, x_spc.key, client, wk),
        accept_message(sp, client, wk, x_spc.session_id),
    ]
    return LinkKey(wk, client, sp), msgs


def establish_sp_sp(sp1: NodeId, sp2: NodeId, x_sp1s: Optional[ControlSession], x_sp2s: Optional[ControlSession],
                    registry: KeyRegistry, rng: random.Random,
                    server: NodeId = SERVER_ID) -> tuple[ControlSession, list[ControlMessage]]:
    """K_SP1,SP2 relayed through the server, which holds a session with each SP."""
    if sp1 == sp2:
        raise SelfSession(f"{sp1} cannot open a session with itself")
    _require(x_sp1s, sp1, server, "X_SP1,S")
    _require(x_sp2s, sp2, server, "X_SP2,S")
    k = registry.keygen(rng)
    sid = rng.getrandbits(64)
    msgs = [
        key_message(MsgKind.KEY_RELAY, server, sp1, x_sp1s.key, sp2, k),
        key_message(MsgKind.KEY_RELAY, server, sp2, x_sp2s.key, sp1, k),
        accept_message(sp2, sp1, k, sid),
    ]
    return ControlSession(sid, (sp1, sp2), k, SessionKind.SP_SP), msgs


# In-memory driver ---------------------------------------------------------

@dataclass
class ScriptRun:
    initiator: HandshakeState
    responder: Optional[HandshakeState]
    relay: Optional[RelayState]
    sessions: list[ControlSession]
    wire: list[ControlMessage]

    @property
    def active_sessions(self) -> list[ControlSession]:
        return [s for s in self.sessions if s.active]


def run_handshake(kind: SessionKind, initiator: Principal, server: Principal, rng: random.Random,
                  relay_sp: Optional[NodeId] = None,
                  tamper: Optional[Callable[[int, bytes], bytes]] = None) -> ScriptRun:
    """Run a whole SpServer or ClientServer script over a lossless in-memory wire.

    ``tamper(i, wire_bytes)`` may rewrite the i-th logical message before it
    is decoded at the next hop; undecodable or misrouted messages are dropped.
    After the initiator finishes it sends one sealed confirmation, which is
    what activates the server's copy of the session.
    """
    wire: list[ControlMessage] = []
    sessions: list[ControlSession] = []
    relay = RelayState(relay_sp, initiator.node) if relay_sp else None
    init_state, first = start_handshake(kind, initiator, server.node, rng, relay=relay_sp)
    resp_state: Optional[HandshakeState] = None
    queue: list[tuple[ControlMessage, bool]] = [(first, False)]  # (message, already past the relay)
    counter = 0

    def relay_open(e: Envelope) -> bytes:
        return open_envelope(server.sp_keys[relay_sp], e)

    while queue:
        m, relayed = queue.pop(0)
        if not relayed:
            wire.append(m)
            raw = m.encode()
            if tamper is not None:
                raw = tamper(counter, raw)
            counter += 1
            try:
                m = ControlMessage.decode(raw)
            except (DecodeError, ValueError):
                continue
        if relay is not None and not relayed:
            queue.extend((f, True) for f in relay_control(relay, m, relay_open))
            continue
        if m.dst == server.node:
            if resp_state is None:
                if m.kind is not MsgKind.CERT_REQUEST:
                    continue
                resp_state = responder_for(server, m)
            resp_state, out, sess = step_handshake(resp_state, m, server, rng)
        elif m.dst == initiator.node:
            init_state, out, sess = step_handshake(init_state, m, initiator, rng)
        else:
            continue
        if sess is not None:
            sessions.append(sess)
        queue.extend((o, False) for o in out)

    mine = next((s for s in sessions if s.state is SessionState.ACTIVE and initiator.node in s.principals
                 and s.session_id == init_state.session_id), None)
    theirs = next((s for s in sessions if s.state is SessionState.ESTABLISHING), None)
    if mine is not None and theirs is not None and theirs.session_id == mine.session_id:
        confirm = seal(mine.key, b"CONFIRM")
        if relay is None or relay.authenticated:
            theirs.confirm(confirm)
    return ScriptRun(init_state, resp_state, relay, sessions, wire)
