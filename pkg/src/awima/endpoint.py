"""Transport machinery at the two tunnel endpoints.

Reliable flows get selective acknowledgements, a one second retransmit timer
and a resequencing buffer, so payloads arrive in order exactly once even
when packets cross different SPs. Unreliable flows may be outer coded:
consecutive packets are grouped, Reed-Solomon parity is added, and the
receiver rebuilds packets lost with a vanished SP.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .core import DecodeError, FlowId, NodeId
from .erasure import CodedGroup, CodingConfig, Insufficient, Shard, decode_group, encode_group

WINDOW = 64
RTO_US = 1_000_000
MAX_ATTEMPTS = 5
QUEUE_CAP = 256
GROUP_FLUSH_US = 100_000


@dataclass
class Outstanding:
    seq: int
    sent_at: int
    attempts: int


class ReliableSender:
    """Per-flow sender. Sequence window: nothing at or beyond base + window goes out."""

    def __init__(self, window: int = WINDOW, rto_us: int = RTO_US, max_attempts: int = MAX_ATTEMPTS):
        self.window = window
        self.rto_us = rto_us
        self.max_attempts = max_attempts
        self.backlog: deque[int] = deque()
        self.inflight: dict[int, Outstanding] = {}
        self.failed: list[int] = []
        self.acked = 0

    def push(self, seq: int) -> None:
        self.backlog.append(seq)

    def ack(self, seq: int) -> bool:
        if self.inflight.pop(seq, None) is None:
            return False
        self.acked += 1
        return True

    @property
    def base(self) -> Optional[int]:
        if self.inflight:
            return min(self.inflight)
        return self.backlog[0] if self.backlog else None

    @property
    def idle(self) -> bool:
        return not self.backlog and not self.inflight

    def due(self, now: int, can_send: bool = True) -> list[tuple[int, int]]:
        """(seq, attempt) pairs to transmit now."""
        if not can_send:
            return []
        out = []
        for seq in sorted(self.inflight):
            o = self.inflight[seq]
            if now - o.sent_at >= self.rto_us:
                if o.attempts >= self.max_attempts:
                    del self.inflight[seq]
                    self.failed.append(seq)
                    continue
                o.attempts += 1
                o.sent_at = now
                out.append((seq, o.attempts))
        base = self.base
        while self.backlog and self.backlog[0] < base + self.window:
            seq = self.backlog.popleft()
            self.inflight[seq] = Outstanding(seq, now, 1)
            out.append((seq, 1))
        return out

    def next_timer(self) -> Optional[int]:
        if not self.inflight:
            return None
        return min(o.sent_at for o in self.inflight.values()) + self.rto_us


class Resequencer:
    """Releases payloads in sequence order; duplicates and out-of-window packets are dropped."""

    def __init__(self, window: int = WINDOW):
        self.window = window
        self.expected = 0
        self.buffer: dict[int, object] = {}

    def receive(self, seq: int, item) -> tuple[list, str]:
        """Returns (released items, verdict) with verdict one of new/dup/window."""
        if seq < self.expected or seq in self.buffer:
            return [], "dup"
        if seq >= self.expected + self.window:
            return [], "window"
        self.buffer[seq] = item
        out = []
        while self.expected in self.buffer:
            out.append(self.buffer.pop(self.expected))
            self.expected += 1
        return out, "new"

    @property
    def held(self) -> int:
        return len(self.buffer)


class DropOldestQueue:
    """Bounded queue for unreliable traffic while no path exists."""

    def __init__(self, cap: int = QUEUE_CAP):
        self.items: deque = deque()
        self.cap = cap

    def push(self, item) -> Optional[object]:
        dropped = None
        if len(self.items) >= self.cap:
            dropped = self.items.popleft()
        self.items.append(item)
        return dropped

    def drain(self) -> list:
        out = list(self.items)
        self.items.clear()
        return out

    def __len__(self) -> int:
        return len(self.items)


# Record bodies -------------------------------------------------------------

_ACK = struct.Struct(">5sIQ")
_REBIND = struct.Struct(">5sI")
_SHARD_HEAD = struct.Struct(">IBBB")


def encode_ack(flow: FlowId, seq: int) -> bytes:
    return _ACK.pack(flow.client.encode(), flow.index, seq)


def decode_ack(b: bytes) -> tuple[FlowId, int]:
    if len(b) != _ACK.size:
        raise DecodeError("bad ack record")
    c, idx, seq = _ACK.unpack(b)
    return FlowId(NodeId.decode(c), idx), seq


def encode_rebind(sp: NodeId, epoch: int) -> bytes:
    return _REBIND.pack(sp.encode(), epoch)


def decode_rebind(b: bytes) -> tuple[NodeId, int]:
    if len(b) != _REBIND.size:
        raise DecodeError("bad rebind record")
    sp, epoch = _REBIND.unpack(b)
    return NodeId.decode(sp), epoch


def encode_shard(group: CodedGroup, cfg: CodingConfig, index: int) -> bytes:
    s = group.shards[index]
    lengths = struct.pack(f">{cfg.k}H", *group.original_lengths)
    return _SHARD_HEAD.pack(group.group_id, s.index, cfg.k, cfg.n) + lengths + s.data


def decode_shard(b: bytes) -> tuple[int, CodingConfig, Shard, tuple[int, ...]]:
    if len(b) < _SHARD_HEAD.size:
        raise DecodeError("truncated shard record")
    gid, index, k, n = _SHARD_HEAD.unpack_from(b)
    try:
        cfg = CodingConfig(k, n)
    except ValueError as exc:
        raise DecodeError(str(exc)) from None
    off = _SHARD_HEAD.size + 2 * k
    if len(b) < off or index >= n:
        raise DecodeError("bad shard record")
    lengths = struct.unpack_from(f">{k}H", b, _SHARD_HEAD.size)
    return gid, cfg, Shard(index, bytes(b[off:]), index >= k), lengths


# Outer coding ---------------------------------------------------------------

class GroupAssembler:
    """Collects consecutive packets of one flow into coded groups.

    A partial group is flushed after ``flush_us``; missing slots become empty
    packets, which the receiver ignores.
    """

    def __init__(self, cfg: CodingConfig, flush_us: int = GROUP_FLUSH_US):
        self.cfg = cfg
        self.flush_us = flush_us
        self.pending: list[bytes] = []
        self.opened_at = 0
        self.next_group = 0

    def add(self, packet: bytes, now: int) -> Optional[CodedGroup]:
        if not self.pending:
            self.opened_at = now
        self.pending.append(packet)
        if len(self.pending) == self.cfg.k:
            return self._emit()
        return None

    def flush_at(self) -> Optional[int]:
        return self.opened_at + self.flush_us if self.pending else None

    def flush(self, now: int, force: bool = False) -> Optional[CodedGroup]:
        if self.pending and (force or now >= self.opened_at + self.flush_us):
            self.pending += [b""] * (self.cfg.k - len(self.pending))
            return self._emit()
        return None

    def _emit(self) -> CodedGroup:
        g = encode_group(self.cfg, self.pending, self.next_group)
        self.pending = []
        self.next_group += 1
        return g


@dataclass
class _GroupRx:
    cfg: CodingConfig
    lengths: tuple[int, ...]
    shards: dict[int, Shard] = field(default_factory=dict)
    released: set[int] = field(default_factory=set)
    complete: bool = False


class GroupCollector:
    """Receiver side: releases data shards as they come and rebuilds the rest from parity."""

    def __init__(self):
        self.groups: dict[int, _GroupRx] = {}

    def receive(self, gid: int, cfg: CodingConfig, shard: Shard,
                lengths: tuple[int, ...]) -> list[tuple[int, bytes, bool]]:
        """Returns (data index, packet bytes, recovered) for every newly released packet."""
        g = self.groups.setdefault(gid, _GroupRx(cfg, tuple(lengths)))
        if g.complete or shard.index in g.shards:
            return []
        g.shards[shard.index] = shard
        out = []
        if not shard.is_parity and shard.index not in g.released:
            g.released.add(shard.index)
            if g.lengths[shard.index]:
                out.append((shard.index, shard.data[:g.lengths[shard.index]], False))
        if len(g.shards) >= cfg.k:
            g.complete = True
            if len(g.released) < cfg.k:
                try:
                    data = decode_group(cfg, g.shards.values(), g.lengths)
                except Insufficient:
                    return out
                for i, pkt in enumerate(data):
                    if i not in g.released:
                        g.released.add(i)
                        if g.lengths[i]:
                            out.append((i, pkt, True))
        return out

    def unrecovered(self) -> dict[int, list[int]]:
        """Group id -> data indices never released (only for groups that were seen)."""
        return {gid: [i for i in range(g.cfg.k) if i not in g.released and g.lengths[i]]
                for gid, g in self.groups.items() if len(g.released) < g.cfg.k}
