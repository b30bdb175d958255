"""Discrete-event loop over integer microseconds."""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable

US = 1_000_000


def to_us(seconds: float) -> int:
    return int(round(seconds * US))


def split_rng(seed: int, label: str) -> random.Random:
    """Independent generator per label (usually a node id), so adding a node leaves others' draws alone."""
    h = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8).digest()
    return random.Random(int.from_bytes(h, "big"))


@dataclass(order=True)
class SimEvent:
    at: int
    seq: int
    fn: Callable = field(compare=False)
    args: tuple = field(compare=False, default=())
    kind: str = field(compare=False, default="")


class EventLoop:
    def __init__(self):
        self.now = 0
        self._seq = 0
        self._heap: list[SimEvent] = []
        self.processed = 0

    def schedule(self, at: int, fn: Callable, *args: Any, kind: str = "") -> SimEvent:
        if at < self.now:
            raise ValueError(f"cannot schedule into the past ({at} < {self.now})")
        ev = SimEvent(int(at), self._seq, fn, args, kind)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def after(self, delay_us: int, fn: Callable, *args: Any, kind: str = "") -> SimEvent:
        return self.schedule(self.now + int(delay_us), fn, *args, kind=kind)

    def run(self, until: int, after_each: Callable[[], None] | None = None) -> None:
        while self._heap and self._heap[0].at <= until:
            ev = heapq.heappop(self._heap)
            self.now = ev.at
            ev.fn(*ev.args)
            self.processed += 1
            if after_each is not None:
                after_each()
        self.now = max(self.now, until)

    def pending(self, kind: str | None = None) -> list[SimEvent]:
        return [e for e in self._heap if kind is None or e.kind == kind]
