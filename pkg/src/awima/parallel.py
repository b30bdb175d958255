"""Parallel multi-provider sessions: leg planning, TDM airtime, reallocation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Hashable, Sequence

from .policy import RangeError, allocate_fractions, apportion


class NoProvider(Exception):
    pass


class AllLegsLost(Exception):
    pass


class ParallelMode(enum.Enum):
    MULTI_RADIO = "MultiRadio"
    SINGLE_RADIO_TDM = "SingleRadioTdm"


@dataclass(frozen=True)
class Leg:
    sp: Hashable
    fraction: float
    bandwidth: float
    radio: int


@dataclass(frozen=True)
class ParallelPlan:
    client: Hashable
    legs: tuple[Leg, ...]
    mode: ParallelMode
    needs_bandwidth: float
    radios: int
    best_effort: bool = False

    def __post_init__(self):
        if self.legs and sum(l.fraction for l in self.legs) != 1.0:
            raise ValueError("leg fractions must sum to 1")
        if self.mode is ParallelMode.MULTI_RADIO and len(self.legs) > self.radios:
            raise ValueError("more legs than radios in multi-radio mode")

    @property
    def sps(self) -> list:
        return [l.sp for l in self.legs]

    def fraction_of(self, sp) -> float:
        return next((l.fraction for l in self.legs if l.sp == sp), 0.0)


def _build(client, offers, needs_bandwidth: float, radios: int) -> ParallelPlan:
    alloc = allocate_fractions(needs_bandwidth, offers)
    bw = dict(offers)
    mode = ParallelMode.MULTI_RADIO if radios >= len(alloc.shares) else ParallelMode.SINGLE_RADIO_TDM
    legs = tuple(
        Leg(sp, f, bw[sp], i if mode is ParallelMode.MULTI_RADIO else 0)
        for i, (sp, f) in enumerate(alloc.shares)
    )
    return ParallelPlan(client, legs, mode, needs_bandwidth, radios, alloc.best_effort)


def plan_parallel(client, candidates: Sequence[tuple[Hashable, float]], needs_bandwidth: float,
                  radios: int = 1) -> ParallelPlan:
    """Plan legs over ``candidates`` (sp, effective bandwidth), best first."""
    if not candidates:
        raise NoProvider("no candidate service providers")
    if radios < 1:
        raise RangeError("a client needs at least one radio")
    return _build(client, list(candidates), needs_bandwidth, radios)


@dataclass(frozen=True)
class LegLost:
    sp: Hashable


@dataclass(frozen=True)
class LegCapacity:
    sp: Hashable
    bandwidth: float


@dataclass(frozen=True)
class LegAdded:
    sp: Hashable
    bandwidth: float
    first: bool = False  # True when the new provider ranks above existing legs


def reallocate(plan: ParallelPlan, event) -> ParallelPlan:
    offers = [(l.sp, l.bandwidth) for l in plan.legs]
    if isinstance(event, LegLost):
        offers = [o for o in offers if o[0] != event.sp]
    elif isinstance(event, LegCapacity):
        offers = [(sp, event.bandwidth if sp == event.sp else b) for sp, b in offers]
    elif isinstance(event, LegAdded):
        offers = [o for o in offers if o[0] != event.sp]
        offers.insert(0 if event.first else len(offers), (event.sp, event.bandwidth))
    else:
        raise TypeError(f"unknown reallocation event {event!r}")
    if not offers:
        raise AllLegsLost(f"{plan.client} has no surviving legs")
    return _build(plan.client, offers, plan.needs_bandwidth, plan.radios)


@dataclass(frozen=True)
class TdmSlot:
    start: int  # microseconds
    end: int
    sp: Hashable


@dataclass
class WeightedPicker:
    """Smooth weighted round-robin: over any run, each choice count stays within one of its share."""

    weights: Sequence[float]
    credit: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.credit = [0.0] * len(self.weights)

    def next(self) -> int:
        total = sum(self.weights)
        for i, w in enumerate(self.weights):
            self.credit[i] += w
        best = max(range(len(self.credit)), key=lambda i: (self.credit[i], -i))
        self.credit[best] -= total
        return best


def schedule_tdm(plan: ParallelPlan, quantum: float, horizon: float, start: float = 0.0) -> list[TdmSlot]:
    if quantum <= 0:
        raise RangeError("quantum must be positive")
    q = int(round(quantum * 1e6))
    t0 = int(round(start * 1e6))
    end = t0 + int(round(horizon * 1e6))
    picker = WeightedPicker([l.fraction for l in plan.legs])
    slots: list[TdmSlot] = []
    t = t0
    while t < end:
        sp = plan.legs[picker.next()].sp
        stop = min(t + q, end)
        if slots and slots[-1].sp == sp and slots[-1].end == t:
            slots[-1] = TdmSlot(slots[-1].start, stop, sp)
        else:
            slots.append(TdmSlot(t, stop, sp))
        t = stop
    return slots


def airtime(slots: Sequence[TdmSlot]) -> dict:
    us: dict = {}
    for s in slots:
        us[s.sp] = us.get(s.sp, 0) + (s.end - s.start)
    return {sp: v / 1e6 for sp, v in us.items()}


def assign_shards(fractions: Sequence[float], n: int) -> list[int]:
    """Leg index for each of n shards, counts by largest remainder, interleaved."""
    counts = apportion(n, fractions)
    picker = WeightedPicker([float(c) for c in counts])
    return [picker.next() for _ in range(n)]
