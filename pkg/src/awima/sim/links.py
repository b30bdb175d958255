"""Link models: latency, serialization delay, seeded loss and radio range."""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass
from typing import Optional


class LinkKind(enum.Enum):
    ADHOC = "Adhoc"
    WWAN = "Wwan"
    SERVER_INTERNET = "ServerInternet"
    SP_SP_DIRECT = "SpSpDirect"


@dataclass(frozen=True)
class Link:
    kind: LinkKind
    latency: float  # seconds
    bandwidth: float  # bytes/sec
    loss_rate: float = 0.0
    range_limited: bool = False

    def __post_init__(self):
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError(f"loss rate {self.loss_rate} outside [0, 1]")
        if self.latency < 0 or self.bandwidth <= 0:
            raise ValueError("latency must be >= 0 and bandwidth > 0")
        if self.kind in (LinkKind.ADHOC, LinkKind.SP_SP_DIRECT) and not self.range_limited:
            raise ValueError(f"{self.kind.value} links are range limited")

    def transit_us(self, size: int) -> int:
        return int(round(self.latency * 1e6)) + math.ceil(size * 1e6 / self.bandwidth)


@dataclass(frozen=True)
class Delivery:
    verdict: str  # "ok", "loss" or "range"
    delay_us: int = 0

    @property
    def ok(self) -> bool:
        return self.verdict == "ok"


def deliver(link: Link, size: int, rng: random.Random, dist: Optional[float] = None,
            radio_range: Optional[float] = None, lossless: bool = False) -> Delivery:
    """Decide the fate of one message. A loss draw is taken for every in-range message."""
    if link.range_limited and (dist is None or radio_range is None or dist > radio_range):
        return Delivery("range")
    drop = rng.random() < link.loss_rate
    if drop and not lossless:
        return Delivery("loss")
    return Delivery("ok", link.transit_us(size))
