"""Goodness metric, utility functions, fractional allocation and revenue split."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Hashable, Sequence

FRACTION_UNITS = 1024
EPSILON = 1e-9


class RangeError(ValueError):
    pass


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class GoodnessMetric:
    value: float = 0.5
    alpha: float = 0.5
    sessions_seen: int = 0

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise RangeError(f"goodness {self.value} outside [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise RangeError(f"alpha {self.alpha} outside [0, 1]")


def update_goodness(g: GoodnessMetric, g_session: float) -> GoodnessMetric:
    """Exponentially weighted update: new = alpha*session + (1 - alpha)*previous."""
    if not 0.0 <= g_session <= 1.0:
        raise RangeError(f"session goodness {g_session} outside [0, 1]")
    # exact over the decimal values, rounded once: 0.5*0.4 + 0.5*0.8 is 0.6, not 0.6000000000000001
    a, s, prev = Fraction(repr(g.alpha)), Fraction(repr(g_session)), Fraction(repr(g.value))
    value = float(a * s + (1 - a) * prev)
    return replace(g, value=value, sessions_seen=g.sessions_seen + 1)


@dataclass(frozen=True)
class SessionRecord:
    sp: Hashable
    client: Hashable
    promised_bandwidth: float
    promised_duration: float
    cost_milli_per_s: int
    opened_at: int  # microseconds
    closed_at: int
    bytes_carried: int
    completion_ratio: float
    reason: str

    @property
    def elapsed(self) -> float:
        return (self.closed_at - self.opened_at) / 1e6

    @property
    def delivered_bandwidth(self) -> float:
        return self.bytes_carried / self.elapsed if self.elapsed > 0 else 0.0

    @property
    def fulfilled_us(self) -> int:
        return min(self.closed_at - self.opened_at, int(round(self.promised_duration * 1e6)))

    @property
    def revenue_milli(self) -> int:
        return self.cost_milli_per_s * self.fulfilled_us // 1_000_000


def score_session(r: SessionRecord) -> float:
    if r.promised_bandwidth <= 0:
        raise RangeError("promised bandwidth must be positive")
    raw = (r.delivered_bandwidth / r.promised_bandwidth) * r.completion_ratio
    return min(1.0, max(0.0, raw))


@dataclass(frozen=True)
class UtilityWeights:
    w_revenue: float = 1.0
    w_energy: float = 1.0
    w_local_load: float = 1.0
    w_sp_goodness: float = 1.0
    w_cost: float = 1.0
    w_duration: float = 1.0
    w_client_goodness: float = 1.0
    w_bandwidth: float = 1.0
    sp_threshold: float = 0.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if name.startswith("w_") and v < 0:
                raise PolicyError(f"weight {name} is negative")

    def scaled(self, c: float) -> UtilityWeights:
        return replace(self, **{k: v * c for k, v in self.__dict__.items() if k.startswith("w_")})


def sp_utility(s, req, w: UtilityWeights) -> float:
    """Service provider's payoff for accepting ``req``.

    ``s`` needs energy, energy_rate_per_client, local_load, backhaul and
    goodness (a GoodnessMetric); ``req`` needs cost and duration.
    """
    revenue = req.cost * req.duration
    energy_cost = s.energy_rate_per_client * req.duration / max(s.energy, EPSILON)
    load = s.local_load / s.backhaul if s.backhaul > 0 else 1.0
    return (w.w_revenue * revenue
            - w.w_energy * energy_cost
            - w.w_local_load * load
            + w.w_sp_goodness * (1.0 - s.goodness.value))


def client_utility(needs, beacon, link: float, w: UtilityWeights, link_capacity: float) -> float:
    if needs.avg_bandwidth <= 0:
        raise RangeError("client demand must be positive")
    duration = min(beacon.remaining_duration, needs.duration) / needs.duration
    bandwidth = min(beacon.avail_bandwidth, link * link_capacity) / needs.avg_bandwidth
    return (-w.w_cost * beacon.cost
            + w.w_duration * duration
            + w.w_client_goodness * beacon.goodness
            + w.w_bandwidth * bandwidth)


def apportion(total: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder split of an integer total; ties go to the earlier entry."""
    if total < 0:
        raise RangeError("cannot apportion a negative total")
    exact = [Fraction(wt) for wt in weights]
    if any(x < 0 for x in exact):
        raise RangeError("negative weight")
    s = sum(exact)
    if s == 0:
        if total:
            raise RangeError("all weights are zero")
        return [0] * len(exact)
    quotas = [total * x / s for x in exact]
    floors = [math.floor(q) for q in quotas]
    left = total - sum(floors)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - floors[i]), i))
    for i in order[:left]:
        floors[i] += 1
    return floors


@dataclass(frozen=True)
class Allocation:
    shares: tuple[tuple[Hashable, float], ...]
    best_effort: bool = False

    @property
    def fractions(self) -> list[float]:
        return [f for _, f in self.shares]

    def fraction_of(self, sp) -> float:
        return dict(self.shares).get(sp, 0.0)


def allocate_fractions(needs_bandwidth: float, offers: Sequence[tuple[Hashable, float]]) -> Allocation:
    """Split demand over offers, already ordered best-first.

    Uses the shortest prefix of offers whose combined bandwidth covers the
    demand, proportional to offered bandwidth, in 1/1024 units.
    """
    if not offers:
        raise RangeError("no offers")
    if any(b <= 0 for _, b in offers):
        raise RangeError("offered bandwidth must be positive")
    used, total, best_effort = [], 0.0, True
    for sp, b in offers:
        used.append((sp, b))
        total += b
        if total >= needs_bandwidth:
            best_effort = False
            break
    units = apportion(FRACTION_UNITS, [b for _, b in used])
    return Allocation(tuple((sp, u / FRACTION_UNITS) for (sp, _), u in zip(used, units)), best_effort)


@dataclass(frozen=True)
class RevenuePolicy:
    service_provider: float = 0.7
    server: float = 0.2
    carrier: float = 0.1

    def __post_init__(self):
        parts = (self.service_provider, self.server, self.carrier)
        if any(p < 0 for p in parts):
            raise PolicyError("revenue shares must be non-negative")
        if sum(Fraction(str(p)) for p in parts) != 1:
            raise PolicyError(f"revenue shares sum to {sum(parts)}, not 1")

    def weights(self) -> tuple[float, float, float]:
        return (self.service_provider, self.server, self.carrier)


@dataclass(frozen=True)
class RevenueSplit:
    total: int
    service_provider: int
    server: int
    carrier: int

    def parts(self) -> tuple[int, int, int]:
        return (self.service_provider, self.server, self.carrier)


def split_revenue(total_milli: int, p: RevenuePolicy) -> RevenueSplit:
    sp, srv, car = apportion(total_milli, [Fraction(str(x)) for x in p.weights()])
    return RevenueSplit(total_milli, sp, srv, car)


def allocate_revenue(r: SessionRecord, p: RevenuePolicy) -> RevenueSplit:
    if not isinstance(p, RevenuePolicy):
        raise PolicyError("not a revenue policy")
    return split_revenue(r.revenue_milli, p)
