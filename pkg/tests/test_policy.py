from fractions import Fraction
from types import SimpleNamespace

import pytest
from hypothesis import given, strategies as st

from awima.policy import (FRACTION_UNITS, GoodnessMetric, PolicyError, RangeError, RevenuePolicy, SessionRecord,
                          UtilityWeights, allocate_fractions, apportion, score_session, split_revenue, sp_utility,
                          update_goodness)

unit = st.floats(0, 1, allow_nan=False)


def goodness_after(v0, alpha, n, g=1.0):
    """Closed form of n identical updates: g - (1 - alpha)^n (g - v0), exact."""
    a, v0, g = Fraction(alpha), Fraction(v0), Fraction(g)
    return g - (1 - a) ** n * (g - v0)


def test_goodness_worked_example_is_exact():
    assert update_goodness(GoodnessMetric(0.4, 0.5), 0.8).value == 0.6


@given(unit, unit)
def test_goodness_alpha_boundaries(v, g):
    assert update_goodness(GoodnessMetric(v, 0.0), g).value == v
    assert update_goodness(GoodnessMetric(v, 1.0), g).value == g


@given(unit, unit, unit)
def test_goodness_stays_between_inputs(v, alpha, g):
    out = update_goodness(GoodnessMetric(v, alpha), g)
    assert min(v, g) - 1e-12 <= out.value <= max(v, g) + 1e-12
    assert out.sessions_seen == 1


def test_goodness_converges_geometrically():
    g = GoodnessMetric(0.5, 0.5)
    for n in range(1, 21):
        g = update_goodness(g, 1.0)
        assert abs(g.value - float(goodness_after(0.5, 0.5, n))) < 1e-12
    assert abs(g.value - 1.0) < 1e-4
    # frozen from the closed form: 1 - 0.5**21
    assert g.value == pytest.approx(0.99999952316, abs=1e-11)


def test_goodness_range_checks():
    with pytest.raises(RangeError):
        GoodnessMetric(1.2)
    with pytest.raises(RangeError):
        update_goodness(GoodnessMetric(), -0.1)


def _record(**kw):
    base = dict(sp="SP0", client="C0", promised_bandwidth=1000.0, promised_duration=10.0, cost_milli_per_s=50,
                opened_at=0, closed_at=4_000_000, bytes_carried=2000, completion_ratio=1.0, reason="end")
    base.update(kw)
    return SessionRecord(**base)


def test_session_score_and_revenue():
    r = _record()
    # 2000 bytes over 4 s against a 1000 B/s promise
    assert score_session(r) == 0.5
    assert r.revenue_milli == 200
    assert _record(closed_at=20_000_000).revenue_milli == 500  # capped at the promised duration
    assert score_session(_record(bytes_carried=10**9)) == 1.0


@given(st.integers(0, 10**9), st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=8))
def test_apportion_sums_exactly(total, weights):
    if sum(weights) == 0:
        weights = weights[:-1] + [1.0]
    parts = apportion(total, weights)
    assert sum(parts) == total
    s = sum(Fraction(w) for w in weights)
    for p, w in zip(parts, weights):
        assert abs(p - total * Fraction(w) / s) < 1


@given(st.integers(0, 10**12))
def test_revenue_split_conserves(total):
    split = split_revenue(total, RevenuePolicy())
    assert sum(split.parts()) == total


def test_revenue_policy_must_sum_to_one():
    with pytest.raises(PolicyError):
        RevenuePolicy(0.6, 0.2, 0.1)
    assert split_revenue(1000, RevenuePolicy()).parts() == (700, 200, 100)
    assert split_revenue(1, RevenuePolicy()).parts() == (1, 0, 0)


@given(st.floats(1, 1e6), st.lists(st.floats(1, 1e6), min_size=1, max_size=6))
def test_fractions_sum_to_one(need, bws):
    alloc = allocate_fractions(need, [(f"SP{i}", b) for i, b in enumerate(bws)])
    assert sum(alloc.fractions) == 1.0
    assert all(f * FRACTION_UNITS == int(f * FRACTION_UNITS) for f in alloc.fractions)
    covered = sum(b for _, b in zip(alloc.fractions, bws))
    assert alloc.best_effort == (covered < need)


def test_fractions_use_shortest_covering_prefix():
    alloc = allocate_fractions(150, [("a", 100), ("b", 100), ("c", 100)])
    assert [sp for sp, _ in alloc.shares] == ["a", "b"]
    assert alloc.fractions == [0.5, 0.5]
    assert not alloc.best_effort


def test_sp_utility_terms():
    sp = SimpleNamespace(energy=100.0, energy_rate_per_client=1.0, local_load=10.0, backhaul=100.0,
                         goodness=GoodnessMetric(0.75))
    req = SimpleNamespace(cost=0.5, duration=20.0)
    # revenue 10, energy 0.2, load 0.1, goodness headroom 0.25
    assert sp_utility(sp, req, UtilityWeights()) == pytest.approx(10 - 0.2 - 0.1 + 0.25)
    assert sp_utility(sp, req, UtilityWeights().scaled(2)) == pytest.approx(2 * (10 - 0.2 - 0.1 + 0.25))
