import pytest
from hypothesis import given, strategies as st

from awima.parallel import (AllLegsLost, LegAdded, LegCapacity, LegLost, NoProvider, ParallelMode, WeightedPicker,
                            airtime, assign_shards, plan_parallel, reallocate, schedule_tdm)

offers = st.lists(st.floats(1, 1e6), min_size=1, max_size=5).map(lambda bws: [(f"SP{i}", b) for i, b in enumerate(bws)])


@given(offers, st.floats(1, 2e6), st.integers(1, 4))
def test_plan_fractions_sum_to_one(cands, need, radios):
    plan = plan_parallel("C0", cands, need, radios)
    assert sum(l.fraction for l in plan.legs) == 1.0
    if plan.mode is ParallelMode.MULTI_RADIO:
        assert len({l.radio for l in plan.legs}) == len(plan.legs) <= radios
    else:
        assert all(l.radio == 0 for l in plan.legs)


def test_single_radio_two_legs_is_tdm():
    plan = plan_parallel("C0", [("SP0", 150_000), ("SP1", 50_000)], 200_000, radios=1)
    assert plan.mode is ParallelMode.SINGLE_RADIO_TDM
    assert [l.fraction for l in plan.legs] == [0.75, 0.25]


def test_reallocation_events():
    plan = plan_parallel("C0", [("SP0", 100), ("SP1", 100)], 200, radios=2)
    one = reallocate(plan, LegLost("SP0"))
    assert one.sps == ["SP1"] and one.legs[0].fraction == 1.0 and one.best_effort
    wider = reallocate(plan, LegCapacity("SP1", 300))
    assert wider.fraction_of("SP1") == 0.75
    assert reallocate(one, LegAdded("SP2", 100, first=True)).sps == ["SP2", "SP1"]
    with pytest.raises(AllLegsLost):
        reallocate(one, LegLost("SP1"))
    with pytest.raises(NoProvider):
        plan_parallel("C0", [], 1)


@given(st.lists(st.integers(1, 20), min_size=1, max_size=5), st.integers(1, 400))
def test_weighted_picker_tracks_shares(weights, n):
    picker = WeightedPicker([float(w) for w in weights])
    counts = [0] * len(weights)
    for _ in range(n):
        counts[picker.next()] += 1
    total = sum(weights)
    for c, w in zip(counts, weights):
        assert abs(c - n * w / total) <= len(weights)


@given(st.floats(0.01, 0.5), st.floats(1, 60))
def test_tdm_airtime_within_one_quantum(quantum, horizon):
    plan = plan_parallel("C0", [("SP0", 150_000), ("SP1", 50_000)], 200_000, radios=1)
    slots = schedule_tdm(plan, quantum, horizon)
    share = airtime(slots)
    assert abs(sum(share.values()) - horizon) < 1e-5
    assert abs(share.get("SP0", 0) - 0.75 * horizon) <= quantum + 1e-6
    assert all(a.end == b.start for a, b in zip(slots, slots[1:]))
    assert all(a.sp != b.sp for a, b in zip(slots, slots[1:]))


@given(st.lists(st.integers(1, 100), min_size=1, max_size=4), st.integers(1, 40))
def test_shard_assignment_follows_fractions(weights, n):
    legs = assign_shards([float(w) for w in weights], n)
    assert len(legs) == n
    total = sum(weights)
    for i, w in enumerate(weights):
        assert abs(legs.count(i) - n * w / total) < 1


def test_shards_interleave():
    assert assign_shards([0.5, 0.5], 6) == [0, 1, 0, 1, 0, 1]
