import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from awima.sim.cli import bundled_dir, main
from awima.sim.engine import EventLoop, split_rng, to_us
from awima.sim.links import Link, LinkKind, deliver
from awima.sim.report import dump_report, report_from_trace
from awima.sim.scenario import ScenarioError, load_text
from awima.sim.trace import parse_trace

from conftest import BUNDLED, run_bundled

BASIC = (bundled_dir() / "basic_access.yaml").read_text()


@given(st.lists(st.integers(0, 50), max_size=40))
def test_events_fire_in_time_then_schedule_order(times):
    loop, fired = EventLoop(), []
    for i, t in enumerate(times):
        loop.schedule(t, fired.append, (t, i))
    loop.run(until=100)
    assert fired == sorted(fired)
    assert loop.now == 100


def test_no_scheduling_into_the_past():
    loop = EventLoop()
    loop.run(10)
    with pytest.raises(ValueError):
        loop.schedule(5, print)


def test_split_rng_streams_are_stable_and_independent():
    a = [split_rng(7, "SP0").random() for _ in range(3)]
    assert a == [split_rng(7, "SP0").random() for _ in range(3)]
    assert split_rng(7, "SP0").random() != split_rng(7, "SP1").random()
    assert split_rng(7, "SP0").random() != split_rng(8, "SP0").random()
    assert to_us(1.5) == 1_500_000


def test_link_loss_rate_monte_carlo():
    link = Link(LinkKind.WWAN, 0.01, 1e6, loss_rate=0.3)
    rng = random.Random(2024)
    n = 20_000
    lost = sum(not deliver(link, 100, rng).ok for _ in range(n))
    assert abs(lost / n - 0.3) <= 0.02


def test_link_range_and_lossless_control():
    adhoc = Link(LinkKind.ADHOC, 0.002, 1e6, loss_rate=1.0, range_limited=True)
    rng = random.Random(0)
    assert deliver(adhoc, 10, rng, dist=80, radio_range=70).verdict == "range"
    assert deliver(adhoc, 10, rng, dist=10, radio_range=70).verdict == "loss"
    ok = deliver(adhoc, 10, rng, dist=10, radio_range=70, lossless=True)
    assert ok.ok and ok.delay_us == 2000 + 10
    with pytest.raises(ValueError):
        Link(LinkKind.ADHOC, 0.0, 1.0)


def _errors(text):
    with pytest.raises(ScenarioError) as info:
        load_text(text)
    return info.value.errors


def test_revenue_shares_must_sum_to_one():
    errs = _errors(BASIC + "policy:\n  revenue: {service_provider: 0.6, server: 0.2, carrier: 0.1}\n")
    assert any("policy.revenue" in e and "not 1" in e for e in errs)


def test_coding_needs_k_at_most_n():
    errs = _errors(BASIC + "coding: {k: 6, n: 4}\n")
    assert any(e.startswith("coding") for e in errs)


def test_unknown_fields_are_reported_with_lines():
    errs = _errors(BASIC.replace("seed: 1", "seed: 1\nsped: 3"))
    assert any("sped" in e and "unknown field" in e and "line 5" in e for e in errs)
    errs = _errors(BASIC.replace("range: 60\n    wwan", "range: 60\n    colour: red\n    wwan"))
    assert any("service_providers[0].colour" in e for e in errs)


def test_bad_references_and_values():
    errs = _errors(BASIC + "timeline:\n  - {at: 3, event: sp_vanish, node: SP9}\n")
    assert any("no such node" in e for e in errs)
    errs = _errors(BASIC.replace("duration: 20", "duration: -1"))
    assert any(e.startswith("duration") for e in errs)
    errs = _errors(BASIC.replace("id: SP1", "id: SP0"))
    assert any("duplicate node id SP0" in e for e in errs)


def test_bundled_scenarios_validate():
    assert len(BUNDLED) >= 7
    for name in BUNDLED:
        sc = load_text((bundled_dir() / f"{name}.yaml").read_text(), name)
        assert sc.name == name


def test_same_seed_same_bytes_other_seed_differs():
    a = run_bundled("basic_access", seed=3).trace
    assert run_bundled("basic_access", seed=3).trace == a
    assert run_bundled("basic_access", seed=4).trace != a


def test_report_equals_replay(bundled_runs):
    for run in bundled_runs.values():
        events, broken = parse_trace(run.trace)
        assert not broken
        assert dump_report(report_from_trace(events)) == dump_report(run.report)


def test_truncated_trace_gives_partial_report(bundled_runs):
    text = bundled_runs["basic_access"].trace
    events, broken = parse_trace(text[: len(text) // 2])
    assert broken
    assert report_from_trace(events, partial=broken)["partial"]


def test_conservation_and_invariants(bundled_runs):
    for name, run in bundled_runs.items():
        rep = run.report
        assert rep["conservation"]["balanced"], name
        assert rep["invariant_violations"] == 0, name
        assert rep["security_alerts"] == 0, name
        assert not rep["partial"], name


def test_cli_run_replay_and_exit_codes(tmp_path, capsys):
    trace, report = tmp_path / "t.jsonl", tmp_path / "r.json"
    assert main(["run", "--scenario", "basic_access", "--trace", str(trace), "--report", str(report),
                 "--check"]) == 0
    replayed = tmp_path / "replayed.json"
    assert main(["replay", "--trace", str(trace), "--report", str(replayed)]) == 0
    assert replayed.read_text() == report.read_text()
    assert json.loads(report.read_text())["meta"]["scenario"] == "basic_access"

    bad = tmp_path / "bad.yaml"
    bad.write_text(BASIC + "coding: {k: 6, n: 4}\n")
    assert main(["validate", "--scenario", str(bad)]) == 1
    assert main(["run", "--scenario", str(bad)]) == 1
    assert main(["validate", "--scenario", "basic_access"]) == 0
    assert main(["replay", "--trace", str(tmp_path / "missing.jsonl")]) == 3
    assert main(["run", "--scenario", "basic_access", "--trace", str(tmp_path / "no" / "dir.jsonl")]) == 3
    assert main(["batch", "--dir", str(tmp_path / "empty")]) == 3


def test_cli_batch(tmp_path, capsys):
    scen = tmp_path / "scen"
    scen.mkdir()
    (scen / "basic_access.yaml").write_text(BASIC)
    out = tmp_path / "out"
    assert main(["batch", "--dir", str(scen), "--jobs", "1", "--out", str(out)]) == 0
    assert (out / "basic_access.trace.jsonl").exists()
    assert "[ok] basic_access" in capsys.readouterr().out


def _lossy_downlink(coded: bool) -> dict:
    from awima.sim.world import World
    text = BASIC.replace("start: 1}\n      - {direction: down, reliability: unreliable, count: 200, size: 300,"
                         " interval: 0.05, start: 1}",
                         "start: 1}\n      - {direction: down, reliability: unreliable, count: 400, size: 300,"
                         f" interval: 0.02, start: 2, coded: {str(coded).lower()}}}")
    text += "links:\n  adhoc: {latency: 0.002, bandwidth: 2500000, loss: 0.05}\ncoding: {k: 4, n: 6}\n"
    world = World(load_text(text, "lossy"), None, True)
    return report_from_trace(world.run().events())


def test_downlink_coding_recovers_adhoc_losses():
    plain, coded = _lossy_downlink(False), _lossy_downlink(True)
    assert plain["flows"]["C0/f1"]["lost"] > 0
    assert coded["coding"]["recovered"] > 0
    assert coded["flows"]["C0/f1"]["lost"] < plain["flows"]["C0/f1"]["lost"]
    assert coded["flows"]["C0/f1"]["sent"] == 400
