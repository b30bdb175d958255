"""Acceptance criteria 1-10, each printed as one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import itertools
import random
import time
from collections import Counter

from awima.core import ADHOC_DHCP_BASE, AddrKind, Address, Reliability, sp_id, sp_public_address
from awima.erasure import CodingConfig, decode_group, encode_group
from awima.handshake import SessionKind
from awima.policy import GoodnessMetric, update_goodness
from awima.sim.cli import main
from awima.sim.report import dump_report, report_from_trace
from awima.sim.trace import parse_trace
from awima.tunnel import NatTable, TunnelPacket, nat_inbound, nat_outbound

from conftest import BUNDLED, record_criterion, run_bundled
from test_handshake import MUTATIONS, _run, mutate


def check(number, ok, detail):
    record_criterion(number, ok, detail)
    assert ok, detail


def test_criterion_01_goodness_update():
    worked = update_goodness(GoodnessMetric(0.4, 0.5), 0.8).value
    bounds = all(update_goodness(GoodnessMetric(v, 0.0), g).value == v
                 and update_goodness(GoodnessMetric(v, 1.0), g).value == g
                 for v in (0.0, 0.3, 0.5, 1.0) for g in (0.0, 0.25, 0.9, 1.0))
    g = GoodnessMetric(0.5, 0.5)
    for _ in range(20):
        g = update_goodness(g, 1.0)
    closed_form = 1.0 - 0.5 ** 20 * 0.5
    ok = worked == 0.6 and bounds and abs(g.value - 1.0) < 1e-4 and abs(g.value - closed_form) < 1e-12
    check(1, ok, f"update(0.8, 0.4, 0.5) = {worked!r}; alpha boundaries hold: {bounds}; "
                 f"after 20 sessions {g.value:.7f} (closed form {closed_form:.7f})")


def _reliable_guarantees(run):
    """Loss, duplicates and VPN addresses over every reliable flow of the run."""
    names = {f"{c.id}/f{i}" for c in run.world.sc.clients for i, f in enumerate(c.flows)
             if f.reliability is Reliability.RELIABLE}
    report = run.report
    reliable = {k: f for k, f in report["flows"].items() if k in names}
    assert reliable, "no reliable flows in this run"
    lost = sum(f["lost"] for f in reliable.values())
    dups = sum(f["duplicates"] for f in reliable.values())
    vpns = {v for f in reliable.values() for v in f["vpn"]}
    return lost, dups, vpns


def _handoff_ok(report, frm, to):
    hs = [h for h in report["handoffs"] if h["outcome"] == "complete" and h["from"] == frm and h["to"] == to]
    return hs[0] if hs else None


def test_criterion_02_soft_handoff(bundled_runs):
    rep = bundled_runs["graceful_handoff"].report
    up = rep["flows"]["C0/f0"]
    h = _handoff_ok(rep, "SP0", "SP1")
    lost, dups, vpns = _reliable_guarantees(bundled_runs["graceful_handoff"])
    sends = [e["t"] for e in bundled_runs["graceful_handoff"].events
             if e["cat"] == "APP_SEND" and e["d"]["flow"] == "C0/f0"]
    crossed = h is not None and sends[0] < h["requested_at"] < sends[-1]
    ok = up["sent"] == 1000 and up["delivered"] == 1000 and lost == 0 and dups == 0 and len(vpns) == 1 and crossed
    check(2, ok, f"1000-payload reliable flow: delivered {up['delivered']}, lost {lost}, duplicates {dups}, "
                 f"retransmits {up['retransmits']}; VPN addresses {sorted(vpns)}; "
                 f"handoff SP0->SP1 mid-flow: {crossed}")


def test_criterion_03_preauth_before_disassociation(bundled_runs):
    checked, violations = 0, []
    for name, run in bundled_runs.items():
        events, broken = parse_trace(run.trace)
        staged = set()
        for e in events:
            if e["cat"] == "KEY_STAGE" and e["node"].startswith("C"):
                staged.add((e["node"], e["d"]["sp"]))
            elif e["cat"] == "DISASSOC":
                checked += 1
                if (e["node"], e["d"]["to"]) not in staged:
                    violations.append((name, e["t"]))
        replayed = report_from_trace(events, partial=broken)["preauth"]
        violations += [(name, v["t"]) for v in replayed["violations"]]
    ok = checked >= 2 and not violations
    check(3, ok, f"{checked} disassociations replayed across {len(bundled_runs)} scenarios, "
                 f"{len(violations)} without a prior key staging")


def test_criterion_04_sp_opacity(bundled_runs):
    opens = sum(r.report["key_audit"]["sp_opens"] + (r.report["key_audit"]["end_sp_opens"] or 0)
                for r in bundled_runs.values())
    audits = sum(r.report["key_audit"]["checks"] for r in bundled_runs.values())
    tried = activated = 0
    for kind in (SessionKind.SP_SERVER, SessionKind.CLIENT_SERVER):
        positions = len(_run(kind, 0).wire)
        for pos, how, trial in itertools.product(range(positions), MUTATIONS, range(4)):
            rng = random.Random(f"acceptance-{kind}-{pos}-{how}-{trial}")
            changed = []

            def tamper(i, raw):
                if i != pos:
                    return raw
                out = mutate(raw, how, rng)
                changed.append(out != raw)
                return out

            run = _run(kind, trial, tamper)
            if any(changed):
                tried += 1
                activated += bool(run.active_sessions)
    ok = opens == 0 and audits > 0 and tried >= 100 and activated == 0
    check(4, ok, f"{opens} tunnel-envelope opens by SPs over {audits} audited attempts; "
                 f"{tried} handshake mutations, {activated} reached Active")


def test_criterion_05_nat():
    nat = NatTable(sp_id(0), sp_public_address(0))
    rng = random.Random(55)
    identity = True
    for i in range(10_000):
        src = Address(AddrKind.ADHOC_DHCP, ADHOC_DHCP_BASE + 2 + rng.randrange(500), rng.randrange(65536))
        tp = TunnelPacket(src, Address.of(0xCB007201, 1194), None)
        out, _ = nat_outbound(nat, tp, i)
        back = nat_inbound(nat, TunnelPacket(out.outer_dst, out.outer_src, None))
        identity &= back.outer_dst == tp.outer_src and back.outer_src == tp.outer_dst
    ok = nat.is_bijective() and identity
    check(5, ok, f"10^4 random mappings ({len(nat.forward)} distinct) bijective: {nat.is_bijective()}; "
                 f"inbound after outbound is identity: {identity}")


def test_criterion_06_erasure(bundled_runs):
    cfg = CodingConfig(4, 6)
    rng = random.Random(6)
    packets = [rng.randbytes(rng.randrange(1, 300)) for _ in range(4)]
    group = encode_group(cfg, packets)
    two = all(decode_group(cfg, [s for s in group.shards if s.index not in lost], group.original_lengths) == packets
              for lost in itertools.combinations(range(6), 2))
    four = all(decode_group(cfg, sub, group.original_lengths) == packets
               for sub in itertools.combinations(group.shards, 4))
    plain = bundled_runs["abrupt_vanish_udp"].report["flows"]["C0/f0"]
    coded_run = bundled_runs["abrupt_vanish_udp_coded"]
    coded = coded_run.report["flows"]["C0/f0"]
    vanished = {e["node"] for e in coded_run.events if e["cat"] == "VANISH"}
    worst = max(max(Counter(leg for leg in e["d"]["legs"] if leg in vanished).values(), default=0)
                for e in coded_run.events if e["cat"] == "CODE_ENCODE")
    ok = two and four and plain["lost"] > 0 and coded["lost"] == 0 and worst <= 2
    check(6, ok, f"15 two-erasure patterns: {two}; 15 four-shard subsets: {four}; uncoded vanish lost "
                 f"{plain['lost']}/{plain['sent']}; coded lost {coded['lost']}/{coded['sent']} with at most "
                 f"{worst} shards per group on the vanished SP")


def test_criterion_07_parallel(bundled_runs):
    par = bundled_runs["parallel_two_sp"].report
    legs = par["legs"]["C0"]
    keys = {k for leg in legs.values() for k in leg["key_refs"]}
    busy = sorted(sp for sp, leg in legs.items() if leg["packets"] > 0)
    frac = par["parallel"]["C0"]["fraction_sum"]
    tdm_run = bundled_runs["tdm_single_radio"]
    us = tdm_run.report["airtime"]["C0"]["us"]
    total = sum(us.values())
    quantum_us = round(tdm_run.world.sc.tdm_quantum * 1e6)
    off = max(abs(us["SP0"] - 0.75 * total), abs(us["SP1"] - 0.25 * total))
    ok = busy == ["SP0", "SP1"] and len(keys) == 1 and frac == 1.0 and off <= quantum_us
    check(7, ok, f"parallel legs carrying traffic {busy} under {len(keys)} tunnel key, fractions sum {frac}; "
                 f"TDM shares {tdm_run.report['airtime']['C0']['share']['SP0']:.4f}/"
                 f"{tdm_run.report['airtime']['C0']['share']['SP1']:.4f}, "
                 f"off target by {off / 1e3:.1f} ms (quantum {quantum_us / 1e3:.0f} ms)")


def test_criterion_08_cross_protocol(bundled_runs):
    run = bundled_runs["multi_wwan_handoff"]
    protocols = {str(s.id): s.protocol for s in run.world.sc.sps}
    h = _handoff_ok(run.report, "SP0", "SP1")
    lost, dups, vpns = _reliable_guarantees(run)
    delivered = sum(f["delivered"] for f in run.report["flows"].values())
    ok = (protocols == {"SP0": "LTE", "SP1": "WiMAX"} and h is not None and lost == 0 and dups == 0
          and len(vpns) == 1)
    check(8, ok, f"{protocols['SP0']} SP0 -> {protocols['SP1']} SP1 handoff "
                 f"{'complete' if h else 'missing'} ({h['drain_mode'] if h else '-'} drain); "
                 f"{delivered} delivered, lost {lost}, duplicates {dups}, VPN addresses {sorted(vpns)}")


def test_criterion_09_determinism(bundled_runs):
    differing = [name for name, run in bundled_runs.items() if run_bundled(name).trace != run.trace]
    check(9, not differing, f"{len(bundled_runs) - len(differing)}/{len(bundled_runs)} scenarios byte-identical "
                            f"on rerun" + (f"; differing: {differing}" if differing else ""))


def test_criterion_10_revenue(bundled_runs):
    total = sum(r.report["revenue"]["total_milli"] for r in bundled_runs.values())
    allocated = sum(r.report["revenue"]["allocated_milli"] for r in bundled_runs.values())
    closed = sum(r.report["revenue"]["closed_milli"] for r in bundled_runs.values())
    sessions = sum(r.report["revenue"]["sessions"] for r in bundled_runs.values())
    balanced = all(r.report["revenue"]["balanced"] for r in bundled_runs.values())
    ok = total == allocated == closed and balanced and sessions > 0
    check(10, ok, f"{sessions} sessions: revenue {total} milli, allocated {allocated} milli, "
                  f"closed-session sum {closed} milli")


def test_batch_over_bundled_scenarios_fits_budget(capsys):
    start = time.perf_counter()
    code = main(["batch", "--check", "--jobs", "2"])
    elapsed = time.perf_counter() - start
    assert code == 0
    assert elapsed < 60, elapsed
    assert capsys.readouterr().out.count("[ok]") == len(BUNDLED)


if __name__ == "__main__":
    import sys

    import pytest

    sys.exit(pytest.main([__file__, "-v"]))
