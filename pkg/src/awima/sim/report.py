"""Run report, computed from the trace alone.

The simulator never hands numbers to the report directly: a run's report is
``report_from_trace`` of its own trace, so replaying a saved trace gives the
same report byte for byte.
"""

from __future__ import annotations

import json
from collections import defaultdict
from typing import Iterable


def _flow_entry() -> dict:
    return {"direction": None, "sent": 0, "delivered": 0, "duplicates": 0, "lost": 0, "reorder_depth": 0,
            "retransmits": 0, "failed": 0, "vpn": []}


def report_from_trace(events: Iterable[dict], partial: bool = False) -> dict:
    events = list(events)
    flows: dict = defaultdict(_flow_entry)
    seen: dict = defaultdict(set)
    top: dict = defaultdict(lambda: -1)
    vpns: dict = defaultdict(set)
    handoffs: list = []
    open_plans: dict = {}
    disassoc_at: dict = {}
    staged: dict = defaultdict(set)
    preauth = {"checked": 0, "violations": []}
    goodness: dict = defaultdict(list)
    revenue = {"sessions": 0, "total_milli": 0, "allocated_milli": 0, "closed_milli": 0, "mismatched": []}
    closes: dict = {}
    coding = {"groups": 0, "recovered": 0, "failed_groups": 0}
    audit = {"checks": 0, "sp_opens": 0, "end_sp_opens": None}
    key_owner: dict = {}
    legs: dict = defaultdict(lambda: defaultdict(lambda: {"packets": 0, "key_refs": set()}))
    plans: dict = {}
    slots: dict = defaultdict(list)
    links: dict = defaultdict(lambda: {"tx": 0, "ok": 0, "loss": 0, "range": 0})
    rx = node_down = 0
    counts: dict = defaultdict(int)
    end = None
    meta = {}

    for ev in events:
        cat, node, d, t = ev["cat"], ev["node"], ev["d"], ev["t"]
        counts[cat] += 1
        if cat == "START":
            meta = {"scenario": d["scenario"], "seed": d["seed"], "duration_us": d["duration_us"]}
        elif cat == "APP_SEND":
            f = flows[d["flow"]]
            f["sent"] += 1
            f["direction"] = "down" if node.startswith("H") else "up"
        elif cat == "APP_DELIVER":
            f = flows[d["flow"]]
            key = (d["flow"], node)
            if d["seq"] in seen[key]:
                f["duplicates"] += 1
            else:
                seen[key].add(d["seq"])
                f["delivered"] += 1
            f["reorder_depth"] = max(f["reorder_depth"], top[key] - d["seq"])
            top[key] = max(top[key], d["seq"])
            vpns[d["flow"]].add(d["vpn"])
        elif cat == "RETX":
            flows[d["flow"]]["retransmits"] += 1
        elif cat == "FLOW_FAIL":
            flows[d["flow"]]["failed"] += 1
        elif cat == "HANDOFF_REQUEST":
            h = {"client": d["client"], "from": d["from"], "to": d["to"], "initiator": d["initiator"],
                 "reason": d["reason"], "drain_mode": d["drain_mode"], "requested_at": t, "completed_at": None,
                 "latency_us": None, "disruption_us": None, "outcome": "open"}
            handoffs.append(h)
            open_plans[d["client"]] = h
        elif cat in ("HANDOFF_COMPLETE", "HANDOFF_ABORT") and node == "S0":
            h = open_plans.pop(d["client"], None)
            if h is not None:
                h["outcome"] = "complete" if cat == "HANDOFF_COMPLETE" else f"aborted: {d['reason']}"
                if cat == "HANDOFF_COMPLETE":
                    h["completed_at"] = t
                    h["latency_us"] = t - h["requested_at"]
        elif cat == "KEY_STAGE" and node.startswith("C"):
            staged[node].add(d["sp"])
        elif cat == "DISASSOC":
            preauth["checked"] += 1
            if d["to"] not in staged[node]:
                preauth["violations"].append({"client": node, "to": d["to"], "t": t})
            disassoc_at[node] = t
        elif cat == "TUNNEL_UP" and d.get("handoff"):
            start = disassoc_at.pop(node, None)
            h = next((x for x in reversed(handoffs) if x["client"] == node and x["to"] == d["sp"]), None)
            if h is not None and start is not None:
                h["disruption_us"] = t - start
        elif cat == "GOODNESS":
            goodness[d["sp"]].append(d["value"])
        elif cat == "SESSION_CLOSE":
            closes.setdefault(d["session"], d["revenue_milli"])
        elif cat == "REVENUE":
            parts = d["sp_part"] + d["server_part"] + d["carrier_part"]
            revenue["sessions"] += 1
            revenue["total_milli"] += d["total"]
            revenue["allocated_milli"] += parts
            revenue["closed_milli"] += closes.get(d["session"], 0)
            if parts != d["total"] or closes.get(d["session"]) != d["total"]:
                revenue["mismatched"].append(d["session"])
        elif cat == "CODE_ENCODE":
            coding["groups"] += 1
        elif cat == "CODE_RECOVER":
            coding["recovered"] += 1
        elif cat == "CODE_FAIL":
            coding["failed_groups"] += 1
        elif cat == "KEY_AUDIT":
            audit["checks"] += 1
            audit["sp_opens"] += int(d["opened"])
        elif cat == "TUNNEL_OPEN":
            key_owner[d["key_ref"]] = d["client"]
        elif cat == "PARALLEL_PLAN":
            plans[node] = {"mode": d["mode"], "legs": d["legs"], "fraction_sum": sum(l[1] for l in d["legs"])}
        elif cat == "TDM_SLOT":
            slots[node].append((d["start"], d["end"], d["sp"]))
        elif cat == "TX":
            lk = links[d["link"]]
            lk["tx"] += 1
            lk[d["verdict"]] += 1
            if d["kind"] == "TUNNEL" and d["dst"] == "S0" and "key_ref" in d:
                client = key_owner.get(d["key_ref"], "?")
                leg = legs[client][node]
                leg["packets"] += 1
                leg["key_refs"].add(d["key_ref"])
        elif cat == "RX":
            rx += 1
        elif cat == "DROP" and d.get("reason") == "node_down":
            node_down += 1
        elif cat == "END":
            end = d

    for name, f in flows.items():
        f["lost"] = f["sent"] - f["delivered"]
        f["vpn"] = sorted(vpns[name])

    airtime = {}
    for client, ss in slots.items():
        per: dict = defaultdict(int)
        for (start, stop, sp), nxt in zip(ss, ss[1:] + [None]):
            per[sp] += (stop if nxt is None else min(stop, nxt[0])) - start
        total = sum(per.values())
        airtime[client] = {"us": dict(sorted(per.items())),
                           "share": {sp: v / total for sp, v in sorted(per.items())} if total else {}}

    ok = sum(l["ok"] for l in links.values())
    inflight = end["inflight"] if end else None
    conservation = {"sent_ok": ok, "received": rx, "dropped_node_down": node_down, "inflight": inflight,
                    "balanced": end is not None and ok == rx + node_down + inflight}

    if end is not None:
        audit["end_sp_opens"] = end["sp_tunnel_opens"]
    revenue["balanced"] = (revenue["total_milli"] == revenue["allocated_milli"] == revenue["closed_milli"]
                           and not revenue["mismatched"])
    return {
        "meta": meta,
        "partial": partial or end is None,
        "events": len(events),
        "counts": dict(sorted(counts.items())),
        "flows": dict(sorted(flows.items())),
        "handoffs": handoffs,
        "preauth": preauth,
        "goodness": dict(sorted(goodness.items())),
        "revenue": revenue,
        "energy": end["energy"] if end else {},
        "coding": coding,
        "key_audit": audit,
        "legs": {c: {sp: {"packets": v["packets"], "key_refs": sorted(v["key_refs"])}
                     for sp, v in sorted(per.items())} for c, per in sorted(legs.items())},
        "parallel": dict(sorted(plans.items())),
        "airtime": airtime,
        "links": dict(sorted(links.items())),
        "conservation": conservation,
        "security_alerts": counts.get("SECURITY_ALERT", 0),
        "invariant_violations": counts.get("INVARIANT", 0),
    }


def dump_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
