"""Scenario files: YAML with strict validation and line-numbered diagnostics.

Every problem found is reported at once, each as ``path (line N): message``.
Unknown keys are errors, so a typo never silently falls back to a default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import yaml

from ..core import NodeId, QosPromise, Reliability, Role
from ..erasure import CodingConfig, ConfigError
from ..handoff import DrainMode
from ..policy import PolicyError, RevenuePolicy, UtilityWeights

WWAN_PROFILES = {
    # protocol tag -> (bandwidth bytes/sec, latency seconds)
    "LTE": (1_500_000.0, 0.040),
    "WiMAX": (1_000_000.0, 0.060),
    "HSPA": (500_000.0, 0.080),
    "EVDO": (300_000.0, 0.100),
}


class ScenarioError(Exception):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("\n".join(errors))


@dataclass(frozen=True)
class LinkConfig:
    latency: float
    bandwidth: float
    loss: float = 0.0


@dataclass(frozen=True)
class FlowConfig:
    direction: str  # "up" (client to internet) or "down"
    reliability: Reliability
    count: int
    size: int
    interval: float
    start: float = 0.0
    coded: bool = False


Waypoints = tuple[tuple[float, float, float], ...]  # (t, x, y)


@dataclass(frozen=True)
class SpConfig:
    id: NodeId
    position: tuple[float, float]
    radio_range: float
    protocol: str
    bandwidth: float
    latency: float
    wwan_loss: float = 0.0
    energy: float = 5000.0
    energy_rate: float = 0.5
    local_load: float = 0.0
    provisioned_fraction: float = 0.5
    price: float = 0.01
    available_for: float = math.inf
    credentials: str = "valid"
    lightweight_slots: int = 4
    manual: Optional[bool] = None
    waypoints: Waypoints = ()


@dataclass(frozen=True)
class ClientConfig:
    id: NodeId
    position: tuple[float, float]
    radio_range: float
    needs: QosPromise
    radios: int = 1
    parallel: bool = False
    flows: tuple[FlowConfig, ...] = ()
    waypoints: Waypoints = ()
    credentials: str = "valid"


@dataclass(frozen=True)
class HandoffConfig:
    drain_mode: DrainMode = DrainMode.VIA_SERVER
    drain_timer: float = 5.0
    trigger_quality: float = 0.25  # seek a handoff once the serving link drops below this


@dataclass(frozen=True)
class PolicyConfig:
    weights: UtilityWeights = field(default_factory=UtilityWeights)
    alpha: float = 0.5
    revenue: RevenuePolicy = field(default_factory=RevenuePolicy)


@dataclass(frozen=True)
class TimelineEvent:
    at: float
    event: str
    target: NodeId
    value: Optional[float] = None


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    duration: float
    sps: tuple[SpConfig, ...]
    clients: tuple[ClientConfig, ...]
    adhoc: LinkConfig = LinkConfig(0.002, 2_500_000.0)
    internet: LinkConfig = LinkConfig(0.010, 10_000_000.0)
    direct: LinkConfig = LinkConfig(0.003, 2_500_000.0)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    coding: Optional[CodingConfig] = None
    handoff: HandoffConfig = field(default_factory=HandoffConfig)
    timeline: tuple[TimelineEvent, ...] = ()
    tdm_quantum: float = 0.1
    beacon_interval: float = 1.0
    source: str = ""


# YAML with line numbers ----------------------------------------------------

class LineDict(dict):
    line = 0

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.key_lines: dict[str, int] = {}


class _Loader(yaml.SafeLoader):
    pass


def _mapping(loader: _Loader, node: yaml.MappingNode) -> LineDict:
    loader.flatten_mapping(node)
    out = LineDict()
    out.line = node.start_mark.line + 1
    for k_node, v_node in node.value:
        k = loader.construct_object(k_node, deep=True)
        if k in out:
            loader.duplicates.append(f"{k} (line {k_node.start_mark.line + 1}): duplicate key")
        out[k] = loader.construct_object(v_node, deep=True)
        out.key_lines[k] = k_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _mapping)


def parse_yaml(text: str) -> Any:
    loader = _Loader(text)
    loader.duplicates = []
    try:
        data = loader.get_single_data()
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ScenarioError([f"parse error at {where}: {getattr(exc, 'problem', exc)}"]) from None
    finally:
        loader.dispose()
    if loader.duplicates:
        raise ScenarioError(loader.duplicates)
    return data


# Validation -----------------------------------------------------------------

class _Checker:
    def __init__(self):
        self.errors: list[str] = []

    def err(self, path: str, line: int, msg: str) -> None:
        self.errors.append(f"{path} (line {line}): {msg}" if line else f"{path}: {msg}")

    def section(self, d: Any, path: str, line: int, allowed: set[str]) -> LineDict:
        if d is None:
            return LineDict()
        if not isinstance(d, dict):
            self.err(path, line, "expected a mapping")
            return LineDict()
        for k in d:
            if k not in allowed:
                self.err(f"{path}.{k}" if path else str(k), _line(d, k), "unknown field")
        return d

    def get(self, d: LineDict, key: str, path: str, kind: Callable, default: Any = ...,
            check: Optional[Callable[[Any], Optional[str]]] = None) -> Any:
        full = f"{path}.{key}" if path else key
        if key not in d:
            if default is ...:
                self.err(full, getattr(d, "line", 0), "required field missing")
                return None
            return default
        raw = d[key]
        try:
            v = kind(raw)
        except (TypeError, ValueError) as exc:
            self.err(full, _line(d, key), f"bad value {raw!r}: {exc}")
            return None if default is ... else default
        if check is not None:
            problem = check(v)
            if problem:
                self.err(full, _line(d, key), problem)
        return v


def _line(d: Any, key: str) -> int:
    return getattr(d, "key_lines", {}).get(key, getattr(d, "line", 0))


def _number(x: Any) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise TypeError("expected a number")
    return float(x)


def _integer(x: Any) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise TypeError("expected an integer")
    return x


def _boolean(x: Any) -> bool:
    if not isinstance(x, bool):
        raise TypeError("expected true or false")
    return x


def _text(x: Any) -> str:
    if not isinstance(x, str):
        raise TypeError("expected a string")
    return x


def _point(x: Any) -> tuple[float, float]:
    if not isinstance(x, list) or len(x) != 2:
        raise ValueError("expected [x, y]")
    return (_number(x[0]), _number(x[1]))


def _waypoints(x: Any) -> Waypoints:
    if not isinstance(x, list):
        raise ValueError("expected a list of [t, x, y]")
    out = []
    for p in x:
        if not isinstance(p, list) or len(p) != 3:
            raise ValueError("each waypoint is [t, x, y]")
        out.append((_number(p[0]), _number(p[1]), _number(p[2])))
    if any(b[0] <= a[0] for a, b in zip(out, out[1:])):
        raise ValueError("waypoint times must increase")
    return tuple(out)


def _positive(v) -> Optional[str]:
    return None if v is not None and v > 0 else "must be positive"


def _non_negative(v) -> Optional[str]:
    return None if v is not None and v >= 0 else "must not be negative"


def _unit(v) -> Optional[str]:
    return None if v is not None and 0 <= v <= 1 else "must lie in [0, 1]"


def _node(role: Role) -> Callable[[Any], NodeId]:
    def parse(x: Any) -> NodeId:
        n = NodeId.parse(_text(x))
        if n.role is not role:
            raise ValueError(f"expected a {role.name.lower()} id")
        return n
    return parse


_TOP = {"name", "seed", "duration", "service_providers", "clients", "links", "policy", "coding", "handoff",
        "timeline", "tdm_quantum", "beacon_interval"}
_SP = {"id", "position", "range", "wwan", "energy", "energy_rate", "local_load", "provisioned_fraction", "price",
       "available_for", "credentials", "lightweight_slots", "manual", "waypoints"}
_CLIENT = {"id", "position", "range", "needs", "radios", "parallel", "flows", "waypoints", "credentials"}
_FLOW = {"direction", "reliability", "count", "size", "interval", "start", "coded"}
_LINK = {"latency", "bandwidth", "loss"}
_EVENTS = {"sp_withdraw": Role.SERVICE_PROVIDER, "sp_vanish": Role.SERVICE_PROVIDER,
           "demand": Role.CLIENT, "manual_accept": Role.SERVICE_PROVIDER, "manual_deny": Role.SERVICE_PROVIDER}


def _link(c: _Checker, d: Any, path: str, line: int, default: LinkConfig) -> LinkConfig:
    d = c.section(d, path, line, _LINK)
    return LinkConfig(
        c.get(d, "latency", path, _number, default.latency, _non_negative),
        c.get(d, "bandwidth", path, _number, default.bandwidth, _positive),
        c.get(d, "loss", path, _number, default.loss, _unit),
    )


def _sp(c: _Checker, d: Any, path: str, line: int) -> Optional[SpConfig]:
    d = c.section(d, path, line, _SP)
    wwan = c.section(d.get("wwan"), f"{path}.wwan", _line(d, "wwan"), {"protocol", "bandwidth", "latency", "loss"})
    protocol = c.get(wwan, "protocol", f"{path}.wwan", _text, "LTE")
    if protocol not in WWAN_PROFILES:
        c.err(f"{path}.wwan.protocol", _line(wwan, "protocol"), f"unknown WWAN protocol {protocol!r}")
        protocol = "LTE"
    bw, lat = WWAN_PROFILES[protocol]
    manual = c.get(d, "manual", path, _text, None)
    if manual not in (None, "accept", "deny"):
        c.err(f"{path}.manual", _line(d, "manual"), "must be accept or deny")
    creds = c.get(d, "credentials", path, _text, "valid")
    if creds not in ("valid", "invalid", "unknown"):
        c.err(f"{path}.credentials", _line(d, "credentials"), "must be valid, invalid or unknown")
    cfg = SpConfig(
        id=c.get(d, "id", path, _node(Role.SERVICE_PROVIDER)),
        position=c.get(d, "position", path, _point, (0.0, 0.0)),
        radio_range=c.get(d, "range", path, _number, 50.0, _positive),
        protocol=protocol,
        bandwidth=c.get(wwan, "bandwidth", f"{path}.wwan", _number, bw, _positive),
        latency=c.get(wwan, "latency", f"{path}.wwan", _number, lat, _non_negative),
        wwan_loss=c.get(wwan, "loss", f"{path}.wwan", _number, 0.0, _unit),
        energy=c.get(d, "energy", path, _number, 5000.0, _positive),
        energy_rate=c.get(d, "energy_rate", path, _number, 0.5, _non_negative),
        local_load=c.get(d, "local_load", path, _number, 0.0, _non_negative),
        provisioned_fraction=c.get(d, "provisioned_fraction", path, _number, 0.5, _unit),
        price=c.get(d, "price", path, _number, 0.01, _positive),
        available_for=c.get(d, "available_for", path, _number, math.inf, _positive),
        credentials=creds,
        lightweight_slots=c.get(d, "lightweight_slots", path, _integer, 4, _non_negative),
        manual=None if manual is None else manual == "accept",
        waypoints=c.get(d, "waypoints", path, _waypoints, ()),
    )
    return cfg


def _flow(c: _Checker, d: Any, path: str, line: int) -> Optional[FlowConfig]:
    d = c.section(d, path, line, _FLOW)
    direction = c.get(d, "direction", path, _text, "up")
    if direction not in ("up", "down"):
        c.err(f"{path}.direction", _line(d, "direction"), "must be up or down")
    rel = c.get(d, "reliability", path, _text, "reliable")
    if rel not in ("reliable", "unreliable"):
        c.err(f"{path}.reliability", _line(d, "reliability"), "must be reliable or unreliable")
    coded = c.get(d, "coded", path, _boolean, False)
    if coded and rel != "unreliable":
        c.err(f"{path}.coded", _line(d, "coded"), "outer coding applies to unreliable flows only")
    return FlowConfig(
        direction=direction,
        reliability=Reliability.UNRELIABLE if rel == "unreliable" else Reliability.RELIABLE,
        count=c.get(d, "count", path, _integer, ..., _positive),
        size=c.get(d, "size", path, _integer, 200, lambda v: None if 1 <= v <= 1300 else "must be 1..1300"),
        interval=c.get(d, "interval", path, _number, 0.02, _positive),
        start=c.get(d, "start", path, _number, 0.0, _non_negative),
        coded=coded,
    )


def _client(c: _Checker, d: Any, path: str, line: int) -> Optional[ClientConfig]:
    d = c.section(d, path, line, _CLIENT)
    nd = c.section(d.get("needs"), f"{path}.needs", _line(d, "needs"), {"bandwidth", "duration", "cost"})
    bw = c.get(nd, "bandwidth", f"{path}.needs", _number, 20000.0, _positive)
    dur = c.get(nd, "duration", f"{path}.needs", _number, 600.0, _positive)
    cost = c.get(nd, "cost", f"{path}.needs", _number, 0.05, _positive)
    needs = QosPromise(bw, dur, cost) if all(v and v > 0 for v in (bw, dur, cost)) else None
    flows_raw = d.get("flows", [])
    flows = []
    if not isinstance(flows_raw, list):
        c.err(f"{path}.flows", _line(d, "flows"), "expected a list")
    else:
        for i, f in enumerate(flows_raw):
            flows.append(_flow(c, f, f"{path}.flows[{i}]", getattr(f, "line", _line(d, "flows"))))
    radios = c.get(d, "radios", path, _integer, 1, _positive)
    parallel = c.get(d, "parallel", path, _boolean, False)
    creds = c.get(d, "credentials", path, _text, "valid")
    if creds not in ("valid", "invalid", "unknown"):
        c.err(f"{path}.credentials", _line(d, "credentials"), "must be valid, invalid or unknown")
    return ClientConfig(
        id=c.get(d, "id", path, _node(Role.CLIENT)),
        position=c.get(d, "position", path, _point, (0.0, 0.0)),
        radio_range=c.get(d, "range", path, _number, 50.0, _positive),
        needs=needs,
        radios=radios,
        parallel=parallel,
        flows=tuple(flows),
        waypoints=c.get(d, "waypoints", path, _waypoints, ()),
        credentials=creds,
    )


def validate(data: Any, source: str = "") -> Scenario:
    c = _Checker()
    if not isinstance(data, dict):
        raise ScenarioError(["scenario: top level must be a mapping"])
    top = c.section(data, "", 1, _TOP)

    sps = []
    raw = top.get("service_providers")
    if not isinstance(raw, list) or not raw:
        c.err("service_providers", _line(top, "service_providers"), "need a non-empty list")
    else:
        for i, s in enumerate(raw):
            sps.append(_sp(c, s, f"service_providers[{i}]", getattr(s, "line", 0)))
    clients = []
    raw = top.get("clients", [])
    if not isinstance(raw, list):
        c.err("clients", _line(top, "clients"), "expected a list")
    else:
        for i, s in enumerate(raw):
            clients.append(_client(c, s, f"clients[{i}]", getattr(s, "line", 0)))
    ids = [x.id for x in sps + clients if x is not None and x.id is not None]
    for n in sorted({i for i in ids if ids.count(i) > 1}):
        c.err("nodes", 0, f"duplicate node id {n}")
    if any(x is not None and x.id is not None and x.id.index > 0xFF for x in sps):
        c.err("service_providers", 0, "at most 256 service providers (SP0..SP255)")

    links = c.section(top.get("links"), "links", _line(top, "links"), {"adhoc", "internet", "direct"})
    adhoc = _link(c, links.get("adhoc"), "links.adhoc", _line(links, "adhoc"), Scenario.adhoc)
    internet = _link(c, links.get("internet"), "links.internet", _line(links, "internet"), Scenario.internet)
    direct = _link(c, links.get("direct"), "links.direct", _line(links, "direct"), Scenario.direct)

    pol = c.section(top.get("policy"), "policy", _line(top, "policy"), {"weights", "alpha", "revenue"})
    wd = c.section(pol.get("weights"), "policy.weights", _line(pol, "weights"),
                   set(UtilityWeights.__dataclass_fields__))
    wargs = {k: c.get(wd, k, "policy.weights", _number, None) for k in wd}
    try:
        weights = UtilityWeights(**{k: v for k, v in wargs.items() if v is not None})
    except PolicyError as exc:
        c.err("policy.weights", _line(pol, "weights"), str(exc))
        weights = UtilityWeights()
    alpha = c.get(pol, "alpha", "policy", _number, 0.5, _unit)
    rd = c.section(pol.get("revenue"), "policy.revenue", _line(pol, "revenue"),
                   {"service_provider", "server", "carrier"})
    shares = {k: c.get(rd, k, "policy.revenue", _number, getattr(RevenuePolicy, k), _unit)
              for k in ("service_provider", "server", "carrier")}
    try:
        revenue = RevenuePolicy(**shares)
    except (PolicyError, TypeError) as exc:
        c.err("policy.revenue", _line(pol, "revenue"), str(exc))
        revenue = RevenuePolicy()

    coding = None
    if top.get("coding") is not None:
        cd = c.section(top["coding"], "coding", _line(top, "coding"), {"k", "n"})
        k = c.get(cd, "k", "coding", _integer)
        n = c.get(cd, "n", "coding", _integer)
        if k is not None and n is not None:
            try:
                coding = CodingConfig(k, n)
            except ConfigError as exc:
                c.err("coding", _line(top, "coding"), str(exc))

    hd = c.section(top.get("handoff"), "handoff", _line(top, "handoff"),
                   {"drain_mode", "drain_timer", "trigger_quality"})
    mode = c.get(hd, "drain_mode", "handoff", _text, "via_server")
    if mode not in ("via_server", "direct_link"):
        c.err("handoff.drain_mode", _line(hd, "drain_mode"), "must be via_server or direct_link")
    handoff = HandoffConfig(
        DrainMode.DIRECT_LINK if mode == "direct_link" else DrainMode.VIA_SERVER,
        c.get(hd, "drain_timer", "handoff", _number, 5.0, _non_negative),
        c.get(hd, "trigger_quality", "handoff", _number, 0.25, _unit),
    )

    timeline = []
    raw = top.get("timeline", [])
    if not isinstance(raw, list):
        c.err("timeline", _line(top, "timeline"), "expected a list")
        raw = []
    known = {x.id for x in sps + clients if x is not None}
    for i, e in enumerate(raw):
        path = f"timeline[{i}]"
        e = c.section(e, path, getattr(e, "line", 0), {"at", "event", "node", "value"})
        kind = c.get(e, "event", path, _text)
        if kind is not None and kind not in _EVENTS:
            c.err(f"{path}.event", _line(e, "event"), f"unknown event {kind!r}")
            continue
        node = c.get(e, "node", path, _node(_EVENTS[kind]) if kind else NodeId.parse)
        if node is not None and node not in known:
            c.err(f"{path}.node", _line(e, "node"), f"no such node {node}")
        value = c.get(e, "value", path, _number, None)
        if kind == "demand" and (value is None or value <= 0):
            c.err(f"{path}.value", _line(e, "value"), "demand needs a positive bandwidth value")
        timeline.append(TimelineEvent(c.get(e, "at", path, _number, ..., _non_negative), kind, node, value))

    name = c.get(top, "name", "", _text, Path(source).stem if source else "scenario")
    seed = c.get(top, "seed", "", _integer, 1, lambda v: None if 0 <= v < 2**64 else "must be a u64")
    duration = c.get(top, "duration", "", _number, ..., _positive)
    quantum = c.get(top, "tdm_quantum", "", _number, 0.1, _positive)
    beacon = c.get(top, "beacon_interval", "", _number, 1.0, _positive)
    if c.errors:
        raise ScenarioError(c.errors)
    return Scenario(name, seed, duration, tuple(sps), tuple(clients), adhoc, internet, direct,
                    PolicyConfig(weights, alpha, revenue), coding, handoff,
                    tuple(sorted(timeline, key=lambda e: e.at)), quantum, beacon, source)


def load_text(text: str, source: str = "") -> Scenario:
    return validate(parse_yaml(text), source)


def load_scenario(path) -> Scenario:
    p = Path(path)
    return load_text(p.read_text(), str(p))
