import random
from dataclasses import dataclass

import pytest

from awima.core import SERVER_ID, client_id, sp_id
from awima.crypto import KeyRegistry, TrustRoot
from awima.handshake import Principal, SessionKind, run_handshake
from awima.sim.cli import bundled_dir
from awima.sim.report import report_from_trace
from awima.sim.scenario import load_scenario
from awima.sim.world import World

BUNDLED = sorted(p.stem for p in bundled_dir().glob("*.yaml"))


@dataclass
class Run:
    name: str
    trace: str
    events: list
    report: dict
    world: World


def run_bundled(name: str, seed=None, check: bool = True) -> Run:
    world = World(load_scenario(bundled_dir() / f"{name}.yaml"), seed, check)
    trace = world.run()
    return Run(name, trace.text(), trace.events(), report_from_trace(trace.events()), world)


@pytest.fixture(scope="session")
def bundled_runs() -> dict:
    """Every bundled scenario, run once with invariant checking on."""
    return {name: run_bundled(name) for name in BUNDLED}


@dataclass
class Cast:
    server: Principal
    sp: Principal
    client: Principal
    rng: random.Random


def make_cast(seed: int = 1, client_secret: bytes = b"client-secret") -> Cast:
    reg, trust, rng = KeyRegistry(), TrustRoot(seed), random.Random(seed)
    kp = reg.keypair(rng)
    server = Principal(SERVER_ID, reg, trust, keypair=kp,
                       certificate=trust.issue_certificate(SERVER_ID, kp.public_id))
    sp = Principal(sp_id(0), reg, trust, secret=b"sp-secret")
    client = Principal(client_id(0), reg, trust, secret=client_secret)
    server.directory[sp.node] = b"sp-secret"
    server.directory[client.node] = b"client-secret"
    return Cast(server, sp, client, rng)


def with_sp_session(cast: Cast) -> Cast:
    """Registers the SP with the server so it can relay a client handshake."""
    run = run_handshake(SessionKind.SP_SERVER, cast.sp, cast.server, cast.rng)
    cast.server.sp_keys[cast.sp.node] = run.active_sessions[0].key
    return cast


@pytest.fixture
def cast() -> Cast:
    return make_cast()


ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
