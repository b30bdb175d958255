"""Small builders shared by the node and handoff tests."""

import random

from awima.core import SERVER_ID, QosPromise, client_id, sp_id, sp_public_address
from awima.crypto import KeyRegistry
from awima.handshake import ControlSession, SessionKind
from awima.nodes import ClientState, SpState, WwanLink


def make_sp(i=0, position=(0.0, 0.0), registered=True, **kw):
    sp = SpState(sp_id(i), sp_public_address(i), WwanLink("LTE", 1_000_000.0, 0.03), energy=1000.0,
                 energy_rate_per_client=0.1, position=position, radio_range=70.0, **kw)
    sp.registered = registered
    return sp


def make_client(i=0, position=(0.0, 0.0), bandwidth=20_000.0):
    return ClientState(client_id(i), QosPromise(bandwidth, 600.0, 0.05), position=position, radio_range=70.0)


def session(a, b, kind, seed=0):
    rng = random.Random(seed)
    return ControlSession(rng.getrandbits(64), (a, b), KeyRegistry().keygen(rng), kind)


def server_session(node, seed=0):
    kind = SessionKind.SP_SERVER if node.role.name == "SERVICE_PROVIDER" else SessionKind.CLIENT_SERVER
    return session(node, SERVER_ID, kind, seed)
