import random

import pytest
from hypothesis import given, strategies as st

from awima.core import SERVER_ID, client_id, sp_id
from awima.crypto import (AuthFailure, Certificate, Envelope, Keyring, KeyRegistry, SealType, TrustRoot, WrongSealType,
                          open_envelope, seal)


@pytest.fixture
def reg():
    return KeyRegistry()


@given(st.binary(max_size=600), st.integers(0, 2**32))
def test_seal_open_round_trip(plain, seed):
    k = KeyRegistry().keygen(random.Random(seed))
    e = seal(k, plain)
    assert e.key_ref == k.key_id
    assert open_envelope(k, Envelope.decode(e.encode())) == plain


@given(st.binary(min_size=1, max_size=64), st.data())
def test_any_bit_flip_fails_authentication(plain, data):
    k = KeyRegistry().keygen(random.Random(0))
    raw = bytearray(seal(k, plain).encode())
    pos = data.draw(st.integers(0, len(raw) - 1))
    raw[pos] ^= 1 << data.draw(st.integers(0, 7))
    try:
        e = Envelope.decode(bytes(raw))
    except ValueError:
        return
    with pytest.raises((AuthFailure, WrongSealType)):
        open_envelope(k, e)


def test_wrong_key_fails(reg):
    rng = random.Random(3)
    a, b = reg.keygen(rng), reg.keygen(rng)
    with pytest.raises(AuthFailure):
        open_envelope(b, seal(a, b"secret"))


def test_key_ids_unique(reg):
    rng = random.Random(1)
    ids = [reg.keygen(rng).key_id for _ in range(2000)]
    assert len(set(ids)) == len(ids)


def test_keyring_audits_every_attempt(reg):
    rng = random.Random(5)
    k = reg.keygen(rng)
    mine, theirs = Keyring(client_id(0), reg), Keyring(sp_id(0), reg)
    mine.add(k)
    e = seal(k, b"payload")
    assert mine.open(e) == b"payload"
    with pytest.raises(AuthFailure):
        theirs.open(e)
    assert [(a.node, a.ok) for a in reg.attempts] == [(client_id(0), True), (sp_id(0), False)]
    assert reg.holders(k.key_id) == {client_id(0)}
    mine.discard(k.key_id)
    assert reg.holders(k.key_id) == frozenset()


def test_asymmetric_pairing(reg):
    rng = random.Random(9)
    kp, other = reg.keypair(rng), reg.keypair(rng)
    e = reg.asym_seal(kp.public_id, b"hello")
    assert e.seal_type is SealType.ASYM
    assert reg.asym_open(kp.private_id, e) == b"hello"
    with pytest.raises(AuthFailure):
        reg.asym_open(other.private_id, e)
    with pytest.raises(WrongSealType):
        open_envelope(reg.keygen(rng), e)


def test_certificates():
    root, other = TrustRoot(1), TrustRoot(2)
    c = root.issue_certificate(SERVER_ID, 42)
    assert root.validate_certificate(c)
    assert not other.validate_certificate(c)
    assert not root.validate_certificate(Certificate(SERVER_ID, 42, b"\0" * 8))
    assert Certificate.decode(c.encode()) == c
