"""Symbolic authenticated encryption, key registry and certificates.

Nothing here is a real cipher. Sealing XORs the plaintext with a keyed-hash
keystream and attaches a truncated keyed-hash tag (a synthetic IV, so sealing
is a pure function of key and plaintext). What matters for the simulator is
that an envelope can only be opened by a holder of the matching key, and
that any modification is detected.
"""

from __future__ import annotations

import enum
import hashlib
import random
import struct
from dataclasses import dataclass, field

from .core import DecodeError, NodeId

TAG_SIZE = 8


class AuthFailure(Exception):
    pass


class WrongSealType(Exception):
    pass


@dataclass(frozen=True)
class SymmetricKey:
    key_id: int
    material: bytes

    def __post_init__(self):
        if len(self.material) != 16:
            raise ValueError("key material is 16 bytes")

    def __repr__(self) -> str:
        # never leak material into logs or traces
        return f"SymmetricKey(key_id={self.key_id:#018x})"

    def to_bytes(self) -> bytes:
        return struct.pack(">Q", self.key_id) + self.material

    @classmethod
    def from_bytes(cls, b: bytes) -> SymmetricKey:
        if len(b) != 24:
            raise DecodeError("serialized key is 24 bytes")
        return cls(struct.unpack(">Q", b[:8])[0], bytes(b[8:]))


@dataclass(frozen=True)
class KeyPair:
    public_id: int
    private_id: int


class SealType(enum.IntEnum):
    SYM = 0
    ASYM = 1


@dataclass(frozen=True)
class Envelope:
    seal_type: SealType
    key_ref: int
    sealed: bytes
    tag: bytes

    _HEAD = struct.Struct(">BQ8sH")

    def encode(self) -> bytes:
        return self._HEAD.pack(self.seal_type, self.key_ref, self.tag, len(self.sealed)) + self.sealed

    @classmethod
    def decode(cls, b: bytes) -> Envelope:
        if len(b) < cls._HEAD.size:
            raise DecodeError("truncated envelope")
        st, ref, tag, n = cls._HEAD.unpack_from(b)
        if len(b) != cls._HEAD.size + n:
            raise DecodeError("envelope length mismatch")
        try:
            st = SealType(st)
        except ValueError:
            raise DecodeError(f"bad seal type {st}") from None
        return cls(st, ref, bytes(b[cls._HEAD.size:]), tag)


def _tag(material: bytes, seal_type: SealType, key_ref: int, plain: bytes) -> bytes:
    h = hashlib.blake2b(key=material, digest_size=TAG_SIZE, person=b"awima-tag")
    h.update(struct.pack(">BQ", seal_type, key_ref))
    h.update(plain)
    return h.digest()


def _keystream(material: bytes, tag: bytes, n: int) -> bytes:
    out = bytearray()
    block = 0
    while len(out) < n:
        h = hashlib.blake2b(key=material, digest_size=64, person=b"awima-ks")
        h.update(tag)
        h.update(struct.pack(">I", block))
        out += h.digest()
        block += 1
    return bytes(out[:n])


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big") if a else b""


def _seal(material: bytes, seal_type: SealType, key_ref: int, plain: bytes) -> Envelope:
    tag = _tag(material, seal_type, key_ref, plain)
    return Envelope(seal_type, key_ref, _xor(plain, _keystream(material, tag, len(plain))), tag)


def _open(material: bytes, e: Envelope) -> bytes:
    plain = _xor(e.sealed, _keystream(material, e.tag, len(e.sealed)))
    if _tag(material, e.seal_type, e.key_ref, plain) != e.tag:
        raise AuthFailure("authentication tag mismatch")
    return plain


def seal(k: SymmetricKey, plain: bytes) -> Envelope:
    return _seal(k.material, SealType.SYM, k.key_id, bytes(plain))


def open_envelope(k: SymmetricKey, e: Envelope) -> bytes:
    if e.seal_type != SealType.SYM:
        raise WrongSealType("asymmetric envelope opened with a symmetric key")
    if e.key_ref != k.key_id:
        raise AuthFailure(f"envelope sealed under key {e.key_ref:#x}, not {k.key_id:#x}")
    return _open(k.material, e)


@dataclass
class OpenAttempt:
    node: NodeId
    key_ref: int
    ok: bool


class KeyRegistry:
    """Per-simulation record of every key issued and who holds it.

    Key ids are drawn from the caller's rng, so a fixed seed reproduces the
    same key sequence. Ids are unique across symmetric keys and key pairs.
    """

    def __init__(self):
        self._issued: set[int] = set()
        self._pairs: dict[int, tuple[int, bytes]] = {}  # public id -> (private id, secret)
        self._holders: dict[int, set[NodeId]] = {}
        self.attempts: list[OpenAttempt] = []

    def _fresh_id(self, rng: random.Random) -> int:
        while True:
            kid = rng.getrandbits(64)
            if kid and kid not in self._issued:
                self._issued.add(kid)
                return kid

    def keygen(self, rng: random.Random) -> SymmetricKey:
        kid = self._fresh_id(rng)
        return SymmetricKey(kid, rng.randbytes(16))

    def keypair(self, rng: random.Random) -> KeyPair:
        pub = self._fresh_id(rng)
        priv = self._fresh_id(rng)
        self._pairs[pub] = (priv, rng.randbytes(16))
        return KeyPair(pub, priv)

    def issued(self, key_id: int) -> bool:
        return key_id in self._issued

    def asym_seal(self, public_id: int, plain: bytes) -> Envelope:
        if public_id not in self._pairs:
            raise AuthFailure(f"no key pair registered for public id {public_id:#x}")
        return _seal(self._pairs[public_id][1], SealType.ASYM, public_id, bytes(plain))

    def asym_open(self, private_id: int, e: Envelope) -> bytes:
        if e.seal_type != SealType.ASYM:
            raise WrongSealType("symmetric envelope opened with a private key")
        pair = self._pairs.get(e.key_ref)
        if pair is None or pair[0] != private_id:
            raise AuthFailure("private key does not pair with the envelope's public key")
        return _open(pair[1], e)

    def grant(self, key_id: int, node: NodeId) -> None:
        self._holders.setdefault(key_id, set()).add(node)

    def revoke(self, key_id: int, node: NodeId) -> None:
        self._holders.get(key_id, set()).discard(node)

    def holders(self, key_id: int) -> frozenset[NodeId]:
        return frozenset(self._holders.get(key_id, ()))


@dataclass
class Keyring:
    """The keys one principal holds. Every open goes through here and is audited."""

    owner: NodeId
    registry: KeyRegistry
    keys: dict[int, SymmetricKey] = field(default_factory=dict)

    def add(self, k: SymmetricKey) -> None:
        self.keys[k.key_id] = k
        self.registry.grant(k.key_id, self.owner)

    def discard(self, key_id: int) -> None:
        if self.keys.pop(key_id, None) is not None:
            self.registry.revoke(key_id, self.owner)

    def __contains__(self, key_id: int) -> bool:
        return key_id in self.keys

    def open(self, e: Envelope) -> bytes:
        k = self.keys.get(e.key_ref)
        try:
            if k is None:
                raise AuthFailure(f"{self.owner} holds no key {e.key_ref:#x}")
            plain = open_envelope(k, e)
        except (AuthFailure, WrongSealType):
            self.registry.attempts.append(OpenAttempt(self.owner, e.key_ref, False))
            raise
        self.registry.attempts.append(OpenAttempt(self.owner, e.key_ref, True))
        return plain


@dataclass(frozen=True)
class Certificate:
    subject: NodeId
    subject_public_id: int
    signature: bytes
    issuer: str = "TrustRoot"

    _BODY = struct.Struct(">5sQB8s")

    def encode(self) -> bytes:
        return self._BODY.pack(self.subject.encode(), self.subject_public_id, 0, self.signature)

    @classmethod
    def decode(cls, b: bytes) -> Certificate:
        if len(b) != cls._BODY.size:
            raise DecodeError("certificate has wrong length")
        subj, pub, issuer, sig = cls._BODY.unpack(b)
        if issuer != 0:
            raise DecodeError("unknown certificate issuer")
        return cls(NodeId.decode(subj), pub, sig)


class TrustRoot:
    """Signs and checks certificates; its secret is derived from the simulation seed."""

    def __init__(self, seed: int):
        self._secret = hashlib.blake2b(struct.pack(">Q", seed & (2**64 - 1)), digest_size=32,
                                       person=b"awima-root").digest()

    def _sign(self, subject: NodeId, public_id: int) -> bytes:
        h = hashlib.blake2b(key=self._secret, digest_size=8, person=b"awima-cert")
        h.update(subject.encode())
        h.update(struct.pack(">Q", public_id))
        return h.digest()

    def issue_certificate(self, subject: NodeId, subject_public_id: int) -> Certificate:
        return Certificate(subject, subject_public_id, self._sign(subject, subject_public_id))

    def validate_certificate(self, c: Certificate) -> bool:
        return c.issuer == "TrustRoot" and c.signature == self._sign(c.subject, c.subject_public_id)
