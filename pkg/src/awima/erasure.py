"""Systematic Reed-Solomon erasure code over GF(256).

The generator is an n x k Vandermonde matrix on the points 0..n-1, right
multiplied by the inverse of its top k x k block. The top block becomes the
identity (data shards pass through) and every k x k row subset stays
invertible, so any k shards rebuild the group.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

PRIM = 0x11D

EXP = [0] * 512
LOG = [0] * 256
_x = 1
for _i in range(255):
    EXP[_i] = _x
    LOG[_x] = _i
    _x <<= 1
    if _x & 0x100:
        _x ^= PRIM
for _i in range(255, 512):
    EXP[_i] = EXP[_i - 255]
del _x, _i


class ConfigError(ValueError):
    pass


class Insufficient(Exception):
    pass


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return EXP[LOG[a] + LOG[b]]


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(256)")
    return EXP[255 - LOG[a]]


def gf_pow(a: int, e: int) -> int:
    if e == 0:
        return 1
    if a == 0:
        return 0
    return EXP[(LOG[a] * e) % 255]


@lru_cache(maxsize=256)
def _mul_table(c: int) -> bytes:
    return bytes(gf_mul(c, v) for v in range(256))


def mat_inv(m: Sequence[Sequence[int]]) -> list[list[int]]:
    n = len(m)
    a = [list(row) + [1 if i == j else 0 for j in range(n)] for i, row in enumerate(m)]
    for col in range(n):
        piv = next((r for r in range(col, n) if a[r][col]), None)
        if piv is None:
            raise ZeroDivisionError("singular matrix")
        a[col], a[piv] = a[piv], a[col]
        inv = gf_inv(a[col][col])
        a[col] = [gf_mul(v, inv) for v in a[col]]
        for r in range(n):
            f = a[r][col]
            if r != col and f:
                a[r] = [x ^ gf_mul(f, y) for x, y in zip(a[r], a[col])]
    return [row[n:] for row in a]


def mat_mul(a: Sequence[Sequence[int]], b: Sequence[Sequence[int]]) -> list[list[int]]:
    out = []
    for row in a:
        acc = [0] * len(b[0])
        for aik, brow in zip(row, b):
            if aik:
                acc = [x ^ gf_mul(aik, y) for x, y in zip(acc, brow)]
        out.append(acc)
    return out


@dataclass(frozen=True)
class CodingConfig:
    k: int
    n: int
    field_order: int = 256

    def __post_init__(self):
        if self.field_order != 256:
            raise ConfigError("only GF(256) is supported")
        if not (1 <= self.k <= self.n <= 255):
            raise ConfigError(f"need 1 <= k <= n <= 255, got k={self.k} n={self.n}")

    @property
    def parity(self) -> int:
        return self.n - self.k


@lru_cache(maxsize=64)
def generator(k: int, n: int) -> tuple[tuple[int, ...], ...]:
    vander = [[gf_pow(x, j) for j in range(k)] for x in range(n)]
    g = mat_mul(vander, mat_inv(vander[:k]))
    return tuple(tuple(row) for row in g)


@dataclass(frozen=True)
class Shard:
    index: int
    data: bytes
    is_parity: bool


@dataclass(frozen=True)
class CodedGroup:
    group_id: int
    shards: tuple[Shard, ...]
    original_lengths: tuple[int, ...]


def _combine(coeffs: Sequence[int], rows: Sequence[bytes], width: int) -> bytes:
    acc = 0
    for c, row in zip(coeffs, rows):
        if c == 1:
            acc ^= int.from_bytes(row, "big")
        elif c:
            acc ^= int.from_bytes(row.translate(_mul_table(c)), "big")
    return acc.to_bytes(width, "big")


def encode_group(cfg: CodingConfig, packets: Sequence[bytes], group_id: int = 0) -> CodedGroup:
    if len(packets) != cfg.k:
        raise ConfigError(f"group needs exactly k={cfg.k} packets, got {len(packets)}")
    width = max((len(p) for p in packets), default=0)
    data = [bytes(p).ljust(width, b"\0") for p in packets]
    g = generator(cfg.k, cfg.n)
    shards = [Shard(i, data[i], False) for i in range(cfg.k)]
    for r in range(cfg.k, cfg.n):
        shards.append(Shard(r, _combine(g[r], data, width), True))
    return CodedGroup(group_id, tuple(shards), tuple(len(p) for p in packets))


def decode_group(cfg: CodingConfig, received: Iterable[Shard], original_lengths: Sequence[int]) -> list[bytes]:
    """Rebuild the k data packets from any k distinct shards."""
    by_index: dict[int, Shard] = {}
    for s in received:
        if not 0 <= s.index < cfg.n:
            raise ConfigError(f"shard index {s.index} outside 0..{cfg.n - 1}")
        by_index.setdefault(s.index, s)
    if len(by_index) < cfg.k:
        raise Insufficient(f"{len(by_index)} of {cfg.k} shards")
    if len(original_lengths) != cfg.k:
        raise ConfigError("need one original length per data packet")
    if all(i in by_index for i in range(cfg.k)):
        data = [by_index[i].data for i in range(cfg.k)]
    else:
        chosen = sorted(by_index)[:cfg.k]
        width = len(by_index[chosen[0]].data)
        g = generator(cfg.k, cfg.n)
        inv = mat_inv([g[i] for i in chosen])
        rows = [by_index[i].data for i in chosen]
        data = [_combine(inv[i], rows, width) for i in range(cfg.k)]
    return [d[:n] for d, n in zip(data, original_lengths)]
