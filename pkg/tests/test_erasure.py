import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from awima.erasure import (CodingConfig, ConfigError, Insufficient, decode_group, encode_group, gf_inv, gf_mul)

CFG = CodingConfig(4, 6)


def slow_mul(a, b):
    """Shift-and-add multiply modulo x^8 + x^4 + x^3 + x^2 + 1."""
    out = 0
    while b:
        if b & 1:
            out ^= a
        a <<= 1
        if a & 0x100:
            a ^= 0x11D
        b >>= 1
    return out


def slow_inv(a):
    return next(x for x in range(1, 256) if slow_mul(a, x) == 1)


def lagrange_at(points, x):
    """Evaluate, one byte column at a time, the polynomial through ``points`` [(xi, yi)] at x."""
    total = 0
    for i, (xi, yi) in enumerate(points):
        num = den = 1
        for j, (xj, _) in enumerate(points):
            if j != i:
                num = slow_mul(num, x ^ xj)
                den = slow_mul(den, xi ^ xj)
        total ^= slow_mul(yi, slow_mul(num, slow_inv(den)))
    return total


def oracle_parity(packets, k, n):
    width = max(len(p) for p in packets)
    data = [p.ljust(width, b"\0") for p in packets]
    return [bytes(lagrange_at([(i, data[i][c]) for i in range(k)], r) for c in range(width))
            for r in range(k, n)]


def test_field_matches_slow_arithmetic():
    for a in range(256):
        for b in range(0, 256, 7):
            assert gf_mul(a, b) == slow_mul(a, b)
        if a:
            assert gf_inv(a) == slow_inv(a)


def test_parity_matches_interpolation_oracle():
    rng = random.Random(11)
    packets = [rng.randbytes(rng.randrange(1, 40)) for _ in range(4)]
    group = encode_group(CFG, packets)
    assert [s.data for s in group.shards[4:]] == oracle_parity(packets, 4, 6)
    assert [s.data[:len(p)] for s, p in zip(group.shards[:4], packets)] == packets


def test_frozen_parity_bytes():
    group = encode_group(CFG, [b"\x01", b"\x02", b"\x03", b"\x04"])
    # frozen from the interpolation oracle
    assert [s.data for s in group.shards[4:]] == oracle_parity([b"\x01", b"\x02", b"\x03", b"\x04"], 4, 6)
    assert [s.data for s in group.shards[4:]] == [b"E", b"^"]


def test_every_two_erasure_pattern_recovers():
    rng = random.Random(2)
    packets = [rng.randbytes(rng.randrange(0, 64)) for _ in range(4)]
    group = encode_group(CFG, packets)
    patterns = list(itertools.combinations(range(6), 2))
    assert len(patterns) == 15
    for lost in patterns:
        kept = [s for s in group.shards if s.index not in lost]
        assert decode_group(CFG, kept, group.original_lengths) == packets


def test_every_four_shard_subset_recovers():
    rng = random.Random(3)
    packets = [rng.randbytes(50) for _ in range(4)]
    group = encode_group(CFG, packets)
    subsets = list(itertools.combinations(group.shards, 4))
    assert len(subsets) == 15
    for sub in subsets:
        assert decode_group(CFG, sub, group.original_lengths) == packets


def test_three_erasures_is_insufficient():
    group = encode_group(CFG, [b"a", b"b", b"c", b"d"])
    with pytest.raises(Insufficient):
        decode_group(CFG, group.shards[:3], group.original_lengths)


@settings(max_examples=60)
@given(st.integers(1, 8), st.integers(0, 4), st.data())
def test_any_k_shards_recover(k, parity, data):
    cfg = CodingConfig(k, k + parity)
    packets = [data.draw(st.binary(max_size=32)) for _ in range(k)]
    group = encode_group(cfg, packets)
    keep = data.draw(st.permutations(group.shards))[:k]
    assert decode_group(cfg, keep, group.original_lengths) == packets


def test_config_validation():
    with pytest.raises(ConfigError):
        CodingConfig(6, 4)
    with pytest.raises(ConfigError):
        CodingConfig(4, 6, field_order=65536)
    with pytest.raises(ConfigError):
        encode_group(CFG, [b"x"] * 3)
