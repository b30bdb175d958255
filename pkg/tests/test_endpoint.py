from hypothesis import given, strategies as st

from awima.core import FlowId, client_id, sp_id
from awima.endpoint import (DropOldestQueue, GroupAssembler, GroupCollector, ReliableSender, Resequencer,
                            decode_ack, decode_rebind, decode_shard, encode_ack, encode_rebind, encode_shard)
from awima.erasure import CodingConfig


@given(st.lists(st.integers(0, 39), max_size=300))
def test_resequencer_releases_each_seq_once_in_order(arrivals):
    rs = Resequencer(window=64)
    released = []
    for seq in arrivals + list(range(40)):
        out, _ = rs.receive(seq, seq)
        released += out
    assert released == list(range(40))


def test_resequencer_verdicts():
    rs = Resequencer(window=4)
    assert rs.receive(1, "b") == ([], "new")
    assert rs.receive(1, "b") == ([], "dup")
    assert rs.receive(9, "x") == ([], "window")
    assert rs.receive(0, "a") == (["a", "b"], "new")
    assert rs.held == 0


def test_sender_window_and_retransmission():
    s = ReliableSender(window=2, rto_us=100, max_attempts=2)
    for seq in range(4):
        s.push(seq)
    assert s.due(0) == [(0, 1), (1, 1)]
    assert s.due(50) == []
    assert s.ack(0) and not s.ack(0)
    assert s.due(60) == [(2, 1)]
    assert s.next_timer() == 100
    assert s.due(100) == [(1, 2)]
    assert s.due(200, can_send=False) == []
    # the second timeout on seq 1 exhausts its attempts
    assert s.due(300) == [(2, 2), (3, 1)]
    assert s.failed == [1]


@given(st.lists(st.integers(0, 1000), max_size=50), st.integers(1, 10))
def test_drop_oldest_keeps_newest(items, cap):
    q = DropOldestQueue(cap)
    dropped = [d for d in (q.push(i) for i in items) if d is not None]
    assert q.drain() == items[len(items) - min(cap, len(items)):]
    assert dropped == items[:max(0, len(items) - cap)]


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1))
def test_record_bodies_round_trip(idx, seq):
    f = FlowId(client_id(3), idx)
    assert decode_ack(encode_ack(f, seq)) == (f, seq)
    assert decode_rebind(encode_rebind(sp_id(4), idx)) == (sp_id(4), idx)


@given(st.lists(st.binary(max_size=40), min_size=1, max_size=12), st.sets(st.integers(0, 5), max_size=2))
def test_assembler_and_collector_recover_two_losses_per_group(packets, lost):
    cfg = CodingConfig(4, 6)
    asm, rx = GroupAssembler(cfg, flush_us=10), GroupCollector()
    groups = [g for g in (asm.add(p, 0) for p in packets) if g is not None]
    tail = asm.flush(10)
    groups += [tail] if tail else []
    got = []
    for g in groups:
        for i in range(cfg.n):
            if i in lost:
                continue
            gid, gcfg, shard, lengths = decode_shard(encode_shard(g, cfg, i))
            got += [(gid, j, data) for j, data, _ in rx.receive(gid, gcfg, shard, lengths)]
    want = [p for p in packets if p]
    assert sorted(d for _, _, d in got) == sorted(want)
    assert rx.unrecovered() == {}
