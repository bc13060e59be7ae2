import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portknock.core import NetAddress, Protocol
from portknock.knock import (KnockEvent, KnockMode, KnockSequence, KnockTracker, Outcome, derive_ports,
                             expire, keyed, observe)
from portknock.spa import ServiceRequest

A = NetAddress.from_v4_int(0xC6336407)
B = NetAddress.from_v4_int(0xC6336408)
UDP, TCP = Protocol.UDP, Protocol.TCP
STRICT = KnockSequence(((UDP, 7000), (UDP, 8000), (UDP, 9000)))
TAGGED = KnockSequence(((UDP, 7000), (UDP, 8000), (UDP, 9000)), KnockMode.SEQUENCE_TAGGED)


def ev(port, t=0, src=A, tag=None, proto=UDP):
    return KnockEvent(src, proto, port, t, tag)


def kinds(tracker, seq, events):
    return [observe(tracker, seq, e).kind for e in events]


def test_strict_in_order_grants():
    t = KnockTracker()
    out = kinds(t, STRICT, [ev(7000, 0), ev(8000, 1), ev(9000, 2)])
    assert out == [Outcome.PROGRESS, Outcome.PROGRESS, Outcome.GRANTED]
    assert len(t) == 0


def test_granted_outcome_carries_grant_and_source():
    t = KnockTracker()
    observe(t, STRICT, ev(7000))
    observe(t, STRICT, ev(8000))
    out = observe(t, STRICT, ev(9000))
    assert out.grant == ServiceRequest.open_port(TCP, 22) and out.src == A


def test_strict_skip_resets():
    t = KnockTracker()
    assert kinds(t, STRICT, [ev(7000), ev(9000)]) == [Outcome.PROGRESS, Outcome.RESET]
    assert A not in t


def test_outside_port_ignored():
    t = KnockTracker()
    assert kinds(t, STRICT, [ev(7000), ev(1234), ev(8000), ev(9000)])[1:] == [
        Outcome.IGNORED, Outcome.PROGRESS, Outcome.GRANTED]


def test_tagged_out_of_order_grants():
    t = KnockTracker()
    out = kinds(t, TAGGED, [ev(9000, tag=2), ev(7000, tag=0), ev(8000, tag=1)])
    assert out == [Outcome.PROGRESS, Outcome.PROGRESS, Outcome.GRANTED]


def test_tagged_mismatched_tag_resets():
    t = KnockTracker()
    assert kinds(t, TAGGED, [ev(7000, tag=0), ev(8000, tag=2)]) == [Outcome.PROGRESS, Outcome.RESET]


def test_tagged_tcp_knock_cannot_progress():
    seq = KnockSequence(((TCP, 1), (TCP, 2), (TCP, 3)), KnockMode.SEQUENCE_TAGGED)
    assert observe(KnockTracker(), seq, ev(1, proto=TCP)).kind is Outcome.RESET


def test_tcp_knock_has_no_tag():
    with pytest.raises(ValueError):
        KnockEvent(A, TCP, 1, 0, 3)


def test_window_expiry_restarts_as_first_knock():
    t = KnockTracker()
    observe(t, STRICT, ev(7000, 0))
    observe(t, STRICT, ev(8000, 10))
    # 30,001 ms after the first knock: entry dropped, 7000 is a fresh first knock
    assert observe(t, STRICT, ev(7000, 30_001)).kind is Outcome.PROGRESS
    assert kinds(t, STRICT, [ev(8000, 30_002), ev(9000, 30_003)]) == [Outcome.PROGRESS, Outcome.GRANTED]


def test_last_knock_exactly_at_window_still_counts():
    t = KnockTracker()
    kinds(t, STRICT, [ev(7000, 0), ev(8000, 1)])
    assert observe(t, STRICT, ev(9000, 30_000)).kind is Outcome.GRANTED


def test_expire_examples():
    t = KnockTracker()
    assert expire(t, 0) == 0
    observe(t, STRICT, ev(7000, 0))
    assert expire(t, 30_000) == 0
    assert expire(t, 30_001) == 1


@pytest.mark.parametrize("knocks", [
    ((UDP, 1), (UDP, 2)),
    tuple((UDP, p) for p in range(1, 18)),
    ((UDP, 1), (UDP, 1), (UDP, 2)),
    ((UDP, 1), (Protocol.ICMP, 2), (UDP, 3)),
])
def test_sequence_validation(knocks):
    with pytest.raises(ValueError):
        KnockSequence(knocks)


def test_grant_must_be_open_port():
    with pytest.raises(ValueError):
        KnockSequence(STRICT.knocks, grant=ServiceRequest.run_command("id"))


def _perm_case(n, perm, mode):
    seq = KnockSequence(tuple((UDP, 7000 + i) for i in range(n)), mode)
    t = KnockTracker()
    outs = [observe(t, seq, ev(7000 + i, j, tag=i)).kind for j, i in enumerate(perm)]
    return outs[-1] is Outcome.GRANTED


@pytest.mark.parametrize("n", [3, 4])
def test_exhaustive_permutations(n):
    for perm in itertools.permutations(range(n)):
        assert _perm_case(n, perm, KnockMode.SEQUENCE_TAGGED)
        assert _perm_case(n, perm, KnockMode.STRICT_ORDER) == (perm == tuple(range(n)))


def _strict_oracle(seq_ports, hits, window):
    """Brute force: replay the hits, remembering only the last restart point.

    A grant happens at hit k iff the in-sequence hits since the last restart
    are exactly the sequence prefix and all fall in one window."""
    grants = []
    start = None
    progress = []
    for k, (port, t) in enumerate(hits):
        if port not in seq_ports:
            continue
        if start is not None and t - start > window:
            progress, start = [], None
        if port == seq_ports[len(progress)]:
            if not progress:
                start = t
            progress.append(port)
            if len(progress) == len(seq_ports):
                grants.append(k)
                progress, start = [], None
        else:
            progress, start = [], None
    return grants


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([7000, 8000, 9000, 1111]), st.integers(0, 20_000)), max_size=25))
def test_strict_matches_bruteforce(raw):
    hits = []
    t = 0
    for port, gap in raw:
        t += gap
        hits.append((port, t))
    seq = KnockSequence(((UDP, 7000), (UDP, 8000), (UDP, 9000)), window_ms=30_000)
    tr = KnockTracker()
    got = [k for k, (port, at) in enumerate(hits) if observe(tr, seq, ev(port, at)).kind is Outcome.GRANTED]
    assert got == _strict_oracle([7000, 8000, 9000], hits, 30_000)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([7000, 8000, 9000, 5]), st.integers(0, 2)), max_size=30), st.data())
def test_per_source_isolation(noise, data):
    """Interleaving B's knocks anywhere never changes A's outcome."""
    correct = [ev(p, i) for i, p in enumerate((7000, 8000, 9000))]
    other = [KnockEvent(B, UDP, p, 0, tag) for p, tag in noise]
    positions = sorted(data.draw(st.lists(st.integers(0, 3), min_size=len(other), max_size=len(other))))
    for seq in (STRICT, TAGGED):
        a_events = [KnockEvent(A, UDP, e.dst_port, e.at_ms, i if seq is TAGGED else None)
                    for i, e in enumerate(correct)]
        tr = KnockTracker()
        results = []
        oi = 0
        for i, e in enumerate(a_events):
            while oi < len(other) and positions[oi] <= i:
                observe(tr, seq, other[oi])
                oi += 1
            results.append(observe(tr, seq, e).kind)
        assert results == [Outcome.PROGRESS, Outcome.PROGRESS, Outcome.GRANTED]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 50), st.lists(st.tuples(st.integers(0, 200), st.sampled_from([7000, 8000, 9000])),
                                     max_size=400))
def test_capacity_bound(capacity, stream):
    tr = KnockTracker(capacity)
    for i, (src, port) in enumerate(stream):
        observe(tr, STRICT, ev(port, i, NetAddress.from_v4_int(src)))
        assert len(tr) <= capacity
    assert tr.peak <= capacity


def test_flood_capacity_100k():
    tr = KnockTracker(1024)
    for i in range(100_000):
        observe(tr, STRICT, ev(7000, i // 1000, NetAddress.from_v4_int(0x64400000 + i)))
    assert len(tr) == tr.peak == 1024
    assert tr.evictions == 100_000 - 1024
    assert kinds(tr, STRICT, [ev(7000, 200), ev(8000, 201), ev(9000, 202)])[-1] is Outcome.GRANTED


def test_eviction_is_least_recently_updated():
    tr = KnockTracker(2)
    c = NetAddress.from_v4_int(3)
    observe(tr, STRICT, ev(7000, 0, A))
    observe(tr, STRICT, ev(7000, 1, B))
    observe(tr, STRICT, ev(8000, 2, A))   # A is now the most recent
    observe(tr, STRICT, ev(7000, 3, c))   # evicts B
    assert A in tr and c in tr and B not in tr


@given(st.binary(min_size=32, max_size=32), st.integers(0, 2**32 - 1), st.integers(3, 16))
def test_derive_ports_distinct_and_in_range(secret, epoch, n):
    ports = derive_ports(secret, epoch, n)
    assert len(set(ports)) == n and all(1024 <= p <= 65535 for p in ports)
    assert derive_ports(secret, epoch, 3) == ports[:3]


def test_keyed_keeps_protocols_and_mode():
    secret = b"s" * 32
    k = keyed(TAGGED, secret, 5)
    assert k.mode is TAGGED.mode and [p for p, _ in k.knocks] == [UDP] * 3
    assert [port for _, port in k.knocks] == derive_ports(secret, 5, 3)
    assert keyed(TAGGED, secret, 6).knocks != k.knocks
