import ipaddress

import pytest
from hypothesis import given
from hypothesis import strategies as st

from portknock.core import (Family, MalformedAddress, MinuteStamp, NetAddress, Protocol, SeededRng,
                            SimClock, normalize_address, to_minute_stamp)


def test_minute_stamp_examples():
    assert to_minute_stamp(0) == MinuteStamp(0)
    assert to_minute_stamp(119_999).minutes == 1
    assert to_minute_stamp(1_000_000_000).minutes == 1_000_000_000 // 60_000 == 16_666


@given(st.integers(0, 2**40), st.integers(0, 2**40))
def test_minute_stamp_monotone(a, b):
    lo, hi = sorted((a, b))
    assert to_minute_stamp(lo) <= to_minute_stamp(hi)


def test_minute_stamp_is_u32():
    with pytest.raises(ValueError):
        MinuteStamp(2**32)


def test_normalize_ipv4_is_mapped():
    a = normalize_address("127.0.0.1")
    assert a.bytes == bytes(10) + b"\xff\xff" + bytes([127, 0, 0, 1])
    assert a.family is Family.V4
    assert str(a) == "127.0.0.1"


def test_normalize_ipv6_loopback():
    a = normalize_address("::1")
    assert a.bytes == bytes(15) + b"\x01"
    assert a.family is Family.V6


@pytest.mark.parametrize("bad", ["999.1.1.1", "1.2.3", "", " 1.2.3.4", "fe80::1%eth0", "::g", "01.2.3.4", "hello"])
def test_normalize_rejects(bad):
    with pytest.raises(MalformedAddress):
        normalize_address(bad)


def test_v4_mapped_text_equals_plain_v4():
    assert normalize_address("::ffff:192.0.2.1") == normalize_address("192.0.2.1")


@given(st.ip_addresses())
def test_normalize_roundtrips_through_text(ip):
    a = normalize_address(str(ip))
    assert normalize_address(str(a)) == a
    if isinstance(ip, ipaddress.IPv4Address):
        assert a.family is Family.V4


def test_address_must_be_16_bytes():
    with pytest.raises(MalformedAddress):
        NetAddress(b"\x00" * 4)


def test_protocol_parse_and_wire():
    assert Protocol.parse("UDP") is Protocol.UDP
    assert Protocol.from_wire(6) is Protocol.TCP
    assert str(Protocol.ICMP) == "icmp"
    with pytest.raises(ValueError):
        Protocol.parse("sctp")


def test_clock_never_moves_backward():
    c = SimClock(1000)
    assert c.tick(500) == 1500
    c.advance_to(2000)
    with pytest.raises(ValueError):
        c.advance_to(1999)
    with pytest.raises(ValueError):
        c.tick(-1)
    assert c.stamp() == MinuteStamp(0)


def _splitmix64_reference(seed, n):
    # straight transcription of the public-domain C reference (Vigna)
    mask = (1 << 64) - 1
    x = seed
    out = []
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) & mask
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def test_splitmix_known_vectors():
    r = SeededRng(0)
    assert [r.next_u64() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@given(st.integers(0, 2**64 - 1))
def test_splitmix_matches_reference(seed):
    r = SeededRng(seed)
    assert [r.next_u64() for _ in range(5)] == _splitmix64_reference(seed, 5)


def test_equal_seeds_equal_streams():
    a, b = SeededRng(42), SeededRng(42)
    assert [a.next_u64() for _ in range(10_000)] == [b.next_u64() for _ in range(10_000)]


def test_rng_bytes_are_big_endian_outputs():
    r1, r2 = SeededRng(9), SeededRng(9)
    data = r1.bytes(12)
    first, second = r2.next_u64(), r2.next_u64()
    assert data == first.to_bytes(8, "big") + second.to_bytes(8, "big")[:4]


@given(st.integers(0, 2**64 - 1), st.integers(1, 10**9))
def test_rng_below_in_range(seed, n):
    assert 0 <= SeededRng(seed).below(n) < n


def test_rng_random_unit_interval():
    r = SeededRng(3)
    xs = [r.random() for _ in range(1000)]
    assert all(0.0 <= x < 1.0 for x in xs)
    assert 0.4 < sum(xs) / len(xs) < 0.6


def test_fork_is_deterministic():
    a, b = SeededRng(5), SeededRng(5)
    assert a.fork().next_u64() == b.fork().next_u64()
