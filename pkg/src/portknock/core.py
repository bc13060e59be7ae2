"""Shared value types: addresses, protocols, minute stamps, clocks and the seeded PRNG.

Every multi-byte integer that goes on the wire anywhere in this package is
big-endian (network order).
"""

from __future__ import annotations

import enum
import ipaddress
import os
import time
from dataclasses import dataclass

MS_PER_MINUTE = 60_000
U64_MASK = (1 << 64) - 1

_V4_MAPPED_PREFIX = bytes(10) + b"\xff\xff"


class MalformedAddress(ValueError):
    pass


class Family(enum.Enum):
    V4 = 4
    V6 = 6


class Protocol(enum.Enum):
    """Transport tag. Values are the IANA protocol numbers used on the wire."""

    ICMP = 1
    TCP = 6
    UDP = 17

    @classmethod
    def parse(cls, text: str) -> Protocol:
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown protocol {text!r}") from None

    @classmethod
    def from_wire(cls, value: int) -> Protocol:
        return cls(value)

    def __str__(self) -> str:
        return self.name.lower()


@dataclass(frozen=True, order=True)
class NetAddress:
    """A 16-byte canonical address. IPv4 is stored IPv4-mapped (::ffff:a.b.c.d)."""

    bytes: bytes

    def __post_init__(self):
        if not isinstance(self.bytes, (bytes, bytearray)) or len(self.bytes) != 16:
            raise MalformedAddress("address must be exactly 16 bytes")
        object.__setattr__(self, "bytes", bytes(self.bytes))

    @property
    def family(self) -> Family:
        return Family.V4 if self.bytes[:12] == _V4_MAPPED_PREFIX else Family.V6

    @classmethod
    def from_v4_int(cls, value: int) -> NetAddress:
        return cls(_V4_MAPPED_PREFIX + (value & 0xFFFFFFFF).to_bytes(4, "big"))

    def __str__(self) -> str:
        if self.family is Family.V4:
            return str(ipaddress.IPv4Address(self.bytes[12:]))
        return ipaddress.IPv6Address(self.bytes).compressed

    def __repr__(self) -> str:
        return f"NetAddress({str(self)!r})"


def normalize_address(text: str) -> NetAddress:
    """Parse dotted-quad IPv4 or colon-hex IPv6 text into canonical form."""
    if not isinstance(text, str) or not text or text != text.strip():
        raise MalformedAddress(f"bad address {text!r}")
    try:
        if ":" in text:
            if "%" in text:
                raise ValueError("zone ids not supported")
            return NetAddress(ipaddress.IPv6Address(text).packed)
        return NetAddress(_V4_MAPPED_PREFIX + ipaddress.IPv4Address(text).packed)
    except ValueError as exc:
        raise MalformedAddress(f"bad address {text!r}: {exc}") from None


@dataclass(frozen=True, order=True)
class MinuteStamp:
    minutes: int

    def __post_init__(self):
        if not 0 <= self.minutes <= 0xFFFFFFFF:
            raise ValueError("minute stamp out of u32 range")

    def __int__(self) -> int:
        return self.minutes


def to_minute_stamp(now_ms: int) -> MinuteStamp:
    return MinuteStamp(now_ms // MS_PER_MINUTE)


class SimClock:
    """Virtual millisecond clock; only moves forward, only when told to."""

    def __init__(self, now_ms: int = 0):
        if now_ms < 0:
            raise ValueError("clock cannot start before the epoch")
        self._now = now_ms

    @property
    def now_ms(self) -> int:
        return self._now

    def tick(self, delta_ms: int) -> int:
        if delta_ms < 0:
            raise ValueError("clock cannot move backward")
        self._now += delta_ms
        return self._now

    def advance_to(self, t_ms: int) -> int:
        if t_ms < self._now:
            raise ValueError(f"clock cannot move backward ({t_ms} < {self._now})")
        self._now = t_ms
        return self._now

    def stamp(self) -> MinuteStamp:
        return to_minute_stamp(self._now)

    def __repr__(self) -> str:
        return f"SimClock(now_ms={self._now})"


def system_now_ms() -> int:
    """The one adapter from wall-clock time into the millisecond domain."""
    return time.time_ns() // 1_000_000


class SeededRng:
    """SplitMix64 generator.

    state <- state + 0x9E3779B97F4A7C15 (mod 2**64); the output is the state
    passed through z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
    z *= 0x94D049BB133111EB; z ^= z >> 31 (all mod 2**64).  Derived draws:
    ``random()`` uses the top 53 bits, ``bytes(n)`` concatenates outputs
    big-endian and truncates, ``below(n)`` rejection-samples.
    """

    GAMMA = 0x9E3779B97F4A7C15

    def __init__(self, seed: int):
        self.seed = seed & U64_MASK
        self._state = self.seed

    def next_u64(self) -> int:
        self._state = (self._state + self.GAMMA) & U64_MASK
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & U64_MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & U64_MASK
        return z ^ (z >> 31)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        return lo + self.below(hi - lo + 1)

    def bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += self.next_u64().to_bytes(8, "big")
        return bytes(out[:n])

    def fork(self) -> SeededRng:
        """A child generator seeded from this stream."""
        return SeededRng(self.next_u64())


class SystemRng:
    """OS-entropy source with the subset of the SeededRng surface the codec needs."""

    def bytes(self, n: int) -> bytes:
        return os.urandom(n)

    def random(self) -> float:
        return (int.from_bytes(os.urandom(7), "big") >> 3) / (1 << 53)
