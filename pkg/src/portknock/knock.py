"""Server-side knock sequence tracking.

One :class:`KnockTracker` follows the progress of every source against one
:class:`KnockSequence`. Memory is bounded: at capacity the least recently
updated source is evicted to make room for a new one.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from collections import OrderedDict
from dataclasses import dataclass, replace

from .core import NetAddress, Protocol
from .spa import RequestKind, ServiceRequest

DEFAULT_WINDOW_MS = 30_000
DEFAULT_CAPACITY = 1024
MIN_KNOCKS, MAX_KNOCKS = 3, 16


class KnockMode(enum.Enum):
    STRICT_ORDER = "strict"
    SEQUENCE_TAGGED = "tagged"


@dataclass(frozen=True)
class KnockSequence:
    knocks: tuple
    mode: KnockMode = KnockMode.STRICT_ORDER
    window_ms: int = DEFAULT_WINDOW_MS
    grant: ServiceRequest = ServiceRequest.open_port(Protocol.TCP, 22)
    # Ports derived from this keyring user's hmac key instead of the listed ones;
    # with ``rotating`` they are re-derived every minute.
    key_user: str | None = None
    rotating: bool = False

    def __post_init__(self):
        knocks = tuple((Protocol(p), int(port)) for p, port in self.knocks)
        object.__setattr__(self, "knocks", knocks)
        if not MIN_KNOCKS <= len(knocks) <= MAX_KNOCKS:
            raise ValueError(f"sequence length must be {MIN_KNOCKS}..{MAX_KNOCKS}")
        ports = [port for _, port in knocks]
        if len(set(ports)) != len(ports):
            raise ValueError("knock ports must be distinct")
        if any(p is Protocol.ICMP for p, _ in knocks):
            raise ValueError("ICMP cannot carry a knock")
        if any(not 0 <= port <= 0xFFFF for port in ports):
            raise ValueError("knock port out of range")
        if self.grant.kind is not RequestKind.OPEN_PORT:
            raise ValueError("a knock sequence can only grant an open-port request")
        if self.window_ms <= 0:
            raise ValueError("window must be positive")
        if self.rotating and self.key_user is None:
            raise ValueError("a rotating sequence needs a key user")

    def index_of(self, protocol: Protocol, port: int) -> int | None:
        try:
            return self.knocks.index((protocol, port))
        except ValueError:
            return None


@dataclass(frozen=True)
class KnockEvent:
    src: NetAddress
    protocol: Protocol
    dst_port: int
    at_ms: int
    seq_tag: int | None = None

    def __post_init__(self):
        if self.protocol is Protocol.TCP and self.seq_tag is not None:
            raise ValueError("TCP knocks carry no sequence tag")


class Outcome(enum.Enum):
    PROGRESS = "progress"
    GRANTED = "granted"
    RESET = "reset"
    IGNORED = "ignored"


@dataclass(frozen=True)
class TrackerOutcome:
    kind: Outcome
    grant: ServiceRequest | None = None
    src: NetAddress | None = None


PROGRESS = TrackerOutcome(Outcome.PROGRESS)
RESET = TrackerOutcome(Outcome.RESET)
IGNORED = TrackerOutcome(Outcome.IGNORED)


@dataclass
class _Entry:
    received: int
    next_expected: int
    first_at_ms: int
    window_ms: int


class KnockTracker:
    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: OrderedDict[NetAddress, _Entry] = OrderedDict()
        self.peak = 0
        self.evictions = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, src) -> bool:
        return src in self.entries

    def _store(self, src: NetAddress, entry: _Entry) -> None:
        if src in self.entries:
            self.entries.move_to_end(src)
        else:
            if len(self.entries) >= self.capacity:
                self.entries.popitem(last=False)
                self.evictions += 1
            self.entries[src] = entry
        self.peak = max(self.peak, len(self.entries))


def observe(tracker: KnockTracker, seq: KnockSequence, ev: KnockEvent) -> TrackerOutcome:
    idx = seq.index_of(ev.protocol, ev.dst_port)
    if idx is None:
        return IGNORED

    entry = tracker.entries.get(ev.src)
    if entry is not None and ev.at_ms - entry.first_at_ms > entry.window_ms:
        del tracker.entries[ev.src]
        entry = None

    n = len(seq.knocks)
    if seq.mode is KnockMode.STRICT_ORDER:
        expected = entry.next_expected if entry else 0
        if idx != expected:
            tracker.entries.pop(ev.src, None)
            return RESET
        if expected == n - 1:
            tracker.entries.pop(ev.src, None)
            return TrackerOutcome(Outcome.GRANTED, seq.grant, ev.src)
        if entry is None:
            entry = _Entry(1, 1, ev.at_ms, seq.window_ms)
        else:
            entry.received |= 1 << idx
            entry.next_expected = idx + 1
        tracker._store(ev.src, entry)
        return PROGRESS

    if ev.seq_tag != idx:
        tracker.entries.pop(ev.src, None)
        return RESET
    if entry is None:
        entry = _Entry(0, 0, ev.at_ms, seq.window_ms)
    entry.received |= 1 << idx
    if entry.received == (1 << n) - 1:
        tracker.entries.pop(ev.src, None)
        return TrackerOutcome(Outcome.GRANTED, seq.grant, ev.src)
    while entry.received >> entry.next_expected & 1:
        entry.next_expected += 1
    tracker._store(ev.src, entry)
    return PROGRESS


def expire(tracker: KnockTracker, now_ms: int) -> int:
    stale = [src for src, e in tracker.entries.items() if now_ms - e.first_at_ms > e.window_ms]
    for src in stale:
        del tracker.entries[src]
    return len(stale)


def derive_ports(secret: bytes, epoch: int, count: int) -> list[int]:
    """``count`` distinct ports in [1024, 65535] from HMAC-SHA-256(secret, epoch|i|ctr)."""
    ports: list[int] = []
    ctr = 0
    while len(ports) < count:
        d = hmac.new(secret, struct.pack("!IBB", epoch & 0xFFFFFFFF, len(ports), ctr),
                     hashlib.sha256).digest()
        port = 1024 + int.from_bytes(d[:8], "big") % 64512
        if port in ports:
            ctr += 1
            continue
        ports.append(port)
        ctr = 0
    return ports


def keyed(seq: KnockSequence, secret: bytes, epoch: int = 0) -> KnockSequence:
    """``seq`` with ports derived from ``secret``; ``epoch`` is the minute for
    rotating sequences and 0 for fixed ones. Protocols are kept."""
    ports = derive_ports(secret, epoch, len(seq.knocks))
    return replace(seq, knocks=tuple((p, port) for (p, _), port in zip(seq.knocks, ports)))
