"""Deterministic discrete-event network.

Events are processed in ``(deliver_at_ms, insertion sequence)`` order and every
random choice comes from the simulator's single :class:`SeededRng`, so a run
is a pure function of the seed, the installed nodes and the script.
"""

from __future__ import annotations

import enum
import heapq
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

from .core import NetAddress, Protocol, SeededRng, SimClock, normalize_address
from .packet import PacketEvent
from .server import AuthServer, Decision, DecisionTag

log = logging.getLogger(__name__)

RESOLVER_PORT = 3478


class Role(enum.Enum):
    CLIENT = "client"
    SERVER = "server"
    ATTACKER = "attacker"
    RESOLVER = "resolver"


class ResolveTimeout(TimeoutError):
    pass


@dataclass(frozen=True)
class LinkPolicy:
    drop_prob: float = 0.0
    dup_prob: float = 0.0
    reorder_prob: float = 0.0
    latency_ms: int = 10
    checksum_strictness: bool = True

    def __post_init__(self):
        for name in ("drop_prob", "dup_prob", "reorder_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.latency_ms < 0:
            raise ValueError("latency must be non-negative")


@dataclass(frozen=True)
class TraceRecord:
    time: int
    node: str
    event: str
    detail: str

    def line(self) -> str:
        return f"{self.time}\t{self.node}\t{self.event}\t{self.detail}"


# -- nodes --------------------------------------------------------------------

class Node:
    role = Role.CLIENT

    def __init__(self, name: str, addr: NetAddress | str):
        self.name = name
        self.addr = normalize_address(addr) if isinstance(addr, str) else addr
        self.inbox: list[PacketEvent] = []
        self.rng: SeededRng | None = None
        self._next_port = 49152

    def ephemeral_port(self) -> int:
        port = self._next_port
        self._next_port = 49152 + (self._next_port - 49152 + 1) % 16384
        return port

    def receive(self, sim: SimNet, pkt: PacketEvent) -> None:
        self.inbox.append(pkt)


class ClientNode(Node):
    role = Role.CLIENT


class AttackerNode(Node):
    role = Role.ATTACKER


class ResolverNode(Node):
    """Echoes the observed source address (16 bytes) and port (2 bytes)."""

    role = Role.RESOLVER

    def receive(self, sim, pkt):
        super().receive(sim, pkt)
        if pkt.protocol is Protocol.UDP and pkt.dst_port == RESOLVER_PORT:
            sim.emit(self, PacketEvent(self.addr, pkt.src, Protocol.UDP, RESOLVER_PORT, pkt.src_port,
                                       pkt.src.bytes + pkt.src_port.to_bytes(2, "big")))


class ServerNode(Node):
    """Wraps an AuthServer. Emits a reply only for packets a rule admits."""

    role = Role.SERVER

    def __init__(self, name, addr, server: AuthServer):
        super().__init__(name, addr)
        self.server = server
        self.decisions: list[tuple[int, PacketEvent, Decision]] = []

    def receive(self, sim, pkt):
        super().receive(sim, pkt)
        d = self.server.handle_packet(pkt, sim.now_ms)
        self.decisions.append((sim.now_ms, pkt, d))
        rec = self.server.log[-1]
        sim.record(self.name, "decision", f"{rec.tag} {rec.reason} src={rec.src} {rec.detail} ({pkt.origin}#{pkt.pid})")
        if d.tag is DecisionTag.PASS:
            sim.emit(self, PacketEvent(self.addr, pkt.src, pkt.protocol, pkt.dst_port, pkt.src_port, b"ACK"))


# -- NAT ----------------------------------------------------------------------

class Direction(enum.Enum):
    OUTBOUND = "out"
    INBOUND = "in"


class NatBox:
    def __init__(self, public_addr: NetAddress | str, first_port: int = 40000):
        self.public_addr = normalize_address(public_addr) if isinstance(public_addr, str) else public_addr
        self.table: dict[tuple[NetAddress, int], int] = {}
        self.reverse: dict[int, tuple[NetAddress, int]] = {}
        self.next_port = first_port

    def _allocate(self) -> int:
        for _ in range(65536):
            port = self.next_port
            self.next_port = 1024 + (self.next_port - 1024 + 1) % 64512
            if port not in self.reverse:
                return port
        raise RuntimeError("NAT port space exhausted")


def nat_translate(nat: NatBox, pkt: PacketEvent, direction: Direction) -> PacketEvent | None:
    """Rewrite a packet crossing the NAT; ``None`` means the NAT drops it."""
    if direction is Direction.OUTBOUND:
        key = (pkt.src, pkt.src_port)
        port = nat.table.get(key)
        if port is None:
            port = nat._allocate()
            nat.table[key] = port
            nat.reverse[port] = key
        return replace(pkt, src=nat.public_addr, src_port=port)
    if pkt.dst != nat.public_addr:
        return None
    inner = nat.reverse.get(pkt.dst_port)
    if inner is None:
        return None
    return replace(pkt, dst=inner[0], dst_port=inner[1])


# -- taps ---------------------------------------------------------------------

@dataclass
class Tap:
    """Copies of every packet a given node emits toward ``dst`` (any dst if None),
    as seen on the wire (after NAT)."""

    src_node: str
    dst: NetAddress | None = None
    buffer: list = field(default_factory=list)
    listeners: list = field(default_factory=list)

    def matches(self, emitter: str, pkt: PacketEvent) -> bool:
        return emitter == self.src_node and (self.dst is None or pkt.dst == self.dst)


# -- the simulator ------------------------------------------------------------

_DELIVER, _CALL = 0, 1


class SimNet:
    def __init__(self, seed: int = 0, start_ms: int = 0, default_link: LinkPolicy | None = None,
                 trace: bool = True):
        self.seed = seed
        self.clock = SimClock(start_ms)
        self.rng = SeededRng(seed)
        self.default_link = default_link or LinkPolicy()
        self.nodes: dict[str, Node] = {}
        self.by_addr: dict[NetAddress, Node] = {}
        self.links: dict[tuple[str, NetAddress | None], LinkPolicy] = {}
        self.nats: dict[NetAddress, NatBox] = {}
        self.behind: dict[str, NatBox] = {}
        self.taps: list[Tap] = []
        self.queue: list = []
        self.in_flight: dict[tuple, list] = {}
        self.outbound_log: dict[str, list[PacketEvent]] = {}
        self.trace: list[TraceRecord] = []
        self.trace_enabled = trace
        self.counts = {"emitted": 0, "duplicated": 0, "delivered": 0, "dropped": 0}
        self._seq = 0
        self._pid = 0

    @property
    def now_ms(self) -> int:
        return self.clock.now_ms

    # topology

    def add_node(self, node: Node, nat: NatBox | None = None) -> Node:
        if node.name in self.nodes:
            raise ValueError(f"duplicate node name {node.name!r}")
        if node.addr in self.by_addr:
            raise ValueError(f"duplicate node address {node.addr}")
        node.rng = self.rng.fork()
        self.nodes[node.name] = node
        self.by_addr[node.addr] = node
        self.outbound_log[node.name] = []
        if nat is not None:
            self.nats.setdefault(nat.public_addr, nat)
            self.behind[node.name] = nat
        return node

    def node(self, name: str) -> Node:
        return self.nodes[name]

    def servers(self) -> list[ServerNode]:
        return [n for n in self.nodes.values() if isinstance(n, ServerNode)]

    def public_addr_of(self, node: Node) -> NetAddress:
        nat = self.behind.get(node.name)
        return nat.public_addr if nat else node.addr

    def set_link(self, src: str, dst: NetAddress | str | None, policy: LinkPolicy) -> None:
        if isinstance(dst, str):
            dst = self.nodes[dst].addr if dst in self.nodes else normalize_address(dst)
        self.links[(src, dst)] = policy

    def link_for(self, emitter: str, dst: NetAddress) -> LinkPolicy:
        return self.links.get((emitter, dst)) or self.links.get((emitter, None)) or self.default_link

    def add_tap(self, src_node: str, dst: NetAddress | str | None = None) -> Tap:
        if isinstance(dst, str):
            dst = self.nodes[dst].addr if dst in self.nodes else normalize_address(dst)
        tap = Tap(src_node, dst)
        self.taps.append(tap)
        return tap

    # scheduling

    def record(self, node: str, event: str, detail: str) -> None:
        if self.trace_enabled:
            self.trace.append(TraceRecord(self.now_ms, node, event, detail))

    def _push(self, at: int, kind: int, data) -> list:
        self._seq += 1
        entry = [at, self._seq, self._seq, kind, data, True]
        heapq.heappush(self.queue, entry)
        return entry

    def schedule(self, at_ms: int, fn: Callable, *args) -> None:
        if at_ms < self.now_ms:
            raise ValueError("cannot schedule in the past")
        self._push(at_ms, _CALL, (fn, args))

    def after(self, delay_ms: int, fn: Callable, *args) -> None:
        self.schedule(self.now_ms + delay_ms, fn, *args)

    def emit(self, node: Node, pkt: PacketEvent) -> PacketEvent:
        """Put a packet on the wire from ``node``; header fields are taken as given
        (spoofing is allowed), routing uses the emitting node."""
        self._pid += 1
        pkt = replace(pkt, origin=node.name, pid=self._pid)
        self.outbound_log[node.name].append(pkt)
        self.counts["emitted"] += 1
        self.record(node.name, "emit", pkt.describe())
        nat = self.behind.get(node.name)
        if nat is not None:
            pkt = nat_translate(nat, pkt, Direction.OUTBOUND)
            self.record(node.name, "nat_out", pkt.describe())
        for tap in self.taps:
            if tap.matches(node.name, pkt):
                tap.buffer.append(pkt)
                for fn in list(tap.listeners):
                    fn(self, pkt)
        policy = self.link_for(node.name, pkt.dst)
        r_drop, r_dup, r_reorder = self.rng.random(), self.rng.random(), self.rng.random()
        if not pkt.valid_checksum and policy.checksum_strictness:
            self._drop(node.name, pkt, "bad_checksum")
            return pkt
        if r_drop < policy.drop_prob:
            self._drop(node.name, pkt, "link_loss")
            return pkt
        link_key = (node.name, pkt.dst)
        track = policy.reorder_prob > 0
        self._enqueue(link_key, replace(pkt, deliver_at_ms=self.now_ms + policy.latency_ms),
                      r_reorder < policy.reorder_prob, track)
        if r_dup < policy.dup_prob:
            self._pid += 1
            copy = replace(pkt, deliver_at_ms=self.now_ms + policy.latency_ms, pid=self._pid)
            self.counts["duplicated"] += 1
            self.record(node.name, "dup", f"#{pkt.pid} -> #{copy.pid}")
            self._enqueue(link_key, copy, False, track)
        return pkt

    def _enqueue(self, link_key, pkt: PacketEvent, reorder: bool, track: bool) -> None:
        entry = self._push(pkt.deliver_at_ms, _DELIVER, pkt)
        if not track:
            return
        flight = [e for e in self.in_flight.get(link_key, ()) if e[5]]
        if reorder and flight:
            prev = max(flight, key=lambda e: (e[0], e[1]))
            # swap delivery slots: kill both heap entries, re-push with exchanged
            # keys (the third field stays unique so the heap never compares packets)
            prev[5] = entry[5] = False
            self._seq += 1
            a = [prev[0], prev[1], self._seq, _DELIVER, replace(pkt, deliver_at_ms=prev[0]), True]
            self._seq += 1
            b = [entry[0], entry[1], self._seq, _DELIVER, replace(prev[4], deliver_at_ms=entry[0]), True]
            heapq.heappush(self.queue, a)
            heapq.heappush(self.queue, b)
            flight = [e for e in flight if e is not prev] + [a, b]
            self.record(link_key[0], "reorder", f"#{pkt.pid} before #{prev[4].pid}")
        else:
            flight.append(entry)
        self.in_flight[link_key] = flight

    def permute_pending(self, src: str, dst: NetAddress | str, order) -> list[PacketEvent]:
        """Reassign the delivery slots of the packets ``src`` has in flight toward
        ``dst``: the i-th slot (in delivery order) gets packet ``order[i]``.

        Scripted, exhaustive alternative to probabilistic reordering."""
        if isinstance(dst, str):
            dst = self.nodes[dst].addr if dst in self.nodes else normalize_address(dst)
        pending = sorted((e for e in self.queue
                          if e[5] and e[3] == _DELIVER and e[4].origin == src and e[4].dst == dst),
                         key=lambda e: (e[0], e[1]))
        order = list(order)
        if sorted(order) != list(range(len(pending))):
            raise ValueError(f"order must be a permutation of 0..{len(pending) - 1}")
        pkts = [e[4] for e in pending]
        moved = []
        for slot, i in zip(pending, order):
            slot[5] = False
            self._seq += 1
            pkt = replace(pkts[i], deliver_at_ms=slot[0])
            heapq.heappush(self.queue, [slot[0], slot[1], self._seq, _DELIVER, pkt, True])
            moved.append(pkt)
        self.in_flight.pop((src, dst), None)
        self.record(src, "permute", " ".join(f"#{p.pid}" for p in moved))
        return moved

    def _drop(self, node: str, pkt: PacketEvent, reason: str) -> None:
        self.counts["dropped"] += 1
        self.record(node, "drop", f"{reason} #{pkt.pid}")

    def queued(self) -> int:
        return sum(1 for e in self.queue if e[5] and e[3] == _DELIVER)

    def conserved(self) -> bool:
        c = self.counts
        return c["emitted"] + c["duplicated"] == c["delivered"] + c["dropped"] + self.queued()

    def _deliver(self, pkt: PacketEvent) -> None:
        nat = self.nats.get(pkt.dst)
        if nat is not None:
            inner = nat_translate(nat, pkt, Direction.INBOUND)
            if inner is None:
                self._drop("nat", pkt, "nat_unmapped")
                return
            self.record("nat", "nat_in", inner.describe())
            pkt = inner
        node = self.by_addr.get(pkt.dst)
        # private addresses are reachable only through their NAT
        if node is None or (node.name in self.behind and nat is None):
            self._drop("net", pkt, "no_route")
            return
        self.counts["delivered"] += 1
        self.record(node.name, "deliver", pkt.describe())
        node.receive(self, pkt)

    def step(self) -> bool:
        """Process one queued event; False when the queue is empty."""
        while self.queue:
            entry = heapq.heappop(self.queue)
            if not entry[5]:
                continue
            entry[5] = False
            self.clock.advance_to(entry[0])
            if entry[3] == _DELIVER:
                self._deliver(entry[4])
            else:
                fn, args = entry[4]
                fn(self, *args)
            return True
        return False

    def run(self, until_ms: int, stop: Callable[[], bool] | None = None) -> list[TraceRecord]:
        """Process every event due at or before ``until_ms``; return the new trace records."""
        start = len(self.trace)
        while self.queue:
            if self.queue[0][0] > until_ms:
                break
            if not self.step():
                break
            if stop is not None and stop():
                return self.trace[start:]
        if until_ms > self.now_ms:
            self.clock.advance_to(until_ms)
        return self.trace[start:]

    def render_trace(self) -> str:
        return "".join(r.line() + "\n" for r in self.trace)


def run(sim: SimNet, until_ms: int) -> list[TraceRecord]:
    return sim.run(until_ms)


def resolve_public_addr(sim: SimNet, client: Node, resolver: Node | NetAddress | None = None,
                        timeout_ms: int = 2000) -> NetAddress:
    """Ask a resolver what source address it sees for ``client``."""
    if resolver is None:
        found = [n for n in sim.nodes.values() if n.role is Role.RESOLVER]
        if not found:
            raise ResolveTimeout("no resolver in the network")
        resolver = found[0]
    raddr = resolver.addr if isinstance(resolver, Node) else resolver
    sport = client.ephemeral_port()
    mark = len(client.inbox)
    sim.emit(client, PacketEvent(client.addr, raddr, Protocol.UDP, sport, RESOLVER_PORT, b"whoami"))

    def answer():
        for p in client.inbox[mark:]:
            if p.src == raddr and p.src_port == RESOLVER_PORT and len(p.payload) == 18:
                return p
        return None

    sim.run(sim.now_ms + timeout_ms, stop=lambda: answer() is not None)
    reply = answer()
    if reply is None:
        raise ResolveTimeout(f"no answer from resolver {raddr}")
    return NetAddress(reply.payload[:16])
