"""Attacker models. Attackers only see tapped packets and only act by emitting packets."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import spa
from .core import Family, NetAddress, Protocol, to_minute_stamp
from .knock import MAX_KNOCKS, MIN_KNOCKS, derive_ports
from .netsim import AttackerNode, Node, SimNet, Tap
from .packet import PacketEvent
from .spa import BindMode, ServiceRequest

log = logging.getLogger(__name__)

KNOCK_SPACING_MS = 1


@dataclass(frozen=True)
class ReplayEavesdropper:
    delay_ms: int
    spoof_src: NetAddress | None = None


@dataclass(frozen=True)
class DictionaryAttacker:
    wordlist: tuple
    request: ServiceRequest = ServiceRequest.open_port(Protocol.TCP, 22)
    settle_ms: int = 1000


@dataclass(frozen=True)
class SequenceSpoofer:
    burst: int = 1


@dataclass(frozen=True)
class Flooder:
    distinct_sources: int
    target: NetAddress
    protocol: Protocol
    port: int
    payload: bytes = b""


@dataclass
class AttackReport:
    kind: str
    injected: int = 0
    granted: bool = False
    key_recovered: str | None = None
    victim_denied: bool = False
    tracker_peak: int = 0
    detail: str = ""


def spoofed_source(i: int, family: Family) -> NetAddress:
    """The i-th flood source: 100.64.0.0/10 for IPv4, 2001:db8:ffff::/48 for IPv6."""
    if family is Family.V4:
        return NetAddress.from_v4_int(0x64400000 + i)
    prefix = bytes.fromhex("20010db8ffff")
    return NetAddress(prefix + i.to_bytes(10, "big"))


def _reinject(sim: SimNet, node: Node, pkt: PacketEvent, src: NetAddress) -> None:
    sim.emit(node, PacketEvent(src, pkt.dst, pkt.protocol, pkt.src_port, pkt.dst_port, pkt.payload))


class _Attack:
    def __init__(self, sim: SimNet, spec, tap: Tap | None, node: Node):
        self.sim, self.spec, self.tap, self.node = sim, spec, tap, node
        self.injected = 0
        self.recovered: str | None = None

    def emit(self, pkt: PacketEvent) -> None:
        self.injected += 1
        self.sim.emit(self.node, pkt)

    def install(self) -> None:
        spec = self.spec
        if isinstance(spec, ReplayEavesdropper):
            self.tap.listeners.append(self._on_replay_capture)
        elif isinstance(spec, DictionaryAttacker):
            self.captured: list[PacketEvent] = []
            self.first_seen_ms: int | None = None
            self.analysis_due = False
            self.tap.listeners.append(self._on_dict_capture)
        elif isinstance(spec, SequenceSpoofer):
            self.fired = False
            self.tap.listeners.append(self._on_spoof_capture)
        elif isinstance(spec, Flooder):
            for i in range(spec.distinct_sources):
                src = spoofed_source(i, spec.target.family)
                self.emit(PacketEvent(src, spec.target, spec.protocol, 40000 + i % 20000,
                                      spec.port, spec.payload))
        else:
            raise TypeError(f"unknown attacker spec {spec!r}")

    # replay

    def _on_replay_capture(self, sim, pkt):
        src = self.spec.spoof_src or self.node.addr
        self.injected += 1
        sim.after(self.spec.delay_ms, _reinject, self.node, pkt, src)

    # spoofed knocks

    def _on_spoof_capture(self, sim, pkt):
        if self.fired or pkt.protocol not in (Protocol.TCP, Protocol.UDP):
            return
        if pkt.payload.startswith(spa.MAGIC):
            return
        self.fired = True
        for _ in range(self.spec.burst):
            self.emit(PacketEvent(pkt.src, pkt.dst, pkt.protocol, pkt.src_port, pkt.dst_port, pkt.payload))

    # dictionary

    def _on_dict_capture(self, sim, pkt):
        if self.recovered is not None:
            return
        self.captured.append(pkt)
        if self.first_seen_ms is None:
            self.first_seen_ms = sim.now_ms
        if pkt.payload.startswith(spa.MAGIC):
            self._crack_spa(pkt)
        elif not self.analysis_due:
            self.analysis_due = True
            sim.after(self.spec.settle_ms, lambda s: self._crack_knocks())

    def _crack_spa(self, pkt: PacketEvent) -> None:
        data = pkt.payload
        ulen = data[6] if len(data) > 6 else 0
        try:
            user = data[7:7 + ulen].decode("ascii")
        except UnicodeDecodeError:
            return
        for word in self.spec.wordlist:
            enc, mac = spa.derive_keys(word)
            if enc == mac:
                continue
            key = spa.KeyEntry(user, enc, mac)
            try:
                decoded = spa.decode(data, {user: key}, allowed_ciphers=range(6))
            except spa.DecodeError:
                continue
            self.recovered = word
            log.info("dictionary attacker recovered passphrase for %s", user)
            self._forge_spa(pkt, key, decoded)
            return

    def _forge_spa(self, captured: PacketEvent, key: spa.KeyEntry, decoded: spa.DecodedPacket) -> None:
        sim = self.sim
        now = sim.now_ms
        payload = spa.build_payload(self.spec.request, self.node.addr, BindMode.DECLARED_BY_CLIENT,
                                    now, self.node.rng)
        port = captured.dst_port
        old_stamp = decoded.payload.stamp
        if captured.protocol is Protocol.UDP and port == spa.randomized_port(key.hmac_key, old_stamp):
            port = spa.randomized_port(key.hmac_key, to_minute_stamp(now))
        data = spa.encode(payload, key, decoded.cipher_id, self.node.rng)
        self.emit(PacketEvent(self.node.addr, captured.dst, captured.protocol, 50000, port, data))

    def _crack_knocks(self) -> None:
        knocks = [p for p in self.captured if p.protocol in (Protocol.TCP, Protocol.UDP)]
        if len(knocks) < MIN_KNOCKS:
            return
        observed = [p.dst_port for p in knocks][:MAX_KNOCKS]
        m = to_minute_stamp(self.first_seen_ms).minutes
        for word in self.spec.wordlist:
            _, mac = spa.derive_keys(word)
            for epoch, rotating in ((0, False), (m, True), (m - 1, True), (m + 1, True)):
                derived = derive_ports(mac, epoch, MAX_KNOCKS)
                n = 0
                while n < len(observed) and derived[n] == observed[n]:
                    n += 1
                if n >= MIN_KNOCKS:
                    self.recovered = word
                    self._forge_knocks(knocks[:n], mac, rotating)
                    return

    def _forge_knocks(self, template: list[PacketEvent], secret: bytes, rotating: bool) -> None:
        sim = self.sim
        epoch = to_minute_stamp(sim.now_ms).minutes if rotating else 0
        ports = derive_ports(secret, epoch, len(template))
        for i, (pkt, port) in enumerate(zip(template, ports)):
            forged = PacketEvent(self.node.addr, pkt.dst, pkt.protocol, 50000 + i, port, pkt.payload)
            sim.after(i * KNOCK_SPACING_MS, lambda s, f=forged: self.emit(f))

    # reporting

    def report(self) -> AttackReport:
        sim = self.sim
        granted = False
        victim_granted = False
        victim = self.tap.src_node if self.tap is not None else None
        peak = 0
        for srv in sim.servers():
            peak = max(peak, srv.server.tracker_peak())
            for _, pkt, d in srv.decisions:
                if not d.is_grant or d.rule.src != pkt.src:
                    continue
                if pkt.origin == self.node.name:
                    granted = True
                elif pkt.origin == victim:
                    victim_granted = True
        kind = type(self.spec).__name__
        denied = isinstance(self.spec, SequenceSpoofer) and self.fired and not victim_granted
        rep = AttackReport(kind, self.injected, granted, self.recovered, denied, peak)
        bits = [f"injected={rep.injected}", f"granted={int(granted)}"]
        if isinstance(self.spec, DictionaryAttacker):
            bits.append(f"key={'recovered' if self.recovered else 'none'}")
        if isinstance(self.spec, SequenceSpoofer):
            bits.append(f"victim_denied={int(denied)}")
        if isinstance(self.spec, Flooder):
            bits.append(f"tracker_peak={peak}")
        rep.detail = " ".join(bits)
        return rep


def install_attacker(sim: SimNet, spec, tap: Tap | None = None, node: Node | None = None) -> _Attack:
    if node is None:
        found = [n for n in sim.nodes.values() if isinstance(n, AttackerNode)]
        if not found:
            raise ValueError("no attacker node in the network")
        node = found[0]
    if tap is None and not isinstance(spec, Flooder):
        raise ValueError(f"{type(spec).__name__} needs a tap")
    attack = _Attack(sim, spec, tap, node)
    attack.install()
    return attack


def run_attacker(sim: SimNet, spec, tap: Tap | None = None, node: Node | None = None,
                 until_ms: int | None = None) -> AttackReport:
    """Install ``spec``, run the network until ``until_ms`` and report what the attacker achieved."""
    attack = install_attacker(sim, spec, tap, node)
    horizon = until_ms if until_ms is not None else sim.now_ms + 15 * 60_000
    sim.run(horizon)
    return attack.report()
