"""Capability profiles, behavioral scenarios, and the ten-parameter scorecard.

Declared-only parameters (platforms, implementation, protocols, encryption,
root privileges) are scored from the profile. Behavioral parameters (out of
order, NAT, weak passwords, replay, IPv6) score only when the scenario that
exercises the declared strategy actually passes in the simulator.

Rubric (0-100 per parameter):

=================  ==========================================================
Platforms          both OSes on both sides 100; one side cross-platform 80;
                   single OS on both sides 50
Implementation     PK and SPA 100; one of them 50
Protocols          3 -> 100, 2 -> 70, 1 -> 50
Out of Order       strategy declared and ooo-reorder passed 100, else 0
NAT                Auto + nat-grant passed 100; Manual + passed 50; else 0
Encryption         >=5 -> 100, 4 -> 85, 3 -> 70, 2 -> 50, 1 -> 30
Root privileges    install only 80; install and operate 50
Weak Passwords     entropy check + dictionary-weak-key defeated 100, else 0
Replay             timestamp+nonce with both replay scenarios defeated 100;
                   any strategy with same-source replay defeated 50; else 0
IPv6               flag and ipv6-grant passed 100, else 0
=================  ==========================================================

The 4/3-cipher steps, the server-only cross-platform case and the 100 for a
working password policy are extensions; no builtin profile exercises them.
"""

from __future__ import annotations

import enum
import functools
import logging
from dataclasses import dataclass, field
from statistics import fmean

from . import ciphers, spa
from .attackers import (DictionaryAttacker, Flooder, ReplayEavesdropper, install_attacker)
from .core import NetAddress, Protocol, SeededRng, normalize_address
from .knock import KnockMode, KnockSequence, keyed
from .netsim import (AttackerNode, ClientNode, LinkPolicy, NatBox, ResolveTimeout, ResolverNode,
                     ServerNode, SimNet, resolve_public_addr)
from .packet import PacketEvent
from .server import (AuthServer, DecisionTag, NatMode, ReplayStrategy, ServerConfig,
                     WeakPassphrase, load_wordlist)
from .spa import BindMode, ServiceRequest

log = logging.getLogger(__name__)

PARAMETERS = (
    "Platforms", "Implementation", "Protocols", "Out of Order", "NAT",
    "Encryption", "Root privileges", "Weak Passwords", "Replay", "IPv6",
)
PARAMETER_KEYS = (
    "platforms", "implementation", "protocols", "out_of_order", "nat",
    "encryption", "root_privileges", "weak_passwords", "replay", "ipv6",
)

SCENARIOS = (
    "ooo-reorder", "nat-grant", "replay-same-source", "replay-spoofed-source",
    "dictionary-weak-key", "ipv6-grant", "flood-capacity",
)


class InvalidProfile(ValueError):
    pass


class InconsistentProfile(Exception):
    def __init__(self, profile: str, claims: list[str]):
        self.profile = profile
        self.claims = claims
        super().__init__(f"{profile}: declared capabilities not confirmed by behavior: {', '.join(claims)}")


class Platform(enum.Enum):
    WINDOWS = "windows"
    UNIX = "unix"


class Impl(enum.Enum):
    PK = "pk"
    SPA = "spa"


class OooStrategy(enum.Enum):
    NONE = "none"
    SEQUENCE_NUMBERS = "sequence_numbers"
    SINGLE_PACKET = "single_packet"


class RootNeed(enum.Enum):
    INSTALL_ONLY = "install_only"
    INSTALL_AND_OPERATE = "install_and_operate"


@dataclass(frozen=True)
class EntropyCheck:
    min_bits: int


@dataclass(frozen=True)
class CapabilityProfile:
    name: str
    client_platforms: frozenset
    server_platforms: frozenset
    implementations: frozenset
    protocols: frozenset
    ooo_strategy: OooStrategy = OooStrategy.NONE
    nat_strategy: NatMode = NatMode.NONE
    cipher_count: int = 1
    root: RootNeed = RootNeed.INSTALL_ONLY
    password_policy: EntropyCheck | None = None
    replay_strategy: ReplayStrategy = ReplayStrategy.NONE
    ipv6: bool = False

    def __post_init__(self):
        for name in ("client_platforms", "server_platforms", "implementations", "protocols"):
            value = frozenset(getattr(self, name))
            if not value:
                raise InvalidProfile(f"{self.name}: {name} must not be empty")
            object.__setattr__(self, name, value)
        if self.ooo_strategy is OooStrategy.SINGLE_PACKET and Impl.SPA not in self.implementations:
            raise InvalidProfile(f"{self.name}: single-packet ordering needs SPA")
        if self.ooo_strategy is OooStrategy.SEQUENCE_NUMBERS and Impl.PK not in self.implementations:
            raise InvalidProfile(f"{self.name}: sequence numbers need PK")
        if self.ooo_strategy is OooStrategy.SEQUENCE_NUMBERS and Protocol.UDP not in self.protocols:
            # the tag rides in the knock payload and a bare TCP SYN has none
            raise InvalidProfile(f"{self.name}: sequence numbers need UDP knocks")
        if Impl.PK in self.implementations and not self.protocols & {Protocol.TCP, Protocol.UDP}:
            raise InvalidProfile(f"{self.name}: PK needs TCP or UDP")
        if not 1 <= self.cipher_count <= 255:
            raise InvalidProfile(f"{self.name}: cipher_count must be 1..255")

    @property
    def mechanism(self) -> Impl:
        return Impl.SPA if Impl.SPA in self.implementations else Impl.PK


@dataclass(frozen=True)
class ScenarioResult:
    scenario_id: str
    passed: bool
    detail: str
    silent: bool = True


@dataclass(frozen=True)
class ScoreCard:
    name: str
    scores: tuple

    def __post_init__(self):
        if len(self.scores) != len(PARAMETERS) or not all(0 <= s <= 100 for s in self.scores):
            raise ValueError("a scorecard holds ten scores in 0..100")

    @property
    def mean(self) -> float:
        return fmean(self.scores)

    def as_dict(self) -> dict[str, int]:
        return dict(zip(PARAMETERS, self.scores))


# -- builtin profiles ---------------------------------------------------------

BOTH_OS = frozenset(Platform)
UNIX = frozenset({Platform.UNIX})


def builtin_profiles() -> list[CapabilityProfile]:
    return [
        CapabilityProfile(
            "aldaba-like", UNIX, UNIX, frozenset(Impl), frozenset({Protocol.UDP, Protocol.TCP}),
            OooStrategy.SEQUENCE_NUMBERS, NatMode.MANUAL, 5, RootNeed.INSTALL_AND_OPERATE,
            None, ReplayStrategy.IP_BINDING, True,
        ),
        CapabilityProfile(
            "fwknop-like", BOTH_OS, UNIX, frozenset({Impl.SPA}), frozenset(Protocol),
            OooStrategy.SINGLE_PACKET, NatMode.AUTO, 2, RootNeed.INSTALL_ONLY,
            None, ReplayStrategy.TIMESTAMP_NONCE, True,
        ),
        CapabilityProfile(
            "sig2-like", BOTH_OS, BOTH_OS, frozenset({Impl.PK}), frozenset({Protocol.TCP}),
            OooStrategy.NONE, NatMode.NONE, 1, RootNeed.INSTALL_ONLY,
            None, ReplayStrategy.TIMESTAMP_ONLY, False,
        ),
    ]


# -- scenario worlds ----------------------------------------------------------

BASE_MS = 1_700_000_000_000
SPA_PORT = 62201
SERVICE = ServiceRequest.open_port(Protocol.TCP, 22)
USER = "alice"
STRONG_PASSPHRASE_LEN = 24
_ALNUM = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789"

ADDRS = {
    4: {"server": "198.51.100.1", "client": "198.51.100.7", "private": "10.0.0.5",
        "nat": "203.0.113.9", "resolver": "192.0.2.53", "attacker": "192.0.2.66"},
    6: {"server": "2001:db8::1", "client": "2001:db8::10", "private": "fd00::5",
        "nat": "2001:db8:1::9", "resolver": "2001:db8::53", "attacker": "2001:db8::66"},
}


@functools.lru_cache(maxsize=1)
def _wordlist() -> tuple:
    return tuple(sorted(load_wordlist()))


def strong_passphrase(rng: SeededRng, min_bits: int = 0) -> str:
    # 62-symbol pool: ~5.95 bits per character
    n = max(STRONG_PASSPHRASE_LEN, int(min_bits / 5.9) + 2)
    while True:
        pw = "".join(_ALNUM[rng.below(len(_ALNUM))] for _ in range(n))
        if any(c.islower() for c in pw) and any(c.isupper() for c in pw) and any(c.isdigit() for c in pw):
            return pw


def knock_protocol(profile: CapabilityProfile) -> Protocol:
    return Protocol.UDP if Protocol.UDP in profile.protocols else Protocol.TCP


def spa_protocol(profile: CapabilityProfile) -> Protocol:
    for p in (Protocol.UDP, Protocol.TCP, Protocol.ICMP):
        if p in profile.protocols:
            return p
    raise InvalidProfile(profile.name)


class World:
    """One simulated network built from a profile: server, client (optionally
    behind NAT), resolver and an attacker host."""

    def __init__(self, profile: CapabilityProfile, seed: int, *, family: int = 4, nat: bool = False,
                 passphrase: str | None = None, mechanism: Impl | None = None,
                 tagged: bool | None = None, link: LinkPolicy | None = None, capacity: int = 1024):
        self.profile = profile
        self.mechanism = mechanism or profile.mechanism
        setup = SeededRng(seed ^ 0x5EED5EED5EED5EED)
        self.sim = SimNet(seed, start_ms=BASE_MS + setup.below(60_000))
        a = ADDRS[family]
        self.addrs = {k: normalize_address(v) for k, v in a.items()}

        policy_bits = profile.password_policy.min_bits if profile.password_policy else None
        requested = passphrase if passphrase is not None else strong_passphrase(setup, policy_bits or 0)

        if tagged is None:
            tagged = profile.ooo_strategy is OooStrategy.SEQUENCE_NUMBERS
        kp = knock_protocol(profile)
        template = KnockSequence(
            ((kp, 1), (kp, 2), (kp, 3)),
            KnockMode.SEQUENCE_TAGGED if tagged else KnockMode.STRICT_ORDER,
            grant=SERVICE, key_user=USER,
            rotating=profile.replay_strategy.checks_freshness,
        )
        cipher_ids = ciphers.registry(min(profile.cipher_count, len(ciphers.FULL_BUILD)))
        self.cipher = cipher_ids[-1]
        config = ServerConfig(
            spa_enabled=Impl.SPA in profile.implementations,
            pk_enabled=Impl.PK in profile.implementations,
            spa_protocols=frozenset(profile.protocols),
            spa_port=SPA_PORT,
            knock_sequences=(template,) if Impl.PK in profile.implementations else (),
            nat_mode=profile.nat_strategy,
            min_passphrase_bits=policy_bits,
            replay_strategy=profile.replay_strategy,
            ipv6_enabled=profile.ipv6,
            tracker_capacity=capacity,
            ciphers=tuple(cipher_ids),
            server_addr=a["server"],
        )
        self.server = AuthServer(config, _wordlist())
        self.template = template
        try:
            self.key = self.server.provision(USER, requested, {(SERVICE.protocol, SERVICE.port)})
            self.passphrase = requested
            self.policy_rejected = False
        except WeakPassphrase:
            self.passphrase = strong_passphrase(setup, policy_bits or 0)
            self.key = self.server.provision(USER, self.passphrase, {(SERVICE.protocol, SERVICE.port)})
            self.policy_rejected = True

        sim = self.sim
        if link is not None:
            sim.default_link = link
        self.server_node = sim.add_node(ServerNode("server", a["server"], self.server))
        self.nat = NatBox(a["nat"]) if nat else None
        client_addr = a["private"] if nat else a["client"]
        self.client = sim.add_node(ClientNode("client", client_addr), nat=self.nat)
        self.resolver = sim.add_node(ResolverNode("resolver", a["resolver"]))
        self.attacker = sim.add_node(AttackerNode("attacker", a["attacker"]))

    # client behavior

    @property
    def now(self) -> int:
        return self.sim.now_ms

    def current_knocks(self) -> KnockSequence:
        epoch = self.now // 60_000 if self.template.rotating else 0
        return keyed(self.template, self.key.hmac_key, epoch)

    def declared_address(self) -> NetAddress:
        strategy = self.profile.nat_strategy
        if strategy is NatMode.AUTO:
            try:
                return resolve_public_addr(self.sim, self.client, self.resolver)
            except ResolveTimeout:
                return self.client.addr
        if strategy is NatMode.MANUAL:
            # the operator told the client its public address
            return self.sim.public_addr_of(self.client)
        return self.client.addr

    def authenticate(self) -> None:
        """Start the client's authentication at the current time."""
        sim, client, server = self.sim, self.client, self.server_node.addr
        if self.mechanism is Impl.SPA:
            bound = self.declared_address()
            mode = (BindMode.SERVER_OBSERVED if self.profile.nat_strategy is NatMode.AUTO
                    else BindMode.DECLARED_BY_CLIENT)
            payload = spa.build_payload(SERVICE, bound, mode, sim.now_ms, client.rng)
            data = spa.encode(payload, self.key, self.cipher, client.rng)
            proto = spa_protocol(self.profile)
            dport = 0 if proto is Protocol.ICMP else SPA_PORT
            sim.emit(client, PacketEvent(client.addr, server, proto, client.ephemeral_port(), dport, data))
            return
        seq = self.current_knocks()
        tagged = seq.mode is KnockMode.SEQUENCE_TAGGED
        for i, (proto, port) in enumerate(seq.knocks):
            body = bytes([i]) if tagged and proto is Protocol.UDP else b""
            pkt = PacketEvent(client.addr, server, proto, client.ephemeral_port(), port, body)
            sim.after(i, lambda s, p=pkt: s.emit(client, p))

    def connect(self, wait_ms: int = 500) -> bool:
        """Probe the granted service; True iff the server answered."""
        sim, client = self.sim, self.client
        mark = len(client.inbox)
        sport = client.ephemeral_port()
        sim.emit(client, PacketEvent(client.addr, self.server_node.addr, SERVICE.protocol, sport, SERVICE.port))
        sim.run(sim.now_ms + wait_ms)
        return any(p.src == self.server_node.addr and p.src_port == SERVICE.port
                   for p in client.inbox[mark:])

    def login(self, settle_ms: int = 2000) -> bool:
        self.authenticate()
        self.sim.run(self.sim.now_ms + settle_ms)
        return self.connect()

    def tap(self):
        return self.sim.add_tap("client", self.server_node.addr)

    def silent(self) -> bool:
        """The server emitted exactly one reply per admitted packet and nothing else."""
        node = self.server_node
        passes = [(pkt.src, pkt.src_port) for _, pkt, d in node.decisions if d.tag is DecisionTag.PASS]
        replies = [(p.dst, p.dst_port) for p in self.sim.outbound_log[node.name]]
        return replies == passes

    def excerpt(self, n: int = 4) -> str:
        lines = [r.line() for r in self.sim.trace if r.event == "decision"]
        return " | ".join(lines[-n:])


# -- scenarios ----------------------------------------------------------------

def _result(sid: str, world: World, passed: bool, note: str) -> ScenarioResult:
    return ScenarioResult(sid, passed, f"{note}; {world.excerpt()}", world.silent())


def scenario_ooo_reorder(profile: CapabilityProfile, seed: int) -> ScenarioResult:
    mech = Impl.SPA if profile.ooo_strategy is OooStrategy.SINGLE_PACKET else None
    if profile.ooo_strategy is OooStrategy.NONE:
        mech = Impl.PK if Impl.PK in profile.implementations else Impl.SPA
    w = World(profile, seed, mechanism=mech)
    w.sim.set_link("client", w.server_node.addr, LinkPolicy(reorder_prob=1.0, latency_ms=20))
    ok = w.login()
    return _result("ooo-reorder", w, ok, f"mechanism={w.mechanism.value} connected={int(ok)}")


def scenario_nat_grant(profile: CapabilityProfile, seed: int) -> ScenarioResult:
    w = World(profile, seed, nat=True)
    ok = w.login()
    return _result("nat-grant", w, ok, f"behind NAT {w.nat.public_addr} connected={int(ok)}")


def _replay(profile: CapabilityProfile, seed: int, spoofed: bool, delay_ms: int | None = None):
    w = World(profile, seed)
    if delay_ms is None:
        delay_ms = 5_000 if spoofed else 10 * 60_000
    spec = ReplayEavesdropper(delay_ms, w.sim.public_addr_of(w.client) if spoofed else None)
    attack = install_attacker(w.sim, spec, w.tap(), w.attacker)
    legit = w.login()
    w.sim.run(w.now + delay_ms + 5_000)
    report = attack.report()
    return w, legit, report


def scenario_replay(profile: CapabilityProfile, seed: int, spoofed: bool) -> ScenarioResult:
    w, legit, report = _replay(profile, seed, spoofed)
    sid = "replay-spoofed-source" if spoofed else "replay-same-source"
    ok = legit and not report.granted
    return _result(sid, w, ok, f"legit={int(legit)} {report.detail}")


def scenario_dictionary(profile: CapabilityProfile, seed: int) -> ScenarioResult:
    w = World(profile, seed, passphrase="password")
    tap = w.tap()
    attack = install_attacker(w.sim, DictionaryAttacker(_wordlist()), tap, w.attacker)
    legit = w.login()
    w.sim.run(w.now + 5_000)
    report = attack.report()
    ok = legit and not report.granted
    note = f"legit={int(legit)} policy_rejected={int(w.policy_rejected)} {report.detail}"
    return _result("dictionary-weak-key", w, ok, note)


def scenario_ipv6(profile: CapabilityProfile, seed: int) -> ScenarioResult:
    w = World(profile, seed, family=6)
    ok = w.login()
    return _result("ipv6-grant", w, ok, f"connected={int(ok)}")


def scenario_flood(profile: CapabilityProfile, seed: int, sources: int = 2048,
                   capacity: int = 1024) -> ScenarioResult:
    w = World(profile, seed, capacity=capacity)
    w.sim.trace_enabled = False
    target = w.server_node.addr
    if w.mechanism is Impl.PK or Impl.PK in profile.implementations:
        proto, port = w.current_knocks().knocks[0]
        body = b"\x00" if w.template.mode is KnockMode.SEQUENCE_TAGGED else b""
    else:
        proto, port, body = spa_protocol(profile), SPA_PORT, b"junk"
    install_attacker(w.sim, Flooder(sources, target, proto, port, body), None, w.attacker)
    w.sim.run(w.now + 1_000)
    w.sim.trace_enabled = True
    legit = w.login()
    peak = w.server.tracker_peak()
    ok = legit and peak <= capacity
    return _result("flood-capacity", w, ok, f"sources={sources} peak={peak} legit={int(legit)}")


def run_scenarios(profile: CapabilityProfile, seed: int) -> list[ScenarioResult]:
    return [
        scenario_ooo_reorder(profile, seed),
        scenario_nat_grant(profile, seed),
        scenario_replay(profile, seed, spoofed=False),
        scenario_replay(profile, seed, spoofed=True),
        scenario_dictionary(profile, seed),
        scenario_ipv6(profile, seed),
        scenario_flood(profile, seed),
    ]


# -- scoring ------------------------------------------------------------------

def _platform_score(p: CapabilityProfile) -> int:
    both_client = p.client_platforms == BOTH_OS
    both_server = p.server_platforms == BOTH_OS
    if both_client and both_server:
        return 100
    if both_client or both_server:
        return 80
    return 50


_PROTOCOL_SCORE = {1: 50, 2: 70, 3: 100}
_CIPHER_SCORE = {1: 30, 2: 50, 3: 70, 4: 85}


def score(profile: CapabilityProfile, results: list[ScenarioResult]) -> ScoreCard:
    passed = {r.scenario_id: r.passed for r in results}
    missing = [s for s in SCENARIOS if s not in passed]
    if missing:
        raise ValueError(f"missing scenario results: {missing}")

    # claims whose scenario contradicts them
    broken = []
    if profile.ooo_strategy is not OooStrategy.NONE and not passed["ooo-reorder"]:
        broken.append("ooo_strategy")
    if profile.nat_strategy is not NatMode.NONE and not passed["nat-grant"]:
        broken.append("nat_strategy")
    if profile.password_policy is not None and not passed["dictionary-weak-key"]:
        broken.append("password_policy")
    rs = profile.replay_strategy
    if rs is not ReplayStrategy.NONE and not passed["replay-same-source"]:
        broken.append("replay_strategy")
    elif rs is ReplayStrategy.TIMESTAMP_NONCE and not passed["replay-spoofed-source"]:
        broken.append("replay_strategy")
    if profile.ipv6 and not passed["ipv6-grant"]:
        broken.append("ipv6")
    if broken:
        raise InconsistentProfile(profile.name, broken)

    ooo = 100 if profile.ooo_strategy is not OooStrategy.NONE and passed["ooo-reorder"] else 0
    nat = 0
    if passed["nat-grant"]:
        nat = {NatMode.AUTO: 100, NatMode.MANUAL: 50}.get(profile.nat_strategy, 0)
    weak = 100 if profile.password_policy is not None and passed["dictionary-weak-key"] else 0
    replay = 0
    if rs is ReplayStrategy.TIMESTAMP_NONCE and passed["replay-same-source"] and passed["replay-spoofed-source"]:
        replay = 100
    elif rs is not ReplayStrategy.NONE and passed["replay-same-source"]:
        replay = 50
    ipv6 = 100 if profile.ipv6 and passed["ipv6-grant"] else 0

    scores = (
        _platform_score(profile),
        100 if len(profile.implementations) == 2 else 50,
        _PROTOCOL_SCORE[len(profile.protocols)],
        ooo,
        nat,
        100 if profile.cipher_count >= 5 else _CIPHER_SCORE[profile.cipher_count],
        80 if profile.root is RootNeed.INSTALL_ONLY else 50,
        weak,
        replay,
        ipv6,
    )
    return ScoreCard(profile.name, scores)


def evaluate(profiles: list[CapabilityProfile], seed: int) -> list[ScoreCard]:
    return [score(p, run_scenarios(p, seed)) for p in profiles]


# -- comparison and reports ---------------------------------------------------

@dataclass
class Comparison:
    cards: list[ScoreCard]
    ranking: list[tuple[str, float]]
    ties: list[list[str]] = field(default_factory=list)

    def means(self) -> dict[str, float]:
        return dict(self.ranking)


def compare(cards: list[ScoreCard]) -> Comparison:
    if len(cards) < 2:
        raise ValueError("comparison needs at least two scorecards")
    # sorted() is stable, so equal means keep their input order
    ranked = sorted(cards, key=lambda c: -c.mean)
    ranking = [(c.name, round(c.mean, 1)) for c in ranked]
    ties: list[list[str]] = []
    for name, mean in ranking:
        if ties and ranking[[n for n, _ in ranking].index(ties[-1][0])][1] == mean:
            ties[-1].append(name)
        else:
            ties.append([name])
    return Comparison(cards, ranking, [t for t in ties if len(t) > 1])


def render_csv(comp: Comparison) -> str:
    by_name = {c.name: c for c in comp.cards}
    lines = ["profile,parameter,score"]
    for name, mean in comp.ranking:
        card = by_name[name]
        lines += [f"{name},{key},{s}" for key, s in zip(PARAMETER_KEYS, card.scores)]
        lines.append(f"{name},OVERALL,{mean:.1f}")
    return "\n".join(lines) + "\n"


def render_table(comp: Comparison) -> str:
    by_name = {c.name: c for c in comp.cards}
    names = [n for n, _ in comp.ranking]
    width = max(len(p) for p in PARAMETERS + ("OVERALL",))
    cols = [max(len(n), 6) for n in names]
    out = ["".ljust(width) + "  " + "  ".join(n.rjust(w) for n, w in zip(names, cols))]
    for i, param in enumerate(PARAMETERS):
        out.append(param.ljust(width) + "  "
                   + "  ".join(str(by_name[n].scores[i]).rjust(w) for n, w in zip(names, cols)))
    out.append("OVERALL".ljust(width) + "  "
               + "  ".join(f"{m:.1f}".rjust(w) for (_, m), w in zip(comp.ranking, cols)))
    out.append("")
    out.append("ranking: " + " > ".join(f"{n} ({m:.1f})" for n, m in comp.ranking))
    for group in comp.ties:
        out.append("tie: " + " = ".join(group))
    return "\n".join(out) + "\n"


# -- profile file -------------------------------------------------------------
#
# [name]
# client_platforms = windows,unix
# server_platforms = unix
# implementations = pk,spa
# protocols = udp,tcp,icmp
# ooo_strategy = none|sequence_numbers|single_packet
# nat_strategy = none|manual|auto
# cipher_count = 2
# root = install_only|install_and_operate
# password_policy = none|entropy:<min bits>
# replay_strategy = none|ip_binding|timestamp_only|timestamp_nonce
# ipv6 = true|false

class ProfileError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


_PROFILE_KEYS = {
    "client_platforms", "server_platforms", "implementations", "protocols", "ooo_strategy",
    "nat_strategy", "cipher_count", "root", "password_policy", "replay_strategy", "ipv6",
}


def _set_of(enum_cls, text: str) -> frozenset:
    return frozenset(enum_cls(t.strip().lower()) for t in text.split(",") if t.strip())


def _parse_value(key: str, value: str):
    v = value.strip()
    if key in ("client_platforms", "server_platforms"):
        return _set_of(Platform, v)
    if key == "implementations":
        return _set_of(Impl, v)
    if key == "protocols":
        return frozenset(Protocol.parse(t) for t in v.split(",") if t.strip())
    if key == "ooo_strategy":
        return OooStrategy(v.lower())
    if key == "nat_strategy":
        return NatMode(v.lower())
    if key == "cipher_count":
        return int(v)
    if key == "root":
        return RootNeed(v.lower())
    if key == "password_policy":
        if v.lower() == "none":
            return None
        kind, _, bits = v.partition(":")
        if kind.lower() != "entropy" or not bits.isdigit():
            raise ValueError(f"expected none or entropy:<bits>, got {v!r}")
        return EntropyCheck(int(bits))
    if key == "replay_strategy":
        return ReplayStrategy(v.lower())
    if key == "ipv6":
        if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {v!r}")
        return v.lower() in ("true", "1", "yes")
    raise KeyError(key)


def parse_profiles(text: str) -> list[CapabilityProfile]:
    profiles = []
    current: dict | None = None
    start = 0

    def finish():
        if current is None:
            return
        name = current.pop("name")
        absent = _PROFILE_KEYS - current.keys()
        if absent:
            raise ProfileError(f"profile {name!r} is missing {', '.join(sorted(absent))}", start)
        try:
            profiles.append(CapabilityProfile(name=name, **current))
        except InvalidProfile as exc:
            raise ProfileError(str(exc), start) from None

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ProfileError("bad section header", lineno)
            finish()
            current, start = {"name": line[1:-1].strip()}, lineno
            continue
        if current is None:
            raise ProfileError("setting outside a [profile] section", lineno)
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq or key not in _PROFILE_KEYS:
            raise ProfileError(f"unknown setting {line!r}", lineno)
        if key in current:
            raise ProfileError(f"duplicate setting {key!r}", lineno)
        try:
            current[key] = _parse_value(key, value)
        except (ValueError, KeyError) as exc:
            raise ProfileError(str(exc), lineno) from None
    finish()
    if not profiles:
        raise ProfileError("no profiles defined")
    return profiles


def format_profile(p: CapabilityProfile) -> str:
    def names(s):
        return ",".join(sorted(x.value if not isinstance(x, Protocol) else str(x) for x in s))
    policy = "none" if p.password_policy is None else f"entropy:{p.password_policy.min_bits}"
    return "\n".join([
        f"[{p.name}]",
        f"client_platforms = {names(p.client_platforms)}",
        f"server_platforms = {names(p.server_platforms)}",
        f"implementations = {names(p.implementations)}",
        f"protocols = {names(p.protocols)}",
        f"ooo_strategy = {p.ooo_strategy.value}",
        f"nat_strategy = {p.nat_strategy.value}",
        f"cipher_count = {p.cipher_count}",
        f"root = {p.root.value}",
        f"password_policy = {policy}",
        f"replay_strategy = {p.replay_strategy.value}",
        f"ipv6 = {str(p.ipv6).lower()}",
    ]) + "\n"
