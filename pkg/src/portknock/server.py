"""The authorization server: default-drop firewall, SPA validation, knock tracking.

The server never answers an invalid packet. The only traffic it lets through
is packets that match a live access rule; everything else becomes a
``SilentDrop`` decision with a locally logged reason code.
"""

from __future__ import annotations

import enum
import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass, field
from importlib import resources

from . import ciphers, spa
from .core import Family, MinuteStamp, NetAddress, Protocol, normalize_address, to_minute_stamp
from .knock import (DEFAULT_CAPACITY, KnockEvent, KnockMode, KnockSequence, KnockTracker,
                    Outcome, keyed, observe)
from .packet import PacketEvent
from .spa import KeyEntry, RequestKind, ServiceRequest, SpaPayload, load_keyring

log = logging.getLogger(__name__)

RANDOMIZED = "randomized"


class NatMode(enum.Enum):
    NONE = "none"
    MANUAL = "manual"
    AUTO = "auto"


class ReplayStrategy(enum.Enum):
    NONE = "none"
    IP_BINDING = "ip_binding"
    TIMESTAMP_ONLY = "timestamp_only"
    TIMESTAMP_NONCE = "timestamp_nonce"

    @property
    def checks_freshness(self) -> bool:
        return self in (ReplayStrategy.TIMESTAMP_ONLY, ReplayStrategy.TIMESTAMP_NONCE)


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ServerConfig:
    spa_enabled: bool = True
    pk_enabled: bool = False
    spa_protocols: frozenset = frozenset({Protocol.UDP})
    spa_port: int | str = 62201
    knock_sequences: tuple = ()
    freshness_window_min: int = 2
    grant_ttl_ms: int = 30_000
    nat_mode: NatMode = NatMode.NONE
    keyring: dict = field(default_factory=dict)
    min_passphrase_bits: int | None = None
    replay_strategy: ReplayStrategy = ReplayStrategy.TIMESTAMP_NONCE
    ipv6_enabled: bool = True
    tracker_capacity: int = DEFAULT_CAPACITY
    ciphers: tuple = tuple(ciphers.FULL_BUILD)
    server_addr: str = "198.51.100.1"

    def __post_init__(self):
        object.__setattr__(self, "spa_protocols", frozenset(self.spa_protocols))
        object.__setattr__(self, "knock_sequences", tuple(self.knock_sequences))
        object.__setattr__(self, "keyring", spa.as_keyring(self.keyring))
        if not (self.spa_enabled or self.pk_enabled):
            raise ConfigError("at least one of spa_enabled / pk_enabled must be set")
        if self.spa_enabled and not self.spa_protocols:
            raise ConfigError("SPA enabled with no listen protocol")
        if self.spa_port == RANDOMIZED:
            if Protocol.UDP not in self.spa_protocols or Protocol.TCP in self.spa_protocols:
                raise ConfigError("a randomized SPA port requires UDP")
        elif not (isinstance(self.spa_port, int) and 0 <= self.spa_port <= 0xFFFF):
            raise ConfigError(f"bad spa_port {self.spa_port!r}")
        if self.pk_enabled and not self.knock_sequences:
            raise ConfigError("PK enabled with no knock sequence")
        if self.freshness_window_min < 0 or self.grant_ttl_ms <= 0:
            raise ConfigError("windows must be positive")


# -- replay cache -------------------------------------------------------------

class Freshness(enum.Enum):
    FRESH = "fresh"
    REPLAYED = "replayed"
    STALE = "stale"


class ReplayCache:
    """MAC digests seen recently, kept for ``window_min + 1`` minutes."""

    def __init__(self, window_min: int = 2):
        self.window_min = window_min
        self.seen: dict[bytes, int] = {}

    @property
    def horizon_min(self) -> int:
        return self.window_min + 1

    def purge(self, now: int) -> int:
        old = [d for d, at in self.seen.items() if now - at > self.horizon_min]
        for d in old:
            del self.seen[d]
        return len(old)

    def __len__(self) -> int:
        return len(self.seen)


def check_replay(cache: ReplayCache, digest: bytes, stamp: MinuteStamp | int,
                 now: MinuteStamp | int) -> Freshness:
    stamp, now = int(stamp), int(now)
    cache.purge(now)
    if abs(now - stamp) > cache.window_min:
        return Freshness.STALE
    if digest in cache.seen:
        return Freshness.REPLAYED
    # a future-dated stamp stays fresh past now + window, so retention counts from the later of the two
    cache.seen[digest] = max(now, stamp)
    return Freshness.FRESH


def is_fresh_stamp(stamp: MinuteStamp | int, now: MinuteStamp | int, window_min: int) -> bool:
    return abs(int(now) - int(stamp)) <= window_min


# -- source binding -----------------------------------------------------------

DENY = None


def bind_source(payload: SpaPayload, observed_src: NetAddress, nat_mode: NatMode) -> NetAddress | None:
    """Address a grant is bound to, or ``None`` (deny)."""
    if nat_mode is NatMode.AUTO:
        return observed_src
    if nat_mode is NatMode.MANUAL:
        return payload.bound_addr
    return payload.bound_addr if payload.bound_addr == observed_src else DENY


# -- firewall -----------------------------------------------------------------

@dataclass(frozen=True)
class AccessRule:
    src: NetAddress
    protocol: Protocol
    port: int
    expires_at_ms: int

    def __str__(self) -> str:
        return f"{self.src} {self.protocol}/{self.port} until {self.expires_at_ms}"


class FirewallState:
    """Rule set over a default-drop policy."""

    def __init__(self):
        self.rules: dict[tuple, AccessRule] = {}

    def add(self, rule: AccessRule) -> None:
        key = (rule.src, rule.protocol, rule.port)
        old = self.rules.get(key)
        if old is None or old.expires_at_ms < rule.expires_at_ms:
            self.rules[key] = rule

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules.values())


def expire_rules(firewall: FirewallState, now_ms: int) -> int:
    dead = [k for k, r in firewall.rules.items() if r.expires_at_ms <= now_ms]
    for k in dead:
        del firewall.rules[k]
    return len(dead)


def admits(firewall: FirewallState, src: NetAddress, protocol: Protocol, port: int, now_ms: int) -> bool:
    rule = firewall.rules.get((src, protocol, port))
    return rule is not None and rule.expires_at_ms > now_ms


# -- decisions and log --------------------------------------------------------

class DecisionTag(enum.Enum):
    GRANT = "GRANT"
    COMMAND = "COMMAND"
    DROP = "DROP"
    PASS = "PASS"


@dataclass(frozen=True)
class Decision:
    tag: DecisionTag
    reason: str = ""
    rule: AccessRule | None = None
    user_id: str | None = None
    command: str | None = None

    @classmethod
    def drop(cls, reason: str) -> Decision:
        return cls(DecisionTag.DROP, reason)

    @property
    def is_grant(self) -> bool:
        return self.tag is DecisionTag.GRANT


@dataclass(frozen=True)
class LogRecord:
    epoch_ms: int
    tag: str
    reason: str
    src: str
    detail: str

    def line(self) -> str:
        return "\t".join((str(self.epoch_ms), self.tag, self.reason, self.src, self.detail))


# -- passphrase strength ------------------------------------------------------

@dataclass(frozen=True)
class Weak:
    reason: str


@dataclass(frozen=True)
class Strength:
    bits: float


class WeakPassphrase(ValueError):
    pass


def load_wordlist() -> frozenset:
    text = resources.files("portknock").joinpath("data/wordlist.txt").read_text("utf-8")
    return frozenset(w.strip().lower() for w in text.splitlines()
                     if w.strip() and not w.startswith("#"))


def passphrase_bits(passphrase: str, wordlist: Iterable[str]) -> Weak | Strength:
    words = {w.lower() for w in wordlist}
    if passphrase.lower() in words:
        return Weak("dictionary")
    pool = 0
    if any(c.islower() and c.isascii() for c in passphrase):
        pool += 26
    if any(c.isupper() and c.isascii() for c in passphrase):
        pool += 26
    if any(c.isdigit() and c.isascii() for c in passphrase):
        pool += 10
    if any(not (c.isascii() and c.isalnum()) for c in passphrase):
        pool += 33
    if pool == 0:
        return Strength(0.0)
    return Strength(len(passphrase) * math.log2(pool))


def check_passphrase(passphrase: str, wordlist: Iterable[str], min_bits: float) -> float:
    verdict = passphrase_bits(passphrase, wordlist)
    if isinstance(verdict, Weak):
        raise WeakPassphrase(verdict.reason)
    if verdict.bits < min_bits:
        raise WeakPassphrase(f"{verdict.bits:.1f} bits < {min_bits}")
    return verdict.bits


# -- the server ---------------------------------------------------------------

class _KnockSlot:
    """Tracker(s) for one configured sequence. Rotating sequences keep a
    tracker for the current and the previous minute."""

    def __init__(self, seq: KnockSequence, capacity: int, keyring: dict):
        self.seq = seq
        self.keyring = keyring
        self.capacity = capacity
        self.trackers: dict[int, tuple[KnockSequence, KnockTracker]] = {}
        self._secret: bytes | None = None

    def _current_secret(self) -> bytes | None:
        key = self.keyring.get(self.seq.key_user)
        secret = key.hmac_key if key is not None else None
        if secret != self._secret:
            self._secret = secret
            self.trackers.clear()
        return secret

    def active(self, now_ms: int) -> list:
        if self.seq.key_user is None:
            if not self.trackers:
                self.trackers[0] = (self.seq, KnockTracker(self.capacity))
            return list(self.trackers.values())
        secret = self._current_secret()
        if secret is None:
            return []
        if not self.seq.rotating:
            if not self.trackers:
                self.trackers[0] = (keyed(self.seq, secret, 0), KnockTracker(self.capacity))
            return list(self.trackers.values())
        m = to_minute_stamp(now_ms).minutes
        for old in [k for k in self.trackers if k < m - 1]:
            del self.trackers[old]
        out = []
        for minute in (m - 1, m):
            if minute < 0:
                continue
            if minute not in self.trackers:
                self.trackers[minute] = (keyed(self.seq, secret, minute), KnockTracker(self.capacity))
            out.append(self.trackers[minute])
        return out

    def peak(self) -> int:
        return max((t.peak for _, t in self.trackers.values()), default=0)

    def size(self) -> int:
        return max((len(t) for _, t in self.trackers.values()), default=0)


class AuthServer:
    def __init__(self, config: ServerConfig, wordlist: Iterable[str] | None = None):
        self.config = config
        self.keyring: dict[str, KeyEntry] = dict(config.keyring)
        self.wordlist = frozenset(wordlist) if wordlist is not None else load_wordlist()
        self.firewall = FirewallState()
        self.replay_cache = ReplayCache(config.freshness_window_min)
        self.log: list[LogRecord] = []
        self.slots = [_KnockSlot(seq, config.tracker_capacity, self.keyring)
                      for seq in config.knock_sequences]
        self._port_cache: tuple[int, dict[int, set[str]]] | None = None

    # provisioning

    def provision(self, user_id: str, passphrase: str, allowed_ports=(), allow_command=False) -> KeyEntry:
        """Add a passphrase-derived key, enforcing the passphrase policy if one is set."""
        if self.config.min_passphrase_bits is not None:
            check_passphrase(passphrase, self.wordlist, self.config.min_passphrase_bits)
        entry = spa.key_from_passphrase(user_id, passphrase, allowed_ports, allow_command)
        self.keyring[user_id] = entry
        self._port_cache = None
        return entry

    # classification helpers

    def _randomized_ports(self, now_ms: int) -> dict[int, set[str]]:
        m = to_minute_stamp(now_ms).minutes
        if self._port_cache is None or self._port_cache[0] != m:
            table: dict[int, set[str]] = {}
            for uid, key in self.keyring.items():
                for d in (-1, 0, 1):
                    if m + d >= 0:
                        table.setdefault(spa.randomized_port(key.hmac_key, m + d), set()).add(uid)
            self._port_cache = (m, table)
        return self._port_cache[1]

    def is_spa_packet(self, pkt: PacketEvent, now_ms: int) -> bool:
        cfg = self.config
        if not cfg.spa_enabled or pkt.protocol not in cfg.spa_protocols:
            return False
        if pkt.protocol is Protocol.ICMP:
            return True
        if cfg.spa_port == RANDOMIZED:
            return pkt.dst_port in self._randomized_ports(now_ms)
        return pkt.dst_port == cfg.spa_port

    def tracker_size(self) -> int:
        return max((s.size() for s in self.slots), default=0)

    def tracker_peak(self) -> int:
        return max((s.peak() for s in self.slots), default=0)

    # main entry

    def handle_packet(self, pkt: PacketEvent, now_ms: int) -> Decision:
        decision = self._decide(pkt, now_ms)
        self._record(decision, pkt, now_ms)
        return decision

    def _record(self, d: Decision, pkt: PacketEvent, now_ms: int) -> None:
        if d.tag is DecisionTag.GRANT:
            detail = f"{d.rule.protocol}/{d.rule.port} bound={d.rule.src} exp={d.rule.expires_at_ms}"
        elif d.tag is DecisionTag.COMMAND:
            detail = f"user={d.user_id} cmd={d.command!r}"
        else:
            detail = f"{pkt.protocol}/{pkt.dst_port}"
        rec = LogRecord(now_ms, d.tag.value, d.reason or "-", str(pkt.src), detail)
        self.log.append(rec)
        if d.tag is DecisionTag.COMMAND:
            # Commands are recorded only; nothing is ever executed.
            log.info("command accepted (not executed): %s", rec.line())
        else:
            log.debug("%s", rec.line())

    def _decide(self, pkt: PacketEvent, now_ms: int) -> Decision:
        if pkt.src.family is Family.V6 and not self.config.ipv6_enabled:
            return Decision.drop("family")
        if self.is_spa_packet(pkt, now_ms):
            return self._handle_spa(pkt, now_ms)
        if self.config.pk_enabled:
            d = self._handle_knock(pkt, now_ms)
            if d is not None:
                return d
        if admits(self.firewall, pkt.src, pkt.protocol, pkt.dst_port, now_ms):
            return Decision(DecisionTag.PASS, "rule")
        return Decision.drop("no_rule")

    def _handle_spa(self, pkt: PacketEvent, now_ms: int) -> Decision:
        cfg = self.config
        try:
            decoded = spa.decode(pkt.payload, self.keyring, cfg.ciphers)
        except spa.DecodeError as exc:
            return Decision.drop(exc.reason)
        payload, uid = decoded.payload, decoded.user_id
        key = self.keyring[uid]
        if cfg.spa_port == RANDOMIZED and pkt.protocol is Protocol.UDP:
            if uid not in self._randomized_ports(now_ms).get(pkt.dst_port, ()):
                return Decision.drop("wrong_port")

        now = to_minute_stamp(now_ms)
        strategy = cfg.replay_strategy
        if strategy is ReplayStrategy.TIMESTAMP_NONCE:
            verdict = check_replay(self.replay_cache, decoded.digest, payload.stamp, now)
            if verdict is not Freshness.FRESH:
                return Decision.drop(verdict.value)
        elif strategy is ReplayStrategy.TIMESTAMP_ONLY:
            if not is_fresh_stamp(payload.stamp, now, cfg.freshness_window_min):
                return Decision.drop(Freshness.STALE.value)

        if not key.permits(payload.request):
            return Decision.drop("unauthorized")
        bound = bind_source(payload, pkt.src, cfg.nat_mode)
        if bound is DENY:
            return Decision.drop("deny")

        req = payload.request
        if req.kind is RequestKind.COMMAND:
            return Decision(DecisionTag.COMMAND, "spa", user_id=uid, command=req.command)
        return self._grant(bound, req, now_ms, "spa", uid)

    def _handle_knock(self, pkt: PacketEvent, now_ms: int) -> Decision | None:
        if pkt.protocol is Protocol.ICMP:
            return None
        tag = None
        if pkt.protocol is Protocol.UDP and len(pkt.payload) == 1:
            tag = pkt.payload[0]
        ev = KnockEvent(pkt.src, pkt.protocol, pkt.dst_port, now_ms, tag)
        seen = None
        for slot in self.slots:
            for seq, tracker in slot.active(now_ms):
                out = observe(tracker, seq, ev)
                if out.kind is Outcome.GRANTED:
                    return self._grant(pkt.src, out.grant, now_ms, "knock", None)
                if out.kind is not Outcome.IGNORED and seen is None:
                    seen = out.kind
        if seen is None:
            return None
        return Decision.drop(f"knock_{seen.value}")

    def _grant(self, src: NetAddress, req: ServiceRequest, now_ms: int, reason: str,
               uid: str | None) -> Decision:
        rule = AccessRule(src, req.protocol, req.port, now_ms + self.config.grant_ttl_ms)
        self.firewall.add(rule)
        return Decision(DecisionTag.GRANT, reason, rule=rule, user_id=uid)


def handle_packet(state: AuthServer, packet: PacketEvent, now_ms: int) -> Decision:
    return state.handle_packet(packet, now_ms)


# -- config file --------------------------------------------------------------

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _bool(v: str) -> bool:
    try:
        return _BOOL[v.lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {v!r}") from None


def _proto_port(text: str) -> tuple[Protocol, int]:
    proto, _, port = text.strip().partition("/")
    if not port.isdigit():
        raise ValueError(f"expected proto/port, got {text!r}")
    return Protocol.parse(proto), int(port)


def parse_knock_sequence(text: str) -> KnockSequence:
    """``<strict|tagged> udp/7000,udp/8000,udp/9000 -> tcp/22 [window=MS] [key=USER] [rotate=0|1]``"""
    head, arrow, tail = text.partition("->")
    if not arrow:
        raise ValueError("knock_sequence needs '-> proto/port'")
    hparts = head.split()
    if len(hparts) != 2:
        raise ValueError("knock_sequence needs a mode and a comma-separated port list")
    mode = KnockMode(hparts[0].lower())
    knocks = tuple(_proto_port(k) for k in hparts[1].split(","))
    tparts = tail.split()
    if not tparts:
        raise ValueError("missing grant after '->'")
    gp, gport = _proto_port(tparts[0])
    opts = {}
    for opt in tparts[1:]:
        k, eq, v = opt.partition("=")
        if not eq or k not in ("window", "key", "rotate"):
            raise ValueError(f"unknown knock option {opt!r}")
        opts[k] = v
    return KnockSequence(knocks, mode, int(opts.get("window", 30_000)),
                         ServiceRequest.open_port(gp, gport), opts.get("key"),
                         _bool(opts.get("rotate", "0")))


_CONFIG_KEYS = {
    "spa_enabled", "pk_enabled", "spa_protocols", "spa_port", "knock_sequence",
    "freshness_window_min", "grant_ttl_ms", "nat_mode", "min_passphrase_bits",
    "replay_strategy", "ipv6_enabled", "tracker_capacity", "ciphers", "server_addr",
}


def parse_config(text: str, keyring: dict | None = None) -> ServerConfig:
    """Parse the flat ``key = value`` server config. Raises ConfigError with a line number."""
    kw: dict = {}
    seqs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq:
            raise ConfigError("expected key = value", lineno)
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in kw and key != "knock_sequence":
            raise ConfigError(f"duplicate key {key!r}", lineno)
        try:
            if key in ("spa_enabled", "pk_enabled", "ipv6_enabled"):
                kw[key] = _bool(value)
            elif key == "spa_protocols":
                kw[key] = frozenset(Protocol.parse(p) for p in value.split(",") if p.strip())
            elif key == "spa_port":
                kw[key] = RANDOMIZED if value.lower() == RANDOMIZED else int(value)
            elif key == "knock_sequence":
                seqs.append(parse_knock_sequence(value))
            elif key in ("freshness_window_min", "grant_ttl_ms", "tracker_capacity"):
                kw[key] = int(value)
            elif key == "min_passphrase_bits":
                kw[key] = None if value.lower() in ("", "none") else int(value)
            elif key == "nat_mode":
                kw[key] = NatMode(value.lower())
            elif key == "replay_strategy":
                kw[key] = ReplayStrategy(value.lower())
            elif key == "ciphers":
                ids = tuple(int(c) for c in value.split(","))
                for c in ids:
                    ciphers.get(c)
                kw[key] = ids
            elif key == "server_addr":
                normalize_address(value)
                kw[key] = value
        except (ValueError, LookupError) as exc:
            raise ConfigError(str(exc), lineno) from None
    if seqs:
        kw["knock_sequences"] = tuple(seqs)
    try:
        return ServerConfig(keyring=keyring or {}, **kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


__all__ = [
    "AccessRule", "AuthServer", "ConfigError", "Decision", "DecisionTag", "FirewallState",
    "Freshness", "LogRecord", "NatMode", "RANDOMIZED", "ReplayCache", "ReplayStrategy",
    "ServerConfig", "Strength", "Weak", "WeakPassphrase", "admits", "bind_source",
    "check_passphrase", "check_replay", "expire_rules", "handle_packet", "load_keyring",
    "load_wordlist", "parse_config", "parse_knock_sequence", "passphrase_bits",
]
