"""Single Packet Authorization: payloads, the PKA1 wire format, keyrings.

Wire layout (big-endian)::

    "PKA1" | version u8 | cipher_id u8 | user_len u8 | user_id |
    ct_len u16 | ciphertext | mac[32]

``mac`` is HMAC-SHA-256 under the user's hmac key over every preceding byte
and is checked before any decryption. The plaintext inside ``ciphertext`` is::

    stamp u32 | nonce[16] | bind_mode u8 | bound_addr[16] |
    kind u8 | protocol u8 | port u16 | cmd_len u8 | cmd
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import logging
import re
import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

from . import ciphers
from .ciphers import CipherUnavailable
from .core import MinuteStamp, NetAddress, Protocol, SimClock, to_minute_stamp

log = logging.getLogger(__name__)

MAGIC = b"PKA1"
VERSION = 1
MAC_LEN = 32
NONCE_LEN = 16
MAX_PACKET = 1024
MAX_COMMAND = 255

_PLAIN_HEAD = struct.Struct("!I16sB16sBBHB")  # 42 bytes before cmd bytes
_MIN_PACKET = len(MAGIC) + 3 + 1 + 2 + MAC_LEN


class SpaError(Exception):
    """Base for every reason a packet is refused."""

    reason = "invalid"


class DecodeError(SpaError):
    pass


class BadMagic(DecodeError):
    reason = "bad_magic"


class UnsupportedVersion(DecodeError):
    reason = "bad_version"


class UnknownUser(DecodeError):
    reason = "unknown_user"


class MacMismatch(DecodeError):
    reason = "mac_mismatch"


class DecryptFailure(DecodeError):
    reason = "decrypt_failure"


class MalformedPayload(DecodeError):
    reason = "malformed"


class UnavailableCipher(DecodeError, CipherUnavailable):
    reason = "cipher_unavailable"


class BindMode(enum.IntEnum):
    DECLARED_BY_CLIENT = 0
    SERVER_OBSERVED = 1


class RequestKind(enum.IntEnum):
    OPEN_PORT = 0
    COMMAND = 1


@dataclass(frozen=True)
class ServiceRequest:
    kind: RequestKind
    protocol: Protocol | None = None
    port: int | None = None
    command: str | None = None

    def __post_init__(self):
        if self.kind is RequestKind.OPEN_PORT:
            if self.protocol not in (Protocol.TCP, Protocol.UDP):
                raise ValueError("open-port requests are TCP or UDP only")
            if not isinstance(self.port, int) or not 0 <= self.port <= 0xFFFF:
                raise ValueError(f"bad port {self.port!r}")
            if self.command is not None:
                raise ValueError("open-port requests carry no command")
        elif self.kind is RequestKind.COMMAND:
            if self.protocol is not None or self.port is not None:
                raise ValueError("command requests carry no protocol/port")
            if not isinstance(self.command, str):
                raise ValueError("command must be a string")
            n = len(self.command.encode("utf-8"))
            if not 1 <= n <= MAX_COMMAND:
                raise ValueError(f"command must be 1..{MAX_COMMAND} bytes of UTF-8")
        else:
            raise ValueError(f"unknown request kind {self.kind!r}")

    @classmethod
    def open_port(cls, protocol: Protocol, port: int) -> ServiceRequest:
        return cls(RequestKind.OPEN_PORT, protocol, port)

    @classmethod
    def run_command(cls, command: str) -> ServiceRequest:
        return cls(RequestKind.COMMAND, command=command)

    @classmethod
    def parse(cls, text: str) -> ServiceRequest:
        """``tcp/22`` for an open-port request, ``cmd:<text>`` for a command."""
        if text.startswith("cmd:"):
            return cls.run_command(text[4:])
        proto, _, port = text.partition("/")
        if not port.isdigit():
            raise ValueError(f"bad request {text!r}, expected proto/port")
        return cls.open_port(Protocol.parse(proto), int(port))

    def __str__(self) -> str:
        if self.kind is RequestKind.OPEN_PORT:
            return f"{self.protocol}/{self.port}"
        return f"cmd:{self.command}"


@dataclass(frozen=True)
class SpaPayload:
    stamp: MinuteStamp
    nonce: bytes
    bound_addr: NetAddress
    bind_mode: BindMode
    request: ServiceRequest


@dataclass(frozen=True)
class KeyEntry:
    user_id: str
    enc_key: bytes
    hmac_key: bytes
    allowed_ports: frozenset = field(default_factory=frozenset)
    allow_command: bool = False

    def __post_init__(self):
        uid = self.user_id
        if not (isinstance(uid, str) and uid.isascii() and 1 <= len(uid) <= 32):
            raise ValueError(f"user id must be 1..32 ASCII bytes, got {uid!r}")
        if len(self.enc_key) != 32 or len(self.hmac_key) != 32:
            raise ValueError("keys must be 32 bytes")
        if self.enc_key == self.hmac_key:
            raise ValueError("encryption and hmac keys must differ")
        object.__setattr__(self, "allowed_ports", frozenset(self.allowed_ports))

    def permits(self, request: ServiceRequest) -> bool:
        if request.kind is RequestKind.COMMAND:
            return self.allow_command
        return (request.protocol, request.port) in self.allowed_ports


@dataclass(frozen=True)
class DecodedPacket:
    payload: SpaPayload
    user_id: str
    digest: bytes
    cipher_id: int


def build_payload(request: ServiceRequest, bound_addr: NetAddress, bind_mode: BindMode,
                  clock: SimClock | int, rng) -> SpaPayload:
    now_ms = clock.now_ms if isinstance(clock, SimClock) else clock
    nonce = bytes(NONCE_LEN)
    while not any(nonce):
        nonce = rng.bytes(NONCE_LEN)
    return SpaPayload(to_minute_stamp(now_ms), nonce, bound_addr, BindMode(bind_mode), request)


def _plaintext(p: SpaPayload) -> bytes:
    r = p.request
    if r.kind is RequestKind.OPEN_PORT:
        proto, port, cmd = r.protocol.value, r.port, b""
    else:
        proto, port, cmd = 0, 0, r.command.encode("utf-8")
    head = _PLAIN_HEAD.pack(p.stamp.minutes, p.nonce, int(p.bind_mode), p.bound_addr.bytes,
                            int(r.kind), proto, port, len(cmd))
    return head + cmd


def _parse_plaintext(pt: bytes) -> SpaPayload:
    if len(pt) < _PLAIN_HEAD.size:
        raise MalformedPayload("plaintext too short")
    stamp, nonce, bind, addr, kind, proto, port, cmd_len = _PLAIN_HEAD.unpack_from(pt)
    if len(pt) != _PLAIN_HEAD.size + cmd_len:
        raise MalformedPayload("plaintext length mismatch")
    if not any(nonce):
        raise MalformedPayload("all-zero nonce")
    try:
        bind_mode = BindMode(bind)
        kind = RequestKind(kind)
        if kind is RequestKind.OPEN_PORT:
            if cmd_len:
                raise ValueError("open-port with command bytes")
            request = ServiceRequest.open_port(Protocol.from_wire(proto), port)
        else:
            if proto or port:
                raise ValueError("command with protocol/port")
            request = ServiceRequest.run_command(pt[_PLAIN_HEAD.size:].decode("utf-8"))
    except ValueError as exc:  # includes UnicodeDecodeError
        raise MalformedPayload(str(exc)) from None
    return SpaPayload(MinuteStamp(stamp), nonce, NetAddress(addr), bind_mode, request)


def encode(payload: SpaPayload, key: KeyEntry, cipher: int, rng) -> bytes:
    spec = ciphers.get(cipher)
    if len(payload.nonce) != NONCE_LEN or not any(payload.nonce):
        raise ValueError("payload nonce must be 16 non-zero bytes")
    ct = spec.seal(key.enc_key, _plaintext(payload), rng)
    user = key.user_id.encode("ascii")
    head = (MAGIC + bytes((VERSION, cipher, len(user))) + user
            + struct.pack("!H", len(ct)) + ct)
    packet = head + hmac.new(key.hmac_key, head, hashlib.sha256).digest()
    if len(packet) > MAX_PACKET:
        raise ValueError(f"packet of {len(packet)} bytes exceeds {MAX_PACKET}")
    return packet


def as_keyring(keys: Mapping[str, KeyEntry] | Iterable[KeyEntry]) -> dict[str, KeyEntry]:
    if isinstance(keys, Mapping):
        return dict(keys)
    ring: dict[str, KeyEntry] = {}
    for k in keys:
        if k.user_id in ring:
            raise DuplicateUser(k.user_id)
        ring[k.user_id] = k
    return ring


def decode(data: bytes, keyring: Mapping[str, KeyEntry] | Iterable[KeyEntry],
           allowed_ciphers: Iterable[int] | None = None) -> DecodedPacket:
    """Validate and open a packet. Any failure raises a DecodeError subclass.

    ``allowed_ciphers`` defaults to the full registry; the null cipher is
    accepted only when passed explicitly.
    """
    ring = keyring if isinstance(keyring, Mapping) else as_keyring(keyring)
    data = bytes(data)
    n = len(data)
    if n < _MIN_PACKET or n > MAX_PACKET:
        raise MalformedPayload(f"packet length {n} out of bounds")
    if data[:4] != MAGIC:
        raise BadMagic("bad magic")
    if data[4] != VERSION:
        raise UnsupportedVersion(f"version {data[4]}")
    cipher_id = data[5]
    allowed = ciphers.registry() if allowed_ciphers is None else allowed_ciphers
    if cipher_id not in allowed:
        raise UnavailableCipher(f"cipher {cipher_id}")
    user_len = data[6]
    off = 7 + user_len
    if user_len == 0 or off + 2 + MAC_LEN > n:
        raise MalformedPayload("bad user length")
    (ct_len,) = struct.unpack_from("!H", data, off)
    body_end = off + 2 + ct_len
    if body_end + MAC_LEN != n:
        raise MalformedPayload("declared length does not match packet")
    try:
        user_id = data[7:off].decode("ascii")
    except UnicodeDecodeError:
        raise MalformedPayload("user id not ASCII") from None
    key = ring.get(user_id)
    if key is None:
        raise UnknownUser(user_id)
    mac = data[body_end:]
    expect = hmac.new(key.hmac_key, data[:body_end], hashlib.sha256).digest()
    if not hmac.compare_digest(mac, expect):
        raise MacMismatch(user_id)
    try:
        pt = ciphers.get(cipher_id).open(key.enc_key, data[off + 2:body_end])
    except ciphers.CipherError as exc:
        raise DecryptFailure(str(exc)) from None
    return DecodedPacket(_parse_plaintext(pt), user_id, mac, cipher_id)


def randomized_port(hmac_key: bytes, stamp: MinuteStamp | int) -> int:
    minutes = int(stamp)
    d = hmac.new(hmac_key, struct.pack("!I", minutes), hashlib.sha256).digest()
    return 1024 + int.from_bytes(d[:8], "big") % 64512


def derive_keys(passphrase: str) -> tuple[bytes, bytes]:
    """(enc_key, hmac_key) from a passphrase: HMAC-SHA-256 keyed by the
    UTF-8 passphrase over the labels ``portknock-enc`` / ``portknock-hmac``."""
    pw = passphrase.encode("utf-8")
    return (hmac.new(pw, b"portknock-enc", hashlib.sha256).digest(),
            hmac.new(pw, b"portknock-hmac", hashlib.sha256).digest())


def key_from_passphrase(user_id: str, passphrase: str, allowed_ports=(),
                        allow_command: bool = False) -> KeyEntry:
    enc, mac = derive_keys(passphrase)
    return KeyEntry(user_id, enc, mac, frozenset(allowed_ports), allow_command)


# -- keyring text format ------------------------------------------------------
# user_id:enc_key_hex64:hmac_key_hex64:proto/port[,proto/port...]:cmd={0|1}

class KeyringError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ParseError(KeyringError):
    pass


class DuplicateUser(KeyringError):
    def __init__(self, user_id: str, line: int | None = None):
        self.user_id = user_id
        super().__init__(f"duplicate user {user_id!r}", line)


_HEX64 = re.compile(r"[0-9a-fA-F]{64}")


def _parse_ports(text: str) -> frozenset:
    ports = set()
    if not text:
        return frozenset()
    for item in text.split(","):
        proto, _, port = item.strip().partition("/")
        p = Protocol.parse(proto)
        if p is Protocol.ICMP or not port.isdigit() or int(port) > 0xFFFF:
            raise ValueError(f"bad port spec {item!r}")
        ports.add((p, int(port)))
    return frozenset(ports)


def load_keyring(text: str) -> dict[str, KeyEntry]:
    ring: dict[str, KeyEntry] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(":")
        if len(parts) != 5:
            raise ParseError("expected 5 ':'-separated fields", lineno)
        user, enc, mac, ports, cmd = parts
        if not (_HEX64.fullmatch(enc) and _HEX64.fullmatch(mac)):
            raise ParseError("keys must be 64 hex digits", lineno)
        if cmd not in ("cmd=0", "cmd=1"):
            raise ParseError(f"bad command flag {cmd!r}", lineno)
        try:
            entry = KeyEntry(user, bytes.fromhex(enc), bytes.fromhex(mac),
                             _parse_ports(ports), cmd == "cmd=1")
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if user in ring:
            raise DuplicateUser(user, lineno)
        ring[user] = entry
    return ring


def format_keyring(entries: Iterable[KeyEntry]) -> str:
    lines = []
    for k in entries:
        ports = ",".join(f"{p}/{n}" for p, n in sorted(k.allowed_ports, key=lambda x: (x[0].value, x[1])))
        lines.append(f"{k.user_id}:{k.enc_key.hex()}:{k.hmac_key.hex()}:{ports}:cmd={int(k.allow_command)}")
    return "\n".join(lines) + ("\n" if lines else "")
