"""Line-based scenario scripts for the simulator.

Declarations (before or between events, order-independent)::

    node <name> <client|attacker|resolver> <addr> [nat=<public addr>]
    link <src node> <dst node|addr|*> [drop=P] [dup=P] [reorder=P] [latency=MS] [strict=0|1]

Events, ``<ms>`` counted from the simulation start::

    at <ms> <node> knock <proto>/<port> [tag=N] [src=ADDR]
    at <ms> <node> spa <user> <request> [cipher=N] [declare=ADDR|auto] [via=udp|tcp|icmp] [port=N]
    at <ms> <node> send <proto>/<port> [hex=BYTES | file=PATH] [src=ADDR] [badsum]
    at <ms> <node> connect <proto>/<port>
    at <ms> <node> permute <dst node> <i,j,...>

A node named ``server`` always exists and runs the configured server. The
``spa`` action builds a packet from the server's keyring entry for ``user``,
i.e. the client holds the same shared key. ``#`` starts a comment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from . import spa
from .core import MalformedAddress, NetAddress, Protocol, normalize_address
from .netsim import (AttackerNode, ClientNode, LinkPolicy, NatBox, ResolveTimeout, ResolverNode,
                     ServerNode, SimNet, resolve_public_addr)
from .packet import PacketEvent
from .server import AuthServer
from .spa import BindMode, ServiceRequest

log = logging.getLogger(__name__)

_ROLES = {"client": ClientNode, "attacker": AttackerNode, "resolver": ResolverNode}
_ACTIONS = ("knock", "spa", "send", "connect", "permute")


class ScriptError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Action:
    at_ms: int
    node: str
    verb: str
    args: tuple
    opts: dict
    line: int


@dataclass
class Script:
    nodes: list
    links: list
    actions: list


def _options(tokens, line):
    args, opts = [], {}
    for tok in tokens:
        key, eq, value = tok.partition("=")
        if eq:
            if key in opts:
                raise ScriptError(f"duplicate option {key!r}", line)
            opts[key] = value
        elif tok == "badsum":
            opts["badsum"] = "1"
        else:
            args.append(tok)
    return tuple(args), opts


def _addr(text, line) -> NetAddress:
    try:
        return normalize_address(text)
    except MalformedAddress as exc:
        raise ScriptError(str(exc), line) from None


def _proto_port(text, line) -> tuple[Protocol, int]:
    proto, _, port = text.partition("/")
    try:
        p = Protocol.parse(proto)
    except ValueError as exc:
        raise ScriptError(str(exc), line) from None
    if not port.isdigit() or int(port) > 0xFFFF:
        raise ScriptError(f"bad port in {text!r}", line)
    return p, int(port)


def _prob(opts, key, line) -> float:
    try:
        v = float(opts.get(key, 0.0))
    except ValueError:
        raise ScriptError(f"{key} must be a number", line) from None
    if not 0.0 <= v <= 1.0:
        raise ScriptError(f"{key} must be in [0, 1]", line)
    return v


def parse_script(text: str) -> Script:
    nodes, links, actions = [], [], []
    names = {"server"}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        head = words[0]
        if head == "node":
            args, opts = _options(words[1:], lineno)
            if len(args) != 3 or args[1] not in _ROLES or set(opts) - {"nat"}:
                raise ScriptError("expected: node <name> <client|attacker|resolver> <addr> [nat=ADDR]", lineno)
            if args[0] in names:
                raise ScriptError(f"duplicate node {args[0]!r}", lineno)
            names.add(args[0])
            nat = _addr(opts["nat"], lineno) if "nat" in opts else None
            nodes.append((args[0], args[1], _addr(args[2], lineno), nat, lineno))
        elif head == "link":
            args, opts = _options(words[1:], lineno)
            unknown = set(opts) - {"drop", "dup", "reorder", "latency", "strict"}
            if len(args) != 2 or unknown:
                raise ScriptError("expected: link <src> <dst|*> [drop=P] [dup=P] [reorder=P] [latency=MS] [strict=0|1]",
                                  lineno)
            latency = opts.get("latency", "10")
            if not latency.isdigit():
                raise ScriptError("latency must be a non-negative integer", lineno)
            if opts.get("strict", "1") not in ("0", "1"):
                raise ScriptError("strict must be 0 or 1", lineno)
            policy = LinkPolicy(_prob(opts, "drop", lineno), _prob(opts, "dup", lineno),
                                _prob(opts, "reorder", lineno), int(latency), opts.get("strict", "1") == "1")
            links.append((args[0], args[1], policy, lineno))
        elif head == "at":
            if len(words) < 4 or not words[1].isdigit():
                raise ScriptError("expected: at <ms> <node> <action> ...", lineno)
            verb = words[3]
            if verb not in _ACTIONS:
                raise ScriptError(f"unknown action {verb!r}", lineno)
            args, opts = _options(words[4:], lineno)
            actions.append(Action(int(words[1]), words[2], verb, args, opts, lineno))
            _check_action(actions[-1])
        else:
            raise ScriptError(f"unknown statement {head!r}", lineno)

    for src, dst, _, lineno in links:
        if src not in names:
            raise ScriptError(f"unknown node {src!r}", lineno)
    for act in actions:
        if act.node not in names or act.node == "server":
            raise ScriptError(f"unknown or non-client node {act.node!r}", act.line)
    return Script(nodes, links, actions)


def _check_action(a: Action) -> None:
    line = a.line
    allowed = {"knock": {"tag", "src"}, "spa": {"cipher", "declare", "via", "port"},
               "send": {"hex", "file", "src", "badsum"}, "connect": set(), "permute": set()}[a.verb]
    extra = set(a.opts) - allowed
    if extra:
        raise ScriptError(f"unknown option(s) for {a.verb}: {', '.join(sorted(extra))}", line)
    want = {"knock": 1, "spa": 2, "send": 1, "connect": 1, "permute": 2}[a.verb]
    if len(a.args) != want:
        raise ScriptError(f"{a.verb} takes {want} argument(s)", line)
    if a.verb in ("knock", "send", "connect"):
        _proto_port(a.args[0], line)
    if a.verb == "knock" and "tag" in a.opts and not (a.opts["tag"].isdigit() and int(a.opts["tag"]) <= 255):
        raise ScriptError("tag must be 0..255", line)
    if a.verb == "spa":
        try:
            ServiceRequest.parse(a.args[1])
        except ValueError as exc:
            raise ScriptError(str(exc), line) from None
        if "cipher" in a.opts and not a.opts["cipher"].isdigit():
            raise ScriptError("cipher must be a number", line)
    if a.verb == "send" and "hex" in a.opts:
        try:
            bytes.fromhex(a.opts["hex"])
        except ValueError:
            raise ScriptError("hex payload is not valid hex", line) from None
    if a.verb == "permute":
        try:
            [int(x) for x in a.args[1].split(",")]
        except ValueError:
            raise ScriptError("permutation must be comma-separated integers", line) from None


class ScriptRunner:
    """Builds a SimNet around ``server`` from a parsed script and plays it."""

    def __init__(self, server: AuthServer, script: Script, seed: int = 0, start_ms: int = 0,
                 base_dir: Path | None = None):
        self.server = server
        self.script = script
        self.base_dir = base_dir or Path(".")
        self.sim = SimNet(seed, start_ms)
        sim = self.sim
        sim.add_node(ServerNode("server", server.config.server_addr, server))
        nats: dict[NetAddress, NatBox] = {}
        for name, role, addr, nat_addr, line in script.nodes:
            nat = None
            if nat_addr is not None:
                nat = nats.setdefault(nat_addr, NatBox(nat_addr))
            try:
                sim.add_node(_ROLES[role](name, addr), nat=nat)
            except ValueError as exc:
                raise ScriptError(str(exc), line) from None
        for src, dst, policy, line in script.links:
            target = None if dst == "*" else dst
            try:
                sim.set_link(src, target, policy)
            except MalformedAddress as exc:
                raise ScriptError(str(exc), line) from None
        for act in script.actions:
            sim.schedule(start_ms + act.at_ms, self._perform, act)

    def run(self, until_ms: int | None = None):
        last = max((a.at_ms for a in self.script.actions), default=0)
        horizon = self.sim.now_ms + last + 60_000 if until_ms is None else self.sim.clock.now_ms + until_ms
        return self.sim.run(horizon)

    def _perform(self, sim: SimNet, act: Action) -> None:
        node = sim.node(act.node)
        server = sim.node("server").addr
        line = act.line
        if act.verb == "permute":
            try:
                sim.permute_pending(act.node, act.args[0], [int(x) for x in act.args[1].split(",")])
            except (ValueError, KeyError) as exc:
                raise ScriptError(str(exc), line) from None
            return
        if act.verb == "spa":
            self._send_spa(sim, node, server, act)
            return
        proto, port = _proto_port(act.args[0], line)
        src = _addr(act.opts["src"], line) if "src" in act.opts else node.addr
        payload = b""
        valid = True
        if act.verb == "knock":
            if "tag" in act.opts:
                payload = bytes([int(act.opts["tag"])])
        elif act.verb == "send":
            if "hex" in act.opts:
                payload = bytes.fromhex(act.opts["hex"])
            elif "file" in act.opts:
                path = self.base_dir / act.opts["file"]
                try:
                    payload = path.read_bytes()
                except OSError as exc:
                    raise ScriptError(f"cannot read {path}: {exc.strerror}", line) from None
            valid = "badsum" not in act.opts
        sim.emit(node, PacketEvent(src, server, proto, node.ephemeral_port(), port, payload, valid))

    def _send_spa(self, sim, node, server, act: Action) -> None:
        line = act.line
        user, request = act.args
        key = self.server.keyring.get(user)
        if key is None:
            raise ScriptError(f"no key for user {user!r}", line)
        cipher = int(act.opts.get("cipher", self.server.config.ciphers[0]))
        declare = act.opts.get("declare")
        mode = BindMode.DECLARED_BY_CLIENT
        if declare == "auto":
            try:
                bound = resolve_public_addr(sim, node)
            except ResolveTimeout as exc:
                raise ScriptError(str(exc), line) from None
            mode = BindMode.SERVER_OBSERVED
        elif declare is not None:
            bound = _addr(declare, line)
        else:
            bound = node.addr
        payload = spa.build_payload(ServiceRequest.parse(request), bound, mode, sim.now_ms, node.rng)
        try:
            data = spa.encode(payload, key, cipher, node.rng)
        except spa.CipherUnavailable as exc:
            raise ScriptError(str(exc), line) from None
        via = Protocol.parse(act.opts.get("via", "udp"))
        cfg = self.server.config
        if "port" in act.opts:
            port = int(act.opts["port"])
        elif via is Protocol.ICMP:
            port = 0
        elif cfg.spa_port == "randomized":
            port = spa.randomized_port(key.hmac_key, sim.clock.stamp())
        else:
            port = cfg.spa_port
        sim.emit(node, PacketEvent(node.addr, server, via, node.ephemeral_port(), port, data))


def run_script(server: AuthServer, text: str, seed: int = 0, start_ms: int = 0,
               base_dir: Path | None = None, until_ms: int | None = None) -> SimNet:
    runner = ScriptRunner(server, parse_script(text), seed, start_ms, base_dir)
    runner.run(until_ms)
    return runner.sim
