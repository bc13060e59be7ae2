"""Command line entry point.

Exit codes: 0 success, 2 input error, 3 evaluation inconsistency.
Everything runs against the simulator; nothing touches real sockets.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import ciphers, evaluator, spa
from .core import MalformedAddress, Protocol, SeededRng, normalize_address
from .knock import KnockMode, derive_ports
from .netsim import ClientNode, NatBox, ResolveTimeout, ResolverNode, SimNet, resolve_public_addr
from .script import ScriptError, run_script
from .server import AuthServer, ConfigError, parse_config
from .spa import BindMode, ServiceRequest

log = logging.getLogger("portknock")

EXIT_OK, EXIT_INPUT, EXIT_INCONSISTENT = 0, 2, 3
DEFAULT_START_MS = 1_700_000_000_000


class InputError(Exception):
    """Bad user input; reported on stderr with exit status 2."""


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


def _write(path: str | None, data: str | bytes) -> None:
    if path is None or path == "-":
        if isinstance(data, bytes):
            sys.stdout.buffer.write(data)
        else:
            sys.stdout.write(data)
        return
    try:
        if isinstance(data, bytes):
            Path(path).write_bytes(data)
        else:
            Path(path).write_text(data)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


def _load_keyring(path: str) -> dict:
    try:
        return spa.load_keyring(_read(path))
    except spa.KeyringError as exc:
        raise InputError(f"{path}: {exc}") from None


def _load_server(config_path: str, keyring_path: str) -> AuthServer:
    keyring = _load_keyring(keyring_path)
    try:
        config = parse_config(_read(config_path), keyring)
    except ConfigError as exc:
        raise InputError(f"{config_path}: {exc}") from None
    return AuthServer(config)


def _play(args, script_text: str, base_dir: Path):
    server = _load_server(args.config, args.keyring)
    try:
        sim = run_script(server, script_text, seed=args.seed, start_ms=args.start_ms,
                         base_dir=base_dir, until_ms=args.until)
    except ScriptError as exc:
        raise InputError(f"script: {exc}") from None
    return server, sim


# -- commands -----------------------------------------------------------------

def cmd_serve(args) -> int:
    if args.script:
        text, base = _read(args.script), Path(args.script).parent
    else:
        text, base = sys.stdin.read(), Path(".")
    server, _ = _play(args, text, base)
    _write(args.trace, "".join(r.line() + "\n" for r in server.log))
    return EXIT_OK


def cmd_simulate(args) -> int:
    server, sim = _play(args, _read(args.script), Path(args.script).parent)
    _write(args.trace, sim.render_trace())
    if args.log:
        _write(args.log, "".join(r.line() + "\n" for r in server.log))
    return EXIT_OK


def _parse_knock_list(text: str) -> list[tuple[Protocol, int]]:
    out = []
    for item in text.split(","):
        proto, _, port = item.strip().partition("/")
        try:
            p = Protocol.parse(proto)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        if not port.isdigit() or int(port) > 0xFFFF or p is Protocol.ICMP:
            raise InputError(f"bad knock {item!r}, expected udp/PORT or tcp/PORT")
        out.append((p, int(port)))
    return out


def cmd_knock(args) -> int:
    if args.sequence:
        knocks = _parse_knock_list(args.sequence)
    else:
        ring = _load_keyring(args.key_file)
        key = ring.get(args.user)
        if key is None:
            raise InputError(f"{args.key_file}: no entry for user {args.user!r}")
        epoch = args.now_ms // 60_000 if args.rotate else 0
        proto = Protocol.parse(args.protocol)
        knocks = [(proto, p) for p in derive_ports(key.hmac_key, epoch, args.length)]
    if not 3 <= len(knocks) <= 16:
        raise InputError("a knock sequence has 3 to 16 knocks")
    lines = []
    for i, (proto, port) in enumerate(knocks):
        tag = f" tag={i}" if args.mode is KnockMode.SEQUENCE_TAGGED and proto is Protocol.UDP else ""
        lines.append(f"at {args.start + i * args.spacing} {args.node} knock {proto}/{port}{tag}\n")
    _write(args.out, "".join(lines))
    return EXIT_OK


def cmd_spa_send(args) -> int:
    ring = _load_keyring(args.key_file)
    key = ring.get(args.user)
    if key is None:
        raise InputError(f"{args.key_file}: no entry for user {args.user!r}")
    try:
        ciphers.get(args.cipher)
    except ciphers.CipherUnavailable as exc:
        raise InputError(f"CipherUnavailable: {exc}") from None
    try:
        request = ServiceRequest.parse(args.request)
    except ValueError as exc:
        raise InputError(f"--request: {exc}") from None
    rng = SeededRng(args.seed)
    if args.auto_resolve:
        # ambient simulation: this client (optionally NATed) plus a resolver
        sim = SimNet(args.seed, args.now_ms)
        nat = NatBox(args.nat_public) if args.nat_public else None
        client = sim.add_node(ClientNode("client", args.client_addr), nat=nat)
        sim.add_node(ResolverNode("resolver", args.resolver_addr))
        try:
            bound = resolve_public_addr(sim, client)
        except ResolveTimeout as exc:
            raise InputError(str(exc)) from None
        mode = BindMode.SERVER_OBSERVED
    else:
        bound = args.declare_addr or args.client_addr
        mode = BindMode.DECLARED_BY_CLIENT
    payload = spa.build_payload(request, bound, mode, args.now_ms, rng)
    data = spa.encode(payload, key, args.cipher, rng)
    _write(args.out, data)
    log.info("wrote %d-byte SPA packet for %s bound to %s", len(data), args.user, bound)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.profiles == "builtin":
        profiles = evaluator.builtin_profiles()
    else:
        try:
            profiles = evaluator.parse_profiles(_read(args.profiles))
        except evaluator.ProfileError as exc:
            raise InputError(f"{args.profiles}: {exc}") from None
    cards = []
    bad = []
    for p in profiles:
        try:
            cards.append(evaluator.score(p, evaluator.run_scenarios(p, args.seed)))
        except evaluator.InconsistentProfile as exc:
            bad.append(exc)
    for exc in bad:
        print(f"InconsistentProfile: {exc}", file=sys.stderr)
    if bad:
        return EXIT_INCONSISTENT
    if len(cards) == 1:
        comp = evaluator.Comparison(cards, [(cards[0].name, round(cards[0].mean, 1))])
    else:
        comp = evaluator.compare(cards)
    render = evaluator.render_csv if args.format == "csv" else evaluator.render_table
    _write(args.out, render(comp))
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _address(text: str):
    try:
        return normalize_address(text)
    except MalformedAddress as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _nonneg(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="server config file (key = value lines)")
    p.add_argument("--keyring", required=True, help="keyring file")
    p.add_argument("--seed", type=_nonneg, default=0, help="simulator seed (default 0)")
    p.add_argument("--start-ms", type=_nonneg, default=DEFAULT_START_MS,
                   help=f"simulated wall clock at script time 0 (default {DEFAULT_START_MS})")
    p.add_argument("--until", type=_nonneg, default=None,
                   help="stop this many ms after the start (default: last event + 60 s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portknock", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = sub.add_parser("serve", parents=[common], help="run a simulated server fed by a script on stdin")
    _sim_flags(p)
    p.add_argument("--trace", required=True, help="where to write the decision log ('-' for stdout)")
    p.add_argument("--script", help="read the script from this file instead of stdin")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("simulate", parents=[common], help="run a scenario script and write the full network trace")
    _sim_flags(p)
    p.add_argument("--script", required=True, help="scenario script file")
    p.add_argument("--trace", default="-", help="trace output (default stdout)")
    p.add_argument("--log", help="also write the server decision log here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("knock", parents=[common], help="print script lines that perform a knock sequence")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--sequence", help="explicit knocks, e.g. udp/7000,udp/8000,udp/9000")
    src.add_argument("--key-file", help="derive the ports from this keyring's entry for --user")
    p.add_argument("--user", help="keyring user for --key-file")
    p.add_argument("--protocol", choices=("udp", "tcp"), default="udp", help="protocol of derived knocks")
    p.add_argument("--length", type=int, default=3, help="number of derived knocks (3..16)")
    p.add_argument("--rotate", action="store_true", help="derive for the minute of --now-ms")
    p.add_argument("--now-ms", type=_nonneg, default=DEFAULT_START_MS, help="clock used with --rotate")
    p.add_argument("--mode", type=KnockMode, choices=list(KnockMode), default=KnockMode.STRICT_ORDER,
                   metavar="{strict,tagged}", help="tagged adds a 1-byte index to UDP knocks")
    p.add_argument("--node", default="client", help="script node that sends the knocks")
    p.add_argument("--start", type=_nonneg, default=0, help="time of the first knock (ms)")
    p.add_argument("--spacing", type=_nonneg, default=1, help="gap between knocks (ms)")
    p.add_argument("--out", default="-", help="output file (default stdout)")
    p.set_defaults(func=cmd_knock)

    p = sub.add_parser("spa-send", parents=[common], help="encode one SPA packet to a file")
    p.add_argument("--user", required=True)
    p.add_argument("--key-file", required=True, help="keyring file holding the user's keys")
    p.add_argument("--cipher", type=int, default=ciphers.AES_256_CBC,
                   help="cipher id: 1 aes-cbc, 2 aes-gcm, 3 chacha20-poly1305, 4 twofish-cbc, 5 serpent-cbc")
    p.add_argument("--request", default="tcp/22", help="proto/port to open, or cmd:<text>")
    bind = p.add_mutually_exclusive_group()
    bind.add_argument("--declare-addr", type=_address, help="address to bind the grant to")
    bind.add_argument("--auto-resolve", action="store_true",
                      help="learn the public address from a simulated resolver first")
    p.add_argument("--client-addr", type=_address, default=_address("198.51.100.7"),
                   help="this client's own address (default 198.51.100.7)")
    p.add_argument("--nat-public", type=_address, help="with --auto-resolve: public address of a NAT in front")
    p.add_argument("--resolver-addr", type=_address, default=_address("192.0.2.53"),
                   help="with --auto-resolve: resolver address (default 192.0.2.53)")
    p.add_argument("--now-ms", type=_nonneg, default=DEFAULT_START_MS, help="timestamp source")
    p.add_argument("--seed", type=_nonneg, default=0, help="seed for IV and nonce")
    p.add_argument("--out", required=True, help="output file for the packet bytes")
    p.set_defaults(func=cmd_spa_send)

    p = sub.add_parser("eval", parents=[common], help="score capability profiles and compare them")
    p.add_argument("--profiles", default="builtin", help="'builtin' or a profile file")
    p.add_argument("--seed", type=_nonneg, default=0)
    p.add_argument("--format", choices=("csv", "table"), default="table")
    p.add_argument("--out", default="-", help="output file (default stdout)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "knock" and args.key_file and not args.user:
        parser.error("knock --key-file needs --user")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"portknock {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
