import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portknock import spa
from portknock.attackers import (DictionaryAttacker, Flooder, ReplayEavesdropper, SequenceSpoofer,
                                 install_attacker, run_attacker, spoofed_source)
from portknock.core import Family, Protocol, SeededRng, normalize_address
from portknock.knock import KnockSequence
from portknock.netsim import (AttackerNode, ClientNode, Direction, LinkPolicy, NatBox, ResolverNode,
                              ResolveTimeout, ServerNode, SimNet, nat_translate, resolve_public_addr, run)
from portknock.packet import PacketEvent
from portknock.server import AuthServer, DecisionTag, ReplayStrategy, ServerConfig
from portknock.spa import BindMode, ServiceRequest

NOW = 1_700_000_000_000
SSH = ServiceRequest.open_port(Protocol.TCP, 22)
SEQ = KnockSequence(((Protocol.UDP, 7000), (Protocol.UDP, 8000), (Protocol.UDP, 9000)))


def world(seed=0, link=None, nat=False, **cfg):
    cfg.setdefault("spa_enabled", True)
    srv = AuthServer(ServerConfig(**cfg))
    key = srv.provision("alice", "password", {(Protocol.TCP, 22)})
    sim = SimNet(seed, NOW, link)
    server = sim.add_node(ServerNode("server", "198.51.100.1", srv))
    box = NatBox("203.0.113.9") if nat else None
    client = sim.add_node(ClientNode("client", "10.0.0.5" if nat else "198.51.100.7"), nat=box)
    sim.add_node(ResolverNode("resolver", "192.0.2.53"))
    attacker = sim.add_node(AttackerNode("attacker", "192.0.2.66"))
    return sim, srv, key, server, client, attacker


def send_spa(sim, client, server, key, bound=None):
    p = spa.build_payload(SSH, bound or sim.public_addr_of(client), BindMode.DECLARED_BY_CLIENT, sim.now_ms,
                          client.rng)
    data = spa.encode(p, key, 1, client.rng)
    return sim.emit(client, PacketEvent(client.addr, server.addr, Protocol.UDP, 5000, 62201, data))


def knocks(sim, client, server, ports=(7000, 8000, 9000), tags=False):
    for i, port in enumerate(ports):
        body = bytes([i]) if tags else b""
        sim.emit(client, PacketEvent(client.addr, server.addr, Protocol.UDP, 5000 + i, port, body))


def test_same_seed_same_trace():
    def once():
        sim, _, key, server, client, _ = world(3, LinkPolicy(drop_prob=0.3, dup_prob=0.3, reorder_prob=0.3))
        for _ in range(20):
            send_spa(sim, client, server, key)
        run(sim, NOW + 1000)
        return sim.render_trace()
    assert once() == once()


def test_different_seed_changes_random_choices():
    def once(seed):
        sim, _, key, server, client, _ = world(seed, LinkPolicy(drop_prob=0.5))
        for _ in range(40):
            send_spa(sim, client, server, key)
        sim.run(NOW + 1000)
        return sim.counts["dropped"]
    assert len({once(s) for s in range(5)}) > 1


def test_drop_all_delivers_nothing():
    sim, _, key, server, client, _ = world(0, LinkPolicy(drop_prob=1.0))
    for _ in range(10):
        send_spa(sim, client, server, key)
    sim.run(NOW + 1000)
    assert server.inbox == [] and sim.counts["dropped"] == 10


def test_reorder_one_swaps_two_knocks():
    sim, _, _, server, client, _ = world(0)
    sim.set_link("client", "server", LinkPolicy(reorder_prob=1.0))
    knocks(sim, client, server, (7000, 8000))
    sim.run(NOW + 100)
    assert [p.dst_port for p in server.inbox] == [8000, 7000]


def test_duplicate_delivers_twice():
    sim, _, _, server, client, _ = world(0, LinkPolicy(dup_prob=1.0))
    knocks(sim, client, server, (7000,))
    sim.run(NOW + 100)
    assert [p.dst_port for p in server.inbox] == [7000, 7000]


def test_bad_checksum_never_delivered():
    sim, _, _, server, client, _ = world(0)
    sim.emit(client, PacketEvent(client.addr, server.addr, Protocol.UDP, 1, 7000, b"", valid_checksum=False))
    sim.run(NOW + 100)
    assert server.inbox == []
    # a lenient link lets it through
    sim.set_link("client", None, LinkPolicy(checksum_strictness=False))
    sim.emit(client, PacketEvent(client.addr, server.addr, Protocol.UDP, 1, 7000, b"", valid_checksum=False))
    sim.run(NOW + 200)
    assert len(server.inbox) == 1


def test_events_ordered_by_time_then_insertion():
    sim = SimNet(0, 0)
    seen = []
    sim.schedule(10, lambda s: seen.append("b"))
    sim.schedule(5, lambda s: seen.append("a"))
    sim.schedule(10, lambda s: seen.append("c"))
    sim.run(20)
    assert seen == ["a", "b", "c"]
    with pytest.raises(ValueError):
        sim.schedule(1, lambda s: None)


def test_run_stops_at_horizon():
    sim = SimNet(0, 0)
    seen = []
    sim.schedule(10, lambda s: seen.append(10))
    sim.schedule(11, lambda s: seen.append(11))
    sim.run(10)
    assert seen == [10] and sim.now_ms == 10 and sim.queued() == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.integers(1, 30),
       st.integers(0, 40))
def test_conservation(seed, drop, dup, reorder, n, stop_at):
    sim, _, key, server, client, _ = world(seed, LinkPolicy(drop, dup, reorder, latency_ms=20))
    for i in range(n):
        sim.emit(client, PacketEvent(client.addr, server.addr, Protocol.UDP, 1, 1000 + i, b"", i % 7 != 3))
    sim.run(NOW + stop_at)
    assert sim.conserved()
    sim.run(NOW + 10_000)
    assert sim.conserved() and sim.queued() == 0


def test_permute_pending_hook():
    sim, _, _, server, client, _ = world(0)
    knocks(sim, client, server, (7000, 8000, 9000))
    sim.permute_pending("client", "server", [2, 0, 1])
    sim.run(NOW + 100)
    assert [p.dst_port for p in server.inbox] == [9000, 7000, 8000]
    assert sim.conserved()
    with pytest.raises(ValueError):
        sim.permute_pending("client", "server", [0])


# -- NAT ------------------------------------------------------------------------

def test_nat_translate_examples():
    nat = NatBox("203.0.113.9")
    inside = normalize_address("10.0.0.5")
    server = normalize_address("198.51.100.1")
    out = nat_translate(nat, PacketEvent(inside, server, Protocol.UDP, 4000, 53), Direction.OUTBOUND)
    assert out.src == nat.public_addr
    port = out.src_port
    assert nat.table[(inside, 4000)] == port
    back = nat_translate(nat, PacketEvent(server, nat.public_addr, Protocol.UDP, 53, port), Direction.INBOUND)
    assert (back.dst, back.dst_port) == (inside, 4000)
    assert nat_translate(nat, PacketEvent(server, nat.public_addr, Protocol.UDP, 53, port + 1),
                         Direction.INBOUND) is None


@given(st.lists(st.tuples(st.integers(1, 5), st.integers(1024, 1100)), max_size=60))
def test_nat_bijection(flows):
    nat = NatBox("203.0.113.9")
    dst = normalize_address("198.51.100.1")
    for host, port in flows:
        src = normalize_address(f"10.0.0.{host}")
        first = nat_translate(nat, PacketEvent(src, dst, Protocol.UDP, port, 1), Direction.OUTBOUND)
        again = nat_translate(nat, PacketEvent(src, dst, Protocol.UDP, port, 1), Direction.OUTBOUND)
        assert first.src_port == again.src_port
    assert len(set(nat.table.values())) == len(nat.table)
    assert {v: k for k, v in nat.table.items()} == nat.reverse


def test_private_host_unreachable_without_nat_mapping():
    sim, _, _, server, client, attacker = world(0, nat=True)
    sim.emit(attacker, PacketEvent(attacker.addr, client.addr, Protocol.UDP, 1, 1))
    sim.run(NOW + 100)
    assert client.inbox == []


def test_resolve_examples():
    sim, *_ , client, _ = world(0, nat=True)
    assert resolve_public_addr(sim, client) == normalize_address("203.0.113.9")
    sim2, *_, client2, _ = world(0)
    assert resolve_public_addr(sim2, client2) == client2.addr
    sim3, *_, client3, _ = world(0)
    sim3.set_link("client", "resolver", LinkPolicy(drop_prob=1.0))
    with pytest.raises(ResolveTimeout):
        resolve_public_addr(sim3, client3)


def test_spa_through_nat_grants_public_address():
    sim, srv, key, server, client, _ = world(0, nat=True)
    send_spa(sim, client, server, key)
    sim.run(NOW + 100)
    assert server.decisions[-1][2].rule.src == normalize_address("203.0.113.9")


def test_declared_private_address_denied():
    sim, srv, key, server, client, _ = world(0, nat=True)
    send_spa(sim, client, server, key, bound=client.addr)
    sim.run(NOW + 100)
    assert server.decisions[-1][2].reason == "deny"


# -- attackers --------------------------------------------------------------------

def test_replay_vs_timestamp_nonce_never_granted():
    sim, _, key, server, client, attacker = world(0)
    tap = sim.add_tap("client", server.addr)
    attack = install_attacker(sim, ReplayEavesdropper(1000), tap, attacker)
    send_spa(sim, client, server, key)
    sim.run(NOW + 10_000)
    rep = attack.report()
    assert rep.injected == 1 and not rep.granted


def test_spoofed_replay_vs_ip_binding_granted():
    sim, _, key, server, client, attacker = world(0, replay_strategy=ReplayStrategy.IP_BINDING)
    tap = sim.add_tap("client", server.addr)
    attack = install_attacker(sim, ReplayEavesdropper(5 * 60_000, client.addr), tap, attacker)
    send_spa(sim, client, server, key)
    sim.run(NOW + 10 * 60_000)
    rep = attack.report()
    assert rep.injected == 1 and rep.granted
    grants = [d for _, p, d in server.decisions if d.is_grant and p.origin == "attacker"]
    assert len(grants) == 1


def test_dictionary_attacker_recovers_password():
    sim, _, key, server, client, attacker = world(0)
    tap = sim.add_tap("client", server.addr)
    attack = install_attacker(sim, DictionaryAttacker(("letmein", "password", "qwerty")), tap, attacker)
    send_spa(sim, client, server, key)
    sim.run(NOW + 5000)
    rep = attack.report()
    assert rep.key_recovered == "password" and rep.granted


def test_dictionary_attacker_fails_on_strong_key():
    srv = AuthServer(ServerConfig())
    key = srv.provision("alice", "Zq8vT2mWc9Lr4xKp7Ns1", {(Protocol.TCP, 22)})
    sim = SimNet(0, NOW)
    server = sim.add_node(ServerNode("server", "198.51.100.1", srv))
    client = sim.add_node(ClientNode("client", "198.51.100.7"))
    attacker = sim.add_node(AttackerNode("attacker", "192.0.2.66"))
    tap = sim.add_tap("client", server.addr)
    attack = install_attacker(sim, DictionaryAttacker(("password",)), tap, attacker)
    send_spa(sim, client, server, key)
    sim.run(NOW + 5000)
    assert attack.report().key_recovered is None


def test_sequence_spoofer_denies_strict_victim():
    sim, srv, _, server, client, attacker = world(0, spa_enabled=False, pk_enabled=True, knock_sequences=(SEQ,))
    tap = sim.add_tap("client", server.addr)
    attack = install_attacker(sim, SequenceSpoofer(burst=1), tap, attacker)
    knocks(sim, client, server)
    sim.run(NOW + 1000)
    rep = attack.report()
    assert rep.victim_denied and not any(d.is_grant for _, _, d in server.decisions)


def test_flooder_respects_capacity_and_victim_still_gets_in():
    sim, srv, _, server, client, attacker = world(0, spa_enabled=False, pk_enabled=True, knock_sequences=(SEQ,),
                                                  tracker_capacity=64)
    sim.trace_enabled = False
    rep = run_attacker(sim, Flooder(1000, server.addr, Protocol.UDP, 7000), None, attacker, NOW + 1000)
    assert rep.tracker_peak == 64 and srv.tracker_size() <= 64
    knocks(sim, client, server)
    sim.run(NOW + 2000)
    assert server.decisions[-1][2].is_grant


def test_spoofed_sources_distinct():
    v4 = {spoofed_source(i, Family.V4) for i in range(5000)}
    v6 = {spoofed_source(i, Family.V6) for i in range(5000)}
    assert len(v4) == len(v6) == 5000
    assert all(a.family is Family.V4 for a in v4) and all(a.family is Family.V6 for a in v6)


def test_server_is_silent_on_invalid_input():
    sim, srv, key, server, client, attacker = world(0)
    junk = [b"", b"PKA1", SeededRng(1).bytes(200), b"PKA1\x01\x01\x05alice" + bytes(60)]
    for body in junk:
        sim.emit(attacker, PacketEvent(attacker.addr, server.addr, Protocol.UDP, 1, 62201, body))
    sim.emit(attacker, PacketEvent(attacker.addr, server.addr, Protocol.TCP, 1, 22))
    sim.run(NOW + 1000)
    assert all(d.tag is DecisionTag.DROP for _, _, d in server.decisions)
    assert sim.outbound_log["server"] == []
