from __future__ import annotations

import pytest

from dandelion.chain import EMPTY_MARKER
from dandelion.consensus import FINAL
from dandelion.netsim import NetConfig
from dandelion.node import STRATEGIES, NodeConfig
from dandelion.simulation import PartitionSpec, Scenario, Simulation

NET = NetConfig.bundled(bandwidth_bps=2e6)


def _sim(n=30, mode="dandelion", Cl=4, size=100_000, seed=1, **kw) -> Simulation:
    return Simulation(Scenario(n_nodes=n, node=NodeConfig(mode=mode, Cl=Cl, macroblock_size=size), net=NET,
                               seed=seed, **kw))


def _heads(s: Simulation, nodes=None):
    return {tuple(s.final_hashes()[nd.id]) for nd in (nodes or s.honest)}


@pytest.mark.parametrize("mode, Cl", [("algorand", 1), ("dandelion", 4)])
def test_honest_network_agrees_and_finalizes(mode, Cl):
    s = _sim(mode=mode, Cl=Cl)
    s.run(3)
    assert len(_heads(s)) == 1
    assert s.agreement_violations() == 0 and s.conflicting_finals() == 0
    assert {r.kind for r in s.records} == {FINAL}
    for r in s.records:
        assert r.blocks_in_macroblock <= Cl
        assert r.bytes_appended <= 100_000 and r.end_us > r.start_us
    assert all(nd.chain.height == 3 for nd in s.nodes)


def test_same_seed_same_run():
    a, b = _sim(seed=4), _sim(seed=4)
    a.run(2)
    b.run(2)
    assert a.final_hashes() == b.final_hashes()
    assert [(r.node_id, r.round, r.end_us) for r in a.records] == [(r.node_id, r.round, r.end_us) for r in b.records]
    c = _sim(seed=5)
    c.run(2)
    assert c.final_hashes() != a.final_hashes()


def test_missing_bodies_are_fetched_from_peers():
    s = _sim(n=20)
    target = 5
    arrive = s.net._arrive

    def drop_gossiped_blocks(src, dst, msg):
        if dst == target and msg.kind == "block":
            return
        arrive(src, dst, msg)

    s.net._arrive = drop_gossiped_blocks
    s.run(2)
    assert len(_heads(s)) == 1
    assert s.net.sent_by_kind.get("block_request", 0) > 0
    assert s.net.sent_by_kind.get("block_response", 0) > 0
    assert any(r.blocks_in_macroblock for r in s.nodes[target].records)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_byzantine_minority_cannot_break_safety(strategy):
    s = _sim(n=40, Cl=4, seed=3, byzantine_fraction=0.2, strategy=strategy)
    s.run(2, max_sim_seconds=2000)
    assert all(nd.chain.height >= 2 for nd in s.honest)
    assert s.agreement_violations() == 0 and s.conflicting_finals() == 0
    assert s.world.invalid_accepted == 0
    assert len(s.byzantine) == 8


def test_duplicate_tx_attempts_never_land():
    s = _sim(n=40, Cl=4, seed=3, byzantine_fraction=0.2, strategy="duplicate_tx")
    s.run(2, max_sim_seconds=2000)
    attempts = {bytes(h) for h in s.world.invalid_attempts}
    in_chain = {bytes(b.block_hash) for nd in s.honest for e in nd.chain.entries[1:] for b in e.macroblock.blocks}
    assert attempts and not attempts & in_chain


def test_partition_heals_to_final():
    s = _sim(n=40, seed=2, partition=PartitionSpec(0.72, 0, 60))
    s.run(1, max_sim_seconds=3000)
    assert any(not nd.chain.is_confirmed(1) for nd in s.honest)
    s.run(4, max_sim_seconds=3000)
    assert s.conflicting_finals() == 0 and len(_heads(s)) == 1
    assert all(nd.chain.is_confirmed(1) and nd.chain.unconfirmed_rounds() == [] for nd in s.honest)


def test_config_validation():
    with pytest.raises(ValueError):
        NodeConfig(mode="algorand", Cl=4)
    with pytest.raises(ValueError):
        NodeConfig(mode="other")
    with pytest.raises(ValueError):
        NodeConfig(lambda_block=0)
    with pytest.raises(ValueError):
        Scenario(byzantine_fraction=0.2, strategy="nope")
    with pytest.raises(ValueError):
        Scenario(n_nodes=1)
    assert NodeConfig(Cl=3, macroblock_size=1_000_000).block_budget == 333_333


def test_empty_marker_for_unfilled_slots():
    s = _sim(n=20, Cl=32, size=320_000)
    s.run(1)
    mb = s.honest[0].chain.entries[1].macroblock
    assert len(mb.hash_vector) == 32
    filled = [h for h in mb.hash_vector if h != EMPTY_MARKER]
    assert len(filled) == len(mb.blocks)
