"""Assembles keys, stake, topology, network and nodes into one runnable simulation."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .crypto_sim import KeyPair
from .netsim import NetConfig, Network, Partition, Simulator, Topology, seconds
from .node import HONEST, STRATEGIES, Node, NodeConfig, World
from .sortition import StakeTable

@dataclass
class PartitionSpec:
    """Split nodes so that ``first_share`` of them form group A for [start_s, end_s)."""

    first_share: float
    start_s: float
    end_s: float


@dataclass
class Scenario:
    n_nodes: int = 100
    node: NodeConfig = field(default_factory=NodeConfig)
    net: NetConfig = field(default_factory=NetConfig)
    seed: int = 0
    byzantine_fraction: float = 0.0
    strategy: str | None = None
    partition: PartitionSpec | None = None

    def __post_init__(self) -> None:
        if self.n_nodes < 2:
            raise ValueError("need at least two nodes")
        if not 0 <= self.byzantine_fraction < 1:
            raise ValueError("byzantine fraction must lie in [0, 1)")
        if self.byzantine_fraction and self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; pick one of {STRATEGIES}")


class Simulation:
    def __init__(self, sc: Scenario):
        self.scenario = sc
        n = sc.n_nodes
        rng = random.Random(sc.seed)
        self.sim = Simulator()
        self.keys = [KeyPair.generate(i, sc.seed) for i in range(n)]
        stakes = StakeTable.equal(range(n), sc.node.stake_per_node)
        if stakes.total_W < sc.node.committee.tau_final:
            raise ValueError("total stake must be at least tau_final; raise stake_per_node")
        self.topology = Topology.build(n, sc.net, rng)
        tags = {k.node_id: bytes(k.public_tag) for k in self.keys}
        self.net = Network(self.sim, self.topology, sc.net, seed=rng.getrandbits(32), public_tags=tags)
        self.world = World(sc.node, self.keys, stakes, self.net, seed=rng.getrandbits(32))
        n_byz = int(round(sc.byzantine_fraction * n))
        byz = set(rng.sample(range(n), n_byz)) if n_byz else set()
        self.byzantine = sorted(byz)
        self.nodes = [Node(i, self.world, sc.strategy if i in byz else HONEST) for i in range(n)]
        self.honest = [nd for nd in self.nodes if nd.honest]
        self.net.attach(self.nodes)
        self.net.non_relaying = {nd.id for nd in self.nodes if nd.strategy == "silent"}
        if sc.partition is not None:
            ids = list(range(n))
            random.Random(sc.seed + 1).shuffle(ids)
            k = int(round(sc.partition.first_share * n))
            self.net.partition = Partition([set(ids[:k]), set(ids[k:])], seconds(sc.partition.start_s),
                                           seconds(sc.partition.end_s))
        self.world.nodes = self.nodes
        self.world.on_append = self._appended
        self.sim.diagnostics = self._diagnostics
        self._target = 0
        self._reached = 0
        self._pruned_round = 0

    def _appended(self, node: Node, mb, kind: str) -> None:
        if mb.round > self._pruned_round + 1:
            low = min(nd.round for nd in self.nodes if nd.strategy != "silent")
            if low - 1 > self._pruned_round:
                self._pruned_round = low - 1
                self.world.board.forget_before(self._pruned_round)
                for r in [r for r in self.world.in_proposal if r < self._pruned_round]:
                    del self.world.in_proposal[r]
        if node.honest and node.chain.height == self._target:
            self._reached += 1
            if self._reached == len(self.honest):
                self.sim.stop()

    def _diagnostics(self) -> str:
        return "\n".join(nd.diagnostics() for nd in self.nodes[:20])

    def run(self, rounds: int, max_sim_seconds: float | None = None) -> None:
        """Run until every honest node has appended ``rounds`` macroblocks."""
        self._target = rounds
        self._reached = sum(1 for nd in self.honest if nd.chain.height >= rounds)
        if self._reached == len(self.honest):
            return
        if self.sim.now == 0 and all(nd.round == 0 for nd in self.nodes):
            for nd in self.nodes:
                self.sim.at(0, nd.start_round, 1)
        until = seconds(max_sim_seconds) if max_sim_seconds is not None else None
        self.sim.run_until(until=until, condition=None if until is not None else lambda: False)

    @property
    def records(self):
        return self.world.records

    def final_hashes(self) -> dict[int, list[bytes]]:
        return {nd.id: [bytes(h) for h in nd.chain.head_hashes()] for nd in self.nodes}

    def conflicting_finals(self) -> int:
        """Rounds where two honest nodes hold different macroblocks and at least one is final."""
        bad = 0
        for r, per_node in self.world.decisions.items():
            finals = {h for h, kind in per_node.values() if kind == "final"}
            if len(finals) > 1 or (finals and len({h for h, _ in per_node.values()}) > 1):
                bad += 1
        return bad

    def agreement_violations(self) -> int:
        return sum(1 for per_node in self.world.decisions.values()
                   if len({h for h, _ in per_node.values()}) > 1)
