"""Deterministic discrete-event network with gossip, egress caps and latency.

Time is an integer number of microseconds. Every node owns one egress link
(``Uplink``) shaped to a fixed bandwidth: bulk messages serialize one after
another, oldest round first and breadth-first within a round (every queued
message gets its k-th copy out before any gets its (k+1)-th), small control messages (priority announcements, block
requests) take a preemptive lane that pushes the bulk transfer in progress back
by their own serialization time, so the byte budget is never exceeded. Ingress
is unbounded.

Votes are numerous and tiny, so instead of hop-by-hop relaying they are
*flooded*: every receiver gets the vote at the send time plus its
shortest-path distance over the relaying peer graph.

Topology / latency config files use ``key=value`` lines (``#`` comments)::

    bandwidth_mbps=20            outbound_peers=4
    base_latency_ms=50           jitter_ms=5
    nodes_per_machine=100        control_max_bytes=1024
    vote_bytes=250
    cities=a,b,c
    latency.a.b=12.5             # symmetric one-way ms, same city = 0

Trace lines are ``time_us,event_kind,from,to,size,dedup_id``.
"""

from __future__ import annotations

import heapq
import itertools
import math
import random
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .crypto_sim import KeyPair, hash_concat, sign, verify_sig

US = 1_000_000


def seconds(x: float) -> int:
    return int(round(x * US))


def ms(x: float) -> int:
    return int(round(x * 1000))


class Deadlock(RuntimeError):
    pass


class Simulator:
    """Priority-queue event loop ordered by (time, insertion sequence)."""

    def __init__(self) -> None:
        self.now = 0
        self._heap: list[list] = []
        self._seq = itertools.count()
        self.events_processed = 0
        self.trace: list[str] | None = None
        self.diagnostics: Callable[[], str] | None = None
        self._stopped = False

    def at(self, time_us: int, fn, *args) -> list:
        if time_us < self.now:
            raise ValueError(f"cannot schedule in the past ({time_us} < {self.now})")
        entry = [time_us, next(self._seq), fn, args]
        heapq.heappush(self._heap, entry)
        return entry

    def after(self, delay_us: int, fn, *args) -> list:
        return self.at(self.now + delay_us, fn, *args)

    @staticmethod
    def cancel(entry: list | None) -> None:
        if entry is not None:
            entry[2] = None

    def stop(self) -> None:
        self._stopped = True

    def log(self, kind: str, src: int, dst: int, size: int, dedup: bytes) -> None:
        if self.trace is not None:
            self.trace.append(f"{self.now},{kind},{src},{dst},{size},{bytes(dedup).hex()[:16]}")

    def pending(self) -> int:
        return sum(1 for e in self._heap if e[2] is not None)

    def run_until(self, until: int | None = None, condition: Callable[[], bool] | None = None) -> int:
        """Dispatch events in order until ``until``, ``condition()`` or :meth:`stop`.

        Running out of events before a condition holds is a deadlock.
        """
        heap = self._heap
        pop = heapq.heappop
        self._stopped = False
        while heap:
            if until is not None and heap[0][0] > until:
                break
            t, _, fn, args = pop(heap)
            if fn is None:
                continue
            self.now = t
            fn(*args)
            self.events_processed += 1
            if self._stopped or (condition is not None and condition()):
                return self.now
        else:
            if condition is not None and until is None:
                dump = self.diagnostics() if self.diagnostics else ""
                raise Deadlock(f"event queue drained at t={self.now}us before condition held\n{dump}")
        if until is not None and until > self.now:
            self.now = until
        return self.now


def _load_kv(text: str) -> dict[str, str]:
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass(frozen=True)
class NetConfig:
    bandwidth_bps: float = 20e6
    base_latency_ms: float = 50.0
    jitter_ms: float = 5.0
    outbound_peers: int = 4
    nodes_per_machine: int | None = None
    control_max_bytes: int = 1024
    vote_bytes: int = 250
    cities: tuple[str, ...] = ()
    city_latency_ms: dict = field(default_factory=dict, compare=False, hash=False)

    @classmethod
    def from_text(cls, text: str, base: NetConfig | None = None) -> NetConfig:
        kv = _load_kv(text)
        cfg = base or cls()
        updates: dict = {}
        lat = dict(cfg.city_latency_ms)
        for k, v in kv.items():
            if k.startswith("latency."):
                a, b = k[len("latency."):].split(".")
                lat[(a, b)] = lat[(b, a)] = float(v)
            elif k == "cities":
                updates["cities"] = tuple(c.strip() for c in v.split(",") if c.strip())
            elif k == "bandwidth_mbps":
                updates["bandwidth_bps"] = float(v) * 1e6
            elif k in ("base_latency_ms", "jitter_ms"):
                updates[k] = float(v)
            elif k in ("outbound_peers", "nodes_per_machine", "control_max_bytes", "vote_bytes"):
                updates[k] = int(v)
            else:
                raise ValueError(f"unknown network config key {k!r}")
        updates["city_latency_ms"] = lat
        return replace(cfg, **updates)

    @classmethod
    def from_file(cls, path: str | Path, base: NetConfig | None = None) -> NetConfig:
        return cls.from_text(Path(path).read_text(), base)

    @classmethod
    def bundled(cls, **overrides) -> NetConfig:
        text = resources.files("dandelion").joinpath("data/latency_table.txt").read_text()
        return replace(cls.from_text(text), **overrides)

    def city_latency(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        return self.city_latency_ms.get((a, b), 0.0)


class Topology:
    """Peer graph plus per-node city placement and one-way link latencies."""

    def __init__(self, n: int, peers: list[list[int]], latency_us: np.ndarray, city_of: list[str]):
        self.n = n
        self.peers = peers
        self.latency_us = latency_us
        self.city_of = city_of

    @classmethod
    def build(cls, n: int, cfg: NetConfig, rng: random.Random) -> Topology:
        if n < 2:
            raise ValueError("need at least two nodes")
        k = min(cfg.outbound_peers, n - 1)
        adj: list[set[int]] = [set() for _ in range(n)]
        for i in range(n):
            for p in rng.sample([x for x in range(n) if x != i], k):
                adj[i].add(p)
                adj[p].add(i)
        _connect(adj)
        per_machine = cfg.nodes_per_machine or max(1, math.ceil(n / 10))
        cities = cfg.cities or ("local",)
        city_of = [cities[(i // per_machine) % len(cities)] for i in range(n)]
        lat = np.zeros((n, n), dtype=np.int64)
        base = ms(cfg.base_latency_ms)
        for i in range(n):
            for j in range(n):
                if i != j:
                    lat[i, j] = base + ms(cfg.city_latency(city_of[i], city_of[j]))
        return cls(n, [sorted(a) for a in adj], lat, city_of)

    def edges(self) -> Iterable[tuple[int, int]]:
        for i, ps in enumerate(self.peers):
            for p in ps:
                yield i, p

    def mean_degree(self) -> float:
        return sum(len(p) for p in self.peers) / self.n

    def is_connected(self) -> bool:
        rows, cols = zip(*self.edges())
        g = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n, self.n))
        return connected_components(g, directed=False)[0] == 1


def _connect(adj: list[set[int]]) -> None:
    n = len(adj)
    comp = [-1] * n
    reps = []
    for s in range(n):
        if comp[s] >= 0:
            continue
        reps.append(s)
        comp[s] = s
        stack = [s]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if comp[v] < 0:
                    comp[v] = s
                    stack.append(v)
    for a, b in zip(reps, reps[1:]):
        adj[a].add(b)
        adj[b].add(a)


class Message:
    """Gossip envelope. ``payload`` is the protocol object being carried."""

    __slots__ = ("kind", "origin", "payload", "size", "dedup_id", "round", "signature", "_valid", "bulk")

    def __init__(self, kind: str, origin: int, payload, size: int, dedup_id: bytes, round_: int = 0,
                 signature: bytes = b""):
        self.kind = kind
        self.origin = origin
        self.payload = payload
        self.size = size
        self.dedup_id = dedup_id
        self.round = round_
        self.signature = signature
        self._valid = None
        self.bulk = False

    @classmethod
    def signed(cls, kp: KeyPair, kind: str, payload, size: int, dedup_id: bytes, round_: int = 0) -> Message:
        return cls(kind, kp.node_id, payload, size, dedup_id, round_, sign(kp, bytes(dedup_id)))

    def tampered(self) -> Message:
        """Copy with a corrupted signature, as a byzantine relay would forward it."""
        bad = bytes([self.signature[0] ^ 1]) + self.signature[1:] if self.signature else b"\x01"
        return Message(self.kind, self.origin, self.payload, self.size, self.dedup_id, self.round, bad)

    def __repr__(self) -> str:
        return f"Message({self.kind}, origin={self.origin}, size={self.size}, round={self.round})"


@dataclass
class Partition:
    """Weak-synchrony window: messages crossing groups are held until ``end_us``."""

    groups: list[set[int]]
    start_us: int
    end_us: int

    def __post_init__(self) -> None:
        self._group_of = {}
        for gi, g in enumerate(self.groups):
            for i in g:
                self._group_of[i] = gi

    def active(self, t: int) -> bool:
        return self.start_us <= t < self.end_us

    def crosses(self, a: int, b: int) -> bool:
        return self._group_of.get(a, -1) != self._group_of.get(b, -1)

    def group_array(self, n: int) -> np.ndarray:
        return np.array([self._group_of.get(i, -1) for i in range(n)])


class Uplink:
    """Egress link of one node: FIFO bulk queue plus a preemptive control lane."""

    __slots__ = ("net", "node", "rate", "queue", "current", "ctrl_free", "bytes_sent", "log", "_seq")

    def __init__(self, net: Network, node: int, bandwidth_bps: float):
        self.net = net
        self.node = node
        self.rate = bandwidth_bps / 8 / US  # bytes per microsecond
        self.queue: list = []  # heap of (round, copy_rank, seq, to, msg)
        self._seq = itertools.count()
        self.current: list | None = None  # [to, msg, start, end, event]
        self.ctrl_free = 0
        self.bytes_sent = 0
        self.log: list[tuple[int, int, int]] | None = None

    def serialization_us(self, size: int) -> int:
        return int(math.ceil(size / self.rate)) if size > 0 else 0

    def send_control(self, to: int, msg: Message) -> None:
        sim = self.net.sim
        dur = self.serialization_us(msg.size)
        start = max(sim.now, self.ctrl_free)
        end = start + dur
        self.ctrl_free = end
        cur = self.current
        if cur is not None and dur:
            cur[3] += dur
            Simulator.cancel(cur[4])
            cur[4] = sim.at(cur[3], self._done)
        self._account(start, end, msg.size)
        self.net._transmit(self.node, to, msg, end)

    def enqueue(self, to: int, msg: Message, rank: int = 0) -> None:
        heapq.heappush(self.queue, (msg.round, rank, next(self._seq), to, msg))
        if self.current is None:
            self._start_next()

    def _start_next(self) -> None:
        sim = self.net.sim
        node = self.net.nodes[self.node] if self.net.nodes else None
        while self.queue:
            _, _, _, to, msg = heapq.heappop(self.queue)
            if node is not None and not node.still_wanted(to, msg):
                continue
            start = max(sim.now, self.ctrl_free)
            end = start + self.serialization_us(msg.size)
            self.current = [to, msg, start, end, None]
            self.current[4] = sim.at(end, self._done)
            return
        self.current = None

    def _done(self) -> None:
        to, msg, start, end, _ = self.current
        self._account(start, end, msg.size)
        self.net._transmit(self.node, to, msg, end)
        self.current = None
        self._start_next()

    def _account(self, start: int, end: int, size: int) -> None:
        self.bytes_sent += size
        if self.log is not None:
            self.log.append((start, end, size))

    @property
    def backlog_bytes(self) -> int:
        return sum(e[4].size for e in self.queue)


class GossipNode:
    """Base node: dedup by id, signature check before relaying, peer-has tracking."""

    def __init__(self, node_id: int, net: Network):
        self.id = node_id
        self.net = net
        self.seen: set[bytes] = set()
        self.peer_has: dict[bytes, set[int]] = {}
        self.peer_round: dict[int, int] = {}
        self.processed = 0

    def receive(self, msg: Message, sender: int) -> None:
        if msg.round > self.peer_round.get(sender, -1):
            self.peer_round[sender] = msg.round
        key = msg.dedup_id
        if msg.bulk:
            s = self.peer_has.get(key)
            if s is None:
                self.peer_has[key] = {sender}
            else:
                s.add(sender)
        if key in self.seen:
            return
        if not self.net.signature_ok(msg):
            self.on_invalid(msg, sender)
            return
        self.seen.add(key)
        self.processed += 1
        if self.accept(msg, sender):
            self.net.relay(self.id, msg, exclude=sender)

    def accept(self, msg: Message, sender: int) -> bool:
        """Protocol hook; return True to relay."""
        return True

    def on_invalid(self, msg: Message, sender: int) -> None:
        pass

    def still_wanted(self, to: int, msg: Message) -> bool:
        s = self.peer_has.get(msg.dedup_id)
        return s is None or to not in s

    def on_vote(self, msg: Message) -> None:
        pass


class Network:
    def __init__(self, sim: Simulator, topology: Topology, cfg: NetConfig, seed: int = 0,
                 public_tags: dict[int, bytes] | None = None):
        self.sim = sim
        self.topo = topology
        self.cfg = cfg
        self.rng = random.Random(seed)
        self.nodes: list[GossipNode] = []
        self.public_tags = public_tags or {}
        self.uplinks = [Uplink(self, i, cfg.bandwidth_bps) for i in range(topology.n)]
        self.partition: Partition | None = None
        self.non_relaying: set[int] = set()
        self._last_arrival: dict[tuple[int, int], int] = {}
        self._dist_cache: dict = {}
        self.sent_by_kind: dict[str, int] = {}
        self.delivered = 0

    def attach(self, nodes: list[GossipNode]) -> None:
        self.nodes = nodes

    def is_control(self, msg: Message) -> bool:
        return msg.size <= self.cfg.control_max_bytes

    def jitter_us(self) -> int:
        sigma = self.cfg.jitter_ms
        if sigma <= 0:
            return 0
        return ms(min(abs(self.rng.gauss(0.0, sigma)), 3 * sigma))

    def signature_ok(self, msg: Message) -> bool:
        if msg._valid is None:
            tag = self.public_tags.get(msg.origin)
            msg._valid = tag is not None and verify_sig(tag, bytes(msg.dedup_id), msg.signature)
        return msg._valid

    def schedule_send(self, src: int, dst: int, msg: Message, at_time: int | None = None, rank: int = 0) -> None:
        if dst not in self.topo.peers[src] and src != dst:
            raise ValueError(f"no link {src}->{dst}")
        if at_time is not None and at_time > self.sim.now:
            self.sim.at(at_time, self.schedule_send, src, dst, msg, None, rank)
            return
        self.sent_by_kind[msg.kind] = self.sent_by_kind.get(msg.kind, 0) + 1
        up = self.uplinks[src]
        if self.is_control(msg):
            up.send_control(dst, msg)
        else:
            msg.bulk = True
            up.enqueue(dst, msg, rank)

    send = schedule_send

    def _transmit(self, src: int, dst: int, msg: Message, tx_end: int) -> None:
        arrival = tx_end + int(self.topo.latency_us[src, dst]) + self.jitter_us()
        p = self.partition
        if p is not None and p.active(tx_end) and p.crosses(src, dst):
            arrival = max(arrival, p.end_us + int(self.topo.latency_us[src, dst]))
        key = (src, dst)
        last = self._last_arrival.get(key, 0)
        if arrival < last:
            arrival = last
        self._last_arrival[key] = arrival
        self.sim.at(arrival, self._arrive, src, dst, msg)

    def _arrive(self, src: int, dst: int, msg: Message) -> None:
        self.delivered += 1
        self.sim.log(msg.kind, src, dst, msg.size, msg.dedup_id)
        self.nodes[dst].receive(msg, src)

    def gossip(self, origin: int, msg: Message, peers: Iterable[int] | None = None) -> None:
        node = self.nodes[origin]
        node.seen.add(msg.dedup_id)
        for rank, p in enumerate(self.topo.peers[origin] if peers is None else peers):
            self.schedule_send(origin, p, msg, rank=rank)

    def relay(self, src: int, msg: Message, exclude: int | None = None) -> None:
        if src in self.non_relaying:
            return
        rank = 0
        for p in self.topo.peers[src]:
            if p != exclude:
                self.schedule_send(src, p, msg, rank=rank)
                rank += 1

    # Flooded control messages (votes).

    def _weights(self, cut_groups: np.ndarray | None) -> csr_matrix:
        n = self.topo.n
        hop = self.uplinks[0].serialization_us(self.cfg.vote_bytes)
        rows, cols, w = [], [], []
        for i, ps in enumerate(self.topo.peers):
            if i in self.non_relaying:
                continue
            for p in ps:
                if cut_groups is not None and cut_groups[i] != cut_groups[p]:
                    continue
                rows.append(i)
                cols.append(p)
                w.append(float(self.topo.latency_us[i, p] + hop))
        return csr_matrix((w, (rows, cols)), shape=(n, n))

    def flood_distances(self, partitioned: bool = False) -> np.ndarray:
        """All-pairs earliest arrival offsets (us) over relaying nodes."""
        key = (frozenset(self.non_relaying), partitioned and self.partition is not None and id(self.partition))
        d = self._dist_cache.get(key)
        if d is None:
            groups = self.partition.group_array(self.topo.n) if partitioned and self.partition else None
            g = self._weights(groups)
            d = shortest_path(g, method="D", directed=True)
            self._dist_cache[key] = d
        return d

    def flood_arrivals(self, origin: int, first_hops: Iterable[int] | None = None) -> np.ndarray:
        now = self.sim.now
        full = self.flood_distances(False)
        p = self.partition
        if first_hops is None:
            if p is not None and p.active(now):
                part = self.flood_distances(True)
                row = part[origin].copy()
                cut = ~np.isfinite(row)
                row[cut] = (p.end_us - now) + full[origin][cut]
            else:
                row = full[origin]
        else:
            hop = self.uplinks[0].serialization_us(self.cfg.vote_bytes)
            row = np.full(self.topo.n, np.inf)
            for fh in first_hops:
                row = np.minimum(row, self.topo.latency_us[origin, fh] + hop + full[fh])
            row[origin] = 0
        return now + row

    def flood(self, origin: int, msg: Message, first_hops: Iterable[int] | None = None) -> None:
        """Deliver ``msg`` to every other node at its flood arrival time."""
        self.sent_by_kind[msg.kind] = self.sent_by_kind.get(msg.kind, 0) + 1
        arr = self.flood_arrivals(origin, first_hops)
        mask = np.isfinite(arr)
        mask[origin] = False
        idx = np.nonzero(mask)[0]
        times = np.ceil(arr[idx]).astype(np.int64)
        at = self.sim.at
        nodes = self.nodes
        trace = self.sim.trace is not None
        for i, t in zip(idx.tolist(), times.tolist()):
            if trace:
                at(t, self._arrive_flood, origin, i, msg)
            else:
                at(t, nodes[i].on_vote, msg)

    def _arrive_flood(self, src: int, dst: int, msg: Message) -> None:
        self.sim.log(msg.kind, src, dst, msg.size, msg.dedup_id)
        self.nodes[dst].on_vote(msg)


def make_dedup(*parts: bytes):
    return hash_concat(*parts)
