"""Per-node round orchestration for single-block and multiplexed agreement.

A round runs: proposer sortition and block gossip, a wait of
``lambda_priority + lambda_stepvar`` followed by at most ``lambda_block`` for
the best bodies, BA* on the candidate, then assembly and append. Every handler
runs inside the simulator's single event loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

from .chain import (
    EMPTY_MARKER,
    Block,
    Chain,
    ChainError,
    EmptyBlock,
    Macroblock,
    MissingBlocks,
    Transaction,
    TxIndex,
    assemble_macroblock,
    build_block,
    derive_seed_algorand,
    derive_seed_dandelion,
    max_block_bytes,
    select_transactions,
)
from .consensus import (
    FINAL,
    FINAL_STEP,
    REDUCTION_TWO,
    TIMEOUT,
    Coin,
    CommitteeConfig,
    Count,
    Decision,
    HashVector,
    SingleHash,
    StepTally,
    Vote,
    VoteMessage,
    ba_star,
    binary_step,
    make_vote,
    verify_vote,
)
from .crypto_sim import ZERO_DIGEST, Digest, KeyPair, encode_int, hash_concat
from .netsim import GossipNode, Message, Network, seconds
from .votes import VoteBoard
from .sortition import (
    SortitionParams,
    StakeTable,
    bucket_of_proposer,
    bucket_of_transaction,
    best_priority,
    role_tag,
    sortition_select,
    verify_sortition,
)

PRIORITY_MSG_BYTES = 200
REQUEST_MSG_BYTES = 100
HONEST = "honest"
STRATEGIES = ("silent", "equivocate", "duplicate_tx", "withhold_votes", "flip_votes")


@dataclass(frozen=True)
class NodeConfig:
    mode: str = "dandelion"
    Cl: int = 1
    macroblock_size: int = 1_000_000
    h: float = 0.8
    tau_proposer: int = 100
    committee: CommitteeConfig = field(default_factory=CommitteeConfig)
    lambda_priority: float = 5.0
    lambda_block: float = 120.0
    stake_per_node: int = 1000
    tx_size: int = 500

    def __post_init__(self) -> None:
        if self.mode not in ("algorand", "dandelion"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "algorand" and self.Cl != 1:
            raise ValueError("single-block mode requires Cl = 1")
        if self.Cl < 1:
            raise ValueError("Cl must be >= 1")
        c = self.committee
        if min(self.lambda_priority, self.lambda_block, c.lambda_step, c.lambda_stepvar) <= 0:
            raise ValueError("all timeouts must be positive")

    @property
    def lambda_step(self) -> float:
        return self.committee.lambda_step

    @property
    def lambda_stepvar(self) -> float:
        return self.committee.lambda_stepvar

    @property
    def block_budget(self) -> int:
        return max_block_bytes(self.macroblock_size, self.Cl)


@dataclass(frozen=True)
class PriorityAnnouncement:
    round: int
    proposer_id: int
    bucket: int
    credential: object
    j: int
    priority: Digest

    @property
    def key(self) -> tuple[bytes, int]:
        return (bytes(self.priority), self.proposer_id)


@dataclass(frozen=True)
class BlockRequest:
    round: int
    block_hash: Digest


@dataclass
class RoundRecord:
    node_id: int
    round: int
    start_us: int
    end_us: int
    bytes_appended: int
    kind: str
    blocks_in_macroblock: int
    macroblock_hash: Digest
    decided_us: int = 0
    binary_steps: int = 0

    @property
    def latency_ms(self) -> float:
        return (self.end_us - self.start_us) / 1000.0


class World:
    """State shared by one simulation: keys, stakes, mempool, caches, metrics."""

    def __init__(self, cfg: NodeConfig, keys: list[KeyPair], stakes: StakeTable, net: Network, seed: int):
        from .chain import Mempool, TransactionSource

        self.cfg = cfg
        self.keys = keys
        self.stakes = stakes
        self.net = net
        self.sim = net.sim
        self.tags = {k.node_id: bytes(k.public_tag) for k in keys}
        self.tx_index = TxIndex()
        self.mempool = Mempool(cfg.Cl)
        self.tx_source = TransactionSource(seed, cfg.tx_size)
        self.topped_up_rounds: set[int] = set()
        self.records: list[RoundRecord] = []
        self.validation_cache: dict = {}
        self.rejected_blocks = 0
        self.rejections_by_reason: dict[str, int] = {}
        self.invalid_attempts: list[Digest] = []
        self.invalid_accepted = 0
        self.liveness_alarms = 0
        self.decisions: dict[int, dict[int, tuple[Digest, str]]] = {}
        self.on_append: Callable[[Node, Macroblock, str], None] | None = None
        self.step_trace: list[tuple] | None = None
        self.nodes: list[Node] = []
        need = tuple(math.floor(cfg.committee.threshold(f)) + 1 for f in (False, True))
        self.board = VoteBoard(self.sim, len(keys), need, FINAL_STEP, self.verify_vote)
        self.board.wake = self._wake
        self.board.early_wake = self._early_wake
        self.in_proposal: dict[int, set[int]] = {}
        self.evicted: set[Digest] = set()
        self.board.early_pool = lambda r: self.in_proposal.get(r)

    def verify_vote(self, vote: VoteMessage, seed: bytes) -> bool:
        tag = self.tags.get(vote.voter_id)
        return tag is not None and verify_vote(vote, tag, self.stakes[vote.voter_id], self.cfg.committee,
                                               seed, self.stakes.total_W)

    def _wake(self, node_id: int, round_: int, step: int, value) -> None:
        self.nodes[node_id].on_count(round_, step, value)

    def _early_wake(self, node_id: int, round_: int) -> None:
        self.nodes[node_id].on_committee_ahead(round_)

    def ensure_round_txs(self, round_: int) -> None:
        if round_ in self.topped_up_rounds:
            return
        self.topped_up_rounds.add(round_)
        # Head-room for competing proposers in the same bucket.
        self.tx_source.top_up(self.mempool, self.cfg.block_budget)


class Node(GossipNode):
    def __init__(self, node_id: int, world: World, strategy: str = HONEST):
        super().__init__(node_id, world.net)
        self.world = world
        self.cfg = world.cfg
        self.kp = world.keys[node_id]
        self.strategy = strategy
        self.chain = Chain(self.cfg.Cl, self.cfg.mode, world.tx_index)
        self.fingerprint: Digest = hash_concat(b"chain", self.chain.tip.macroblock_hash)
        self.round = 0
        self.records: list[RoundRecord] = []
        self._seen_old: set[bytes] = set()
        self.future_msgs: dict[int, list[tuple[Message, int]]] = {}
        self.pending_requests: dict[bytes, set[int]] = {}
        self._reset_round_state()

    @property
    def honest(self) -> bool:
        return self.strategy == HONEST

    @property
    def stake(self) -> int:
        return self.world.stakes[self.id]

    def _reset_round_state(self) -> None:
        self.phase = "idle"
        self.round_start = 0
        self.best: dict[int, tuple[bytes, int]] = {}
        self.best_body: dict[int, Block] = {}
        self.bodies: dict[bytes, Block] = {}
        self.agreement = None
        self.waiting: int | None = None
        self.step_timer = None
        self.proposal_timer = None
        self.block_deadline = 0
        self.candidate = None
        self.decision: Decision | None = None
        self.decided_at = 0
        self.fetch_timer = None
        self.fetch_started = 0
        self.fetch_attempts = 0
        self.responded: set[tuple[bytes, int]] = set()
        self.alarm_raised = False

    # ----------------------------------------------------------------- seeds

    @property
    def seed(self) -> Digest:
        return self.chain.seed

    def empty_value(self):
        if self.cfg.mode == "algorand":
            return SingleHash(EmptyBlock(self.round, self.chain.tip.macroblock_hash).block_hash)
        return HashVector.empty(self.cfg.Cl)

    def proposer_params(self, round_: int) -> SortitionParams:
        return SortitionParams(self.cfg.tau_proposer, role_tag("proposer", round_), self.seed,
                               self.world.stakes.total_W)

    # ------------------------------------------------------------ round flow

    def start_round(self, r: int) -> None:
        sim = self.world.sim
        self.round = r
        self._reset_round_state()
        self.phase = "proposal"
        self.round_start = sim.now
        self.world.board.set_seed(self.id, bytes(self.seed))
        self.world.in_proposal.setdefault(r, set()).add(self.id)
        self._seen_old = self.seen
        self.seen = set()
        self.peer_has = {}
        self.world.ensure_round_txs(r)
        wait = seconds(self.cfg.lambda_priority + self.cfg.lambda_stepvar)
        self.proposal_timer = sim.after(wait, self._proposal_wait_over)
        self.block_deadline = sim.now + wait + seconds(self.cfg.lambda_block)
        if self.strategy != "silent":
            self._propose()
        for msg, sender in self.future_msgs.pop(r, []):
            if self.accept(msg, sender):
                self.net.relay(self.id, msg, exclude=sender)
        for old in [k for k in self.future_msgs if k < r]:
            del self.future_msgs[old]
        if self.world.board.watch_early(self.id, r):
            self.on_committee_ahead(r)

    def _propose(self) -> None:
        cfg = self.cfg
        multiplexed = cfg.mode == "dandelion"
        outcome = sortition_select(self.kp, self.stake, self.proposer_params(self.round),
                                   cfg.Cl if multiplexed else None)
        if not outcome.selected:
            return
        bucket = outcome.bucket_index if multiplexed else 0
        if multiplexed:
            seed_prop = derive_seed_dandelion(self.kp, self.chain.tip, self.round)
        else:
            seed_prop = derive_seed_algorand(self.kp, self.seed, self.round)
        tip = self.chain.tip.macroblock_hash
        ann = PriorityAnnouncement(self.round, self.id, bucket, outcome.vrf, outcome.j, outcome.priority)
        blocks = [self._make_block(bucket, tip, seed_prop, outcome)]
        if self.strategy == "equivocate":
            blocks.append(self._make_block(bucket, tip, seed_prop, outcome, variant=True))
        elif self.strategy == "duplicate_tx":
            blocks = [self._make_dup_block(bucket, tip, seed_prop, outcome)]
        self.best[bucket] = ann.key
        for b in blocks:
            self.bodies[b.block_hash] = b
        self.best_body[bucket] = blocks[0]
        prio = Message.signed(self.kp, "priority", ann, PRIORITY_MSG_BYTES,
                              hash_concat(b"prio", encode_int(self.round), encode_int(self.id)), self.round)
        self.net.gossip(self.id, prio)
        msgs = [Message.signed(self.kp, "block", b, b.size_bytes, b.block_hash, self.round) for b in blocks]
        peers = self.net.topo.peers[self.id]
        if len(msgs) == 1:
            self.net.gossip(self.id, msgs[0])
        else:
            half = len(peers) // 2 or 1
            self.net.gossip(self.id, msgs[0], peers[:half])
            self.net.gossip(self.id, msgs[1], peers[half:])

    def _make_block(self, bucket, tip, seed_prop, outcome, variant: bool = False) -> Block:
        pool = self.world.mempool
        budget = self.cfg.block_budget
        if variant:
            txs = tuple(list(select_transactions(pool, bucket, budget))[::-1][1:])
        else:
            txs = None
        return build_block(self.kp, self.round, bucket, pool, budget, tip, seed_prop,
                           outcome.vrf, outcome.j, outcome.priority, txs)

    def _make_dup_block(self, bucket, tip, seed_prop, outcome) -> Block:
        """Block stuffed with transactions owned by other buckets or already appended."""
        pool = self.world.mempool
        foreign = [t for t in pool if bucket_of_transaction(t.tx_hash, self.cfg.Cl) != bucket]
        replay = [t for b in self.chain.tip.blocks for t in b.txs]
        own = list(select_transactions(pool, bucket, self.cfg.block_budget // 2))
        stolen = (replay[:4] + foreign[:4]) or [self.world.tx_source.make()]
        if self.cfg.Cl == 1 and not replay:
            stolen = [own[0]] if own else stolen
        txs = tuple(own + stolen) if (replay or self.cfg.Cl > 1) else tuple(own + own[:1])
        block = build_block(self.kp, self.round, bucket, pool, self.cfg.block_budget, tip, seed_prop,
                            outcome.vrf, outcome.j, outcome.priority, txs)
        self.world.invalid_attempts.append(block.block_hash)
        return block

    def _proposal_wait_over(self) -> None:
        self.proposal_timer = None
        if self.phase != "proposal":
            return
        self.phase = "collecting"
        self._check_ready()
        if self.phase == "collecting":
            delay = self.block_deadline - self.world.sim.now
            self.proposal_timer = self.world.sim.after(max(0, delay), self._block_deadline_hit)

    def _block_deadline_hit(self) -> None:
        self.proposal_timer = None
        if self.phase == "collecting":
            self._begin_agreement()

    def _check_ready(self) -> None:
        if self.phase != "collecting":
            return
        for bucket, key in self.best.items():
            body = self.best_body.get(bucket)
            if body is None or (bytes(body.priority), body.proposer_id) != key:
                return
        self._cancel_proposal_timer()
        self._begin_agreement()

    def _cancel_proposal_timer(self) -> None:
        self.world.sim.cancel(self.proposal_timer)
        self.proposal_timer = None

    def end_proposal_phase(self):
        """Candidate value from the best bodies held right now."""
        cfg = self.cfg
        slots = []
        for b in range(cfg.Cl):
            key = self.best.get(b)
            body = self.best_body.get(b)
            if key is not None and body is not None and (bytes(body.priority), body.proposer_id) == key:
                slots.append(body.block_hash)
            else:
                slots.append(ZERO_DIGEST)
        if cfg.mode == "algorand":
            return SingleHash(slots[0]) if slots[0] != ZERO_DIGEST else self.empty_value()
        return HashVector(tuple(slots))

    def on_committee_ahead(self, round_: int) -> None:
        """A post-proposal step already crossed here: stop waiting for bodies."""
        if round_ == self.round and self.phase in ("proposal", "collecting"):
            self._cancel_proposal_timer()
            self._begin_agreement()

    def _begin_agreement(self) -> None:
        w = self.world
        w.in_proposal.get(self.round, set()).discard(self.id)
        w.board.cancel_early(self.id, self.round)
        self.phase = "reduction"
        self.candidate = self.end_proposal_phase()
        self.agreement = ba_star(self.candidate, self.empty_value(), self.cfg.committee)
        self._advance(None)

    # ------------------------------------------------------------- agreement

    def _advance(self, send) -> None:
        gen = self.agreement
        while True:
            try:
                action = gen.send(send)
            except StopIteration as stop:
                self._decided(stop.value)
                return
            send = None
            if type(action) is Vote:
                self._cast(action.step, action.value)
            elif type(action) is Count:
                if action.step > 2:
                    self.phase = "binary_ba" if action.step != FINAL_STEP else "counting"
                value = self.world.board.count(self.id, self.round, action.step)
                if value is not None:
                    send = value
                    self._trace_step(action.step, send)
                    continue
                self.waiting = action.step
                self.step_timer = self.world.sim.after(seconds(self.cfg.lambda_step), self._step_timeout,
                                                       self.round, action.step)
                return
            elif type(action) is Coin:
                send = self.world.board.coin(self.id, self.round, action.step)

    def _trace_step(self, step: int, outcome) -> None:
        st = self.world.step_trace
        if st is not None:
            seen = self.world.board.weight_seen(self.id, self.round, step)
            st.append((self.world.sim.now, self.id, self.round, step, seen,
                       "timeout" if outcome is TIMEOUT else "value"))

    def _step_timeout(self, round_: int, step: int) -> None:
        if round_ != self.round or self.waiting != step:
            return
        self.waiting = None
        self.step_timer = None
        self.world.board.unwatch(self.id, round_, step)
        self._trace_step(step, TIMEOUT)
        self._advance(TIMEOUT)

    def _cast(self, step: int, value) -> None:
        if self.strategy in ("silent", "withhold_votes"):
            return
        w = self.world
        vote = make_vote(self.kp, self.stake, self.cfg.committee, self.seed, w.stakes.total_W,
                         self.round, step, value)
        if vote is None:
            return
        if self.strategy == "flip_votes":
            self._cast_flipped(vote, step, value)
            return
        self._flood_vote(vote)

    def _cast_flipped(self, vote: VoteMessage, step: int, value) -> None:
        """Equivocate: the honest vote to half the peers, the opposite to the rest."""
        w = self.world
        empty = self.empty_value()
        other = self.candidate if value == empty else empty
        if other == value or other is None:
            other = HashVector((hash_concat(b"junk", encode_int(self.round)),) * self.cfg.Cl) \
                if self.cfg.mode == "dandelion" else SingleHash(hash_concat(b"junk", encode_int(self.round)))
        flipped = make_vote(self.kp, self.stake, self.cfg.committee, self.seed, w.stakes.total_W,
                            self.round, step, other)
        peers = w.net.topo.peers[self.id]
        half = len(peers) // 2 or 1
        self._flood_vote(vote, peers[:half])
        if peers[half:]:
            self._flood_vote(flipped, peers[half:])

    def _flood_vote(self, vote: VoteMessage, first_hops=None) -> None:
        w = self.world
        net = w.net
        net.sent_by_kind["vote"] = net.sent_by_kind.get("vote", 0) + 1
        w.sim.log("vote", self.id, -1, net.cfg.vote_bytes, vote.signature)
        arrivals = net.flood_arrivals(self.id, first_hops)
        arrivals[self.id] = w.sim.now
        w.board.cast(vote, arrivals)

    def on_count(self, round_: int, step: int, value) -> None:
        """Board callback: this node's tally for ``step`` just crossed the threshold."""
        if round_ != self.round or self.waiting != step:
            return
        self.waiting = None
        self.world.sim.cancel(self.step_timer)
        self.step_timer = None
        self._trace_step(step, value)
        self._advance(value)

    # ------------------------------------------------------------ append path

    def _decided(self, decision: Decision) -> None:
        self.decision = decision
        self.decided_at = self.world.sim.now
        self.phase = "appending"
        self._try_append()

    def decided_vector(self) -> tuple[Digest, ...]:
        v = self.decision.value
        if isinstance(v, HashVector):
            return v.hashes
        if v == self.empty_value():
            return (EMPTY_MARKER,)
        return (v.digest,)

    def _lookup_block(self, h: bytes) -> Block | None:
        return self.bodies.get(h)

    def _try_append(self, request: bool = True) -> None:
        vector = self.decided_vector()
        try:
            mb = assemble_macroblock(self.round, vector, self.bodies)
        except MissingBlocks as e:
            if request:
                self._fetch(e.missing)
            return
        self.world.sim.cancel(self.fetch_timer)
        self.fetch_timer = None
        self.append_decision(mb, self.decision.kind)

    def _fetch(self, missing) -> None:
        """Ask one peer per missing block, rotating peers on every retry."""
        sim = self.world.sim
        if not self.fetch_started:
            self.fetch_started = sim.now
        elif not self.alarm_raised and sim.now - self.fetch_started >= seconds(3 * self.cfg.lambda_step):
            self.alarm_raised = True
            self.world.liveness_alarms += 1
        if self.strategy != "silent":
            peers = self.net.topo.peers[self.id]
            for h in missing:
                req = BlockRequest(self.round, Digest(h))
                msg = Message.signed(self.kp, "block_request", req, REQUEST_MSG_BYTES,
                                     hash_concat(b"req", bytes(h), encode_int(self.id), encode_int(sim.now)),
                                     self.round)
                pick = (h[0] + self.fetch_attempts) % len(peers)
                self.net.schedule_send(self.id, peers[pick], msg)
        self.fetch_attempts += 1
        self.world.sim.cancel(self.fetch_timer)
        self.fetch_timer = sim.after(seconds(self.cfg.lambda_stepvar), self._fetch_retry, self.round)

    def _fetch_retry(self, round_: int) -> None:
        self.fetch_timer = None
        if round_ == self.round and self.phase == "appending":
            self._try_append()

    def append_decision(self, mb: Macroblock, kind: str) -> None:
        w = self.world
        sim = w.sim
        ck = ("append", bytes(mb.macroblock_hash), bytes(self.fingerprint))
        try:
            self.chain.append(mb, kind, checked=ck in w.validation_cache)
            w.validation_cache[ck] = True
        except ChainError:
            # An honest validator never lets such a block in; count it and stall.
            w.invalid_accepted += 1
            raise
        self.fingerprint = hash_concat(self.fingerprint, mb.macroblock_hash)
        rec = RoundRecord(self.id, self.round, self.round_start, sim.now, mb.payload_bytes, kind,
                          len(mb.blocks), mb.macroblock_hash, self.decided_at, self.decision.steps)
        self.records.append(rec)
        if self.honest:
            w.records.append(rec)
            w.decisions.setdefault(self.round, {})[self.id] = (mb.macroblock_hash, kind)
        if mb.macroblock_hash not in w.evicted:
            w.evicted.add(mb.macroblock_hash)
            w.mempool.evict(mb.tx_hashes())
        self._serve_pending(mb.blocks)
        if w.on_append is not None:
            w.on_append(self, mb, kind)
        self.phase = "idle"
        sim.after(0, self.start_round, self.round + 1)

    # -------------------------------------------------------------- gossip

    def receive(self, msg: Message, sender: int) -> None:
        if msg.round < self.round - 1 and msg.kind != "block_request":
            return
        if msg.dedup_id in self._seen_old:
            return
        super().receive(msg, sender)

    def still_wanted(self, to: int, msg: Message) -> bool:
        if msg.kind == "block":
            b = msg.payload
            # Gossip of appended rounds stops; laggards fetch what they miss.
            if b.round <= self.chain.height or self.peer_round.get(to, 0) > b.round:
                return False
            if b.round == self.round:
                key = self.best.get(b.bucket_index)
                if key is not None and (bytes(b.priority), b.proposer_id) > key:
                    return False
        return super().still_wanted(to, msg)

    def accept(self, msg: Message, sender: int) -> bool:
        if self.strategy == "silent":
            return False
        kind = msg.kind
        if kind == "block_request":
            self._on_request(msg.payload, sender)
            return False
        if msg.round > self.round:
            self.future_msgs.setdefault(msg.round, []).append((msg, sender))
            return False
        if msg.round < self.round:
            return False
        if kind == "priority":
            return self._on_priority(msg.payload)
        if kind in ("block", "block_response"):
            relay = self._on_block(msg.payload)
            return relay and kind == "block"
        return False

    def _on_priority(self, ann: PriorityAnnouncement) -> bool:
        if self.phase == "idle":
            return False
        if not self._credential_ok(ann.proposer_id, ann.credential, ann.j, ann.bucket, ann.priority):
            return False
        cur = self.best.get(ann.bucket)
        if cur is not None and ann.key >= cur:
            return False
        self.best[ann.bucket] = ann.key
        self._check_ready()
        return True

    def _credential_ok(self, proposer, credential, j, bucket, priority) -> bool:
        cache = self.world.validation_cache
        key = ("cred", proposer, bytes(credential.hash), j, bucket, self.round, bytes(self.seed))
        ok = cache.get(key)
        if ok is None:
            tag = self.world.tags.get(proposer)
            multiplexed = self.cfg.mode == "dandelion"
            ok = (
                tag is not None
                and verify_sortition(tag, self.world.stakes[proposer], self.proposer_params(self.round),
                                     credential, j)
                and (bucket_of_proposer(credential, self.cfg.Cl) == bucket if multiplexed else bucket == 0)
                and best_priority(credential, j, bucket if multiplexed else None) == priority
            )
            cache[key] = ok
        return ok

    def validate_block(self, b: Block) -> str | None:
        """Reason the block is invalid for this node, or None if it is acceptable."""
        cache = self.world.validation_cache
        key = ("block", bytes(b.block_hash), bytes(self.fingerprint))
        if key in cache:
            return cache[key]
        reason = None
        tag = self.world.tags.get(b.proposer_id)
        if b.round != self.round:
            reason = "round"
        elif tag is None or not self._sig_ok(b, tag):
            reason = "signature"
        elif not self._credential_ok(b.proposer_id, b.credential, b.j, b.bucket_index, b.priority):
            reason = "sortition"
        elif b.prev_macroblock_hash != self.chain.tip.macroblock_hash:
            reason = "prev_hash"
        elif b.payload_bytes > self.cfg.block_budget:
            reason = "oversize"
        else:
            Cl = self.cfg.Cl
            seen = set()
            for t in b.txs:
                if bucket_of_transaction(t.tx_hash, Cl) != b.bucket_index:
                    reason = "bucket"
                    break
                if t.tx_hash in seen:
                    reason = "duplicate"
                    break
                seen.add(t.tx_hash)
            if reason is None and any(self.chain.contains_tx(h) for h in seen):
                reason = "replay"
        cache[key] = reason
        return reason

    @staticmethod
    def _sig_ok(b: Block, tag: bytes) -> bool:
        from .crypto_sim import verify_sig

        return verify_sig(tag, bytes(b.block_hash), b.signature)

    def _on_block(self, b: Block) -> bool:
        if self.phase == "idle":
            return False
        reason = self.validate_block(b)
        if reason is not None:
            w = self.world
            w.rejected_blocks += 1
            w.rejections_by_reason[reason] = w.rejections_by_reason.get(reason, 0) + 1
            return False
        h = b.block_hash
        first = h not in self.bodies
        self.bodies[h] = b
        if first:
            self._serve_pending((b,))
        key = (bytes(b.priority), b.proposer_id)
        cur = self.best.get(b.bucket_index)
        if cur is None or key < cur:
            self.best[b.bucket_index] = key
            cur = key
        relay = False
        if key == cur and b.bucket_index not in self.best_body:
            self.best_body[b.bucket_index] = b
            relay = True
        elif key == cur:
            held = self.best_body[b.bucket_index]
            if (bytes(held.priority), held.proposer_id) != cur:
                self.best_body[b.bucket_index] = b
                relay = True
        if self.phase == "appending":
            self._try_append(request=False)
        else:
            self._check_ready()
        return relay

    def _find_block(self, round_: int, h: bytes) -> Block | None:
        b = self.bodies.get(h)
        if b is not None:
            return b
        if 0 < round_ <= self.chain.height:
            for blk in self.chain.entries[round_].macroblock.blocks:
                if blk.block_hash == h:
                    return blk
        return None

    def _on_request(self, req: BlockRequest, sender: int) -> None:
        b = self._find_block(req.round, req.block_hash)
        if b is not None:
            self._respond(b, sender)
        else:
            self.pending_requests.setdefault(bytes(req.block_hash), set()).add(sender)

    def _respond(self, b: Block, to: int) -> None:
        key = (bytes(b.block_hash), to)
        if key in self.responded:
            return
        self.responded.add(key)
        msg = Message.signed(self.kp, "block_response", b, b.size_bytes, b.block_hash, b.round)
        self.net.schedule_send(self.id, to, msg)

    def _serve_pending(self, blocks) -> None:
        if not self.pending_requests or self.strategy == "silent":
            return
        for b in blocks:
            waiters = self.pending_requests.pop(bytes(b.block_hash), None)
            if waiters:
                for to in sorted(waiters):
                    self._respond(b, to)

    def diagnostics(self) -> str:
        return (f"node {self.id} [{self.strategy}] round={self.round} phase={self.phase} "
                f"waiting={self.waiting} height={self.chain.height}")
