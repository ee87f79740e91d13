"""Ledger data model: transactions, blocks, macroblocks and the chain.

Wire layout (all integers little-endian)::

    block  := "DBLK" round:u64 bucket:u32 proposer:u64 prev:32B
              vrf seed_proposal  vrf proposer_credential  j:u32 priority:32B
              n_tx:u32 { len:u32 payload }*
    vrf    := hash:32B len:u32 proof

``block_hash`` is SHA-256 over that byte string. A macroblock hash is
SHA-256 over ``"DMBK" || Cl:u32 || hash_vector``.
"""

from __future__ import annotations

import random
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

from .crypto_sim import (
    ZERO_DIGEST,
    Digest,
    KeyPair,
    VrfOutput,
    encode_int,
    hash_bytes,
    hash_concat,
    sign,
    vrf_evaluate,
)
from .sortition import bucket_of_transaction

EMPTY_MARKER = ZERO_DIGEST
NULL_SEED = hash_bytes(b"dandelion/null-seed")
GENESIS_SEED = hash_bytes(b"dandelion/genesis-seed")
DEFAULT_TX_SIZE = 500


class ChainError(Exception):
    pass


class MissingBlocks(ChainError):
    def __init__(self, missing: list[Digest]):
        super().__init__(f"{len(missing)} decided block(s) not available locally")
        self.missing = missing


@dataclass(frozen=True, slots=True)
class Transaction:
    payload: bytes
    tx_hash: Digest

    @classmethod
    def from_payload(cls, payload: bytes) -> Transaction:
        return cls(payload, hash_bytes(payload))

    @property
    def size(self) -> int:
        return len(self.payload)


def _pack_vrf(v: VrfOutput) -> bytes:
    return bytes(v.hash) + struct.pack("<I", len(v.proof)) + bytes(v.proof)


@dataclass(frozen=True)
class Block:
    round: int
    bucket_index: int
    proposer_id: int
    prev_macroblock_hash: Digest
    seed_proposal: VrfOutput
    credential: VrfOutput
    j: int
    priority: Digest
    txs: tuple[Transaction, ...]
    signature: bytes = field(default=b"", compare=False)
    block_hash: Digest = field(init=False, compare=False)
    size_bytes: int = field(init=False, compare=False)

    def __post_init__(self) -> None:
        raw = self.serialize()
        object.__setattr__(self, "block_hash", hash_bytes(raw))
        object.__setattr__(self, "size_bytes", len(raw))

    def header_bytes(self) -> bytes:
        return b"".join(
            [
                b"DBLK",
                struct.pack("<QIQ", self.round, self.bucket_index, self.proposer_id),
                bytes(self.prev_macroblock_hash),
                _pack_vrf(self.seed_proposal),
                _pack_vrf(self.credential),
                struct.pack("<I", self.j),
                bytes(self.priority),
                struct.pack("<I", len(self.txs)),
            ]
        )

    def serialize(self) -> bytes:
        body = b"".join(struct.pack("<I", len(t.payload)) + t.payload for t in self.txs)
        return self.header_bytes() + body

    @cached_property
    def payload_bytes(self) -> int:
        return sum(t.size for t in self.txs)


@dataclass(frozen=True)
class EmptyBlock:
    round: int
    prev_macroblock_hash: Digest

    @property
    def block_hash(self) -> Digest:
        return hash_concat(b"DEMP", encode_int(self.round), self.prev_macroblock_hash)


def macroblock_hash(hash_vector: Iterable[bytes]) -> Digest:
    vec = list(hash_vector)
    return hash_concat(b"DMBK", struct.pack("<I", len(vec)), *vec)


@dataclass(frozen=True)
class Macroblock:
    round: int
    hash_vector: tuple[Digest, ...]
    blocks: tuple[Block, ...]
    macroblock_hash: Digest = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "macroblock_hash", macroblock_hash(self.hash_vector))

    @property
    def Cl(self) -> int:
        return len(self.hash_vector)

    @cached_property
    def payload_bytes(self) -> int:
        return sum(b.payload_bytes for b in self.blocks)

    def tx_hashes(self) -> list[Digest]:
        return [t.tx_hash for b in self.blocks for t in b.txs]


def genesis(Cl: int) -> Macroblock:
    return Macroblock(0, (EMPTY_MARKER,) * Cl, ())


def assemble_macroblock(round_: int, hash_vector, received_blocks: Mapping[bytes, Block]) -> Macroblock:
    """Resolve a decided hash vector into a macroblock, in vector order."""
    missing = [h for h in hash_vector if h != EMPTY_MARKER and h not in received_blocks]
    if missing:
        raise MissingBlocks(missing)
    blocks = tuple(received_blocks[h] for h in hash_vector if h != EMPTY_MARKER)
    return Macroblock(round_, tuple(Digest(h) for h in hash_vector), blocks)


def seed_hashes(mb: Macroblock) -> list[bytes]:
    """Per-slot seed hashes of a macroblock, null constant for empty slots."""
    by_hash = {b.block_hash: b for b in mb.blocks}
    return [
        bytes(by_hash[h].seed_proposal.hash) if h != EMPTY_MARKER else bytes(NULL_SEED)
        for h in mb.hash_vector
    ]


def round_seed(prev_macroblock: Macroblock) -> Digest:
    if prev_macroblock.round == 0:
        return GENESIS_SEED
    return hash_concat(*seed_hashes(prev_macroblock))


def derive_seed_dandelion(kp: KeyPair, prev_macroblock: Macroblock, round_: int) -> VrfOutput:
    return vrf_evaluate(kp, b"".join(seed_hashes(prev_macroblock)) + encode_int(round_))


def derive_seed_algorand(kp: KeyPair, prev_seed: bytes, round_: int) -> VrfOutput:
    if round_ < 1:
        raise ValueError("round must be >= 1")
    return vrf_evaluate(kp, bytes(prev_seed) + encode_int(round_))


def next_seed_algorand(prev_seed: bytes, mb: Macroblock) -> Digest:
    """Seed for the round after ``mb`` in single-block mode."""
    if mb.blocks:
        return mb.blocks[0].seed_proposal.hash
    return hash_concat(prev_seed, encode_int(mb.round))


class Mempool:
    """Pending transactions, pre-split by bucket for a fixed Cl."""

    def __init__(self, Cl: int):
        self.Cl = Cl
        self._buckets: list[OrderedDict[bytes, Transaction]] = [OrderedDict() for _ in range(Cl)]

    def add(self, tx: Transaction) -> None:
        self._buckets[bucket_of_transaction(tx.tx_hash, self.Cl)][bytes(tx.tx_hash)] = tx

    def extend(self, txs: Iterable[Transaction]) -> None:
        for tx in txs:
            self.add(tx)

    def matching(self, bucket: int):
        return iter(self._buckets[bucket].values())

    def bucket_bytes(self, bucket: int) -> int:
        return sum(t.size for t in self._buckets[bucket].values())

    def evict(self, tx_hashes: Iterable[bytes]) -> None:
        for h in tx_hashes:
            h = bytes(h)
            self._buckets[bucket_of_transaction(h, self.Cl)].pop(h, None)

    def __len__(self) -> int:
        return sum(len(b) for b in self._buckets)

    def __iter__(self):
        for b in self._buckets:
            yield from b.values()


class TransactionSource:
    """Seeded synthetic transaction generator."""

    def __init__(self, seed: int, tx_size: int = DEFAULT_TX_SIZE):
        self._rng = random.Random(seed)
        self.tx_size = tx_size

    def make(self) -> Transaction:
        return Transaction.from_payload(self._rng.randbytes(self.tx_size))

    def top_up(self, pool: Mempool, bytes_per_bucket: int) -> int:
        """Generate until every bucket holds at least ``bytes_per_bucket``."""
        need = [max(0, bytes_per_bucket - pool.bucket_bytes(b)) for b in range(pool.Cl)]
        made = 0
        while any(n > 0 for n in need):
            tx = self.make()
            b = bucket_of_transaction(tx.tx_hash, pool.Cl)
            if need[b] > 0:
                pool.add(tx)
                need[b] -= tx.size
                made += 1
        return made


def select_transactions(pool: Mempool, bucket: int, max_block_bytes: int, exclude=()) -> tuple[Transaction, ...]:
    """Greedy fill with bucket-matching transactions up to the payload budget."""
    chosen = []
    used = 0
    for tx in pool.matching(bucket):
        if tx.tx_hash in exclude:
            continue
        if used + tx.size > max_block_bytes:
            break
        chosen.append(tx)
        used += tx.size
    return tuple(chosen)


def build_block(
    kp: KeyPair,
    round_: int,
    bucket_index: int,
    mempool: Mempool,
    max_block_bytes: int,
    prev_macroblock_hash: Digest,
    seed_proposal: VrfOutput,
    credential: VrfOutput,
    j: int,
    priority: Digest,
    txs: tuple[Transaction, ...] | None = None,
) -> Block:
    if txs is None:
        txs = select_transactions(mempool, bucket_index, max_block_bytes)
    unsigned = Block(
        round_, bucket_index, kp.node_id, prev_macroblock_hash, seed_proposal, credential, j, priority, txs
    )
    return _with_signature(unsigned, sign(kp, unsigned.block_hash))


def _with_signature(block: Block, sig: bytes) -> Block:
    object.__setattr__(block, "signature", sig)
    return block


def max_block_bytes(macroblock_size: int, Cl: int) -> int:
    return macroblock_size // Cl


class TxIndex:
    """Shared map from transaction hash to the (round, macroblock hash) holding it.

    Chains of all nodes in one simulation share an index so that "already on
    my chain" checks do not need a per-node copy of every hash.
    """

    def __init__(self) -> None:
        self._where: dict[bytes, list[tuple[int, bytes]]] = {}
        self._added: set[tuple[int, bytes]] = set()

    def add(self, mb: Macroblock) -> None:
        key = (mb.round, bytes(mb.macroblock_hash))
        if key in self._added:
            return
        self._added.add(key)
        for h in mb.tx_hashes():
            locs = self._where.setdefault(bytes(h), [])
            if key not in locs:
                locs.append(key)

    def locations(self, tx_hash: bytes) -> list[tuple[int, bytes]]:
        return self._where.get(bytes(tx_hash), [])


@dataclass
class ChainEntry:
    macroblock: Macroblock
    kind: str
    seed: Digest


class Chain:
    """Append-only macroblock chain owned by one node."""

    def __init__(self, Cl: int, mode: str = "dandelion", index: TxIndex | None = None):
        self.Cl = Cl
        self.mode = mode
        self.index = index if index is not None else TxIndex()
        g = genesis(Cl)
        self.entries: list[ChainEntry] = [ChainEntry(g, "final", GENESIS_SEED)]
        self.last_final_round = 0

    @property
    def tip(self) -> Macroblock:
        return self.entries[-1].macroblock

    @property
    def height(self) -> int:
        return len(self.entries) - 1

    @property
    def seed(self) -> Digest:
        """Sortition seed for the next round."""
        return self.entries[-1].seed

    def hash_at(self, round_: int) -> Digest | None:
        if 0 <= round_ < len(self.entries):
            return self.entries[round_].macroblock.macroblock_hash
        return None

    def contains_tx(self, tx_hash: bytes) -> bool:
        for r, mbh in self.index.locations(tx_hash):
            if self.hash_at(r) == mbh:
                return True
        return False

    def check(self, mb: Macroblock) -> None:
        if mb.round != self.height + 1:
            raise ChainError(f"expected round {self.height + 1}, got {mb.round}")
        if len(mb.hash_vector) != self.Cl:
            raise ChainError("hash vector length differs from Cl")
        tip_hash = self.tip.macroblock_hash
        seen: set[bytes] = set()
        for b in mb.blocks:
            if b.prev_macroblock_hash != tip_hash:
                raise ChainError(f"block {b.block_hash.short()} does not link to the chain tip")
            for t in b.txs:
                if t.tx_hash in seen:
                    raise ChainError("transaction duplicated inside macroblock")
                seen.add(t.tx_hash)
        for h in seen:
            if self.contains_tx(h):
                raise ChainError("transaction already appended earlier")

    def append(self, mb: Macroblock, kind: str, checked: bool = False) -> None:
        """Append ``mb``; ``checked`` skips validation already done for an identical chain."""
        if kind not in ("final", "tentative"):
            raise ValueError(kind)
        if not checked:
            self.check(mb)
        if self.mode == "dandelion":
            seed = round_seed(mb)
        else:
            seed = next_seed_algorand(self.seed, mb)
        self.entries.append(ChainEntry(mb, kind, seed))
        self.index.add(mb)
        if kind == "final":
            self.last_final_round = mb.round

    def is_confirmed(self, round_: int) -> bool:
        """Transactions of a round count as confirmed once it or a successor is final."""
        return round_ <= self.last_final_round

    def unconfirmed_rounds(self) -> list[int]:
        return list(range(self.last_final_round + 1, self.height + 1))

    def head_hashes(self) -> list[Digest]:
        return [e.macroblock.macroblock_hash for e in self.entries]
