"""BA* agreement: vote counting, two-step reduction and BinaryBA*.

The agreement is written as a generator that yields :class:`Vote`,
:class:`Count` and :class:`Coin` requests and receives counting results back.
It never looks inside the value it agrees on, so the same code decides a
single block hash or a vector of ``Cl`` block hashes. Whoever drives the
generator owns time, networking and committee sortition.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Generator, Iterable, Union

from .crypto_sim import ZERO_DIGEST, Digest, KeyPair, VrfOutput, encode_int, hash_concat, sign, verify_sig
from .sortition import SortitionParams, role_tag, sortition_select, verify_sortition

REDUCTION_ONE = 1
REDUCTION_TWO = 2
FINAL_STEP = 0xFFFF
FINAL = "final"
TENTATIVE = "tentative"


def binary_step(index: int) -> int:
    """Global step number of the ``index``-th BinaryBA* step (1-based)."""
    return REDUCTION_TWO + index


class _Timeout:
    def __repr__(self) -> str:
        return "TIMEOUT"


TIMEOUT = _Timeout()


@dataclass(frozen=True)
class SingleHash:
    digest: Digest

    def __hash__(self) -> int:
        return hash(self.digest)

    def encode(self) -> bytes:
        return b"S" + bytes(self.digest)

    def is_empty_marker(self) -> bool:
        return self.digest == ZERO_DIGEST


@dataclass(frozen=True)
class HashVector:
    hashes: tuple[Digest, ...]
    _hash: int = field(init=False, repr=False, compare=False, default=0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_hash", hash(self.hashes))

    def __hash__(self) -> int:
        return self._hash

    def encode(self) -> bytes:
        return b"V" + struct.pack("<I", len(self.hashes)) + b"".join(self.hashes)

    @classmethod
    def empty(cls, Cl: int) -> HashVector:
        return cls((ZERO_DIGEST,) * Cl)

    def is_empty_marker(self) -> bool:
        return all(h == ZERO_DIGEST for h in self.hashes)

    @property
    def Cl(self) -> int:
        return len(self.hashes)


VoteValue = Union[SingleHash, HashVector]


@dataclass(frozen=True)
class CommitteeConfig:
    tau_step: int = 2000
    T_step: float = 0.685
    tau_final: int = 10000
    T_final: float = 0.74
    lambda_step: float = 20.0
    lambda_stepvar: float = 5.0
    max_binary_steps: int = 10

    def __post_init__(self) -> None:
        for T in (self.T_step, self.T_final):
            if not 2 / 3 < T <= 1:
                raise ValueError(f"threshold {T} must exceed 2/3 for safety")

    def threshold(self, final: bool) -> Fraction:
        """Weighted vote count a value must strictly exceed."""
        if final:
            return Fraction(str(self.T_final)) * self.tau_final
        return Fraction(str(self.T_step)) * self.tau_step

    def tau(self, final: bool) -> int:
        return self.tau_final if final else self.tau_step


@dataclass(frozen=True)
class VoteMessage:
    round: int
    step: int
    voter_id: int
    value: VoteValue
    j: int
    credential: VrfOutput
    signature: bytes = field(default=b"", compare=False)
    _coin: Digest | None = field(default=None, init=False, repr=False, compare=False)

    def signed_bytes(self) -> bytes:
        return (
            b"VOTE"
            + encode_int(self.round)
            + encode_int(self.step)
            + encode_int(self.voter_id)
            + encode_int(self.j)
            + bytes(self.credential.hash)
            + self.value.encode()
        )

    @property
    def dedup_id(self) -> Digest:
        return hash_concat(self.signed_bytes(), self.signature)

    @property
    def is_final(self) -> bool:
        return self.step == FINAL_STEP


def committee_params(cfg: CommitteeConfig, seed: Digest, round_: int, step: int, total_W: int) -> SortitionParams:
    final = step == FINAL_STEP
    return SortitionParams(
        tau=cfg.tau(final),
        role_tag=role_tag("final" if final else "step", round_, step),
        seed=seed,
        total_W=total_W,
        threshold_T=cfg.T_final if final else cfg.T_step,
    )


def make_vote(kp: KeyPair, stake: int, cfg: CommitteeConfig, seed: Digest, total_W: int,
              round_: int, step: int, value: VoteValue) -> VoteMessage | None:
    """Committee vote for ``value``, or None when sortition does not select us."""
    outcome = sortition_select(kp, stake, committee_params(cfg, seed, round_, step, total_W))
    if not outcome.selected:
        return None
    unsigned = VoteMessage(round_, step, kp.node_id, value, outcome.j, outcome.vrf)
    return VoteMessage(round_, step, kp.node_id, value, outcome.j, outcome.vrf,
                       sign(kp, unsigned.signed_bytes()))


def verify_vote(vote: VoteMessage, public_tag: bytes, stake: int, cfg: CommitteeConfig,
                seed: Digest, total_W: int) -> bool:
    if vote.j < 1 or not verify_sig(public_tag, vote.signed_bytes(), vote.signature):
        return False
    params = committee_params(cfg, seed, vote.round, vote.step, total_W)
    return verify_sortition(public_tag, stake, params, vote.credential, vote.j)


def coin_digest(vote: VoteMessage) -> Digest:
    """Lowest per-sub-node hash carried by one vote, used for the common coin."""
    d = vote._coin
    if d is None:
        d = min(hash_concat(vote.credential.hash, encode_int(k)) for k in range(1, vote.j + 1))
        object.__setattr__(vote, "_coin", d)
    return d


class StepTally:
    """Weighted votes received for one (round, step)."""

    __slots__ = ("threshold", "need", "weights", "voters", "winner", "coin_min")

    def __init__(self, threshold: Fraction):
        self.threshold = threshold
        self.need = math.floor(threshold) + 1  # smallest integer weight strictly above
        self.weights: dict = {}
        self.voters: set[int] = set()
        self.winner = None
        self.coin_min: Digest | None = None

    def add(self, vote: VoteMessage, with_coin: bool = False):
        """Count a verified vote; returns the winning value once one exists."""
        if vote.voter_id in self.voters:
            return self.winner
        self.voters.add(vote.voter_id)
        w = self.weights.get(vote.value, 0) + vote.j
        self.weights[vote.value] = w
        if with_coin:
            d = coin_digest(vote)
            if self.coin_min is None or d < self.coin_min:
                self.coin_min = d
        if self.winner is None and w >= self.need:
            self.winner = vote.value
        return self.winner

    def coin(self) -> int:
        if self.coin_min is None:
            return 0
        return self.coin_min[-1] & 1


@dataclass(frozen=True)
class StepResult:
    outcome: object
    at: float

    @property
    def timed_out(self) -> bool:
        return self.outcome is TIMEOUT


def count_votes(step: int, threshold: Fraction, vote_stream: Iterable[tuple[float, VoteMessage]],
                start: float, deadline: float,
                is_valid: Callable[[VoteMessage], bool] = lambda v: True) -> StepResult:
    """Offline CountVotes over a time-ordered stream of (arrival, vote).

    Votes for other steps and unverifiable votes are ignored; a voter counts
    once. Votes that arrived before ``start`` still count.
    """
    tally = StepTally(threshold)
    for at, vote in vote_stream:
        if at > deadline:
            break
        if vote.step != step or not is_valid(vote):
            continue
        if tally.add(vote) is not None:
            return StepResult(tally.winner, max(at, start))
    return StepResult(TIMEOUT, deadline)


def classify_final(final_weight: int, cfg: CommitteeConfig) -> str:
    return FINAL if final_weight > cfg.threshold(final=True) else TENTATIVE


@dataclass(frozen=True)
class Vote:
    step: int
    value: VoteValue


@dataclass(frozen=True)
class Count:
    step: int

    @property
    def final(self) -> bool:
        return self.step == FINAL_STEP


@dataclass(frozen=True)
class Coin:
    step: int


@dataclass(frozen=True)
class BinaryResult:
    value: VoteValue
    steps: int
    exhausted: bool = False


@dataclass(frozen=True)
class Decision:
    value: VoteValue
    kind: str
    steps: int


Agreement = Generator[Union[Vote, Count, Coin], object, Decision]


def reduction(candidate: VoteValue, empty: VoteValue):
    yield Vote(REDUCTION_ONE, candidate)
    r1 = yield Count(REDUCTION_ONE)
    yield Vote(REDUCTION_TWO, empty if r1 is TIMEOUT else r1)
    r2 = yield Count(REDUCTION_TWO)
    return empty if r2 is TIMEOUT else r2


def binary_ba(start: VoteValue, empty: VoteValue, max_steps: int = 10):
    """BinaryBA* with the vote-value / vote-empty / common-coin period."""
    r = start
    step = 1
    while step <= max_steps:
        yield Vote(binary_step(step), r)
        r = yield Count(binary_step(step))
        if r is TIMEOUT:
            r = start
        elif r != empty:
            for k in range(1, 4):
                yield Vote(binary_step(step + k), r)
            if step == 1:
                yield Vote(FINAL_STEP, r)
            return BinaryResult(r, step)
        step += 1
        if step > max_steps:
            break

        yield Vote(binary_step(step), r)
        r = yield Count(binary_step(step))
        if r is TIMEOUT:
            r = empty
        elif r == empty:
            for k in range(1, 4):
                yield Vote(binary_step(step + k), r)
            return BinaryResult(r, step)
        step += 1
        if step > max_steps:
            break

        yield Vote(binary_step(step), r)
        r = yield Count(binary_step(step))
        if r is TIMEOUT:
            coin = yield Coin(binary_step(step))
            r = start if coin == 0 else empty
        step += 1
    return BinaryResult(r, max_steps, exhausted=True)


def ba_star(candidate: VoteValue, empty: VoteValue, cfg: CommitteeConfig):
    """Full agreement for one round.

    ``Decision.steps`` counts BinaryBA* voting steps plus the final-vote step,
    so the common honest case reports 2 and the bound is
    ``cfg.max_binary_steps + 1``.
    """
    start = yield from reduction(candidate, empty)
    res = yield from binary_ba(start, empty, cfg.max_binary_steps)
    if res.exhausted:
        return Decision(res.value, TENTATIVE, res.steps + 1)
    final_value = yield Count(FINAL_STEP)
    kind = FINAL if final_value == res.value else TENTATIVE
    return Decision(res.value, kind, res.steps + 1)


def wrap_as_vector(value: SingleHash, empty_single: SingleHash) -> HashVector:
    """Cl = 1 embedding of a single-hash value into the vector domain."""
    if value == empty_single:
        return HashVector.empty(1)
    return HashVector((value.digest,))


@dataclass
class TraceVote:
    at: float
    voter_id: int
    value: VoteValue
    weight: int
    coin_digest: Digest = ZERO_DIGEST


@dataclass
class AgreementTrace:
    """Environment seen by one node: other voters' votes per step, own weights."""

    votes: dict[int, list[TraceVote]]
    own_weight: dict[int, int]
    own_id: int = -1

    def mapped(self, fn: Callable[[VoteValue], VoteValue]) -> AgreementTrace:
        return AgreementTrace(
            {s: [TraceVote(v.at, v.voter_id, fn(v.value), v.weight, v.coin_digest) for v in vs]
             for s, vs in self.votes.items()},
            dict(self.own_weight),
            self.own_id,
        )


def replay(trace: AgreementTrace, candidate: VoteValue, empty: VoteValue, cfg: CommitteeConfig,
           start_time: float = 0.0) -> tuple[Decision, list[tuple[float, int, VoteValue]]]:
    """Drive ``ba_star`` against a fixed vote trace; returns decision and own votes cast."""
    gen = ba_star(candidate, empty, cfg)
    now = start_time
    own: dict[int, tuple[float, VoteValue]] = {}
    cast: list[tuple[float, int, VoteValue]] = []
    send = None
    while True:
        try:
            action = gen.send(send)
        except StopIteration as stop:
            return stop.value, cast
        send = None
        if isinstance(action, Vote):
            if trace.own_weight.get(action.step, 0) > 0 and action.step not in own:
                own[action.step] = (now, action.value)
                cast.append((now, action.step, action.value))
        elif isinstance(action, Count):
            threshold = cfg.threshold(action.final)
            stream = [(v.at, v.voter_id, v.value, v.weight) for v in trace.votes.get(action.step, [])]
            if action.step in own:
                t, val = own[action.step]
                stream.append((t, trace.own_id, val, trace.own_weight[action.step]))
            stream.sort(key=lambda x: (x[0], x[1]))
            deadline = now + cfg.lambda_step
            weights: dict = {}
            seen: set[int] = set()
            result = TIMEOUT
            at = deadline
            for t, voter, val, w in stream:
                if t > deadline:
                    break
                if voter in seen:
                    continue
                seen.add(voter)
                weights[val] = weights.get(val, 0) + w
                if weights[val] > threshold:
                    result, at = val, max(t, now)
                    break
            now = at
            send = result
        elif isinstance(action, Coin):
            digests = [v.coin_digest for v in trace.votes.get(action.step, []) if v.at <= now]
            send = (min(digests)[-1] & 1) if digests else 0
