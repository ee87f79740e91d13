"""Stake-weighted cryptographic sortition and bucket assignment."""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Mapping

from .crypto_sim import (
    Digest,
    KeyPair,
    VrfOutput,
    encode_int,
    hash_concat,
    vrf_evaluate,
    vrf_verify,
)

HASH_SPACE = 1 << 256


class InvalidParameter(ValueError):
    pass


@dataclass(frozen=True)
class StakeTable:
    balances: Mapping[int, int]
    total_W: int = field(init=False)

    def __post_init__(self) -> None:
        if any(b < 0 for b in self.balances.values()):
            raise InvalidParameter("stake balances must be non-negative")
        object.__setattr__(self, "total_W", sum(self.balances.values()))

    @classmethod
    def equal(cls, node_ids, stake: int) -> StakeTable:
        return cls({i: stake for i in node_ids})

    def __getitem__(self, node_id: int) -> int:
        return self.balances.get(node_id, 0)


@dataclass(frozen=True)
class SortitionParams:
    tau: int
    role_tag: bytes
    seed: Digest
    total_W: int
    threshold_T: float | None = None

    def __post_init__(self) -> None:
        if not 0 < self.tau <= self.total_W:
            raise InvalidParameter(f"need 0 < tau <= W, got tau={self.tau} W={self.total_W}")
        if self.threshold_T is not None and not 0 < self.threshold_T <= 1:
            raise InvalidParameter("threshold must lie in (0, 1]")

    @property
    def p(self) -> float:
        return self.tau / self.total_W

    def vrf_input(self) -> bytes:
        return bytes(self.seed) + self.role_tag


@dataclass(frozen=True)
class SortitionOutcome:
    vrf: VrfOutput
    j: int
    priority: Digest | None = None
    bucket_index: int | None = None

    @property
    def selected(self) -> bool:
        return self.j > 0


def role_tag(kind: str, round_: int, step: int = 0) -> bytes:
    """Per-(round, step) role tag so every committee is drawn afresh."""
    return kind.encode() + b"|" + encode_int(round_) + encode_int(step)


@lru_cache(maxsize=256)
def binomial_cdf(w: int, p: float) -> tuple[float, ...]:
    """Cumulative B(k; w, p) for k = 0..w.

    Terms come from log-space (lgamma) so large w stays finite; the running
    sum is Kahan-compensated.
    """
    if w < 0:
        raise InvalidParameter("stake must be non-negative")
    if p <= 0.0:
        return (1.0,) * (w + 1)
    if p >= 1.0:
        return (0.0,) * w + (1.0,)
    lp, lq = math.log(p), math.log1p(-p)
    lw = math.lgamma(w + 1)
    out = []
    total = 0.0
    comp = 0.0
    for k in range(w + 1):
        term = math.exp(lw - math.lgamma(k + 1) - math.lgamma(w - k + 1) + k * lp + (w - k) * lq)
        y = term - comp
        t = total + y
        comp = (t - total) - y
        total = t
        out.append(total)
    return tuple(out)


def uniform_from_hash(h: bytes) -> float:
    """Top 64 bits of the hash mapped to [0, 1)."""
    return int.from_bytes(h[:8], "big") / 2.0**64


def selection_count(vrf_hash: bytes, w: int, p: float) -> int:
    if w <= 0:
        return 0
    cdf = binomial_cdf(w, p)
    return min(bisect_right(cdf, uniform_from_hash(vrf_hash)), w)


def priority_of(vrf: VrfOutput, subnode_index: int, bucket_index: int | None = None) -> Digest:
    if bucket_index is None:
        return hash_concat(vrf.hash, encode_int(subnode_index))
    return hash_concat(vrf.hash, encode_int(subnode_index), encode_int(bucket_index))


def best_priority(vrf: VrfOutput, j: int, bucket_index: int | None = None) -> Digest:
    """Smallest digest over the selected sub-node indices (smallest wins)."""
    if j < 1:
        raise InvalidParameter("priority is only defined for j >= 1")
    return min(priority_of(vrf, i, bucket_index) for i in range(j))


def priority_key(priority: bytes, node_id: int) -> tuple[bytes, int]:
    """Total order over proposals: digest first, then lower node id."""
    return (bytes(priority), node_id)


def _check_cl(Cl: int) -> None:
    if Cl <= 0:
        raise InvalidParameter(f"concurrency level must be >= 1, got {Cl}")


def bucket_of_proposer(vrf: VrfOutput | bytes, Cl: int) -> int:
    _check_cl(Cl)
    h = vrf.hash if isinstance(vrf, VrfOutput) else vrf
    return int.from_bytes(h, "big") % Cl


def bucket_of_transaction(tx_hash: bytes, Cl: int) -> int:
    """Index of the contiguous hash-space range containing ``tx_hash``."""
    _check_cl(Cl)
    return (int.from_bytes(tx_hash, "big") * Cl) >> 256


def bucket_range(bucket: int, Cl: int) -> tuple[int, int]:
    """Half-open integer range [lo, hi) of hashes mapped to ``bucket``."""
    _check_cl(Cl)
    lo = -(-bucket * HASH_SPACE // Cl)
    hi = -(-(bucket + 1) * HASH_SPACE // Cl)
    return lo, hi


def sortition_select(
    kp: KeyPair,
    w: int,
    params: SortitionParams,
    Cl: int | None = None,
) -> SortitionOutcome:
    """Run sortition for one role.

    With ``Cl`` given the role is a Dandelion proposer: the outcome carries a
    bucket and the priority mixes in the bucket index.
    """
    vrf = vrf_evaluate(kp, params.vrf_input())
    j = selection_count(vrf.hash, w, params.p)
    if j == 0:
        return SortitionOutcome(vrf, 0)
    bucket = bucket_of_proposer(vrf, Cl) if Cl is not None else None
    return SortitionOutcome(vrf, j, best_priority(vrf, j, bucket), bucket)


def verify_sortition(public_tag: bytes, w: int, params: SortitionParams, vrf: VrfOutput, claimed_j: int) -> bool:
    """Public check that ``vrf`` is genuine and yields ``claimed_j`` selections."""
    if claimed_j < 1 or not vrf_verify(public_tag, params.vrf_input(), vrf):
        return False
    return selection_count(vrf.hash, w, params.p) == claimed_j


def prob_bucket_covered(Cl: int, tau_proposer: int) -> float:
    _check_cl(Cl)
    if tau_proposer < 0:
        raise InvalidParameter("tau_proposer must be >= 0")
    return float(1 - (1 - Fraction(1, Cl)) ** tau_proposer)


def prob_all_buckets_covered(Cl: int, tau_proposer: int) -> float:
    """Inclusion-exclusion sum, evaluated in exact rational arithmetic."""
    _check_cl(Cl)
    if tau_proposer < 0:
        raise InvalidParameter("tau_proposer must be >= 0")
    total = Fraction(0)
    for i in range(Cl + 1):
        sign = -1 if (Cl - i) % 2 else 1
        total += sign * math.comb(Cl, i) * Fraction(i, Cl) ** tau_proposer
    return float(total)
