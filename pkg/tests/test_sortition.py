from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import binomial_moments, mc_coverage

from dandelion.crypto_sim import Digest, KeyPair, VrfOutput, hash_bytes, hash_concat, encode_int
from dandelion.sortition import (
    HASH_SPACE,
    InvalidParameter,
    SortitionParams,
    StakeTable,
    best_priority,
    binomial_cdf,
    bucket_of_proposer,
    bucket_of_transaction,
    bucket_range,
    priority_key,
    priority_of,
    prob_all_buckets_covered,
    prob_bucket_covered,
    role_tag,
    selection_count,
    sortition_select,
    verify_sortition,
)

SEED = hash_bytes(b"round-seed")


def _params(tau=100, W=1000, tag=b"proposer", seed=SEED):
    return SortitionParams(tau, tag, seed, W)


def _vrf_with_int(value: int) -> VrfOutput:
    return VrfOutput(Digest(value.to_bytes(32, "big")), b"")


def test_stake_table_totals():
    st_ = StakeTable({1: 5, 2: 7})
    assert st_.total_W == 12 and st_[3] == 0
    with pytest.raises(InvalidParameter):
        StakeTable({1: -1})


def test_params_validation_and_p():
    assert _params(100, 1000).p == pytest.approx(0.1)
    with pytest.raises(InvalidParameter):
        _params(0, 1000)
    with pytest.raises(InvalidParameter):
        _params(2000, 1000)


def test_zero_stake_never_selected():
    kp = KeyPair.generate(1, 0)
    assert sortition_select(kp, 0, _params()).j == 0


def test_outcome_fields():
    kp = KeyPair.generate(1, 0)
    for r in range(200):
        out = sortition_select(kp, 50, _params(tag=role_tag("proposer", r)), Cl=8)
        assert 0 <= out.j <= 50
        if out.selected:
            assert out.priority == best_priority(out.vrf, out.j, out.bucket_index)
            assert out.bucket_index == bucket_of_proposer(out.vrf, 8)
            assert verify_sortition(kp.public_tag, 50, _params(tag=role_tag("proposer", r)), out.vrf, out.j)
            assert not verify_sortition(kp.public_tag, 50, _params(tag=role_tag("proposer", r)), out.vrf, out.j + 1)
        else:
            assert out.priority is None and out.bucket_index is None


def test_selection_count_inverts_cdf():
    cdf = binomial_cdf(10, 0.1)
    for j in range(10):
        lo = cdf[j - 1] if j else 0.0
        u = (lo + cdf[j]) / 2
        h = int(u * 2**64).to_bytes(8, "big") + bytes(24)
        assert selection_count(h, 10, 0.1) == j


def _draws(w: int, tau: int, W: int, n: int, node: int = 1) -> np.ndarray:
    kp = KeyPair.generate(node, 42)
    return np.array([
        sortition_select(kp, w, SortitionParams(tau, b"stat", hash_concat(b"s", encode_int(i)), W)).j
        for i in range(n)
    ])


def test_selection_mean_matches_binomial():
    n, w, p = 100_000, 10, 0.1
    j = _draws(w, 100, 1000, n)
    mean, var, _ = binomial_moments(w, p)
    assert abs(j.mean() - mean) <= 3 * math.sqrt(var / n)


def test_priority_single_and_brute_force():
    vrf = _vrf_with_int(12345)
    assert best_priority(vrf, 1) == priority_of(vrf, 0)
    assert best_priority(vrf, 3, 2) == min(hash_concat(vrf.hash, encode_int(i), encode_int(2)) for i in range(3))
    assert priority_of(vrf, 0, 1) != priority_of(vrf, 0, 2)
    with pytest.raises(InvalidParameter):
        best_priority(vrf, 0)


def test_priority_key_tiebreak():
    d = bytes(32)
    assert priority_key(d, 1) < priority_key(d, 2)


def test_bucket_of_proposer_modulo():
    assert bucket_of_proposer(_vrf_with_int(7), 3) == 1
    assert bucket_of_proposer(_vrf_with_int(123456789), 1) == 0
    with pytest.raises(InvalidParameter):
        bucket_of_proposer(_vrf_with_int(1), 0)


def test_bucket_of_proposer_uniform():
    rng = np.random.default_rng(1)
    n, Cl = 100_000, 20
    counts = np.zeros(Cl, dtype=int)
    raw = rng.bytes(32 * n)
    for i in range(n):
        counts[bucket_of_proposer(raw[32 * i:32 * i + 32], Cl)] += 1
    sigma = math.sqrt(n * (1 / Cl) * (1 - 1 / Cl))
    assert np.all(np.abs(counts - n / Cl) <= 3 * sigma)


def test_bucket_of_transaction_basics():
    assert bucket_of_transaction(bytes(32), 7) == 0
    assert bucket_of_transaction(b"\xff" * 32, 7) == 6
    assert bucket_of_transaction(hash_bytes(b"x"), 1) == 0
    with pytest.raises(InvalidParameter):
        bucket_of_transaction(bytes(32), 0)


def test_bucket_of_transaction_uniform():
    rng = np.random.default_rng(2)
    n, Cl = 100_000, 3
    raw = rng.bytes(32 * n)
    counts = np.bincount([bucket_of_transaction(raw[32 * i:32 * i + 32], Cl) for i in range(n)], minlength=Cl)
    sigma = math.sqrt(n * (1 / Cl) * (1 - 1 / Cl))
    assert np.all(np.abs(counts - n / Cl) <= 3 * sigma)


@pytest.mark.parametrize("Cl", [1, 2, 3, 7, 16, 20, 32, 1000])
def test_bucket_ranges_partition_hash_space(Cl):
    prev_hi = 0
    for b in range(Cl):
        lo, hi = bucket_range(b, Cl)
        assert lo == prev_hi and hi > lo
        for h in (lo, hi - 1):
            assert bucket_of_transaction(h.to_bytes(32, "big"), Cl) == b
        prev_hi = hi
    assert prev_hi == HASH_SPACE


@settings(max_examples=60, deadline=None)
@given(w=st.integers(0, 64), p=st.floats(0.0, 1.0))
def test_binomial_cdf_sums_to_one(w, p):
    cdf = binomial_cdf(w, p)
    assert len(cdf) == w + 1
    assert abs(cdf[-1] - 1.0) <= 1e-9
    assert all(a <= b + 1e-15 for a, b in zip(cdf, cdf[1:]))


def test_prob_bucket_covered_closed_form():
    assert prob_bucket_covered(1, 5) == 1.0
    assert prob_bucket_covered(4, 0) == 0.0
    assert prob_bucket_covered(20, 100) == pytest.approx(1 - (19 / 20) ** 100, abs=1e-15)


def test_prob_all_buckets_brute_force():
    assert prob_all_buckets_covered(1, 3) == 1.0
    # Cl = 2, tau = 2: of the four equiprobable assignments exactly two hit both buckets.
    hits = sum(1 for a in itertools.product(range(2), repeat=2) if set(a) == {0, 1})
    assert prob_all_buckets_covered(2, 2) == hits / 4 == 0.5
    for Cl, tau in [(3, 4), (4, 5), (3, 6)]:
        hits = sum(1 for a in itertools.product(range(Cl), repeat=tau) if len(set(a)) == Cl)
        assert prob_all_buckets_covered(Cl, tau) == pytest.approx(hits / Cl**tau, abs=1e-12)


def test_prob_bucket_covered_monte_carlo_fine():
    one, _ = mc_coverage(20, 100, 1_000_000, seed=3)
    assert abs(one - prob_bucket_covered(20, 100)) <= 1e-3


@pytest.mark.parametrize("Cl", [2, 3, 4, 8, 16, 20, 32])
@pytest.mark.parametrize("tau", [10, 26, 50, 100, 150, 200])
def test_coverage_monte_carlo(Cl, tau):
    one, every = mc_coverage(Cl, tau, 100_000, seed=Cl * 1000 + tau)
    assert abs(one - prob_bucket_covered(Cl, tau)) <= 1e-2
    assert abs(every - prob_all_buckets_covered(Cl, tau)) <= 1e-2
    assert prob_all_buckets_covered(Cl, tau) <= prob_bucket_covered(Cl, tau) + 1e-15


def test_coverage_at_tau_100():
    for Cl in (1, 2, 4, 8, 16):
        assert prob_all_buckets_covered(Cl, 100) > 0.90
    assert prob_all_buckets_covered(32, 100) < 0.90


def test_coverage_cl20_exact_value():
    # Exact inclusion-exclusion value; it sits below 0.90 (see acceptance criterion 3).
    assert prob_all_buckets_covered(20, 100) == pytest.approx(0.88653734, abs=1e-8)


def test_stake_splitting_gives_no_gain():
    n, w, tau, W = 100_000, 10, 100, 1000
    whole = _draws(w, tau, W, n, node=1)
    kps = [KeyPair.generate(100 + k, 42) for k in range(w)]
    split = np.zeros(n, dtype=int)
    for i in range(n):
        params = SortitionParams(tau, b"stat", hash_concat(b"s", encode_int(i)), W)
        split[i] = sum(sortition_select(kp, 1, params).j for kp in kps)
    mean, var, mu4 = binomial_moments(w, tau / W)
    se_mean = math.sqrt(2 * var / n)
    assert abs(whole.mean() - split.mean()) <= 3 * se_mean
    se_var = math.sqrt(2 * (mu4 - var**2) / n)
    assert abs(whole.var(ddof=1) - split.var(ddof=1)) <= 3 * se_var
