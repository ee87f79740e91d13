from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dandelion.consensus import (
    FINAL,
    FINAL_STEP,
    REDUCTION_ONE,
    REDUCTION_TWO,
    TENTATIVE,
    TIMEOUT,
    AgreementTrace,
    Coin,
    CommitteeConfig,
    Count,
    HashVector,
    SingleHash,
    StepTally,
    TraceVote,
    Vote,
    VoteMessage,
    ba_star,
    binary_step,
    classify_final,
    committee_params,
    count_votes,
    make_vote,
    replay,
    verify_vote,
    wrap_as_vector,
)
from dandelion.crypto_sim import ZERO_DIGEST, Digest, KeyPair, VrfOutput, hash_bytes

CFG = CommitteeConfig()
CAND = SingleHash(hash_bytes(b"block"))
OTHER = SingleHash(hash_bytes(b"other"))
EMPTY = SingleHash(ZERO_DIGEST)
CRED = VrfOutput(Digest(bytes(32)), b"")


def _vote(voter: int, j: int, step: int = 1, value=CAND) -> VoteMessage:
    return VoteMessage(1, step, voter, value, j, CRED)


def drive(answer, candidate=CAND, empty=EMPTY, cfg=CFG):
    """Run ba_star, answering each Count with ``answer(step)``; coin answers are 0."""
    gen = ba_star(candidate, empty, cfg)
    votes, send = [], None
    while True:
        try:
            action = gen.send(send)
        except StopIteration as stop:
            return stop.value, votes
        send = None
        if isinstance(action, Vote):
            votes.append((action.step, action.value))
        elif isinstance(action, Count):
            send = answer(action.step)
        elif isinstance(action, Coin):
            send = 0


def test_thresholds_are_strict():
    assert StepTally(CFG.threshold(False)).need == 1371
    assert StepTally(CFG.threshold(True)).need == 7401
    assert classify_final(7401, CFG) == FINAL
    assert classify_final(7400, CFG) == TENTATIVE


def test_threshold_must_exceed_two_thirds():
    with pytest.raises(ValueError):
        CommitteeConfig(T_step=0.6)


@pytest.mark.parametrize("weight, winner", [(1370, False), (1371, True)])
def test_count_votes_boundary(weight, winner):
    stream = [(0.0, _vote(0, weight))]
    res = count_votes(1, CFG.threshold(False), stream, 0.0, 20.0)
    assert (res.outcome == CAND) is winner
    assert res.timed_out is not winner


def test_weight_j_equals_j_unit_votes():
    th = CFG.threshold(False)
    one = count_votes(1, th, [(0.0, _vote(0, 5)), (1.0, _vote(1, 1366))], 0.0, 20.0)
    many = count_votes(1, th, [(0.0, _vote(i, 1)) for i in range(5)] + [(1.0, _vote(9, 1366))], 0.0, 20.0)
    assert one.outcome == many.outcome == CAND and one.at == many.at == 1.0


def test_count_votes_dedups_and_ignores_other_steps_and_late():
    th = CFG.threshold(False)
    stream = [(0.0, _vote(0, 1000)), (0.5, _vote(0, 1000)), (0.6, _vote(1, 1000, step=2)), (25.0, _vote(2, 1000))]
    assert count_votes(1, th, stream, 0.0, 20.0).timed_out
    assert count_votes(1, th, stream, 0.0, 20.0, is_valid=lambda v: False).at == 20.0


def test_happy_path_is_final_in_two_steps():
    d, votes = drive(lambda s: CAND)
    assert d.value == CAND and d.kind == FINAL and d.steps == 2
    assert votes[:3] == [(REDUCTION_ONE, CAND), (REDUCTION_TWO, CAND), (binary_step(1), CAND)]
    assert (FINAL_STEP, CAND) in votes


def test_missing_final_quorum_is_tentative():
    d, _ = drive(lambda s: TIMEOUT if s == FINAL_STEP else CAND)
    assert d.value == CAND and d.kind == TENTATIVE


def test_reduction_timeouts_lead_to_empty():
    def answer(step):
        if step in (REDUCTION_ONE, REDUCTION_TWO):
            return TIMEOUT
        return EMPTY if step == binary_step(2) else TIMEOUT

    d, votes = drive(answer)
    assert votes[1] == (REDUCTION_TWO, EMPTY)
    assert d.value == EMPTY and d.kind == TENTATIVE and d.steps == 3


def test_exhaustion_is_bounded_and_tentative():
    d, votes = drive(lambda s: TIMEOUT, cfg=CommitteeConfig(max_binary_steps=7))
    assert d.kind == TENTATIVE and d.steps == 8
    assert max(s for s, _ in votes if s != FINAL_STEP) <= binary_step(7)


@settings(max_examples=300, deadline=None)
@given(answers=st.lists(st.sampled_from(["t", "c", "e", "o"]), min_size=1, max_size=40),
       max_steps=st.integers(1, 12))
def test_agreement_always_terminates_within_bound(answers, max_steps):
    table = {"t": TIMEOUT, "c": CAND, "e": EMPTY, "o": OTHER}
    it = iter(answers)
    final_answer = []

    def answer(step):
        a = table[next(it, "t")]
        if step == FINAL_STEP:
            final_answer.append(a)
        return a

    d, votes = drive(answer, cfg=CommitteeConfig(max_binary_steps=max_steps))
    assert 1 <= d.steps <= max_steps + 1
    assert (d.kind == FINAL) == (final_answer == [d.value])
    # A node only ever casts a final vote for a non-empty value decided in the first binary step.
    assert all(v != EMPTY and d.steps == 2 for s, v in votes if s == FINAL_STEP)


def test_role_tags_distinct_per_round_and_step():
    seed = hash_bytes(b"s")
    tags = {committee_params(CFG, seed, r, s, 10**6).role_tag for r in range(1, 4) for s in (1, 2, 3, FINAL_STEP)}
    assert len(tags) == 12
    fin = committee_params(CFG, seed, 1, FINAL_STEP, 10**6)
    assert fin.tau == 10000 and fin.threshold_T == 0.74


def test_make_and_verify_vote():
    kp = KeyPair.generate(3, 1)
    seed = hash_bytes(b"seed")
    v = None
    for r in range(1, 50):
        v = make_vote(kp, 100, CFG, seed, 100_000, r, 1, CAND)
        if v is not None:
            break
    assert v is not None and v.j >= 1
    assert verify_vote(v, kp.public_tag, 100, CFG, seed, 100_000)
    forged = VoteMessage(v.round, v.step, v.voter_id, v.value, v.j + 1, v.credential, v.signature)
    assert not verify_vote(forged, kp.public_tag, 100, CFG, seed, 100_000)
    other = VoteMessage(v.round, v.step, v.voter_id, OTHER, v.j, v.credential, v.signature)
    assert not verify_vote(other, kp.public_tag, 100, CFG, seed, 100_000)


def test_hash_vector_empty_marker():
    assert HashVector.empty(3).is_empty_marker()
    assert not HashVector((ZERO_DIGEST, CAND.digest)).is_empty_marker()
    assert wrap_as_vector(EMPTY, EMPTY) == HashVector.empty(1)
    assert wrap_as_vector(CAND, EMPTY) == HashVector((CAND.digest,))


def test_replay_happy_trace():
    steps = [REDUCTION_ONE, REDUCTION_TWO, binary_step(1), FINAL_STEP]
    votes = {s: [TraceVote(1.0, 1, CAND, 8000 if s == FINAL_STEP else 1500)] for s in steps}
    d, cast = replay(AgreementTrace(votes, {s: 1 for s in steps}, own_id=0), CAND, EMPTY, CFG)
    assert d.value == CAND and d.kind == FINAL
    assert [s for _, s, _ in cast][:3] == steps[:3]


_value = st.sampled_from([CAND, OTHER, EMPTY])
_trace_vote = st.builds(TraceVote, st.floats(0, 30), st.integers(1, 30), _value, st.integers(1, 3000),
                        st.binary(min_size=32, max_size=32))
_steps = [REDUCTION_ONE, REDUCTION_TWO] + [binary_step(i) for i in range(1, 11)] + [FINAL_STEP]


@settings(max_examples=200, deadline=None)
@given(votes=st.dictionaries(st.sampled_from(_steps), st.lists(_trace_vote, max_size=6)),
       own=st.dictionaries(st.sampled_from(_steps), st.integers(0, 500)),
       cand=_value)
def test_single_and_vector_engines_agree(votes, own, cand):
    trace = AgreementTrace(votes, own, own_id=0)
    wrap = lambda v: wrap_as_vector(v, EMPTY)  # noqa: E731
    d1, cast1 = replay(trace, cand, EMPTY, CFG)
    d2, cast2 = replay(trace.mapped(wrap), wrap(cand), HashVector.empty(1), CFG)
    assert wrap(d1.value) == d2.value and d1.kind == d2.kind and d1.steps == d2.steps
    assert [(t, s, wrap(v)) for t, s, v in cast1] == cast2
