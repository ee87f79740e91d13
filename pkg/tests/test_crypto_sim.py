from __future__ import annotations

import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dandelion.crypto_sim import (
    DIGEST_SIZE,
    Digest,
    KeyPair,
    SimulatedVrf,
    VrfOutput,
    get_backend,
    hash_bytes,
    hash_concat,
    set_backend,
    sign,
    verify_sig,
    vrf_evaluate,
    vrf_verify,
)

# SHA-256 of the empty string, as published in FIPS 180-2 test vectors.
EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def _flip(b: bytes, i: int = 0) -> bytes:
    return b[:i] + bytes([b[i] ^ 1]) + b[i + 1:]


def test_digest_length_enforced():
    with pytest.raises(ValueError):
        Digest(b"\x00" * 31)
    assert len(Digest(b"\x01" * DIGEST_SIZE)) == 32


def test_hash_of_empty_is_golden():
    assert hash_bytes(b"").hex() == EMPTY_SHA256


def test_hash_concat_equals_hash_of_joined():
    assert hash_concat(b"ab", b"cd") == hash_bytes(b"abcd")


def test_no_collisions_over_corpus():
    corpus = [i.to_bytes(8, "little") for i in range(100_000)]
    digests = {hash_bytes(x) for x in corpus}
    assert len(digests) == len(corpus)


def test_public_tag_derivation():
    kp = KeyPair.generate(3, 11)
    assert kp.public_tag == hashlib.sha256(kp.secret_seed + b"pub").digest()


def test_vrf_deterministic_and_verifiable():
    kp = KeyPair.generate(1, 5)
    a = vrf_evaluate(kp, b"input")
    assert a == vrf_evaluate(kp, b"input")
    assert vrf_verify(kp.public_tag, b"input", a)


def test_vrf_distinct_across_keys():
    hashes = {vrf_evaluate(KeyPair.generate(i, 77), b"same").hash for i in range(10_000)}
    assert len(hashes) == 10_000


def test_vrf_rejects_tampering():
    kp = KeyPair.generate(2, 5)
    out = vrf_evaluate(kp, b"x")
    assert not vrf_verify(kp.public_tag, b"x", VrfOutput(Digest(_flip(out.hash)), out.proof))
    assert not vrf_verify(kp.public_tag, b"x", VrfOutput(out.hash, _flip(out.proof)))
    assert not vrf_verify(kp.public_tag, b"y", out)
    other = KeyPair.generate(3, 5)
    assert not vrf_verify(other.public_tag, b"x", out)


def test_signature_roundtrip_and_failures():
    kp = KeyPair.generate(4, 5)
    other = KeyPair.generate(5, 5)
    sig = sign(kp, b"message")
    assert verify_sig(kp.public_tag, b"message", sig)
    assert not verify_sig(kp.public_tag, _flip(b"message"), sig)
    assert not verify_sig(kp.public_tag, b"message", _flip(sig))
    assert not verify_sig(kp.public_tag, b"message", sign(other, b"message"))


def test_unknown_public_tag_fails():
    kp = KeyPair.generate(6, 5)
    assert not verify_sig(hash_bytes(b"nobody"), b"m", sign(kp, b"m"))


def test_backend_is_pluggable():
    original = get_backend()
    calls = []

    class Recording(SimulatedVrf):
        def evaluate(self, kp, data):
            calls.append(data)
            return super().evaluate(kp, data)

    try:
        set_backend(Recording())
        kp = KeyPair.generate(9, 1)
        out = vrf_evaluate(kp, b"z")
        assert calls == [b"z"] and vrf_verify(kp.public_tag, b"z", out)
    finally:
        set_backend(original)


@settings(max_examples=200, deadline=None)
@given(node=st.integers(0, 10_000), data=st.binary(max_size=64), pos=st.integers(0, 31))
def test_fuzzed_tampering_always_rejected(node, data, pos):
    kp = KeyPair.generate(node, 123)
    out = vrf_evaluate(kp, data)
    assert vrf_verify(kp.public_tag, data, out)
    assert not vrf_verify(kp.public_tag, data, VrfOutput(Digest(_flip(out.hash, pos)), out.proof))
    sig = sign(kp, data)
    assert not verify_sig(kp.public_tag, data, _flip(sig, pos))
