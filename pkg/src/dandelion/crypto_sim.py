"""Deterministic stand-ins for hashing, signatures and VRFs.

Everything here is a pure function of its inputs. Secrets never leave the
key registry: verification is answered by a registry lookup that recomputes
the keyed hash, which is enough to make forged or tampered outputs fail while
keeping runs reproducible. A production VRF can be plugged in by implementing
:class:`VrfBackend` and calling :func:`set_backend`.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Protocol

DIGEST_SIZE = 32


class Digest(bytes):
    """A 32-byte hash value. Compares and orders byte-wise."""

    def __new__(cls, value: bytes) -> Digest:
        if len(value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    def as_int(self) -> int:
        return int.from_bytes(self, "big")

    def short(self) -> str:
        return self.hex()[:12]

    def __repr__(self) -> str:
        return f"Digest({self.short()}..)"


ZERO_DIGEST = Digest(bytes(DIGEST_SIZE))


def hash_bytes(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def hash_concat(*parts: bytes) -> Digest:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return Digest(h.digest())


def encode_int(value: int) -> bytes:
    """Fixed little-endian 8-byte encoding used inside hash inputs."""
    return struct.pack("<q", value)


@dataclass(frozen=True)
class VrfOutput:
    hash: Digest
    proof: bytes


@dataclass(frozen=True)
class KeyPair:
    node_id: int
    secret_seed: bytes = field(repr=False)
    public_tag: Digest

    @classmethod
    def generate(cls, node_id: int, master_seed: int | bytes = 0) -> KeyPair:
        """Derive a key pair deterministically and register it with the backend."""
        if isinstance(master_seed, int):
            master_seed = encode_int(master_seed)
        secret = hash_concat(b"secret", master_seed, encode_int(node_id))
        kp = cls(node_id, bytes(secret), hash_concat(secret, b"pub"))
        _backend.register(kp)
        return kp


class VrfBackend(Protocol):
    def register(self, kp: KeyPair) -> None: ...

    def evaluate(self, kp: KeyPair, data: bytes) -> VrfOutput: ...

    def verify(self, public_tag: bytes, data: bytes, out: VrfOutput) -> bool: ...

    def sign(self, kp: KeyPair, msg: bytes) -> bytes: ...

    def verify_sig(self, public_tag: bytes, msg: bytes, sig: bytes) -> bool: ...


class SimulatedVrf:
    """Keyed-hash VRF and signatures checked through a secret registry."""

    def __init__(self) -> None:
        self._secrets: dict[bytes, bytes] = {}

    def register(self, kp: KeyPair) -> None:
        self._secrets[bytes(kp.public_tag)] = kp.secret_seed

    def evaluate(self, kp: KeyPair, data: bytes) -> VrfOutput:
        return VrfOutput(
            hash_concat(kp.secret_seed, data),
            bytes(hash_concat(kp.secret_seed, data, b"proof")),
        )

    def verify(self, public_tag: bytes, data: bytes, out: VrfOutput) -> bool:
        secret = self._secrets.get(bytes(public_tag))
        if secret is None:
            return False
        return (
            bytes(out.hash) == hash_concat(secret, data)
            and bytes(out.proof) == hash_concat(secret, data, b"proof")
        )

    def sign(self, kp: KeyPair, msg: bytes) -> bytes:
        return bytes(hash_concat(kp.secret_seed, b"sig", msg))

    def verify_sig(self, public_tag: bytes, msg: bytes, sig: bytes) -> bool:
        secret = self._secrets.get(bytes(public_tag))
        if secret is None:
            return False
        return bytes(sig) == hash_concat(secret, b"sig", msg)


_backend: VrfBackend = SimulatedVrf()


def set_backend(backend: VrfBackend) -> None:
    global _backend
    _backend = backend


def get_backend() -> VrfBackend:
    return _backend


def vrf_evaluate(kp: KeyPair, data: bytes) -> VrfOutput:
    return _backend.evaluate(kp, data)


def vrf_verify(public_tag: bytes, data: bytes, out: VrfOutput) -> bool:
    return _backend.verify(public_tag, data, out)


def sign(kp: KeyPair, msg: bytes) -> bytes:
    return _backend.sign(kp, msg)


def verify_sig(public_tag: bytes, msg: bytes, sig: bytes) -> bool:
    return _backend.verify_sig(public_tag, msg, sig)
