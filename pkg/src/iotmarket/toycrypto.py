"""Deliberately weak, deterministic stand-ins for signatures and encryption.

These primitives exist so that runs are reproducible from a seed and so
that verification can be re-run by anyone holding the public material.
They offer NO security and must never leave the simulator.
"""

from __future__ import annotations

import hashlib
from random import Random

KEY_BYTES = 32
SESSION_KEY_BYTES = 16
TAG_BYTES = 16

# Fixed pad relating public and private halves. Knowing it, anyone can
# invert a public key; that is the point: verify() stays a pure function
# with no registry of secrets.
_MASK = bytes.fromhex(
    "a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5"
)


class CipherError(Exception):
    """Raised when an authenticated decryption fails its tag check."""


def _xor(data: bytes, pad: bytes) -> bytes:
    return bytes(a ^ b for a, b in zip(data, pad))


def generate_keypair(rng: Random) -> tuple[bytes, bytes]:
    """Return (private_key, public_key)."""
    private = rng.randbytes(KEY_BYTES)
    return private, _xor(private, _MASK)


def sign(private_key: bytes, payload: bytes) -> bytes:
    if len(private_key) != KEY_BYTES:
        raise ValueError(f"private key must be {KEY_BYTES} bytes")
    if not payload:
        raise ValueError("refusing to sign an empty payload")
    return hashlib.sha256(private_key + payload).digest()


def verify(public_key: bytes, payload: bytes, signature: bytes) -> bool:
    if len(public_key) != KEY_BYTES or not payload:
        return False
    private = _xor(public_key, _MASK)
    return hashlib.sha256(private + payload).digest() == signature


def _keystream(key: bytes, nonce: bytes, length: int) -> bytes:
    blocks = []
    index = 0
    while sum(len(b) for b in blocks) < length:
        blocks.append(hashlib.sha256(key + nonce + index.to_bytes(8, "big")).digest())
        index += 1
    return b"".join(blocks)[:length]


def encrypt(key: bytes, nonce: bytes, plaintext: bytes) -> bytes:
    """Return ciphertext || tag. Same (key, nonce, plaintext) -> same bytes."""
    body = _xor(plaintext, _keystream(key, nonce, len(plaintext)))
    tag = hashlib.sha256(key + nonce + body).digest()[:TAG_BYTES]
    return body + tag


def decrypt(key: bytes, nonce: bytes, ciphertext: bytes) -> bytes:
    if len(ciphertext) < TAG_BYTES:
        raise CipherError("ciphertext shorter than its tag")
    body, tag = ciphertext[:-TAG_BYTES], ciphertext[-TAG_BYTES:]
    if hashlib.sha256(key + nonce + body).digest()[:TAG_BYTES] != tag:
        raise CipherError("tag mismatch")
    return _xor(body, _keystream(key, nonce, len(body)))
