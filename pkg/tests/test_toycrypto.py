"""Key generation, signing and the channel cipher.

The schemes are deliberately toy grade (hash-based signatures, xor keystream)
but their interfaces behave like the real thing: wrong key, wrong payload or
a flipped bit must always be detected.
"""

import random

import pytest

from iotmarket import toycrypto


def test_keypair_shape_and_determinism():
    priv, pub = toycrypto.generate_keypair(random.Random(1))
    priv2, pub2 = toycrypto.generate_keypair(random.Random(1))
    assert (priv, pub) == (priv2, pub2)
    assert len(priv) == toycrypto.KEY_BYTES
    assert len(pub) == toycrypto.KEY_BYTES
    assert priv != pub


def test_sign_verify():
    priv, pub = toycrypto.generate_keypair(random.Random(2))
    sig = toycrypto.sign(priv, b"payload")
    assert toycrypto.verify(pub, b"payload", sig)
    assert not toycrypto.verify(pub, b"payload!", sig)
    assert not toycrypto.verify(pub, b"payload", sig[:-1] + bytes([sig[-1] ^ 1]))
    _, other_pub = toycrypto.generate_keypair(random.Random(3))
    assert not toycrypto.verify(other_pub, b"payload", sig)


def test_encrypt_decrypt_round_trip():
    key = bytes(range(32))
    nonce = b"\x07" * 8
    for size in (0, 1, 31, 32, 33, 1000):
        pt = bytes(i % 256 for i in range(size))
        ct = toycrypto.encrypt(key, nonce, pt)
        assert ct != pt or size == 0
        assert toycrypto.decrypt(key, nonce, ct) == pt


def test_decrypt_rejects_tamper_and_wrong_key():
    key = b"k" * 32
    ct = toycrypto.encrypt(key, b"n" * 8, b"secret reading")
    flipped = bytes([ct[0] ^ 1]) + ct[1:]
    with pytest.raises(toycrypto.CipherError):
        toycrypto.decrypt(key, b"n" * 8, flipped)
    with pytest.raises(toycrypto.CipherError):
        toycrypto.decrypt(b"x" * 32, b"n" * 8, ct)
    with pytest.raises(toycrypto.CipherError):
        toycrypto.decrypt(key, b"m" * 8, ct)
    # truncating below the tag is also a failure, not an exception elsewhere
    with pytest.raises(toycrypto.CipherError):
        toycrypto.decrypt(key, b"n" * 8, ct[: toycrypto.TAG_BYTES - 1])


def test_nonce_changes_ciphertext():
    key = b"k" * 32
    a = toycrypto.encrypt(key, b"\x00" * 8, b"same plaintext")
    b = toycrypto.encrypt(key, b"\x01" * 8, b"same plaintext")
    assert a != b
