"""Hash primitives, prime-field arithmetic and the signer abstraction.

Digests are plain ``bytes`` and residues plain ``int``; the helpers below
check widths and ranges at the boundaries where values enter the system.
"""

import hashlib
import hmac
from dataclasses import dataclass

import gmpy2
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

SHA1_SIZE = 20
SHA512_SIZE = 64
RESIDUE_SIZE = 66  # bytes needed for any value below 2**521

ZERO_DIGEST = bytes(SHA1_SIZE)


def sha1(data: bytes) -> bytes:
    return hashlib.sha1(data).digest()


def sha512(data: bytes) -> bytes:
    return hashlib.sha512(data).digest()


def check_digest160(d: bytes, what: str = "digest") -> bytes:
    if not isinstance(d, (bytes, bytearray)) or len(d) != SHA1_SIZE:
        raise ValueError(f"{what} must be {SHA1_SIZE} bytes")
    return bytes(d)


@dataclass(frozen=True)
class Modulus:
    """Prime modulus of the incremental-hash field."""

    m: int

    def __post_init__(self):
        if self.m <= 1 << (8 * SHA512_SIZE):
            raise ValueError("modulus must exceed every 512-bit digest")
        if self.m.bit_length() > 8 * RESIDUE_SIZE:
            raise ValueError(f"modulus must fit in {RESIDUE_SIZE} bytes")
        if not gmpy2.is_prime(self.m, 50):
            raise ValueError("modulus must be prime")

    def check(self, value: int) -> int:
        if not 1 <= value < self.m:
            raise ValueError("residue out of range [1, m-1]")
        return value


# 2**521 - 1 is a Mersenne prime just above the SHA-512 output range.
M521 = Modulus((1 << 521) - 1)

MODULUS_PRESETS = {"m521": M521}


def parse_modulus(text: str) -> Modulus:
    """Accept a preset name or a hex literal (``0x`` prefix optional)."""
    text = text.strip()
    if text.lower() in MODULUS_PRESETS:
        return MODULUS_PRESETS[text.lower()]
    return Modulus(int(text, 16))


def to_residue(d: bytes, m: Modulus = M521) -> int:
    """Map a 64-byte digest into [1, m-1]; a zero reduction becomes 1."""
    if len(d) != SHA512_SIZE:
        raise ValueError(f"digest must be {SHA512_SIZE} bytes")
    r = int.from_bytes(d, "big") % m.m
    return r or 1


def encode_residue(r: int) -> bytes:
    return r.to_bytes(RESIDUE_SIZE, "big")


def decode_residue(b: bytes) -> int:
    if len(b) != RESIDUE_SIZE:
        raise ValueError(f"residue encoding must be {RESIDUE_SIZE} bytes")
    return int.from_bytes(b, "big")


def mod_mult(a: int, b: int, m: Modulus = M521) -> int:
    return (a * b) % m.m


def mod_inverse(b: int, m: int) -> int:
    """Inverse of ``b`` modulo ``m`` by the extended Euclidean algorithm."""
    old_r, r = b % m, m
    old_s, s = 1, 0
    while r:
        q = old_r // r
        old_r, r = r, old_r - q * r
        old_s, s = s, old_s - q * s
    if old_r != 1:
        raise ZeroDivisionError(f"{b} has no inverse modulo {m}")
    return old_s % m


def mod_div(a: int, b: int, m: Modulus = M521) -> int:
    return (a * mod_inverse(b, m.m)) % m.m


class Verifier:
    """Public half of a signing key."""

    key_id: str

    def verify(self, msg: bytes, sig: bytes) -> bool:
        raise NotImplementedError


class Signer:
    key_id: str

    def sign(self, msg: bytes) -> bytes:
        raise NotImplementedError

    def verifier(self) -> Verifier:
        raise NotImplementedError


class Ed25519Verifier(Verifier):
    def __init__(self, public_bytes: bytes):
        self.public_bytes = bytes(public_bytes)
        self._key = Ed25519PublicKey.from_public_bytes(self.public_bytes)
        self.key_id = "ed25519:" + hashlib.sha256(self.public_bytes).hexdigest()[:16]

    def verify(self, msg: bytes, sig: bytes) -> bool:
        try:
            self._key.verify(sig, msg)
        except InvalidSignature:
            return False
        return True


class Ed25519Signer(Signer):
    """Production signer; deterministic Ed25519."""

    def __init__(self, seed: bytes | None = None):
        if seed is None:
            self._key = Ed25519PrivateKey.generate()
        else:
            self._key = Ed25519PrivateKey.from_private_bytes(seed)
        self._verifier = Ed25519Verifier(
            self._key.public_key().public_bytes(
                serialization.Encoding.Raw, serialization.PublicFormat.Raw
            )
        )
        self.key_id = self._verifier.key_id

    def seed(self) -> bytes:
        return self._key.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )

    def sign(self, msg: bytes) -> bytes:
        return self._key.sign(msg)

    def verifier(self) -> Verifier:
        return self._verifier


class HmacKey(Signer, Verifier):
    """Keyed-MAC stand-in for tests; signer and verifier share the key."""

    def __init__(self, key: bytes):
        self._key = bytes(key)
        self.key_id = "hmac:" + hashlib.sha256(b"id" + self._key).hexdigest()[:16]

    def sign(self, msg: bytes) -> bytes:
        return hmac.new(self._key, msg, hashlib.sha256).digest()

    def verify(self, msg: bytes, sig: bytes) -> bool:
        return hmac.compare_digest(self.sign(msg), sig)

    def verifier(self) -> Verifier:
        return self
