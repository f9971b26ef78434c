"""Paillier cryptosystem over Python big integers.

Additively homomorphic: multiplying two ciphertexts adds the plaintexts mod n,
and raising a ciphertext to an integer power multiplies its plaintext. Uses the
g = n+1 variant, so encryption needs no exponentiation by g and decryption is
L(c^lambda mod n^2) * mu mod n.

Key generation accepts a seed so experiment runs are reproducible; pass
``seed=None`` (and ``rng=None`` to :func:`encrypt`) for OS randomness. The
default 128-bit modulus matches the experimental setup here but is far below
modern security margins; raise ``key_bits`` for anything beyond simulation.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from functools import cached_property

from .errors import CapacityExceeded, KeyMismatch, PlaintextOutOfRange, WeakKey

_MILLER_RABIN_ROUNDS = 40
_SMALL_PRIMES = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47]


@dataclass(frozen=True)
class PublicKey:
    n: int
    key_bits: int

    @cached_property
    def n_squared(self) -> int:
        return self.n * self.n

    @property
    def generator(self) -> int:
        return self.n + 1


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    p: int
    q: int
    lam: int  # lcm(p-1, q-1)
    mu: int  # (L(g^lam mod n^2))^-1 mod n

    @property
    def key_bits(self) -> int:
        return self.public.key_bits


@dataclass(frozen=True)
class Ciphertext:
    value: int
    public: PublicKey

    def __post_init__(self):
        if not (0 < self.value < self.public.n_squared):
            raise ValueError("ciphertext value out of range")


def _is_probable_prime(candidate: int, rng: random.Random, rounds: int = _MILLER_RABIN_ROUNDS) -> bool:
    if candidate < 2:
        return False
    for p in _SMALL_PRIMES:
        if candidate % p == 0:
            return candidate == p
    d, s = candidate - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, candidate - 1)
        x = pow(a, d, candidate)
        if x in (1, candidate - 1):
            continue
        for _ in range(s - 1):
            x = x * x % candidate
            if x == candidate - 1:
                break
        else:
            return False
    return True


def _generate_prime(bits: int, rng: random.Random) -> int:
    # Top two bits forced so the product of two such primes has exactly 2*bits bits.
    while True:
        candidate = rng.getrandbits(bits) | (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        if _is_probable_prime(candidate, rng):
            return candidate


def _build_keypair(p: int, q: int, key_bits: int) -> KeyPair:
    n = p * q
    public = PublicKey(n=n, key_bits=key_bits)
    lam = math.lcm(p - 1, q - 1)
    # g = n+1 makes L(g^lam mod n^2) = lam mod n.
    mu = pow(_l_function(pow(public.generator, lam, public.n_squared), n), -1, n)
    return KeyPair(public=public, p=p, q=q, lam=lam, mu=mu)


def keygen(key_bits: int, seed: int | None) -> KeyPair:
    """Generate an n of exactly ``key_bits`` bits from two equal-size primes."""
    if key_bits < 64 or key_bits % 2 != 0:
        raise WeakKey(f"key_bits must be even and >= 64, got {key_bits}")
    rng = random.Random(seed) if seed is not None else random.SystemRandom()
    p = _generate_prime(key_bits // 2, rng)
    q = _generate_prime(key_bits // 2, rng)
    while q == p:
        q = _generate_prime(key_bits // 2, rng)
    return _build_keypair(p, q, key_bits)


def _l_function(u: int, n: int) -> int:
    return (u - 1) // n


def encrypt(pk: PublicKey, m: int, rng: random.Random | None = None) -> Ciphertext:
    """c = (1+n)^m * r^n mod n^2 for a fresh nonce r coprime to n."""
    if not (0 <= m < pk.n):
        raise PlaintextOutOfRange(f"plaintext must lie in [0, n), got {m}")
    rng = rng if rng is not None else random.SystemRandom()
    while True:
        r = rng.randrange(1, pk.n)
        if math.gcd(r, pk.n) == 1:
            break
    n_sq = pk.n_squared
    value = (1 + pk.n * m) % n_sq * pow(r, pk.n, n_sq) % n_sq
    return Ciphertext(value=value, public=pk)


def decrypt(kp: KeyPair, c: Ciphertext) -> int:
    if c.public.n != kp.public.n:
        raise KeyMismatch("ciphertext was produced under a different key")
    n, n_sq = kp.public.n, kp.public.n_squared
    return _l_function(pow(c.value, kp.lam, n_sq), n) * kp.mu % n


def he_add(pk: PublicKey, a: Ciphertext, b: Ciphertext) -> Ciphertext:
    """Ciphertext of (m_a + m_b) mod n."""
    if a.public.n != pk.n or b.public.n != pk.n:
        raise KeyMismatch("operands are under different keys")
    return Ciphertext(value=a.value * b.value % pk.n_squared, public=pk)


def he_scalar_mul(pk: PublicKey, k: int, a: Ciphertext) -> Ciphertext:
    """Ciphertext of (k * m_a) mod n, for non-negative integer k."""
    if k < 0:
        raise ValueError(f"scalar must be non-negative, got {k}")
    if a.public.n != pk.n:
        raise KeyMismatch("operand is under a different key")
    return Ciphertext(value=pow(a.value, k, pk.n_squared), public=pk)


def encode_signed(v: int, n: int) -> int:
    """Map a signed integer with |v| < n/2 into [0, n); negatives wrap upward."""
    if 2 * abs(v) >= n:
        raise CapacityExceeded(f"|{v}| >= n/2, does not fit the plaintext space")
    return v % n


def decode_signed(m: int, n: int) -> int:
    """Inverse of :func:`encode_signed` on [0, n)."""
    if not (0 <= m < n):
        raise PlaintextOutOfRange(f"value must lie in [0, n), got {m}")
    return m - n if 2 * m >= n else m


# --- wire helpers: bare lowercase hex for non-negative key/ciphertext values ---


def int_to_hex(x: int) -> str:
    if x < 0:
        raise ValueError("only non-negative integers serialize as bare hex")
    return format(x, "x")


def hex_to_int(s: str) -> int:
    if not s or s.strip() != s or s.lower() != s or s.startswith(("+", "-")):
        raise ValueError(f"not a bare lowercase hex string: {s!r}")
    return int(s, 16)


def public_key_to_payload(pk: PublicKey) -> dict:
    return {"key_bits": pk.key_bits, "n": int_to_hex(pk.n)}


def public_key_from_payload(payload: dict) -> PublicKey:
    return PublicKey(n=hex_to_int(payload["n"]), key_bits=int(payload["key_bits"]))


def keypair_to_blob(kp: KeyPair) -> str:
    """Opaque JSON blob carrying the full key pair between clients."""
    return json.dumps(
        {"key_bits": kp.key_bits, "p": int_to_hex(kp.p), "q": int_to_hex(kp.q)},
        sort_keys=True,
    )


def keypair_from_blob(blob: str) -> KeyPair:
    data = json.loads(blob)
    return _build_keypair(hex_to_int(data["p"]), hex_to_int(data["q"]), int(data["key_bits"]))
