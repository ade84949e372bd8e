"""Paillier partially homomorphic encryption with batch modular inversion.

The scheme is the textbook Paillier cryptosystem with the fixed generator
g = n + 1, which makes g^m mod n^2 computable as (1 + m*n) mod n^2:

    keygen    n = p*q, lambda = lcm(p-1, q-1),
              mu = (L(g^lambda mod n^2))^-1 mod n with L(x) = (x-1)/n
    encrypt   c = g^m * r^n mod n^2, r random in [1, n) coprime to n
    decrypt   m = L(c^lambda mod n^2) * mu mod n

Ciphertext multiplication adds plaintexts; raising a ciphertext to a plain
integer multiplies the plaintext. That is all the homomorphism available:
cosine similarity and other nonlinear scores cannot be computed in
ciphertext space, so matching protocols built on this module (see
faro2.gallery) exchange encrypted element-wise differences and let the
private-key holder finish the L1 sum.

Real embeddings are bridged to the integer plaintext space with a fixed
point encoding: m = round(x * scale), with the plaintext residues split in
thirds - values below n/3 are positive, values above 2n/3 encode negatives
as m - n, and the middle third flags overflow.

The performance-critical primitive is the modular multiplicative inverse.
batch_mod_inverse computes N inverses with exactly one extended-Euclidean
inversion plus 3(N-1) modular multiplications via prefix products, and an
instrumentation counter exposes the inversion count so tests can assert the
batching really happened. gmpy2 accelerates the big-integer kernels when
present; pure Python is the fallback.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import secrets
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import (
    BadBlinding,
    DimensionMismatch,
    KeyMismatch,
    NotInvertible,
    Overflow,
    ScaleMismatch,
)
from .records import EncryptedTemplate, PheCiphertext, Template

try:
    import gmpy2

    _mpz = gmpy2.mpz
    HAVE_GMPY2 = True
except ImportError:  # pragma: no cover - gmpy2 is a declared dependency
    gmpy2 = None
    _mpz = int
    HAVE_GMPY2 = False

DEFAULT_SCALE = 1 << 16
DEFAULT_KEY_BITS = 2048
MILLER_RABIN_ROUNDS = 40

_SMALL_PRIMES = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59,
                 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113]

# instrumentation: how many extended-Euclidean inversions have been performed
_EEA_CALLS = 0


def eea_call_count() -> int:
    return _EEA_CALLS


def reset_eea_calls() -> None:
    global _EEA_CALLS
    _EEA_CALLS = 0


def powmod(base: int, exp: int, modulus: int) -> int:
    if HAVE_GMPY2:
        return int(gmpy2.powmod(base, exp, modulus))
    return pow(base, exp, modulus)


def mod_inverse(a: int, modulus: int) -> int:
    """Modular multiplicative inverse of a mod modulus.

    One extended-Euclidean inversion (counted by the instrumentation).
    Raises NotInvertible carrying gcd(a, modulus) when no inverse exists.
    """
    global _EEA_CALLS
    if modulus <= 0:
        raise ValueError("modulus must be positive")
    _EEA_CALLS += 1
    try:
        if HAVE_GMPY2:
            return int(gmpy2.invert(a, modulus))
        return pow(a, -1, modulus)
    except (ZeroDivisionError, ValueError):
        raise NotInvertible(math.gcd(a, modulus)) from None


def batch_mod_inverse(values: Sequence[int], modulus: int) -> list[int]:
    """Invert every value mod modulus with a single extended-Euclidean call.

    Prefix products reduce N inversions to one inversion of the running
    product plus 3(N-1) modular multiplications: N-1 to build the prefixes
    and two per element on the backward sweep. Element-wise the result
    equals mod_inverse(v, modulus).

    Raises NotInvertible naming the first offending index if any value
    shares a factor with the modulus.
    """
    n = len(values)
    if n == 0:
        return []
    m = _mpz(modulus)
    prefix: list = [None] * n
    acc = _mpz(1)
    for i, v in enumerate(values):
        acc = (acc * v) % m
        prefix[i] = acc
    try:
        inv = _mpz(mod_inverse(int(acc), modulus))
    except NotInvertible:
        for i, v in enumerate(values):
            g = math.gcd(int(v), modulus)
            if g != 1:
                raise NotInvertible(g, index=i) from None
        raise
    out: list[int] = [0] * n
    for i in range(n - 1, 0, -1):
        out[i] = int((inv * prefix[i - 1]) % m)
        inv = (inv * values[i]) % m
    out[0] = int(inv)
    return out


def naive_mod_inverse(a: int, modulus: int) -> int:
    """Schoolbook recursive extended Euclid; benchmark baseline only."""
    limit = sys.getrecursionlimit()
    needed = max(limit, 4 * max(a.bit_length(), modulus.bit_length()) + 1000)
    sys.setrecursionlimit(needed)
    try:
        g, x, _ = _egcd_recursive(a % modulus, modulus)
    finally:
        sys.setrecursionlimit(limit)
    if g != 1:
        raise NotInvertible(g)
    return x % modulus


def _egcd_recursive(a: int, b: int) -> tuple[int, int, int]:
    if a == 0:
        return b, 0, 1
    g, x, y = _egcd_recursive(b % a, a)
    return g, y - (b // a) * x, x


# -- key material ----------------------------------------------------------------


@dataclass(frozen=True)
class PhePublicKey:
    n: int
    n_squared: int
    g: int
    bits: int
    key_id: bytes

    @property
    def max_plain(self) -> int:
        """Largest encodable magnitude: the positive third of the residues."""
        return self.n // 3


@dataclass(frozen=True)
class PheKeypair:
    public: PhePublicKey
    p: int
    q: int
    lam: int
    mu: int

    @property
    def key_id(self) -> bytes:
        return self.public.key_id


def _key_id_for(n: int) -> bytes:
    return hashlib.sha256(n.to_bytes((n.bit_length() + 7) // 8, "big")).digest()


def _is_probable_prime(n: int, rng: random.Random, rounds: int = MILLER_RABIN_ROUNDS) -> bool:
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = powmod(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = powmod(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def _random_prime(bits: int, rng: random.Random) -> int:
    while True:
        candidate = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
        if _is_probable_prime(candidate, rng):
            return candidate


def keypair_from_primes(p: int, q: int) -> PheKeypair:
    """Assemble a keypair from known primes (test keys, key loading)."""
    if p == q:
        raise ValueError("p and q must differ")
    n = p * q
    if math.gcd(n, (p - 1) * (q - 1)) != 1:
        raise ValueError("gcd(n, (p-1)(q-1)) != 1")
    n2 = n * n
    g = n + 1
    lam = math.lcm(p - 1, q - 1)
    mu = mod_inverse(_l_function(powmod(g, lam, n2), n), n)
    public = PhePublicKey(n=n, n_squared=n2, g=g, bits=n.bit_length(), key_id=_key_id_for(n))
    return PheKeypair(public=public, p=p, q=q, lam=lam, mu=mu)


def keygen(bits: int = DEFAULT_KEY_BITS, rng: Optional[random.Random] = None) -> PheKeypair:
    """Generate a keypair whose modulus has exactly `bits` bits.

    bits >= 16 is accepted so tests can run on toy keys; production use
    should stay at the 2048-bit default. A seeded rng makes generation
    reproducible; the default draws from the OS.
    """
    if bits < 16:
        raise ValueError("modulus below 16 bits is not a Paillier key")
    rng = rng or random.SystemRandom()
    half = bits // 2
    while True:
        p = _random_prime(half, rng)
        q = _random_prime(bits - half, rng)
        if p == q:
            continue
        n = p * q
        if n.bit_length() != bits:
            continue
        if math.gcd(n, (p - 1) * (q - 1)) != 1:
            continue
        return keypair_from_primes(p, q)


def _l_function(x: int, n: int) -> int:
    return (x - 1) // n


# -- core operations --------------------------------------------------------------


def _random_blinding(pub: PhePublicKey, rng) -> int:
    while True:
        r = rng.randrange(1, pub.n)
        if math.gcd(r, pub.n) == 1:
            return r


def encrypt(
    pub: PhePublicKey,
    m: int,
    r: Optional[int] = None,
    rng=None,
    scale: int = 1,
) -> PheCiphertext:
    """Encrypt an integer 0 <= m < n. Randomized unless r is supplied."""
    if not (0 <= m < pub.n):
        raise Overflow(f"plaintext {m} outside [0, n)")
    if r is None:
        r = _random_blinding(pub, rng or secrets.SystemRandom())
    else:
        if not (1 <= r < pub.n) or math.gcd(r, pub.n) != 1:
            raise BadBlinding(f"blinding {r} not coprime to n or out of range")
    gm = (1 + m * pub.n) % pub.n_squared  # g^m with g = n+1
    value = (gm * powmod(r, pub.n, pub.n_squared)) % pub.n_squared
    return PheCiphertext(value=value, key_id=pub.key_id, scale=scale)


def decrypt(keypair: PheKeypair, c: PheCiphertext) -> int:
    """Recover the integer plaintext in [0, n)."""
    if c.key_id != keypair.key_id:
        raise KeyMismatch("ciphertext was produced under a different key")
    pub = keypair.public
    u = powmod(c.value, keypair.lam, pub.n_squared)
    return (_l_function(u, pub.n) * keypair.mu) % pub.n


def add(pub: PhePublicKey, c1: PheCiphertext, c2: PheCiphertext) -> PheCiphertext:
    """Homomorphic addition: decrypts to m1 + m2 mod n."""
    _check_key(pub, c1)
    _check_key(pub, c2)
    if c1.scale != c2.scale:
        raise ScaleMismatch(f"scales differ: {c1.scale} vs {c2.scale}")
    return PheCiphertext(
        value=(c1.value * c2.value) % pub.n_squared, key_id=pub.key_id, scale=c1.scale
    )


def scalar_mul(pub: PhePublicKey, c: PheCiphertext, k: int) -> PheCiphertext:
    """Encrypted-by-plain multiplication: decrypts to k * m mod n."""
    _check_key(pub, c)
    k %= pub.n
    if k > pub.n - pub.max_plain:
        # large k encodes a negative: invert once and use the small complement
        inv = mod_inverse(c.value, pub.n_squared)
        value = powmod(inv, pub.n - k, pub.n_squared)
    else:
        value = powmod(c.value, k, pub.n_squared)
    return PheCiphertext(value=value, key_id=pub.key_id, scale=c.scale)


def sub_plain(pub: PhePublicKey, c: PheCiphertext, k: int) -> PheCiphertext:
    """Subtract a plaintext integer: decrypts to m - k mod n."""
    _check_key(pub, c)
    e = (pub.n - (k % pub.n)) % pub.n
    gk = (1 + e * pub.n) % pub.n_squared
    return PheCiphertext(
        value=(c.value * gk) % pub.n_squared, key_id=pub.key_id, scale=c.scale
    )


def _check_key(pub: PhePublicKey, c: PheCiphertext) -> None:
    if c.key_id != pub.key_id:
        raise KeyMismatch("ciphertext key digest does not match this key")


# -- fixed point encoding -----------------------------------------------------------


@dataclass(frozen=True)
class EncodedNumber:
    mantissa: int
    scale: int


def encode(x: float, scale: int, n: int) -> EncodedNumber:
    """Fixed-point encode a real: m = round(x*scale), negatives wrap mod n."""
    m = round(x * scale)
    if 3 * abs(m) >= n:
        raise Overflow(f"|{x}| * {scale} exceeds n/3")
    return EncodedNumber(mantissa=m % n, scale=scale)


def decode(e: EncodedNumber, key: PhePublicKey | PheKeypair) -> float:
    """Invert encode; raises Overflow for mantissas in the middle third."""
    return decode_mantissa(e.mantissa, key) / e.scale


def decode_mantissa(mantissa: int, key: PhePublicKey | PheKeypair) -> int:
    """Signed integer for a residue: positive third, negative third, or raise."""
    n = key.n if isinstance(key, PhePublicKey) else key.public.n
    if 3 * mantissa < n:
        return mantissa
    if 3 * mantissa >= 2 * n:
        return mantissa - n
    raise Overflow("mantissa in the overflow third of the residue range")


# -- template operations -------------------------------------------------------------


def _batched_blinding_factors(pub: PhePublicKey, count: int, rng) -> list[int]:
    """Draw count blinding values and return their n-th powers mod n^2.

    Coprimality is validated in one pass on the running product (a single
    gcd instead of one per element); offenders are redrawn individually in
    the astronomically rare case the check trips.
    """
    rng = rng or secrets.SystemRandom()
    rs = [rng.randrange(1, pub.n) for _ in range(count)]
    prod = 1
    for r in rs:
        prod = (prod * r) % pub.n
    if math.gcd(prod, pub.n) != 1:
        rs = [r if math.gcd(r, pub.n) == 1 else _random_blinding(pub, rng) for r in rs]
    n2 = _mpz(pub.n_squared)
    nexp = _mpz(pub.n)
    if HAVE_GMPY2:
        return [int(gmpy2.powmod(r, nexp, n2)) for r in rs]
    return [pow(r, pub.n, pub.n_squared) for r in rs]


def encrypt_template(
    pub: PhePublicKey,
    template: Template,
    scale: int = DEFAULT_SCALE,
    rng=None,
) -> EncryptedTemplate:
    """Encrypt every template entry under one key and fixed-point scale."""
    mantissas = []
    for i, x in enumerate(template.vector):
        try:
            mantissas.append(encode(x, scale, pub.n).mantissa)
        except Overflow:
            raise Overflow(f"template entry {i} ({x}) overflows at scale {scale}") from None
    factors = _batched_blinding_factors(pub, len(mantissas), rng)
    n, n2 = pub.n, pub.n_squared
    cts = tuple(
        PheCiphertext(
            value=((1 + m * n) % n2) * f % n2, key_id=pub.key_id, scale=scale
        )
        for m, f in zip(mantissas, factors)
    )
    return EncryptedTemplate(
        ciphertexts=cts,
        key_id=pub.key_id,
        scale=scale,
        modality=template.modality,
        subject_id=template.subject_id,
    )


def decrypt_template(keypair: PheKeypair, enc: EncryptedTemplate) -> Template:
    """Key-holder side: decrypt and decode every entry."""
    values = [
        decode_mantissa(decrypt(keypair, ct), keypair) / enc.scale
        for ct in enc.ciphertexts
    ]
    return Template(
        vector=tuple(values), modality=enc.modality, subject_id=enc.subject_id
    )


def _encode_probe(pub: PhePublicKey, enc: EncryptedTemplate, probe: Template) -> list[int]:
    if probe.dims != enc.dims:
        raise DimensionMismatch(
            f"probe has {probe.dims} dims, encrypted template has {enc.dims}"
        )
    return [encode(x, enc.scale, pub.n).mantissa for x in probe.vector]


def encrypted_inner_product(
    pub: PhePublicKey, enc: EncryptedTemplate, probe: Template
) -> PheCiphertext:
    """Dot product of an encrypted vector with a plaintext one.

    Returns a single ciphertext decrypting to sum(encode(g_i) * encode(p_i))
    mod n; the caller divides by scale^2 after decoding. The conservative
    overflow guard D * max|mantissa|^2 < n/3 is evaluated on the probe side,
    the only plaintext visible at this point.
    """
    mantissas = _encode_probe(pub, enc, probe)
    max_abs = max((abs(decode_mantissa(m, pub)) for m in mantissas), default=0)
    if 3 * enc.dims * max_abs * max_abs >= pub.n:
        raise Overflow("inner product may exceed n/3; use a larger key or smaller scale")
    acc = PheCiphertext(value=1, key_id=pub.key_id, scale=enc.scale * enc.scale)
    for ct, m in zip(enc.ciphertexts, mantissas):
        term = scalar_mul(pub, ct, m)
        acc = PheCiphertext(
            value=(acc.value * term.value) % pub.n_squared,
            key_id=pub.key_id,
            scale=acc.scale,
        )
    return acc


def encrypted_difference(
    pub: PhePublicKey, enc: EncryptedTemplate, probe: Template
) -> EncryptedTemplate:
    """Element-wise encrypted difference gallery - probe.

    The probe factors g^{m_i} are inverted in one batch_mod_inverse call,
    so a scan over many gallery entries against one probe costs a single
    extended-Euclidean inversion for the whole probe (see
    probe_difference_factors for the shared-scan form).
    """
    inv_factors = probe_difference_factors(pub, enc.scale, probe, dims=enc.dims)
    return apply_difference_factors(pub, enc, inv_factors)


def probe_difference_factors(
    pub: PhePublicKey, scale: int, probe: Template, dims: Optional[int] = None
) -> list[int]:
    """Inverted probe factors (g^{m_i})^-1 mod n^2, batched in one inversion."""
    if dims is not None and probe.dims != dims:
        raise DimensionMismatch(f"probe has {probe.dims} dims, expected {dims}")
    n, n2 = pub.n, pub.n_squared
    factors = [
        (1 + encode(x, scale, n).mantissa * n) % n2 for x in probe.vector
    ]
    return batch_mod_inverse(factors, n2)


def apply_difference_factors(
    pub: PhePublicKey, enc: EncryptedTemplate, inv_factors: Sequence[int]
) -> EncryptedTemplate:
    if enc.dims != len(inv_factors):
        raise DimensionMismatch(
            f"encrypted template has {enc.dims} dims, factors have {len(inv_factors)}"
        )
    _check_key(pub, enc.ciphertexts[0])
    n2 = pub.n_squared
    cts = tuple(
        PheCiphertext(value=(ct.value * f) % n2, key_id=pub.key_id, scale=enc.scale)
        for ct, f in zip(enc.ciphertexts, inv_factors)
    )
    return EncryptedTemplate(
        ciphertexts=cts,
        key_id=pub.key_id,
        scale=enc.scale,
        modality=enc.modality,
        subject_id=enc.subject_id,
    )


# -- key files -----------------------------------------------------------------------


def save_public_key(pub: PhePublicKey, path: str | Path) -> None:
    doc = {"kind": "faro2-phe-public", "n": str(pub.n), "bits": pub.bits}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def save_keypair(keypair: PheKeypair, path: str | Path) -> None:
    doc = {
        "kind": "faro2-phe-private",
        "p": str(keypair.p),
        "q": str(keypair.q),
        "bits": keypair.public.bits,
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    os.chmod(path, 0o600)


def load_public_key(path: str | Path) -> PhePublicKey:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "faro2-phe-public":
        raise ValueError(f"{path}: not a public key file")
    return public_key_from_n(int(doc["n"]))


def public_key_from_n(n: int) -> PhePublicKey:
    return PhePublicKey(
        n=n, n_squared=n * n, g=n + 1, bits=n.bit_length(), key_id=_key_id_for(n)
    )


def load_keypair(path: str | Path) -> PheKeypair:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "faro2-phe-private":
        raise ValueError(f"{path}: not a private key file")
    return keypair_from_primes(int(doc["p"]), int(doc["q"]))
