"""Small shared hashing helpers."""

from __future__ import annotations

import hashlib


def record_digest(data: bytes) -> bytes:
    """64-bit integrity trailer used by the gallery store."""
    return hashlib.blake2b(data, digest_size=8).digest()
