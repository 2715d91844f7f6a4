"""Deterministic seed derivation for independent RNG streams."""

import hashlib


def derive_seed(*parts) -> int:
    """Map a tuple of ints/strings to a stable 63-bit seed.

    Uses SHA-256 of the joined string form, so the result is reproducible
    across processes and platforms and distinct streams stay uncorrelated.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
