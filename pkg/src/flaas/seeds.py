"""Deterministic seed derivation.

Everything random in the stack is seeded from a master seed plus a path of
string/int parts, so experiment runs are reproducible bit-for-bit across
processes and platforms (python's builtin hash() is salted per process and
must not be used for this).
"""

import hashlib


def derive_seed(*parts) -> int:
    """Fold arbitrary parts into a stable 63-bit seed."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1
