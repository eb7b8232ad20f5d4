"""Named sub-seeds so independent consumers of randomness never share a stream."""

import hashlib


def derive_seed(master: int, purpose: str, *keys) -> int:
    """64-bit seed from ``(master, purpose, *keys)``; stable across runs and platforms."""
    text = "\x1f".join([str(int(master)), purpose, *(str(k) for k in keys)])
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")
