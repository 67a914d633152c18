"""Deterministic seed fan-out.

One master seed drives every random decision in a run (scenario generation,
distillation model draws, init, batch shuffling). Sub-seeds are derived by
hashing the master seed with a string tag path, so adding a new consumer never
shifts the streams of existing ones, and the result is stable across platforms
and processes.
"""

import hashlib


def derive_seed(master: int, *tags) -> int:
    """Derive a 63-bit sub-seed from `master` and a tag path."""
    key = ":".join([str(int(master))] + [str(t) for t in tags])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
