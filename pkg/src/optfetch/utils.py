"""Small shared helpers: deterministic seed derivation and RNG construction."""
from __future__ import annotations

import hashlib

import numpy as np

MAX_SEED = 2**63 - 1


def _as_int(part) -> int:
    if isinstance(part, str):
        digest = hashlib.blake2s(part.encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little") & MAX_SEED
    return int(part) & MAX_SEED


def derive_seed(*parts) -> int:
    """Map a tuple of int/str keys to a stable 63-bit seed.

    Derivation depends only on the key tuple, never on call order, so
    results are reproducible under any job scheduling.
    """
    seq = np.random.SeedSequence([_as_int(p) for p in parts])
    return int(seq.generate_state(1, np.uint64)[0] & np.uint64(MAX_SEED))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))
