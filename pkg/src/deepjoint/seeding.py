"""Labeled deterministic seed derivation.

Every random stream in the project is derived from a master seed plus a
tuple of string labels (purpose, patient id, parameter id, ...), so adding
or removing one consumer never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, *labels) -> int:
    key = "|".join([str(int(master_seed))] + [str(l) for l in labels])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(master_seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *labels))
