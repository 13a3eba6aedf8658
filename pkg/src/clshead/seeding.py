"""Deterministic random number generation.

Every randomized operation in the package draws from a PCG64 generator.
``derive_rng`` hashes string tokens into the seed so that independent
concerns (per-class split shuffles, per-repeat training runs, ...) get
decorrelated streams that never perturb each other when one is added.
"""

from __future__ import annotations

import hashlib

import numpy as np

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    """PCG64 generator: identical seed, identical output stream."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, *tokens) -> int:
    h = hashlib.sha256(str(int(seed)).encode())
    for tok in tokens:
        h.update(b"|")
        h.update(str(tok).encode())
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(seed: int, *tokens) -> Rng:
    """Generator for a named sub-stream of ``seed``."""
    return make_rng(derive_seed(seed, *tokens))
