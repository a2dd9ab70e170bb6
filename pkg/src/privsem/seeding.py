"""Deterministic seed derivation.

Every stochastic operation takes an explicit seed; nested seeds are derived
by hashing the parent seed together with string/int tags so that results do
not depend on execution order or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(*parts: int | str) -> int:
    """Hash a parent seed plus tags into a fresh 63-bit seed."""
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


def np_rng(*parts: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def torch_gen(*parts: int | str) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(derive_seed(*parts))
    return g
