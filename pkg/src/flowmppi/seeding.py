"""Deterministic RNG derivation for numpy and torch from structured keys."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _entropy(key) -> list[int]:
    out = []
    for k in key:
        if isinstance(k, str):
            digest = hashlib.sha256(k.encode()).digest()
            out.append(int.from_bytes(digest[:8], "little"))
        else:
            out.append(int(k))
    return out


def rng_from(*key) -> np.random.Generator:
    """numpy Generator keyed by a tuple of ints/strings; stable across runs."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(key)))


def torch_generator_from(*key) -> torch.Generator:
    """torch Generator keyed the same way; independent of the numpy stream."""
    seed = int(
        np.random.SeedSequence(_entropy(key) + [0x7C11]).generate_state(1, dtype=np.uint64)[0]
    )
    gen = torch.Generator()
    gen.manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    return gen
