"""Deterministic seed derivation: every random draw is keyed by a tuple."""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _entropy(keys) -> list[int]:
    out = []
    for k in keys:
        if isinstance(k, str):
            out.append(zlib.crc32(k.encode()))
        else:
            out.append(int(k) & 0xFFFFFFFFFFFFFFFF)
    return out


def derive_seed(*keys) -> int:
    ss = np.random.SeedSequence(_entropy(keys))
    return int(ss.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 2**32], dtype=np.uint64)) & (2**63 - 1)


def np_rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(_entropy(keys)))


def torch_gen(*keys) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(*keys))
    return g
