"""Seed plumbing: one user seed, one independent counted stream per named consumer."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, consumer: str, index: int = 0) -> np.random.Generator:
    key = (zlib.crc32(consumer.encode()), int(index))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
