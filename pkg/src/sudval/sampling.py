"""Seeded, version-stable shuffling shared by sampling and splitting."""

from __future__ import annotations

import random


def seeded_shuffle(items: list, seed: int) -> list:
    """Fisher-Yates over rng.random(), the one generator sequence Python
    guarantees stable across versions. Returns a new list."""
    rng = random.Random(seed)
    shuffled = list(items)
    for i in range(len(shuffled) - 1, 0, -1):
        j = int(rng.random() * (i + 1))
        shuffled[i], shuffled[j] = shuffled[j], shuffled[i]
    return shuffled
