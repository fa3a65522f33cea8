"""Seed management for reproducible, parallelizable random generation.

All randomness in the package flows through named substreams derived from a
single integer seed.  Each (seed, label) pair maps to an independent Philox
stream, and per-sample streams are derived as (seed, label, row), so work
can be split across rows without the result depending on execution order.
Philox is counter-based and platform-stable, which keeps generated datasets
bit-identical across machines.
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator for the substream named by ``path`` under ``seed``.

    Labels are folded into the Philox key via a SeedSequence, so distinct
    paths give statistically independent streams and the same path always
    gives the same stream.
    """
    keys = [_fold(part) for part in path]
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(keys))
    return np.random.Generator(np.random.Philox(seq))


def sample_substream(seed: int, label: int | str, row: int) -> np.random.Generator:
    """Per-sample stream: independent of every other row's stream."""
    return substream(seed, label, row)


def _fold(part: int | str) -> int:
    if isinstance(part, int):
        return part & 0xFFFFFFFF
    acc = 2166136261
    for ch in str(part).encode():
        acc = ((acc ^ ch) * 16777619) & 0xFFFFFFFF
    return acc
