"""Named, splittable random streams.

Every random draw in the package goes through :func:`stream`, which derives a
PCG64 generator from ``(seed, tag, *index)`` via :class:`numpy.random.SeedSequence`.
Streams are stateless with respect to each other: the batch drawn at step 500
does not depend on how many batches were drawn before it, which is what makes
resumed training reproduce an uninterrupted run.

Generator: PCG64 (numpy >= 1.17 bit stream, version tag ``RNG_VERSION``).
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

RNG_VERSION = "pcg64-seedseq-v1"

_MASK64 = (1 << 64) - 1


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def seed_sequence(seed: int, tag: str, *index: int) -> np.random.SeedSequence:
    key = (_tag_key(tag),) + tuple(int(i) for i in index)
    return np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=key)


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """Return an independent generator for the purpose ``tag`` at ``index``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, tag, *index)))


def torch_generator(seed: int, tag: str, *index: int) -> torch.Generator:
    """A CPU ``torch.Generator`` seeded from the same derivation as :func:`stream`."""
    state = seed_sequence(seed, tag, *index).generate_state(1, dtype=np.uint64)[0]
    g = torch.Generator(device="cpu")
    g.manual_seed(int(state) & ((1 << 63) - 1))
    return g
