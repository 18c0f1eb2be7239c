"""Deterministic, schedule-independent seeding.

Every simulated path owns a counter-based Philox stream keyed by
(master seed, stream id, block, path index). Any two distinct tuples give
distinct SeedSequence pools, so results never depend on how paths are
chunked or which thread simulates them.
"""

from dataclasses import dataclass

import numpy as np

_WORD = 2 ** 32


@dataclass(frozen=True)
class SeedSpec:
    master: int
    stream: int = 0
    # 0 = plain path sampling, k >= 1 = k-th value-surface time node
    block: int = 0

    def __post_init__(self):
        if not 0 <= self.master < _WORD * _WORD:
            raise ValueError(f"master seed must fit in 64 bits, got {self.master}")
        if not 0 <= self.stream < _WORD:
            raise ValueError(f"stream id must fit in 32 bits, got {self.stream}")
        if not 0 <= self.block < _WORD:
            raise ValueError(f"block id must fit in 32 bits, got {self.block}")

    def with_block(self, block: int) -> "SeedSpec":
        return SeedSpec(self.master, self.stream, block)

    def with_stream(self, stream: int) -> "SeedSpec":
        return SeedSpec(self.master, stream, self.block)


def derive_path_seed(seed: SeedSpec, path_index: int) -> np.random.SeedSequence:
    """Stable hash-split derivation of the RNG state of one path."""
    if not 0 <= path_index < _WORD:
        raise ValueError(f"path index must fit in 32 bits, got {path_index}")

    # Fixed-width entropy (two 32-bit words) keeps the word layout injective
    entropy = [seed.master % _WORD, seed.master // _WORD]
    return np.random.SeedSequence(entropy, spawn_key=(seed.stream, seed.block, path_index))


def path_generator(seed: SeedSpec, path_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(derive_path_seed(seed, path_index)))


def fixed_generator(seed: int) -> np.random.Generator:
    """Generator for internal fixed-seed quadratures (not tied to any path)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
