"""Deterministic per-run random streams derived from a master seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, run: int, label: str) -> np.random.Generator:
    """Generator keyed by ``(seed, run index, stream label)``.

    Different labels give statistically independent streams, so drawing from one
    never shifts another; this is what keeps ablations bitwise comparable.
    """
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(run), key)))


class StackedStreams:
    """A batch of per-run generators that looks like one generator.

    ``standard_normal((B, ...))`` draws row ``b`` from run ``b``'s own stream, so
    a run's numbers do not depend on which other runs share the batch.
    """

    def __init__(self, seed: int, runs, label: str):
        self.gens = [stream(seed, r, label) for r in runs]

    def standard_normal(self, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape))
        if shape[0] != len(self.gens):
            raise ValueError(f"leading axis {shape[0]} != batch size {len(self.gens)}")
        return np.stack([g.standard_normal(shape[1:]) for g in self.gens])
