"""Deterministic random-stream derivation.

All randomness flows from one 64-bit master seed through named, counter-based
substreams (Philox), so that results do not depend on thread scheduling or on
how work is sliced across processes. A stream is addressed by a small integer
tag plus an arbitrary tuple of indices (replicate number, outer repetition,
...); the same address always yields the same stream.
"""

from __future__ import annotations

from numpy.random import Generator, Philox, SeedSequence

# Stream tags. Never renumber: seeds are part of the reproducibility contract.
STREAM_SIGNALS = 1
STREAM_DATASET = 2
STREAM_MISC = 4


def substream(master_seed: int, tag: int, *indices: int) -> Generator:
    """Return the Generator for stream (tag, *indices) of the master seed."""
    key = (int(tag),) + tuple(int(i) for i in indices)
    return Generator(Philox(SeedSequence(int(master_seed), spawn_key=key)))


def signals_rng(master_seed: int, outer: int = 0) -> Generator:
    return substream(master_seed, STREAM_SIGNALS, outer)


def dataset_rng(master_seed: int, outer: int, replicate: int) -> Generator:
    return substream(master_seed, STREAM_DATASET, outer, replicate)
