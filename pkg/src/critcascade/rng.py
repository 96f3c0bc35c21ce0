"""Counter-based random streams indexed by (seed, replica, purpose).

Every stream is a Philox generator.  The 128-bit key is derived from the
master seed through :class:`numpy.random.SeedSequence`; the 256-bit counter
starts at ``(0, 0, replica, purpose)``.  Draws only ever advance the two low
counter words, so streams with different ``(replica, purpose)`` pairs never
overlap unless one of them consumes 2**128 blocks.  Another implementation
can reproduce the same family semantics with any Philox-4x64 generator and
any injective seed-to-key map.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

__all__ = ["Purpose", "derive_stream", "stream_state"]


class Purpose(IntEnum):
    """Named purpose indices so that unrelated uses never share a stream."""

    GENERIC = 0
    TREE = 1
    WALK = 2
    LADDER = 3
    RENEWAL = 4
    CONDITIONED = 5
    SPINE = 6
    SIDE = 7
    POOL = 8
    DIAGNOSTICS = 9
    HARMONICITY = 10
    CONTROL = 11


_MASK64 = (1 << 64) - 1


def _key(master_seed: int) -> np.ndarray:
    seq = np.random.SeedSequence(int(master_seed) & _MASK64)
    return seq.generate_state(2, dtype=np.uint64)


def stream_state(master_seed: int, replica: int, purpose: int) -> tuple[int, int, int, int, int, int]:
    """Return the initial ``(key0, key1, c0, c1, c2, c3)`` of a stream."""
    if replica < 0 or purpose < 0:
        raise ValueError("replica and purpose must be non-negative")
    k = _key(master_seed)
    return (int(k[0]), int(k[1]), 0, 0, int(replica) & _MASK64, int(purpose) & _MASK64)


def derive_stream(master_seed: int, replica: int, purpose: int = 0) -> np.random.Generator:
    """Build the reproducible generator for one ``(seed, replica, purpose)``.

    Parameters
    ----------
    master_seed : int
        64-bit master seed of the experiment.
    replica : int
        Replica (or replica block) index, ``0 <= replica < 2**64``.
    purpose : int
        Purpose index, see :class:`Purpose`.

    Returns
    -------
    numpy.random.Generator
    """
    state = stream_state(master_seed, replica, purpose)
    key = np.array(state[:2], dtype=np.uint64)
    counter = np.array(state[2:], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
