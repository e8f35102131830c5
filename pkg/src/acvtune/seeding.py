"""Seed splitting and reproducible input-point streams.

Every random quantity in a run is derived from one integer seed through
``numpy.random.SeedSequence`` spawn keys, so the same seed gives the same
numbers no matter how work is split across processes.
"""

import numpy as np

# Stream identifiers used as the last spawn-key component.
STREAM_POINTS = 0
STREAM_EGO = 1
STREAM_ALLOC = 2
STREAM_MISC = 3

BLOCK_SIZE = 4096


def seed_sequence(seed, *keys):
    """Child seed sequence of ``seed`` addressed by integer ``keys``."""
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))


def rng_for(seed, *keys):
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


class PointStream:
    """Iid input points produced in fixed-size blocks.

    Point ``k`` of the stream only depends on the seed and ``k``, so taking
    points in chunks of any size yields the same sequence.  Callers hold a
    single stream per trial and draw pilot points first, then allocation
    points, which is how pilot evaluations get reused.
    """

    def __init__(self, inputs, seed, *keys):
        self.inputs = inputs
        self._seed = int(seed)
        self._keys = tuple(int(k) for k in keys)
        self._blocks = []

    def _block(self, b):
        while len(self._blocks) <= b:
            k = len(self._blocks)
            rng = rng_for(self._seed, *self._keys, k)
            u = rng.random((BLOCK_SIZE, self.inputs.dimension))
            self._blocks.append(self.inputs.from_unit(u))
        return self._blocks[b]

    def points(self, start, stop):
        """Points with indices ``start .. stop-1``."""
        if stop <= start:
            return np.empty((0, self.inputs.dimension))
        first = start // BLOCK_SIZE
        last = (stop - 1) // BLOCK_SIZE
        chunk = np.concatenate([self._block(b) for b in range(first, last + 1)])
        off = first * BLOCK_SIZE
        return chunk[start - off:stop - off]
