"""Named, independent random streams derived from one root seed."""
import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    """Return a generator for ``name`` that does not depend on any other stream.

    Extra integer counters (epoch, step, probe id, ...) give stateless
    sub-streams, so resuming from a checkpoint only needs the counters.
    """
    entropy = [int(seed), stream_key(name), *[int(c) for c in counters]]
    return np.random.default_rng(np.random.SeedSequence(entropy))
