"""Named, index-addressable random substreams derived from one seed."""
import zlib

import numpy as np


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Generator for ``(seed, name, *index)``.

    Streams with different names or indices are statistically independent,
    and a stream never depends on how many others were drawn before it, so
    per-sample generation is order- and worker-count-stable.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
