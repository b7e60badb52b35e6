"""Counter-based uniforms keyed by (call key, stream ids).

Each octree cell draws its systematic-sampling offset from hash(key, level, path),
so results do not depend on the order in which cells are visited.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 array arithmetic wraps
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def hash_uniform(key: int, *streams) -> np.ndarray:
    """Uniform doubles in [0, 1), one per broadcast element of `streams`."""
    arrays = np.broadcast_arrays(*(np.atleast_1d(np.asarray(s, dtype=np.int64)) for s in streams))
    h = np.full(arrays[0].shape, np.uint64(key & 0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for s in arrays:
            h = _mix(h ^ (s.astype(np.uint64) + _GOLDEN))
    return (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def draw_key(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))
