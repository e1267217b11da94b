"""Counter-based random streams.

Every draw is a pure function of ``(key, index)`` so that results do not
depend on evaluation order or on how work is split between processes.
Gaussian noise uses a SplitMix64 hash of the pair followed by Box-Muller;
Poisson counts use numpy's Philox generator keyed directly by the pair.
"""

import numpy as np

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x):
    # SplitMix64 finalizer; uint64 arithmetic wraps mod 2**64
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(0xBF58476D1CE4E5B9)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def hash64(key, index):
    """64-bit hash of ``(key, index)``; broadcasts over ``index``."""
    k = np.uint64(int(key) & 0xFFFFFFFFFFFFFFFF)
    i = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix64(k * _GOLDEN + np.uint64(0x632BE59BD9B4E019))
        return _mix64(h ^ (i * _GOLDEN + np.uint64(1)))


def derive_seed(key: int, *path: int) -> int:
    """Child seed for a position in a seed tree (e.g. run i of a fit)."""
    h = int(key) & 0xFFFFFFFFFFFFFFFF
    for p in path:
        h = int(hash64(h, p))
    return h


def _uniform_open(h):
    # top 53 bits -> (0, 1)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normal(key: int, index) -> np.ndarray:
    """Standard normal draws keyed by ``(key, index)``."""
    with np.errstate(over="ignore"):
        idx = np.asarray(index, dtype=np.uint64)
        u1 = _uniform_open(hash64(key, idx * np.uint64(2)))
        u2 = _uniform_open(hash64(key, idx * np.uint64(2) + np.uint64(1)))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def poisson(key: int, index, mean) -> np.ndarray:
    """Poisson draws, one Philox stream per ``(key, index)`` pair."""
    index = np.atleast_1d(np.asarray(index, dtype=np.uint64))
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), index.shape)
    out = np.zeros(index.shape)
    k = int(key) & 0xFFFFFFFFFFFFFFFF
    for j, (i, lam) in enumerate(zip(index, mean)):
        if lam > 0:
            g = np.random.Generator(np.random.Philox(key=[k, int(i)]))
            out[j] = g.poisson(lam)
    return out
