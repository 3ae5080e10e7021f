"""Counter-based portable RNG (splitmix64 finalizer).

The synthetic stream generator must produce bit-identical output for a given
seed on every platform, so it cannot rely on the host library's generator
internals.  This keeps its own: every draw is a pure function of
(seed, stream, counter), vectorized over uint64 arrays.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # uint64 wrap-around is the point
        z = x + _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


class PortableRng:
    """Deterministic stream of uniforms/normals keyed by (seed, stream)."""

    def __init__(self, seed: int, stream: int = 0):
        self._base = _mix(np.uint64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _mix(np.array(stream, dtype=np.uint64))))
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        return _mix(idx ^ self._base)

    def uniform(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1), 53-bit resolution."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller."""
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        # u1 == 0 would blow up the log; the mixer can emit it
        u1 = np.maximum(u1, 1.0 / (1 << 53))
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return out[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """n integers uniform in [0, high). Modulo bias is < high/2**64."""
        if high <= 0:
            raise ValueError("high must be positive")
        return (self._raw(n) % np.uint64(high)).astype(np.int64)
