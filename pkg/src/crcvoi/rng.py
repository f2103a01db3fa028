"""Order-independent random streams.

Every random number is a pure function of (master seed, purpose tag, draw
index, individual index, counter). Individuals can therefore be simulated in
any order, on any number of workers, and still see the same numbers; and two
strategies simulated with the same key share their natural-history noise.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _u64(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.uint64)
    return np.asarray(int(x) & _MASK64, dtype=np.uint64)


def tag_hash(purpose: str) -> int:
    return int.from_bytes(hashlib.blake2b(purpose.encode(), digest_size=8).digest(), "little")


def stream_keys(master_seed: int, purpose: str, draw_index: int, individual_index) -> np.ndarray:
    """64-bit keys for one or many individuals (vectorised over ``individual_index``)."""
    with np.errstate(over="ignore"):
        h = _mix(_u64(master_seed) + _GOLDEN)
        h = _mix(h ^ _u64(tag_hash(purpose)))
        h = _mix(h ^ (_u64(draw_index) + _GOLDEN))
        return _mix(h ^ (_u64(np.asarray(individual_index)) * _GOLDEN + _GOLDEN))


def uniforms(keys: np.ndarray, counter: int) -> np.ndarray:
    """One uniform in (0, 1) per key for the given counter (e.g. an age)."""
    with np.errstate(over="ignore"):
        z = _mix(keys ^ (_u64(counter) * _M2 + _GOLDEN))
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


@dataclass(frozen=True)
class RngStreamKey:
    master_seed: int
    purpose: str
    draw_index: int = 0
    individual_index: int = 0

    @property
    def key(self) -> np.uint64:
        return stream_keys(self.master_seed, self.purpose, self.draw_index, self.individual_index)

    def uniform(self, counter: int) -> float:
        return float(uniforms(self.key, counter))

    def generator(self) -> np.random.Generator:
        """A Philox generator keyed by this stream, for bulk sampling."""
        return np.random.Generator(np.random.Philox(key=int(self.key)))


def generator(master_seed: int, purpose: str, draw_index: int = 0, individual_index: int = 0) -> np.random.Generator:
    return RngStreamKey(master_seed, purpose, draw_index, individual_index).generator()
