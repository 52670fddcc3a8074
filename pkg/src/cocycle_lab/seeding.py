"""Counter-based randomness for reproducible parallel sampling.

Every random quantity in this package is a pure function of the labels
(master seed, experiment, stream, trajectory, step, slot).  Draws come
from hashing those labels with the splitmix64 finalizer, so any worker
layout, chunk size, or evaluation order produces bit-identical values.
No sequential generator state is ever shared between trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

__all__ = [
    "SeedPath",
    "derive_key",
    "mix64",
    "uniform_slots",
    "normal_slots",
    "STREAM_SIMULATE",
    "STREAM_MATRIX",
    "STREAM_NOISE",
    "STREAM_PAIR_SEARCH",
    "STREAM_TAIL",
    "STREAM_APPROX",
    "STREAM_MOMENT",
    "STREAM_DECAY",
    "STREAM_SVD_GAP",
    "STREAM_U1",
    "STREAM_THETA",
    "STREAM_MARKOV_STATE",
    "STREAM_RESERVOIR",
]

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_INIT = np.uint64(0x8E1F33C04D2B9E55)

# Stream labels keep draws made for unrelated purposes out of each
# other's way even under a shared master seed.
STREAM_MATRIX = 1
STREAM_NOISE = 2
STREAM_SIMULATE = 3
STREAM_PAIR_SEARCH = 4
STREAM_TAIL = 5
STREAM_APPROX = 6
STREAM_MOMENT = 7
STREAM_DECAY = 8
STREAM_SVD_GAP = 9
STREAM_U1 = 10
STREAM_THETA = 11
STREAM_MARKOV_STATE = 12
STREAM_RESERVOIR = 13
STREAM_REFINE = 14


def _as_u64(x) -> np.uint64 | np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.uint64, copy=False)
    return np.uint64(int(x) & 0xFFFFFFFFFFFFFFFF)


def mix64(h):
    """splitmix64 finalizer; a bijection on 64-bit words."""
    h = _as_u64(h)
    with np.errstate(over="ignore"):
        h = (h ^ (h >> np.uint64(30))) * _MIX_A
        h = (h ^ (h >> np.uint64(27))) * _MIX_B
    return h ^ (h >> np.uint64(31))


def _fold(h, word):
    # Injective in `word` for fixed h, then scrambled by the bijective mixer.
    # uint64 arithmetic wraps by design.
    with np.errstate(over="ignore"):
        acc = h + _GOLDEN * (_as_u64(word) + np.uint64(1))
    return mix64(acc)


def derive_key(master_seed, *words):
    """Hash (master_seed, *words) to a 64-bit key.

    Any argument may be a numpy integer array; shapes broadcast, so a
    whole batch of trajectory keys comes from one vectorized call.
    """
    h = mix64(_as_u64(master_seed) ^ _INIT)
    for w in words:
        h = _fold(h, w)
    return h


def uniform_slots(key, n_slots: int):
    """n_slots uniforms in (0, 1) per key; shape = key.shape + (n_slots,).

    Slot k of a key is mix64(key + GOLDEN*(k+1)); the half-bit offset
    keeps 0.0 and 1.0 unreachable so log/ndtri transforms are safe.
    """
    key = _as_u64(key)
    with np.errstate(over="ignore"):
        slots = (np.arange(1, n_slots + 1, dtype=np.uint64)) * _GOLDEN
        acc = np.expand_dims(key, -1) + slots if isinstance(key, np.ndarray) else key + slots
    h = mix64(acc)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def normal_slots(key, n_slots: int):
    """Standard normal draws via inverse CDF of the uniform slots."""
    return ndtri(uniform_slots(key, n_slots))


@dataclass(frozen=True)
class SeedPath:
    """Addressing scheme for every random draw in a run.

    master_seed is the user-visible seed; experiment separates repeated
    runs that share a seed on purpose.  key() hashes the remaining
    labels (stream, trajectory, step index) into a draw key.
    """

    master_seed: int
    experiment: int = 0

    def key(self, stream: int, traj, j):
        return derive_key(self.master_seed, self.experiment, stream, traj, j)

    def uniforms(self, stream: int, traj, j, n_slots: int):
        return uniform_slots(self.key(stream, traj, j), n_slots)

    def normals(self, stream: int, traj, j, n_slots: int):
        return normal_slots(self.key(stream, traj, j), n_slots)


def substream(path: SeedPath, label: int) -> SeedPath:
    """A SeedPath whose draws are disjoint from the parent's.

    Estimators that sample matrices under the hood derive a substream
    per purpose so that two analyses sharing a master seed never share
    matrix draws unless they mean to.
    """
    return SeedPath(path.master_seed, int(derive_key(path.experiment, label)))
