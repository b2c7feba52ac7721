"""Deterministic random-stream derivation.

Every stochastic component takes an :class:`RngState` and derives named
child streams from it, so a single experiment seed reproduces the whole
run regardless of execution order or worker scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _encode_key(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"rng keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"rng keys must be int or str, got {type(key).__name__}")


class RngState:
    """A seed plus a derivation path; generators are created lazily."""

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self._path = _path
        self._generator: np.random.Generator | None = None

    def child(self, *keys) -> "RngState":
        """Derive an independent stream named by ``keys`` (ints or strings)."""
        path = self._path + tuple(_encode_key(k) for k in keys)
        return RngState(self.seed, path)

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            seq = np.random.SeedSequence([self.seed, *self._path])
            self._generator = np.random.Generator(np.random.PCG64(seq))
        return self._generator

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, path={self._path})"
