"""Shared numeric primitives: simplex arithmetic, action clamping, seeded RNG streams.

Everything downstream (experts, fusion, world model, planner, envs) builds on
the few functions here.  All arithmetic is float64.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

SIMPLEX_TOL = 1e-9


class InvalidInput(ValueError):
    """Raised when an operation receives inputs violating its preconditions."""


class ParseFailure(ValueError):
    """Raised when no expert score can be recovered from a planner reply."""


class BackendUnavailable(RuntimeError):
    """Raised when the HTTP semantic backend fails after all retries."""


class NumericalFailure(ArithmeticError):
    """Raised when a training update would produce non-finite values."""


def as_vector(x) -> np.ndarray:
    """Coerce to a finite 1-D float64 array; raise InvalidInput otherwise."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise InvalidInput(f"expected a 1-D vector with at least one entry, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInput("vector contains non-finite entries")
    return v


@dataclass(frozen=True)
class Simplex:
    """A probability vector: entries in [0, 1] summing to 1 within SIMPLEX_TOL."""

    weights: np.ndarray

    def __post_init__(self):
        w = as_vector(self.weights)
        if np.any(w < -SIMPLEX_TOL) or np.any(w > 1.0 + SIMPLEX_TOL):
            raise InvalidInput("simplex entries must lie in [0, 1]")
        total = float(w.sum())
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise InvalidInput(f"simplex entries sum to {total!r}, not 1")
        # Renormalize only on detectable drift so that exact inputs (e.g. the
        # alpha in {0, 1} fusion boundaries) pass through bit-identically.
        if w.min() < 0.0 or total != 1.0 and abs(total - 1.0) > 1e-15:
            w = np.clip(w, 0.0, 1.0)
            w = w / w.sum()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.size

    def __getitem__(self, i) -> float:
        return float(self.weights[i])

    @staticmethod
    def uniform(k: int) -> "Simplex":
        if k < 1:
            raise InvalidInput("simplex dimension must be >= 1")
        return Simplex(np.full(k, 1.0 / k))


def softmax(scores) -> Simplex:
    """Max-subtracted softmax; safe for scores of any finite magnitude."""
    s = as_vector(scores)
    e = np.exp(s - s.max())
    return Simplex(e / e.sum())


def clamp_action(a, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Elementwise clamp of an action vector into [lo, hi]."""
    if not lo < hi:
        raise InvalidInput(f"clamp bounds require lo < hi, got [{lo}, {hi}]")
    return np.clip(as_vector(a), lo, hi)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Identical keys give identical draw sequences regardless of process or
    evaluation order.  Child streams are derived by hashing a purpose tag and
    index into a fresh key, so every planner candidate / env instance gets an
    independent, reproducible stream.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = ((self.seed & 0xFFFFFFFFFFFFFFFF) << 64) | (self.stream_id & 0xFFFFFFFFFFFFFFFF)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, tag: str, index: int = 0) -> "RngStream":
        h = hashlib.blake2b(digest_size=16)
        h.update(f"{self.seed}:{self.stream_id}:{tag}:{index}".encode())
        d = h.digest()
        return RngStream(
            seed=int.from_bytes(d[:8], "little"),
            stream_id=int.from_bytes(d[8:], "little"),
        )
