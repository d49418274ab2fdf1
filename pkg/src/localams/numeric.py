"""Dense float64 vector helpers and counter-based random streams.

Parameter vectors are plain 1-d ``numpy.ndarray`` objects of dtype float64.
Nothing here mutates its inputs, so a vector handed to several workers can
be shared safely.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# purpose tags keep unrelated consumers of one seed on disjoint Philox keys
GRADIENT_NOISE = 0
PROBLEM_BUILD = 1
INITIAL_POINT = 2
SHARDING = 3
DATA = 4


class NumericError(ValueError):
    """Raised for dimension mismatches, domain errors and non-finite values."""


def as_vector(values, dim: int | None = None) -> np.ndarray:
    v = np.array(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise NumericError("vector must have at least one entry")
    if dim is not None and v.size != dim:
        raise NumericError(f"expected dim {dim}, got {v.size}")
    check_finite(v)
    return v


def check_finite(v: np.ndarray, what: str = "vector") -> np.ndarray:
    if not np.isfinite(v).all():
        raise NumericError(f"{what} has non-finite entries")
    return v


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
}


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Coordinate-wise ``op`` on ``a`` (and ``b``, a vector or a scalar).

    ``sqrt`` and ``square`` are unary and ignore ``b``.
    """
    a = np.asarray(a, dtype=np.float64)
    if op in ("sqrt", "square"):
        if op == "sqrt":
            if np.any(a < 0):
                raise NumericError("sqrt of negative entry")
            out = np.sqrt(a)
        else:
            out = a * a
        return check_finite(out, f"{op} result")

    if op not in _BINARY:
        raise NumericError(f"unknown op {op!r}")
    if b is None:
        raise NumericError(f"{op} needs a second operand")
    b = np.asarray(b, dtype=np.float64)
    if b.ndim > 0 and b.shape != a.shape:
        raise NumericError(f"dim mismatch: {a.shape} vs {b.shape}")
    if op == "div" and np.any(b <= 0):
        raise NumericError("divisor must be strictly positive")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _BINARY[op](a, b)
    return check_finite(out, f"{op} result")


def ordered_mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Mean that sums in list order, then divides once.

    When every vector is bitwise equal to the first, that vector is returned
    unchanged (copied), so averaging a consensus state is an exact fixed point.
    """
    if len(vectors) == 0:
        raise NumericError("mean of empty list")
    first = vectors[0]
    if all(np.array_equal(first, v) for v in vectors[1:]):
        return first.copy()
    total = first.copy()
    for v in vectors[1:]:
        if v.shape != total.shape:
            raise NumericError(f"dim mismatch: {total.shape} vs {v.shape}")
        total += v
    return total / len(vectors)


@dataclass(frozen=True)
class RngStream:
    """A Philox stream addressed by ``(seed, worker, iteration)``.

    The pair ``(worker, iteration)`` sits in the upper counter words, so
    every stream is reachable directly without replaying any other. The
    lowest counter word is left free for the draws themselves.
    """

    seed: int
    worker: int = 0
    iteration: int = 0
    purpose: int = GRADIENT_NOISE

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise NumericError("seed must be a 64-bit unsigned integer")
        if self.worker < 0 or self.iteration < 0:
            raise NumericError("stream ids must be non-negative")

    def generator(self) -> np.random.Generator:
        """A fresh, independently owned Generator positioned at this stream."""
        key = self.seed | (self.purpose << 64)
        bitgen = np.random.Philox(key=key, counter=[0, self.iteration, self.worker, 0])
        return np.random.Generator(bitgen)

    def _positioned(self) -> np.random.Generator:
        # reuses a per-thread Philox for this key; draws match generator() exactly
        cache = _local.__dict__.setdefault("philox", {})
        key = self.seed | (self.purpose << 64)
        entry = cache.get(key)
        if entry is None:
            bitgen = np.random.Philox(key=key)
            entry = cache[key] = (bitgen, np.random.Generator(bitgen))
        bitgen, gen = entry
        state = bitgen.state
        state["state"]["counter"][:] = (0, self.iteration, self.worker, 0)
        state["buffer_pos"] = 4
        state["has_uint32"] = 0
        bitgen.state = state
        return gen

    def standard_normal(self, size) -> np.ndarray:
        return self._positioned().standard_normal(size)

    def integers(self, low, high, size) -> np.ndarray:
        return self._positioned().integers(low, high, size=size)


_local = threading.local()


def gaussian_vector(rng, dim: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """``dim`` i.i.d. draws from N(mean, std^2); ``rng`` is an RngStream or Generator."""
    if dim < 1:
        raise NumericError("dim must be >= 1")
    if std < 0:
        raise NumericError("std must be >= 0")
    if std == 0:
        return np.full(dim, float(mean))
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return mean + std * gen.standard_normal(dim)
