"""Dense float64 kernels and a fixed, portable random number generator.

Everything downstream (layers, losses, sampling, synthetic data) is built on
the handful of primitives in this module so that numeric conventions and
reproducibility have a single home. All matrices are 2-D float64
``numpy.ndarray`` in row-major order.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, NumericError, ParameterError, ShapeError

NORM_EPS = 1e-12

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    # Finalizer from Steele, Lea & Flood, "Fast splittable PRNGs" (SplitMix64).
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 counter generator: seedable, 64-bit, platform independent.

    The raw stream is ``splitmix64(seed + k * 0x9E3779B97F4A7C15)`` for
    k = 1, 2, ...; every draw advances the counter by a fixed amount, so a
    given seed yields the same integer stream on every platform. Floating
    point variates are derived from the top 53 bits; normals use the
    Box-Muller transform on consecutive uniform pairs.
    """

    def __init__(self, seed: int):
        self._state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def _raw(self, n: int) -> np.ndarray:
        """Next n outputs of the underlying uint64 stream."""
        with np.errstate(over="ignore"):
            counters = self._state + _GAMMA * np.arange(1, n + 1, dtype=np.uint64)
            self._state = counters[-1] if n > 0 else self._state
            return _splitmix64(counters)

    def random(self, size: int | tuple[int, ...] | None = None) -> np.ndarray | float:
        """Uniform float64 in [0, 1) with 53-bit resolution."""
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def uniform(self, lo: float, hi: float, size=None):
        u = self.random(size)
        return lo + (hi - lo) * u

    def standard_normal(self, size: int | tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - np.asarray(self.random(m))   # (0, 1], keeps log finite
        u2 = np.asarray(self.random(m))
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n].reshape(size)

    def integers(self, n: int, size=None):
        """Uniform ints in [0, n). Uses floor(u * n); bias is O(n / 2**53)."""
        if n <= 0:
            raise ParameterError(f"integers() needs n >= 1, got {n}")
        u = self.random(size)
        if size is None:
            return int(u * n)
        return np.floor(u * n).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        out = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):   # Fisher-Yates
            j = self.integers(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        """k indices drawn from range(n), without replacement by default."""
        if replace:
            return self.integers(n, size=k)
        if k > n:
            raise ParameterError(f"cannot draw {k} from {n} without replacement")
        pool = np.arange(n, dtype=np.int64)
        for i in range(k):              # partial Fisher-Yates, front segment
            j = i + self.integers(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def ensure_mat(x: np.ndarray, name: str = "matrix") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = ensure_mat(a, "a")
    b = ensure_mat(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def pairwise_sq_euclidean(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between all row pairs of x and y.

    Uses the expansion |x|^2 + |y|^2 - 2<x,y>; tiny negative results from
    cancellation are clamped to 0.
    """
    x = ensure_mat(x, "x")
    y = ensure_mat(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    sq = (x * x).sum(axis=1)[:, None] + (y * y).sum(axis=1)[None, :] - 2.0 * (x @ y.T)
    return np.maximum(sq, 0.0)


def row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt((x * x).sum(axis=1))


def pairwise_cosine_sim(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cosine similarity between all row pairs; rejects near-zero rows."""
    x = ensure_mat(x, "x")
    y = ensure_mat(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    nx = row_norms(x)
    ny = row_norms(y)
    if (nx < NORM_EPS).any() or (ny < NORM_EPS).any():
        raise DegenerateInputError("cosine similarity undefined for near-zero rows")
    return (x / nx[:, None]) @ (y / ny[:, None]).T


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, entry by entry.

    This is the oracle every analytic backward pass in the package is
    checked against; it must stay independent of those implementations.
    """
    if h <= 0:
        raise ParameterError(f"step h must be positive, got {h}")
    x = ensure_mat(x, "x")
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = float(f(x))
        x[idx] = orig - h
        fm = float(f(x))
        x[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value near entry {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference scaled by the larger gradient magnitude.

    The 1e-6 scale floor keeps finite-difference noise from dominating
    when the true gradient is (near) zero, e.g. for parameters the loss is
    invariant to.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-6)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def kaiming_init(fan_in: int, rows: int, cols: int, rng: Rng) -> np.ndarray:
    """Normal(0, 2/fan_in) weight initialization."""
    if fan_in < 1:
        raise ParameterError(f"fan_in must be >= 1, got {fan_in}")
    std = math.sqrt(2.0 / fan_in)
    return std * rng.standard_normal((rows, cols))
