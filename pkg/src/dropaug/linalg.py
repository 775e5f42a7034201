"""Dense float64 matrix helpers and reproducible random streams.

Everything in the package moves through 2-D row-major float64 arrays
(batches are rows). The helpers here validate shapes and finiteness so
the numerical modules can assume clean inputs, and ``RngStream`` gives
every consumer of randomness its own counter-based stream so that call
order in one subsystem can never perturb another.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericError, ShapeError

__all__ = [
    "as_tensor",
    "check_finite",
    "matmul",
    "elementwise",
    "reduce",
    "RngStream",
]


def as_tensor(data, name: str = "tensor") -> np.ndarray:
    """Coerce ``data`` to a C-contiguous 2-D float64 array.

    1-D input is treated as a single row. Non-finite entries raise
    ``NumericError``.
    """
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    a = np.ascontiguousarray(a)
    check_finite(a, name)
    return a


def check_finite(a: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.isfinite(a).all():
        raise NumericError(f"{name} contains non-finite entries")
    return a


def _require_2d(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with shape validation and a finiteness gate."""
    a = _require_2d(a, "a")
    b = _require_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul shape mismatch: {a.shape} x {b.shape} "
            f"(inner dims {a.shape[1]} != {b.shape[0]})"
        )
    out = a @ b
    return check_finite(out, "matmul result")


def elementwise(a, b, op: str) -> np.ndarray:
    """Entrywise combination of equal-shaped tensors; op in {add, sub, mul}."""
    a = _require_2d(a, "a")
    b = _require_2d(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"elementwise shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        out = a + b
    elif op == "sub":
        out = a - b
    elif op == "mul":
        out = a * b
    else:
        raise DomainError(f"unknown elementwise op {op!r}")
    return check_finite(out, f"elementwise {op} result")


def reduce(a, kind: str):
    """Reduce a nonempty tensor.

    ``sum``/``mean``/``max``/``sq_norm`` return a float; ``argmax_per_row``
    returns an int64 array with ties resolved to the lowest index.
    """
    a = _require_2d(a, "a")
    if a.size == 0:
        raise DomainError("cannot reduce an empty tensor")
    if kind == "sum":
        return float(a.sum())
    if kind == "mean":
        return float(a.mean())
    if kind == "max":
        return float(a.max())
    if kind == "sq_norm":
        return float((a * a).sum())
    if kind == "argmax_per_row":
        # np.argmax already breaks ties toward the lowest index
        return a.argmax(axis=1).astype(np.int64)
    raise DomainError(f"unknown reduction {kind!r}")


def _mix64(x: int) -> int:
    """splitmix64 finalizer; bijective on 64-bit ints."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Backed by the Philox4x64 bit generator, so identical keys replay
    identical sequences on any platform. ``substream`` derives a new
    independent stream from integer coordinates (epoch, batch, layer,
    ...), which keeps sampling order in one place from shifting draws
    anywhere else.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise DomainError("seed and stream_id must be non-negative")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, *ids: int) -> "RngStream":
        """Derive an independent stream from this stream's key and ``ids``."""
        h = self.stream_id
        for i in ids:
            h = _mix64(h ^ _mix64(int(i) & 0xFFFFFFFFFFFFFFFF))
        return RngStream(self.seed, h)

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """n draws from U[lo, hi)."""
        if lo > hi:
            raise DomainError(f"uniform requires lo <= hi, got ({lo}, {hi})")
        return self._gen.uniform(lo, hi, size=int(n))

    def bernoulli(self, n: int, p_one: float) -> np.ndarray:
        """n values in {0.0, 1.0}, each 1 with probability ``p_one``."""
        if not 0.0 <= p_one <= 1.0:
            raise DomainError(f"p_one must be in [0, 1], got {p_one}")
        u = self._gen.random(int(n))
        return (u < p_one).astype(np.float64)

    def gaussian(self, n: int, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        """n draws from Normal(mu, sigma^2); sigma = 0 returns mu exactly."""
        if sigma < 0:
            raise DomainError(f"sigma must be >= 0, got {sigma}")
        return self._gen.normal(mu, sigma, size=int(n))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(int(n))

    def integers(self, n: int, lo: int, hi: int) -> np.ndarray:
        """n integers in [lo, hi)."""
        if lo >= hi:
            raise DomainError(f"integers requires lo < hi, got ({lo}, {hi})")
        return self._gen.integers(lo, hi, size=int(n))
