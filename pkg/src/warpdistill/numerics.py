"""Dense-array numerics: stable softmax/softmin, seeded RNG, grid I/O,
and the finite-difference gradient checker used as the universal oracle.

A "grid" throughout the package is a 2-D float64 ``numpy.ndarray`` in
row-major order.  All public operations return finite values or raise
:class:`~warpdistill.errors.NumericError`.

Randomness comes from :class:`Rng`, a thin wrapper over numpy's Philox
counter-based generator.  Philox streams are defined by their key alone,
so two runs with the same seed produce bit-identical draws on every
platform.  Independent substreams are derived by mixing a label into the
seed (splitmix64), never by sharing generator state.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, UsageError

GRID_MAGIC = b"VGRD\x01"


def as_grid(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float64 array, optionally checking the shape."""
    g = np.asarray(values, dtype=np.float64)
    if g.ndim == 1:
        g = g.reshape(1, -1)
    if g.ndim != 2:
        raise UsageError(f"grid must be 2-D, got shape {g.shape}")
    if rows is not None and g.shape[0] != rows:
        raise UsageError(f"expected {rows} rows, got {g.shape[0]}")
    if cols is not None and g.shape[1] != cols:
        raise UsageError(f"expected {cols} cols, got {g.shape[1]}")
    return g


def ensure_finite(g: np.ndarray, name: str = "grid") -> np.ndarray:
    """Raise NumericError naming the first offending entry if g has NaN/Inf."""
    bad = ~np.isfinite(g)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise NumericError(
            f"{name} has non-finite entry at {tuple(int(i) for i in idx)}"
        )
    return g


def softmax_rows(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of x / temperature, stabilized by max-subtraction.

    Every output row sums to 1; safe for entries of magnitude 1e4 and
    beyond because the row maximum is subtracted before exponentiation.
    """
    if temperature <= 0:
        raise UsageError(f"temperature must be positive, got {temperature}")
    x = as_grid(x)
    bad_rows = ~np.isfinite(x).all(axis=1)
    if bad_rows.any():
        raise NumericError(f"softmax_rows: non-finite input in row {int(np.argmax(bad_rows))}")
    z = x / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(p: np.ndarray, dp: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Gradient of softmax_rows: maps d(loss)/d(p) to d(loss)/d(x).

    ``p`` must be the forward output for the same ``x`` and temperature.
    """
    inner = (dp * p).sum(axis=1, keepdims=True)
    return p * (dp - inner) / temperature


def log_sum_exp(values: Sequence[float] | np.ndarray, gamma: float) -> float:
    """Smooth minimum: -gamma * log(sum_i exp(-a_i / gamma)).

    Computed with min-subtraction so huge sentinel entries underflow to
    zero weight instead of overflowing.  Tends to min(values) as
    gamma -> 0 and is always <= min(values).
    """
    if gamma <= 0:
        raise UsageError(f"gamma must be positive, got {gamma}")
    a = np.asarray(values, dtype=np.float64).ravel()
    if a.size == 0:
        raise UsageError("log_sum_exp of an empty list")
    m = a.min()
    return float(m - gamma * np.log(np.exp(-(a - m) / gamma).sum()))


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    eps: float = 1e-6,
) -> np.ndarray:
    """Central-difference gradient of a scalar function over a grid.

    Perturbs one entry at a time: (f(x + eps) - f(x - eps)) / (2 eps).
    The result is the universal oracle every analytic backward pass in
    this package is checked against.
    """
    x = as_grid(x).copy()
    g = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            orig = x[i, j]
            x[i, j] = orig + eps
            fp = f(x)
            x[i, j] = orig - eps
            fm = f(x)
            x[i, j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"finite_diff_grad: f non-finite at entry ({i}, {j})")
            g[i, j] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    """Relative error |a - b| / max(|a|, |b|, floor).

    The floor makes near-zero gradient entries compare on an absolute
    scale instead of dividing noise by noise.
    """
    return abs(a - b) / max(abs(a), abs(b), floor)


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


def _splitmix64(z: int) -> int:
    """One round of splitmix64; used to derive substream seeds."""
    z = (z + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


class Rng:
    """Seeded random source with platform-independent streams.

    Backed by numpy's Philox (a counter-based generator): the stream is a
    pure function of the 64-bit key, so identical seeds give identical
    draws everywhere.  ``child(tag)`` derives an independent substream by
    hashing the tag into the seed, which keeps per-component randomness
    decoupled from call order elsewhere.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, tag: int | str) -> "Rng":
        if isinstance(tag, str):
            h = 0
            for b in tag.encode("utf-8"):
                h = _splitmix64(h ^ b)
            tag = h
        return Rng(_splitmix64(self.seed ^ (int(tag) & 0xFFFFFFFFFFFFFFFF)))

    def normal(self, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=(rows, cols)).astype(np.float64)

    def normal_vec(self, n: int, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=n).astype(np.float64)

    def uniform(self) -> float:
        return float(self._gen.random())

    def integers(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))

    def shuffle(self, items: list) -> None:
        """Fisher-Yates in place, deterministic given the stream position."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]


def save_grid(path, g: np.ndarray) -> None:
    """Write a grid as magic + u64 rows + u64 cols + little-endian f64 data."""
    g = as_grid(g)
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<QQ", g.shape[0], g.shape[1]))
        fh.write(np.ascontiguousarray(g, dtype="<f8").tobytes())


def load_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(GRID_MAGIC))
        if magic != GRID_MAGIC:
            raise UsageError(f"{path}: not a grid file (bad magic {magic!r})")
        rows, cols = struct.unpack("<QQ", fh.read(16))
        data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
        if data.size != rows * cols:
            raise UsageError(f"{path}: truncated grid ({data.size} of {rows * cols} values)")
        return data.reshape(rows, cols).astype(np.float64)


def grid_to_csv(path, g: np.ndarray) -> None:
    """Human-readable export; repr round-trips every double exactly."""
    g = as_grid(g)
    with open(path, "w") as fh:
        for row in g:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
