"""
Dense linear algebra helpers and the seeded random stream.

Vectors and matrices are plain float64 numpy arrays; the helpers here only
enforce shape and finiteness at the public boundary.
"""
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike

from errors import ConfigError, NumericError, ShapeError

DenseVector = np.ndarray
DenseMatrix = np.ndarray

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains NaN or Inf")


def as_vector(values: ArrayLike, name: str = "vector") -> DenseVector:
    """Copy values into a 1-D float64 vector, rejecting non-finite entries."""
    vec = np.array(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {vec.shape}")
    _check_finite(vec, name)
    return vec


def as_matrix(values: ArrayLike, name: str = "matrix") -> DenseMatrix:
    mat = np.array(values, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat.reshape(1, -1)
    if mat.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {mat.shape}")
    _check_finite(mat, name)
    return mat


def matrix_from_rows(rows: int, cols: int, values: Sequence[float]) -> DenseMatrix:
    """Build a matrix from row-major storage."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix shape must be positive, got {rows}x{cols}")
    if len(values) != rows * cols:
        raise ShapeError(f"expected {rows * cols} values for a {rows}x{cols} matrix, got {len(values)}")
    return as_matrix(np.asarray(values, dtype=np.float64).reshape(rows, cols))


def identity(n: int) -> DenseMatrix:
    return np.eye(n, dtype=np.float64)


def vec_axpy(a: float, x: ArrayLike, y: ArrayLike) -> DenseVector:
    """Return a*x + y."""
    xv = as_vector(x, "x")
    yv = as_vector(y, "y")
    if xv.shape != yv.shape:
        raise ShapeError(f"vec_axpy dimension mismatch: {xv.shape[0]} vs {yv.shape[0]}")
    if a == 0:
        return yv
    out = a * xv + yv
    _check_finite(out, "vec_axpy result")
    return out


def matmul(a: ArrayLike, b: ArrayLike) -> DenseMatrix:
    """Standard matrix product; a 1-D right operand is treated as a column."""
    am = as_matrix(a, "A")
    bm = np.array(b, dtype=np.float64)
    if bm.ndim == 1:
        bm = bm.reshape(-1, 1)
    bm = as_matrix(bm, "B")
    if am.shape[1] != bm.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {am.shape} x {bm.shape}")
    out = am @ bm
    _check_finite(out, "matmul result")
    return out


def l1_norm(x: ArrayLike) -> float:
    xv = as_vector(x, "x")
    if xv.size == 0:
        raise ShapeError("l1_norm of an empty vector")
    return float(np.abs(xv).sum())


def splitmix64(values: ArrayLike) -> np.ndarray:
    """Vectorised SplitMix64 finaliser over uint64 inputs."""
    z = np.asarray(values, dtype=np.uint64).copy()
    with np.errstate(over="ignore"):
        z = (z + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """
    Reproducible random stream.

    Backed by numpy's PCG64 bit generator (PCG-XSL-RR 128/64) seeded through
    SeedSequence, whose output is bit-exact across platforms for a given
    seed. All draws go through this wrapper so every consumer shares one
    documented algorithm.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def next_u64(self) -> int:
        return int(self._gen.integers(0, 2**64, dtype=np.uint64, endpoint=False))

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def choice(self, a, size=None, replace: bool = True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def spawn(self, n: int) -> list["SeededRng"]:
        """Independent child streams, deterministic in (seed, n)."""
        children = []
        for child_seq in self._seq.spawn(n):
            child = SeededRng.__new__(SeededRng)
            child.seed = self.seed
            child._seq = child_seq
            child._gen = np.random.Generator(np.random.PCG64(child_seq))
            children.append(child)
        return children
