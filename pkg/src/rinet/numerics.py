"""Deterministic dense linear algebra on float64 matrices.

A "matrix" throughout the package is a 2-D, row-major (C-contiguous),
float64 numpy array.  numpy supplies the kernels; this module pins the
contracts every other module relies on: strict shape checking, stable
nonlinearities, a seeded RNG wrapper, and a flat binary serialization
format (two little-endian uint64 dims followed by the row-major float64
payload).

All operations are pure: same inputs give bitwise-identical outputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError, ShapeError

ELEMENTWISE_OPS = ("add", "sub", "mul")
ACTIVATION_KINDS = ("relu", "sigmoid", "tanh", "softmax_rows")
REDUCE_KINDS = ("sum", "mean", "max_index_per_row")


def as_matrix(a) -> np.ndarray:
    """Coerce an array-like to a 2-D float64 array (1-D becomes one row)."""
    m = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    return a @ b


def elementwise(op: str, a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op}: shapes differ, {a.shape} vs {b.shape}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    raise DomainError(f"unknown elementwise op {op!r}")


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def sigmoid(a: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated without overflow on either tail."""
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ex = np.exp(a[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for stability."""
    a = as_matrix(a)
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def activation(kind: str, a) -> np.ndarray:
    a = as_matrix(a)
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return np.tanh(a)
    if kind == "softmax_rows":
        return softmax_rows(a)
    raise DomainError(f"unknown activation kind {kind!r}")


def reduce(kind: str, a):
    """Reduce a matrix to a scalar (sum, mean) or per-row argmax indices."""
    a = as_matrix(a)
    if a.size == 0:
        raise DomainError("reduce: empty input")
    if kind == "sum":
        return float(a.sum())
    if kind == "mean":
        return float(a.mean())
    if kind == "max_index_per_row":
        return np.argmax(a, axis=1)
    raise DomainError(f"unknown reduce kind {kind!r}")


@dataclass
class RngStream:
    """Seeded PCG64 stream; identical seeds replay identical draws.

    Single-owner: a stream's draw sequence is part of experiment state, so
    never share one stream between independent consumers.  Use `child` to
    derive statistically independent streams deterministically.
    """

    seed: int
    algorithm: str = "pcg64"
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.algorithm != "pcg64":
            raise DomainError(f"unknown rng algorithm {self.algorithm!r}")
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def child(self, tag: int) -> "RngStream":
        """Derive an independent stream keyed by (seed, tag)."""
        derived = np.random.SeedSequence([self.seed, tag]).generate_state(1, np.uint64)[0]
        return RngStream(int(derived))

    def normal(self, std: float, shape) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, a: np.ndarray) -> None:
        self._gen.shuffle(a)


_DIMS = struct.Struct("<QQ")


def write_matrix(f, m: np.ndarray) -> None:
    """Append one matrix to a binary stream: uint64 rows, uint64 cols, payload."""
    m = as_matrix(m)
    f.write(_DIMS.pack(m.shape[0], m.shape[1]))
    f.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_matrix(f) -> np.ndarray:
    header = f.read(_DIMS.size)
    if len(header) != _DIMS.size:
        raise FormatError("matrix stream truncated in header")
    rows, cols = _DIMS.unpack(header)
    n = rows * cols
    payload = f.read(8 * n)
    if len(payload) != 8 * n:
        raise FormatError(f"matrix stream truncated: expected {8 * n} payload bytes")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)


def save_matrix(path, m: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_matrix(f, m)


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_matrix(f)
