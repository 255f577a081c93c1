"""Dense float64 matrix helpers, a reproducible RNG stream and gradient oracles.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.

RNG
---
``RngStream`` drives a Philox4x64-10 counter-based generator.  The 256-bit
Philox key is derived from ``numpy.random.SeedSequence(seed, spawn_key=key)``
so substreams split with distinct keys never overlap.  Uniform doubles use
the top 53 bits of each 64-bit output, ``(raw >> 11) * 2**-53``.  Normal
variates use the basic Box-Muller transform on consecutive uniform pairs
``(u1, u2)``: ``sqrt(-2 ln(1 - u1)) * (cos(2 pi u2), sin(2 pi u2))``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import lapack

MATRIX_MAGIC = b"WBMX"
_HEADER = struct.Struct("<4sII")


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, pivot: int, jitter: float):
        self.pivot = pivot
        self.jitter = jitter
        super().__init__(
            f"Cholesky factorization failed at pivot {pivot} "
            f"(leading minor not positive definite, jitter={jitter:g})"
        )


def as_matrix(data, checked: bool = True) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous 2-D float64 array."""
    m = np.array(data, dtype=np.float64, copy=True, order="C")
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ContractError(f"matrix must be 2-D, got shape {m.shape}")
    if checked and not np.all(np.isfinite(m)):
        raise ContractError("matrix contains NaN or Inf")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def solve_spd(a: np.ndarray, b: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Solve ``(a + jitter*I) X = b`` through a Cholesky factorization."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"solve_spd needs a square matrix, got {a.shape}")
    if jitter < 0:
        raise ContractError("jitter must be >= 0")
    vec = b.ndim == 1
    rhs = b.reshape(-1, 1) if vec else b
    if rhs.shape[0] != a.shape[0]:
        raise ContractError(f"right-hand side has {rhs.shape[0]} rows, expected {a.shape[0]}")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(a).max(initial=0.0))):
        raise ContractError("solve_spd needs a symmetric matrix")
    m = a + jitter * np.eye(a.shape[0])
    factor, info = lapack.dpotrf(m, lower=1, clean=1)
    if info > 0:
        raise SingularMatrixError(pivot=int(info), jitter=jitter)
    if info < 0:
        raise ContractError(f"dpotrf argument {-info} invalid")
    x, info = lapack.dpotrs(factor, rhs, lower=1)
    if info != 0:
        raise ContractError(f"dpotrs failed with info={info}")
    return x.ravel() if vec else x


class RngStream:
    """Seeded Philox stream with key-split substreams.

    Every draw advances ``position`` by the number of 64-bit words consumed.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        philox_key = ss.generate_state(2, dtype=np.uint64)
        self._bitgen = np.random.Philox(key=philox_key, counter=0)
        self.position = 0

    def split(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    def raw(self, n: int) -> np.ndarray:
        out = self._bitgen.random_raw(int(n))
        self.position += int(n)
        return np.asarray(out, dtype=np.uint64).reshape(-1)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # random sort keys; ties have probability ~n^2 * 2^-53 and resolve stably
        return np.argsort(self.uniform(n), kind="stable")

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        if k > n:
            raise ContractError(f"cannot draw {k} of {n} without replacement")
        return self.permutation(n)[:k]

    def integers(self, high: int, size) -> np.ndarray:
        return np.floor(self.uniform(size) * high).astype(np.int64)


def sample_gaussian(rng: RngStream, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ContractError("std must be >= 0")
    z = rng.normal((rows, cols))
    return mean + std * z


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    if h <= 0:
        raise ContractError("h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at entry {np.unravel_index(i, x.shape)}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def fmt_float(v) -> str:
    """Full-precision text form used in every CSV (17 significant digits)."""
    return format(float(v), ".17g")


def matrix_to_bytes(m: np.ndarray) -> bytes:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ContractError(f"only 2-D matrices serialize, got shape {m.shape}")
    return _HEADER.pack(MATRIX_MAGIC, m.shape[0], m.shape[1]) + m.astype("<f8").tobytes(order="C")


def matrix_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one matrix record starting at ``offset``; return it and the next offset."""
    if len(buf) - offset < _HEADER.size:
        raise ValueError(f"truncated matrix header at byte {offset}")
    magic, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != MATRIX_MAGIC:
        raise ValueError(f"bad matrix magic {magic!r} at byte {offset}")
    start = offset + _HEADER.size
    end = start + 8 * rows * cols
    if end > len(buf):
        raise ValueError(f"truncated matrix payload at byte {start}: need {end - start} bytes")
    m = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=start).reshape(rows, cols)
    return m.astype(np.float64), end


def save_matrices(path, mats: Sequence[np.ndarray]) -> None:
    Path(path).write_bytes(b"".join(matrix_to_bytes(m) for m in mats))


def load_matrices(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        m, pos = matrix_from_bytes(buf, pos)
        out.append(m)
    return out


def save_matrix(path, m: np.ndarray) -> None:
    save_matrices(path, [m])


def load_matrix(path) -> np.ndarray:
    mats = load_matrices(path)
    if len(mats) != 1:
        raise ValueError(f"{path}: expected one matrix record, found {len(mats)}")
    return mats[0]
