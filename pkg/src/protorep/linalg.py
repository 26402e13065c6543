"""Extended-precision solves and log-domain arithmetic for nonnegative matrices.

DR entries scale like ``exp(sum(r) / lambda)`` along trajectories and drop
below double range on long paths, so closed forms are solved with
``python-flint`` ball arithmetic and eigenvectors are iterated on the logs of
the entries.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np
from flint import arb, arb_mat, ctx

DEFAULT_BITS = 256
# log-ratio to the largest entry below which an iterate entry is an exact zero
LOG_ZERO_CUTOFF = 2000.0
_FLINT_LOCK = threading.RLock()


class SingularMatrixError(ArithmeticError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


class ConvergenceError(ArithmeticError):
    def __init__(self, message: str, last_iterate: np.ndarray, gap: float):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.gap = gap


@contextmanager
def working_precision(bits: int):
    # flint's precision is process-global
    with _FLINT_LOCK:
        old = ctx.prec
        ctx.prec = bits
        try:
            yield
        finally:
            ctx.prec = old


# ---------------------------------------------------------------------------
# log domain


def logsumexp(values, axis=None):
    """``log(sum(exp(values)))`` with a max shift; ``-inf`` for empty or all ``-inf``."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        if axis is None:
            return -np.inf
        return np.full(np.delete(v.shape, axis), -np.inf)
    m = np.max(v, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - shift), axis=axis, keepdims=True)) + shift
    out = np.where(np.isneginf(m), -np.inf, out)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class LogNonNegMatrix:
    """Entrywise-nonnegative matrix stored as natural logs; ``-inf`` is an exact zero."""

    log_entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.log_entries, dtype=float)
        if a.ndim != 2:
            raise ValueError("log matrix must be 2-D")
        if np.any(np.isnan(a)) or np.any(np.isposinf(a)):
            raise ValueError("log entries must be finite or -inf")
        a.setflags(write=False)
        object.__setattr__(self, "log_entries", a)

    @classmethod
    def from_dense(cls, m) -> "LogNonNegMatrix":
        m = np.asarray(m, dtype=float)
        if np.any(m < 0):
            raise ValueError("matrix has negative entries")
        with np.errstate(divide="ignore"):
            return cls(np.log(m))

    @property
    def shape(self):
        return self.log_entries.shape

    def to_dense(self) -> np.ndarray:
        return np.exp(self.log_entries)

    def symmetrized(self) -> "LogNonNegMatrix":
        a = self.log_entries
        if a.shape[0] != a.shape[1]:
            raise ValueError("symmetrize needs a square matrix")
        return LogNonNegMatrix(np.logaddexp(a, a.T) - np.log(2.0))

    def submatrix(self, idx) -> "LogNonNegMatrix":
        idx = np.asarray(idx)
        return LogNonNegMatrix(self.log_entries[np.ix_(idx, idx)])

    def is_symmetric(self) -> bool:
        a = self.log_entries
        return a.shape[0] == a.shape[1] and np.array_equal(a, a.T)


def log_matvec(m: LogNonNegMatrix, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"shape mismatch: {m.shape} @ {v.shape}")
    return logsumexp(m.log_entries + v[None, :], axis=1)


def log_power_iteration(
    m: LogNonNegMatrix,
    tol: float = 1e-12,
    max_iters: int = 10_000,
    rng: Optional[np.random.Generator] = None,
    init: Optional[np.ndarray] = None,
) -> tuple[float, np.ndarray]:
    """Top eigenpair of a symmetric nonnegative matrix given by its logs.

    Returns ``(log eigenvalue, log eigenvector)``; the eigenvector has unit
    2-norm and may contain ``-inf`` (exact zeros) when the matrix is
    reducible. ``init`` is an optional log-domain starting vector.
    """
    if not m.is_symmetric():
        raise ValueError("log_power_iteration needs a symmetric matrix")
    n = m.shape[0]
    if init is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        v = np.log(rng.uniform(0.5, 1.5, size=n))
    else:
        v = np.array(init, dtype=float)
    v = v - 0.5 * logsumexp(2 * v)
    # a small diagonal shift breaks the +/- lambda tie of periodic matrices
    shift = np.log(0.1) + logsumexp(m.log_entries + v[:, None] + v[None, :])
    shifted = np.array(m.log_entries)
    if n and np.isfinite(shift):
        np.fill_diagonal(shifted, np.logaddexp(np.diag(shifted), shift))
    shifted = LogNonNegMatrix(shifted)
    diff = np.inf
    for _ in range(max_iters):
        w = log_matvec(shifted, v)
        w = w - 0.5 * logsumexp(2 * w)
        w[w < np.max(w) - LOG_ZERO_CUTOFF] = -np.inf
        both_inf = np.isneginf(w) & np.isneginf(v)
        with np.errstate(invalid="ignore"):
            delta = np.where(both_inf, 0.0, np.abs(w - v))
        diff = float(np.max(delta)) if n else 0.0
        v = w
        if diff < tol:
            break
    else:
        raise ConvergenceError(
            f"power iteration did not converge in {max_iters} iterations (last change {diff:.3e})",
            last_iterate=v,
            gap=diff,
        )
    log_val = logsumexp(m.log_entries + v[:, None] + v[None, :])
    return log_val, v


# ---------------------------------------------------------------------------
# extended precision


class HpMatrix:
    """Dense real matrix held as flint ``arb_mat`` at ``bits`` of precision."""

    def __init__(self, entries, bits: int = DEFAULT_BITS):
        if bits < 53:
            raise ValueError("precision must be at least 53 bits")
        self.bits = bits
        if isinstance(entries, arb_mat):
            self.mat = entries
        else:
            a = np.asarray(entries, dtype=float)
            if a.ndim != 2:
                raise ValueError("HpMatrix needs a 2-D array")
            with working_precision(bits):
                self.mat = arb_mat(a.tolist()) if a.size else arb_mat(a.shape[0], a.shape[1])

    @classmethod
    def identity(cls, n: int, bits: int = DEFAULT_BITS) -> "HpMatrix":
        return cls(np.eye(n), bits)

    @property
    def shape(self):
        return (self.mat.nrows(), self.mat.ncols())

    def __getitem__(self, ij) -> arb:
        return self.mat[ij]

    def to_float(self) -> tuple[np.ndarray, bool]:
        """Round to doubles; the flag is True when any nonzero entry underflowed."""
        n, k = self.shape
        out = np.empty((n, k))
        lossy = False
        tiny = np.finfo(float).tiny
        for i in range(n):
            for j in range(k):
                x = self.mat[i, j]
                f = float(x.mid())
                if f == 0.0 or abs(f) < tiny:
                    lossy = lossy or not x.mid().is_zero()
                out[i, j] = f
        return out, lossy

    def to_numpy(self) -> np.ndarray:
        return self.to_float()[0]

    def log_entries(self) -> LogNonNegMatrix:
        """Natural logs of the entries, computed at full precision."""
        n, k = self.shape
        out = np.empty((n, k))
        with working_precision(self.bits):
            for i in range(n):
                for j in range(k):
                    x = self.mat[i, j].mid()
                    if x.is_zero():
                        out[i, j] = -np.inf
                    elif x < 0:
                        raise ValueError(f"negative entry at ({i}, {j})")
                    else:
                        out[i, j] = float(x.log().mid())
        return LogNonNegMatrix(out)

    def matmul(self, other: "HpMatrix") -> "HpMatrix":
        with working_precision(self.bits):
            return HpMatrix(self.mat * other.mat, self.bits)

    def sub(self, other: "HpMatrix") -> "HpMatrix":
        with working_precision(self.bits):
            return HpMatrix(self.mat - other.mat, self.bits)

    def transpose(self) -> "HpMatrix":
        with working_precision(self.bits):
            return HpMatrix(self.mat.transpose(), self.bits)

    def max_abs(self) -> float:
        n, k = self.shape
        best = 0.0
        for i in range(n):
            for j in range(k):
                best = max(best, abs(float(self.mat[i, j].mid())))
        return best


def _inf_norm_estimate(a: np.ndarray) -> float:
    try:
        return float(np.linalg.cond(a, p=np.inf))
    except np.linalg.LinAlgError:
        return float("inf")


def hp_solve(a: HpMatrix, b: HpMatrix) -> HpMatrix:
    """Solve ``A X = B`` at the precision of ``a``.

    The residual is certified against ``n * 2**-(bits-8) * ||B||_inf``.
    """
    n, m = a.shape
    if n != m:
        raise ValueError("hp_solve needs a square matrix")
    if b.shape[0] != n:
        raise ValueError(f"shape mismatch: A is {a.shape}, B is {b.shape}")
    bits = a.bits
    with working_precision(bits):
        try:
            x = a.mat.solve(b.mat)
        except ZeroDivisionError:
            raise SingularMatrixError(
                "matrix is singular at working precision", _inf_norm_estimate(a.to_numpy())
            ) from None
        resid = HpMatrix(a.mat * x - b.mat, bits).max_abs()
    bound = n * 2.0 ** (-(bits - 8)) * max(_row_sum_norm(b), np.finfo(float).tiny)
    if resid > bound:
        raise SingularMatrixError(
            f"residual {resid:.3e} exceeds bound {bound:.3e}", _inf_norm_estimate(a.to_numpy())
        )
    return HpMatrix(x, bits)


def _row_sum_norm(m: HpMatrix) -> float:
    n, k = m.shape
    return max(
        (sum(abs(float(m.mat[i, j].mid())) for j in range(k)) for i in range(n)), default=0.0
    )


def symmetrize(m):
    """``(M + M^T) / 2``; accepts arrays, ``HpMatrix`` and ``LogNonNegMatrix``."""
    if isinstance(m, LogNonNegMatrix):
        return m.symmetrized()
    if isinstance(m, HpMatrix):
        if m.shape[0] != m.shape[1]:
            raise ValueError("symmetrize needs a square matrix")
        with working_precision(m.bits):
            return HpMatrix((m.mat + m.mat.transpose()) * arb(0.5), m.bits)
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("symmetrize needs a square matrix")
    return (a + a.T) / 2
