"""
Extended precision vectors: numpy object arrays of ``gmpy2.mpfr``.

The solvers and the cone-sampling preconditioners accept such arrays
anywhere a float64 vector is expected; arithmetic then runs at the
precision of the active gmpy2 context (see :func:`working_precision`).
"""
from __future__ import annotations

import math

import gmpy2
import numpy as np

__all__ = ["is_mp", "to_mp", "to_float", "like", "psqrt", "working_precision", "ExactMatvec"]


def is_mp(v) -> bool:
    return isinstance(v, np.ndarray) and v.dtype == object


def to_mp(v) -> np.ndarray:
    """Object array of mpfr at the current context precision (exact for float input)."""
    v = np.asarray(v)
    out = np.empty(v.shape, dtype=object)
    flat = out.reshape(-1)
    for i, t in enumerate(v.reshape(-1)):
        flat[i] = gmpy2.mpfr(t)
    return out


def to_float(v) -> np.ndarray:
    return np.asarray(v, dtype=float)


def like(v, ref) -> np.ndarray:
    """``v`` converted to the arithmetic of ``ref``."""
    if is_mp(ref):
        return v if is_mp(v) else to_mp(v)
    return to_float(v)


def psqrt(v):
    """Square root of ``max(v, 0)`` in the arithmetic of ``v``."""
    if isinstance(v, gmpy2.mpfr):
        return gmpy2.sqrt(v) if v > 0 else gmpy2.mpfr(0)
    v = float(v)
    return math.sqrt(v) if v > 0.0 else 0.0


def working_precision(bits: int):
    """Context manager setting the mpfr precision in bits."""
    return gmpy2.context(gmpy2.get_context(), precision=int(bits))


class ExactMatvec:
    """
    ``M @ x`` for a float64 matrix and an mpfr vector, computed exactly in
    integer arithmetic and rounded once per entry to the context precision.

    Both operands are scaled to integers by a shared power of two, so the
    product is a plain integer matmul (much cheaper than mpfr accumulation
    in an object array).
    """

    def __init__(self, M: np.ndarray):
        M = np.asarray(M, dtype=float)
        mant, exp = np.frexp(M)
        mant = np.ldexp(mant, 53).astype(np.int64)
        exp = exp.astype(np.int64) - 53
        nz = mant != 0
        self.shift = int(exp[nz].min()) if nz.any() else 0
        ints = np.empty(M.shape, dtype=object)
        for idx in zip(*np.nonzero(nz)):
            ints[idx] = int(mant[idx]) << int(exp[idx] - self.shift)
        ints[~nz] = 0
        self.ints = ints

    def __call__(self, x: np.ndarray) -> np.ndarray:
        parts = [v.as_mantissa_exp() for v in x]
        exps = [int(e) for m, e in parts if m != 0]
        if not exps:
            return np.array([gmpy2.mpfr(0)] * self.ints.shape[0], dtype=object)
        base = min(exps)
        X = np.array([int(m) << (int(e) - base) if m != 0 else 0 for m, e in parts],
                     dtype=object)
        Y = self.ints @ X
        shift = base + self.shift
        out = np.empty(Y.shape, dtype=object)
        for i, y in enumerate(Y):
            out[i] = gmpy2.mul_2exp(gmpy2.mpfr(y), shift)
        return out
