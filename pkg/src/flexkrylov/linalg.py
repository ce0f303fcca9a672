"""
Real linear-algebra kernels: symmetric operators, weighted inner products,
angles, a cyclic Jacobi eigensolver and generalized condition numbers.

Vectors are plain 1-D float64 numpy arrays; operators also accept the
extended-precision object arrays of :mod:`flexkrylov.precision`.
"""
from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .exceptions import IndefiniteError, InputError, NumericalError
from .precision import ExactMatvec

__all__ = [
    "MAX_DENSE",
    "SymmetricOperator",
    "Metric",
    "as_array",
    "as_vector",
    "all_finite",
    "dense_operator",
    "diagonal_operator",
    "laplacian_1d",
    "weighted_inner",
    "angle",
    "sym_eig",
    "metric_symmetrize",
    "materialize",
    "generalized_condition",
]

# Largest dimension for which dense materialization is allowed.
MAX_DENSE = 4000

# Above this size sym_eig hands over to LAPACK.
JACOBI_MAX = 200


def as_array(x) -> np.ndarray:
    """float64 array, or the object array itself for extended precision."""
    x = np.asarray(x)
    return x if x.dtype == object else x.astype(float, copy=False)


def all_finite(v) -> bool:
    v = np.asarray(v)
    if v.dtype == object:
        v = v.astype(float)
    return bool(np.all(np.isfinite(v)))


def as_vector(x, n: Optional[int] = None, name: str = "vector") -> np.ndarray:
    v = as_array(x)
    if v.ndim != 1:
        raise InputError(f"{name} must be one-dimensional, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise InputError(f"{name} has dimension {v.shape[0]}, expected {n}")
    if not all_finite(v):
        raise NumericalError(f"{name} has non-finite entries")
    return v


class SymmetricOperator:
    """
    Matrix-free symmetric linear map ``y = A x``.

    Parameters
    ----------
    n : int
        Dimension.
    matvec : callable
        Maps an ``(n,)`` or ``(n, k)`` array to an array of the same shape.
    kind : str
        One of ``"dense"``, ``"diagonal"``, ``"tridiagonal-laplacian"``.
    dense : ndarray, optional
        Explicit matrix, if already available.
    sparse : scipy.sparse matrix, optional
        Sparse form for structured kinds.
    """

    def __init__(self, n: int, matvec: Callable, kind: str = "dense",
                 dense: Optional[np.ndarray] = None, sparse=None):
        if n < 1:
            raise InputError("operator dimension must be positive")
        self.n = int(n)
        self._matvec = matvec
        self.kind = kind
        self._dense = dense
        self._sparse = sparse

    @property
    def shape(self):
        return (self.n, self.n)

    def apply(self, x) -> np.ndarray:
        x = as_array(x)
        if x.shape[0] != self.n:
            raise InputError(f"operator of dimension {self.n} applied to shape {x.shape}")
        y = self._matvec(x)
        if not all_finite(y):
            raise NumericalError("operator application produced non-finite values")
        return y

    __matmul__ = apply

    def dense(self) -> np.ndarray:
        """Dense matrix, built on demand (limited to ``MAX_DENSE``)."""
        if self._dense is None:
            if self.n > MAX_DENSE:
                raise InputError(f"dense materialization capped at n={MAX_DENSE}, got {self.n}")
            if self._sparse is not None:
                self._dense = self._sparse.toarray()
            else:
                self._dense = self._matvec(np.eye(self.n))
        return self._dense

    def sparse(self):
        """Sparse CSR form; dense operators are converted."""
        if self._sparse is None:
            self._sparse = sp.csr_matrix(self.dense())
        return self._sparse

    def __repr__(self):
        return f"SymmetricOperator(n={self.n}, kind={self.kind!r})"


def dense_operator(M, rtol: float = 1e-12) -> SymmetricOperator:
    M = np.array(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InputError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericalError("matrix has non-finite entries")
    scale = max(np.abs(M).max(), np.finfo(float).tiny)
    if np.abs(M - M.T).max() > rtol * scale:
        raise InputError("matrix is not symmetric")
    M = 0.5 * (M + M.T)
    exact = []

    def matvec(x):
        if x.dtype != object:
            return M @ x
        if not exact:
            exact.append(ExactMatvec(M))
        return exact[0](x)

    return SymmetricOperator(M.shape[0], matvec, "dense", dense=M)


def diagonal_operator(d) -> SymmetricOperator:
    d = as_vector(d, name="diagonal")

    def matvec(x):
        return d * x if x.ndim == 1 else d[:, None] * x

    return SymmetricOperator(d.shape[0], matvec, "diagonal", sparse=sp.diags(d).tocsr())


def laplacian_1d(n: int) -> SymmetricOperator:
    """3-point Dirichlet Laplacian ``tridiag(-1, 2, -1)`` (unscaled)."""

    def matvec(x):
        y = 2.0 * x
        y[1:] -= x[:-1]
        y[:-1] -= x[1:]
        return y

    ones = np.ones(n)
    S = sp.diags([-ones[:-1], 2 * ones, -ones[:-1]], [-1, 0, 1]).tocsr()
    return SymmetricOperator(n, matvec, "tridiagonal-laplacian", sparse=S)


class Metric:
    """Inner product ``(x, y)_M = (x, M y)``; Euclidean when ``operator`` is None."""

    def __init__(self, operator: Optional[SymmetricOperator] = None):
        self.operator = operator

    @classmethod
    def euclidean(cls) -> "Metric":
        return cls(None)

    @property
    def is_euclidean(self) -> bool:
        return self.operator is None

    @property
    def n(self) -> Optional[int]:
        return None if self.operator is None else self.operator.n

    def apply(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return y if self.operator is None else self.operator.apply(y)

    def inner(self, x, y) -> float:
        return float(np.dot(x, self.apply(y)))

    def norm(self, x) -> float:
        return math.sqrt(max(self.inner(x, x), 0.0))

    def __repr__(self):
        return "Metric(euclidean)" if self.is_euclidean else f"Metric({self.operator!r})"


def _check_pair(metric: Metric, x, y):
    x = as_vector(x, name="x")
    y = as_vector(y, name="y")
    if x.shape != y.shape:
        raise InputError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    if metric.n is not None and metric.n != x.shape[0]:
        raise InputError(f"metric has dimension {metric.n}, vectors have {x.shape[0]}")
    return x, y


def weighted_inner(metric: Metric, x, y) -> float:
    x, y = _check_pair(metric, x, y)
    return metric.inner(x, y)


def angle(metric: Metric, x, y) -> float:
    """Angle between ``x`` and ``y`` in the metric, in ``[0, pi]``."""
    x, y = _check_pair(metric, x, y)
    My = metric.apply(y)
    nx = metric.norm(x)
    ny = math.sqrt(max(float(np.dot(y, My)), 0.0))
    if nx == 0.0 or ny == 0.0:
        raise InputError("angle is undefined for a zero vector")
    c = float(np.dot(x, My)) / (nx * ny)
    return math.acos(min(1.0, max(-1.0, c)))


def _round_robin(m: int):
    """Rounds of disjoint index pairs covering every pair of ``range(m)`` once."""
    players = list(range(m + (m % 2)))
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < m and b < m]
        if pairs:
            rounds.append((np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi(M: np.ndarray, max_sweeps: int = 60):
    n = M.shape[0]
    A = M.copy()
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V
    total = np.linalg.norm(A)
    if total == 0.0:
        return np.zeros(n), V
    target = np.finfo(float).eps * total
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(A.diagonal()))
        if off <= target:
            break
        for p, q in rounds:
            apq = A[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            with np.errstate(over="ignore", divide="ignore"):
                theta = (A[q, q] - A[p, p]) / (2.0 * np.where(active, apq, 1.0))
                big = np.abs(theta) > 1e150
                safe = np.where(big, 1.0, theta)
                t = np.sign(safe) / (np.abs(safe) + np.sqrt(safe * safe + 1.0))
                t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            Ap, Aq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            Ap, Aq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = Ap * c - Aq * s
            A[:, q] = Ap * s + Aq * c
            A[p, q] = 0.0
            A[q, p] = 0.0
            Vp, Vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = Vp * c - Vq * s
            V[:, q] = Vp * s + Vq * c
    return A.diagonal().copy(), V


def sym_eig(M, rtol: float = 1e-12, method: str = "auto"):
    """
    Eigen-decomposition of a dense symmetric matrix.

    Cyclic Jacobi rotations in round-robin order are used up to
    ``JACOBI_MAX``; larger matrices (and ``method="lapack"``) go to LAPACK.

    Returns
    -------
    w : ndarray
        Eigenvalues in ascending order.
    V : ndarray
        Orthonormal eigenvectors as columns, ``M @ V[:, i] = w[i] * V[:, i]``.
    """
    M = np.array(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InputError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericalError("matrix has non-finite entries")
    n = M.shape[0]
    if n > MAX_DENSE:
        raise InputError(f"sym_eig limited to n <= {MAX_DENSE}")
    scale = np.abs(M).max() if n else 0.0
    if scale > 0 and np.abs(M - M.T).max() > rtol * scale:
        raise InputError("matrix is not symmetric")
    M = 0.5 * (M + M.T)
    if method == "lapack" or (method == "auto" and n > JACOBI_MAX):
        return np.linalg.eigh(M)
    if method not in ("auto", "jacobi"):
        raise InputError(f"unknown eigensolver method {method!r}")
    w, V = _jacobi(M)
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def materialize(apply: Callable, n: int) -> np.ndarray:
    """Dense matrix of a linear map given by its action."""
    if n > MAX_DENSE:
        raise InputError(f"dense materialization capped at n={MAX_DENSE}")
    cols = [np.asarray(apply(e), dtype=float) for e in np.eye(n)]
    return np.column_stack(cols)


def metric_symmetrize(metric: Metric, C) -> np.ndarray:
    """
    Symmetric matrix similar to ``C`` when ``C`` is self-adjoint in ``metric``.

    With ``M = L L^T`` this is ``L^T C L^{-T}``.
    """
    C = np.asarray(C, dtype=float)
    if metric.is_euclidean:
        return 0.5 * (C + C.T)
    L = np.linalg.cholesky(metric.operator.dense())
    S = L.T @ scipy.linalg.solve_triangular(L, C.T, lower=True).T
    return 0.5 * (S + S.T)


def generalized_condition(A: SymmetricOperator, Binv_apply, return_eigs: bool = False):
    """
    Spectral condition number of ``B^{-1} A``.

    ``B^{-1} A`` is self-adjoint in the A-inner product, so its spectrum is
    that of the symmetric ``L^T B^{-1} L`` with ``A = L L^T``.
    """
    n = A.n
    if callable(Binv_apply):
        Binv = materialize(Binv_apply, n)
    else:
        Binv = np.asarray(Binv_apply, dtype=float)
    asym = np.abs(Binv - Binv.T).max()
    if asym > 1e-8 * max(np.abs(Binv).max(), np.finfo(float).tiny):
        raise InputError("preconditioner inverse is not symmetric")
    try:
        L = np.linalg.cholesky(A.dense())
    except np.linalg.LinAlgError as exc:
        raise IndefiniteError("A is not positive definite") from exc
    S = L.T @ (0.5 * (Binv + Binv.T)) @ L
    w, _ = sym_eig(0.5 * (S + S.T))
    if w[0] <= 0.0:
        raise IndefiniteError(
            f"B^-1 A is not positive definite: lambda_min={w[0]:.3e}, lambda_max={w[-1]:.3e}")
    kappa = float(w[-1] / w[0])
    return (kappa, w) if return_eigs else kappa
