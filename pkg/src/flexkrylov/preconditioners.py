"""
Preconditioners ``s = B_k^{-1} r``.

A preconditioner is any callable ``precond(r, ctx) -> s`` where ``ctx`` is a
:class:`~flexkrylov.solvers.IterationContext`. The classes here also expose
``label``, a ``last_info`` dict describing the latest application, and
``reset()``, which the solvers call at the start of each solve.
Stateful instances (random ones, rerandomized two-grid) must not be shared
between concurrent solves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cone import construct_spd_map, spectral_bound
from .exceptions import DimensionExhausted, InputError, NumericalError
from .linalg import Metric, SymmetricOperator, as_array, as_vector, laplacian_1d
from .precision import is_mp, like, psqrt, to_mp

__all__ = [
    "Preconditioner",
    "fixed_spd",
    "FixedSPD",
    "Adversarial",
    "adversarial",
    "RandomCone",
    "random_cone",
    "InnerCG",
    "inner_cg",
    "TwoGridHierarchy",
    "build_two_grid",
    "two_grid_apply",
    "TwoGridPreconditioner",
    "two_grid_preconditioner",
    "sample_coarse",
    "adversarial_inverse",
]


class Preconditioner:
    label = "preconditioner"
    needs_true_solution = False

    def __init__(self):
        self.last_info: dict = {}

    def reset(self):
        pass

    def apply(self, r: np.ndarray, ctx) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, r, ctx=None):
        r = as_array(r)
        s = as_array(self.apply(r, ctx))
        if s.shape != r.shape:
            raise InputError(f"{self.label}: output shape {s.shape} != input shape {r.shape}")
        return s


class FixedSPD(Preconditioner):
    """Constant SPD preconditioner given by the action of ``B^{-1}``."""

    label = "fixed"

    def __init__(self, B_solve: Callable, label: str = "fixed"):
        super().__init__()
        self.B_solve = B_solve
        self.label = label

    def apply(self, r, ctx):
        self.last_info = {"label": self.label}
        return self.B_solve(r)


def fixed_spd(B_solve: Callable, label: str = "fixed") -> FixedSPD:
    return FixedSPD(B_solve, label)


class _AOrthoBasis:
    """Incrementally grown A-orthonormal basis of the solver's directions."""

    def __init__(self):
        self.Q = None
        self.seen = 0

    def project_out(self, v, Av, A: SymmetricOperator):
        """Remove the A-components of ``v`` along the basis; returns ``(v, A v)``."""
        if self.Q is None:
            return v, Av
        # classical Gram-Schmidt: one pass suffices in extended precision
        for _ in range(1 if is_mp(v) else 2):
            v = v - (self.Q @ Av) @ self.Q
            Av = A.apply(v)
        return v, Av

    def update(self, directions, A: SymmetricOperator):
        for p in directions[self.seen:]:
            Ap = A.apply(p)
            q, Aq = self.project_out(p, Ap, A)
            nq = psqrt(np.dot(q, Aq))
            if nq > 1e-14 * psqrt(np.dot(p, Ap)):
                q = (q / nq)[None, :]
                self.Q = q if self.Q is None else np.concatenate([self.Q, q])
        self.seen = len(directions)


class _ConeSampler(Preconditioner):
    needs_true_solution = True
    max_redraws = 8

    def __init__(self, kappa_max: float, rng: np.random.Generator):
        super().__init__()
        if not kappa_max >= 1.0:
            raise InputError("kappa_max must be >= 1")
        self.kappa_max = float(kappa_max)
        self.rng = rng
        self._basis = _AOrthoBasis()

    def reset(self):
        self._basis = _AOrthoBasis()

    def _sin_target(self) -> float:
        raise NotImplementedError

    def _orthogonal_unit(self, A, against, ref):
        for _ in range(self.max_redraws):
            u = like(self.rng.standard_normal(ref.shape[0]), ref)
            Au = A.apply(u)
            u0 = psqrt(np.dot(u, Au))
            u, Au = self._basis.project_out(u, Au, A)
            for _ in range(2):
                for w, Aw in against:
                    c = np.dot(Aw, u)
                    u = u - c * w
                    Au = Au - c * Aw
            nu = psqrt(np.dot(u, Au))
            if nu > 1e-8 * u0:
                return u / nu, Au / nu
        raise NumericalError(f"{self.label}: degenerate random direction after "
                             f"{self.max_redraws} redraws")

    def apply(self, r, ctx):
        A = ctx.operator
        n = A.n
        if ctx.k >= n - 1:
            raise DimensionExhausted(
                f"{self.label}: step {ctx.k} leaves no free direction in dimension {n}")
        e = ctx.error
        self._basis.update(ctx.directions, A)
        Ae = A.apply(e)
        ne = psqrt(np.dot(e, Ae))
        if ne == 0:
            self.last_info = {"label": self.label, "sin": 0.0}
            return np.zeros_like(e)
        # component of the error A-orthogonal to all previous directions
        eo, Aeo = self._basis.project_out(e, Ae, A)
        neo = psqrt(np.dot(eo, Aeo))
        if neo == 0:
            raise NumericalError(f"{self.label}: error lies in the span of previous directions")
        eo = eo / neo
        u, _ = self._orthogonal_unit(A, [(eo, Aeo / neo)], e)
        sin_t = self._sin_target()
        sin_w = to_mp(np.array([sin_t]))[0] if is_mp(e) else sin_t
        cos_t = psqrt(1 - sin_w * sin_w)
        # s = a * eo + b * u with cos angle_A(s, e) = cos_t
        a = cos_t * ne / neo
        orthogonal = bool(a <= 1)
        if orthogonal:
            s = a * eo + psqrt(1 - a * a) * u
        else:
            # the cone misses the A-orthogonal complement: stay on the cone,
            # give up orthogonality to old directions
            s = cos_t * (e / ne) + sin_w * u
        self.last_info = {"label": self.label, "sin": sin_t, "kappa": self.kappa_for(sin_t),
                          "orthogonal": orthogonal}
        return s

    @staticmethod
    def kappa_for(sin_t: float) -> float:
        return (1.0 + sin_t) / (1.0 - sin_t)


class Adversarial(_ConeSampler):
    """
    Worst-case variable preconditioner.

    Each ``s_k`` sits on the boundary of the cone around the current error,
    ``sin angle_A(s_k, e_k) = (kappa_max - 1)/(kappa_max + 1)``, and is
    A-orthogonal to every previous direction, so any memory policy collapses
    to steepest descent with reduction factor exactly the bound.
    Needs the true solution.
    """

    label = "adversarial"

    def _sin_target(self):
        return spectral_bound(self.kappa_max)


def adversarial(kappa_max: float, rng: np.random.Generator) -> Adversarial:
    if not kappa_max > 1.0:
        raise InputError("adversarial preconditioner needs kappa_max > 1")
    return Adversarial(kappa_max, rng)


class RandomCone(_ConeSampler):
    """
    Like :class:`Adversarial` but with ``sin angle_A(s_k, e_k)`` drawn
    uniformly from ``[0, bound)``: random SPD preconditioners with
    ``kappa(B_k^{-1} A) < kappa_max``.
    """

    label = "random-cone"

    def _sin_target(self):
        return spectral_bound(self.kappa_max) * self.rng.uniform(0.0, 1.0)


def random_cone(kappa_max: float, rng: np.random.Generator) -> RandomCone:
    return RandomCone(kappa_max, rng)


def adversarial_inverse(A: SymmetricOperator, e, s) -> np.ndarray:
    """
    Dense ``B^{-1} = C A^{-1}`` where ``C`` is the A-self-adjoint SPD map
    with ``C e || s``; then ``B^{-1} A e || s`` and
    ``kappa(B^{-1} A) = kappa(C)``.
    """
    res = construct_spd_map(Metric(A), e, s)
    Ad = A.dense()
    Binv = scipy.linalg.solve(Ad, res.C.T, assume_a="pos").T
    return 0.5 * (Binv + Binv.T)


class InnerCG(Preconditioner):
    """
    Unpreconditioned CG on ``A s = r`` from ``s = 0``, stopped at the first
    iterate whose true residual satisfies ``||r - A s|| < eta ||r||``.
    """

    label = "inner-cg"

    def __init__(self, eta: float, max_inner: Optional[int] = None):
        super().__init__()
        if not 0.0 < eta < 1.0:
            raise InputError(f"eta must be in (0, 1), got {eta}")
        self.eta = float(eta)
        self.max_inner = max_inner

    def apply(self, r, ctx):
        A = ctx.operator
        cap = self.max_inner if self.max_inner is not None else 10 * A.n
        target = self.eta * float(np.linalg.norm(r))
        s = np.zeros_like(r)
        if target == 0.0:
            self.last_info = {"label": self.label, "inner_iterations": 0}
            return s
        res = r.copy()
        d = res.copy()
        rr = float(np.dot(res, res))
        for it in range(1, cap + 1):
            Ad = A.apply(d)
            alpha = rr / float(np.dot(d, Ad))
            s = s + alpha * d
            res = res - alpha * Ad
            true_res = float(np.linalg.norm(r - A.apply(s)))
            if true_res < target:
                self.last_info = {"label": self.label, "inner_iterations": it,
                                  "relative_residual": true_res / float(np.linalg.norm(r))}
                return s
            rr_new = float(np.dot(res, res))
            d = res + (rr_new / rr) * d
            rr = rr_new
        raise NumericalError(f"inner CG did not reach eta={self.eta} in {cap} iterations")


def inner_cg(eta: float, max_inner: Optional[int] = None) -> InnerCG:
    return InnerCG(eta, max_inner)


@dataclass
class TwoGridHierarchy:
    """
    Two-grid data: piecewise-linear interpolation ``P`` (n x nc), Galerkin
    coarse matrix ``A_c = P^T A P`` with its factorization, and Richardson
    smoothing parameters.
    """

    operator: SymmetricOperator
    coarse: np.ndarray
    P: sp.csr_matrix
    Ac: np.ndarray
    omega: float
    nu: int
    _solve: Callable

    @property
    def n(self) -> int:
        return self.operator.n

    def coarse_solve(self, rc):
        return self._solve(rc)


def _interpolation(n: int, coarse: np.ndarray) -> sp.csr_matrix:
    nc = coarse.size
    fine = np.arange(n)
    # neighbours with Dirichlet ghosts at -1 and n
    ext = np.concatenate(([-1], coarse, [n]))
    right = np.searchsorted(ext, fine, side="left")
    right = np.maximum(right, 1)
    exact = ext[right] == fine
    left = np.where(exact, right, right - 1)
    xl = ext[left]
    xr = ext[right]
    width = np.where(exact, 1, xr - xl)
    wl = np.where(exact, 1.0, (xr - fine) / width)
    wr = np.where(exact, 0.0, (fine - xl) / width)
    rows, cols, vals = [], [], []
    # column index of ext position j is j - 1; ghosts are dropped
    for pos, w in ((left, wl), (right, wr)):
        ok = (pos >= 1) & (pos <= nc) & (w != 0.0)
        rows.append(fine[ok])
        cols.append(pos[ok] - 1)
        vals.append(w[ok])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, nc))


def _coarse_factor(Ac_sparse):
    Ac_sparse = Ac_sparse.tocoo()
    nc = Ac_sparse.shape[0]
    band = int(np.abs(Ac_sparse.row - Ac_sparse.col).max()) if Ac_sparse.nnz else 0
    Ac = Ac_sparse.toarray() if nc <= 4000 else None
    if band <= 8:
        ab = np.zeros((band + 1, nc))
        for d in range(band + 1):
            ab[band - d, d:] = Ac_sparse.tocsr().diagonal(d)
        try:
            cb = scipy.linalg.cholesky_banded(ab, lower=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("coarse operator is not positive definite") from exc
        return Ac, lambda rc: scipy.linalg.cho_solve_banded((cb, False), rc)
    if nc <= 1000:
        try:
            cf = scipy.linalg.cho_factor(Ac)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("coarse operator is not positive definite") from exc
        return Ac, lambda rc: scipy.linalg.cho_solve(cf, rc)
    lu = spla.splu(Ac_sparse.tocsc())
    return Ac, lu.solve


def build_two_grid(A: SymmetricOperator, coarse_indices, omega: float = 0.25,
                   nu: int = 1) -> TwoGridHierarchy:
    """
    Two-grid hierarchy for a 1-D operator on the fine points ``0..n-1``.

    Each fine point is interpolated linearly (in index distance) between its
    nearest coarse neighbours; beyond the outermost coarse points the
    interpolant decays to zero at the Dirichlet ghosts ``-1`` and ``n``.
    """
    n = A.n
    coarse = np.asarray(coarse_indices, dtype=int)
    if coarse.size == 0:
        raise InputError("coarse grid is empty")
    if np.any(np.diff(coarse) <= 0):
        coarse = np.unique(coarse)
        if coarse.size != len(coarse_indices):
            raise InputError("coarse indices must be distinct")
    if coarse[0] < 0 or coarse[-1] >= n:
        raise InputError("coarse indices must lie in 0..n-1")
    if omega <= 0 or nu < 1:
        raise InputError("need omega > 0 and nu >= 1")
    P = _interpolation(n, coarse)
    Ac_sparse = (P.T @ A.sparse() @ P).tocsr()
    Ac, solve = _coarse_factor(Ac_sparse)
    return TwoGridHierarchy(A, coarse, P, Ac, float(omega), int(nu), solve)


def two_grid_apply(h: TwoGridHierarchy, r) -> np.ndarray:
    """Symmetric two-grid cycle on ``A z = r`` from ``z = 0``."""
    A = h.operator
    r = as_vector(r, h.n, "r")
    z = np.zeros_like(r)
    for _ in range(h.nu):
        z = z + h.omega * (r - A.apply(z))
    d = r - A.apply(z)
    z = z + h.P @ h.coarse_solve(h.P.T @ d)
    for _ in range(h.nu):
        z = z + h.omega * (r - A.apply(z))
    return z


def sample_coarse(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of ``count`` distinct fine indices, sorted."""
    if not 1 <= count <= n:
        raise InputError(f"coarse count must be in 1..{n}, got {count}")
    return np.sort(rng.choice(n, size=count, replace=False))


class TwoGridPreconditioner(Preconditioner):
    """
    Two-grid preconditioner on random coarse grids: ``mode="fixed"`` samples
    one grid up front; ``mode="rerandomized"`` samples and rebuilds on every
    application.
    """

    def __init__(self, A: SymmetricOperator, coarse_count: int, mode: str,
                 rng: np.random.Generator, omega: float = 0.25, nu: int = 1):
        super().__init__()
        if mode not in ("fixed", "rerandomized"):
            raise InputError(f"mode must be 'fixed' or 'rerandomized', got {mode!r}")
        if not 1 <= coarse_count <= A.n:
            raise InputError(f"coarse count must be in 1..{A.n}")
        self.operator = A
        self.coarse_count = int(coarse_count)
        self.mode = mode
        self.rng = rng
        self.omega = omega
        self.nu = nu
        self.label = f"two-grid-{mode}"
        self.hierarchy = None
        if mode == "fixed":
            self.hierarchy = self._build()

    def _build(self):
        coarse = sample_coarse(self.operator.n, self.coarse_count, self.rng)
        return build_two_grid(self.operator, coarse, self.omega, self.nu)

    def apply(self, r, ctx):
        if self.mode == "rerandomized":
            self.hierarchy = self._build()
        self.last_info = {"label": self.label, "max_gap": int(np.diff(
            np.concatenate(([-1], self.hierarchy.coarse, [self.operator.n]))).max())}
        return two_grid_apply(self.hierarchy, r)


def two_grid_preconditioner(n, coarse_count: int, mode: str, rng: np.random.Generator,
                            omega: float = 0.25, nu: int = 1) -> TwoGridPreconditioner:
    """``n`` is either a dimension (1-D Laplacian) or a ready operator."""
    A = n if isinstance(n, SymmetricOperator) else laplacian_1d(int(n))
    return TwoGridPreconditioner(A, coarse_count, mode, rng, omega, nu)
