"""
Preconditioned iterations with variable preconditioning.

``solve_flexible`` runs the general recurrence in which each new direction
is the preconditioned residual A-orthogonalized against the last ``m_k``
directions (``m_k = 0`` is steepest descent, ``m_k = min(k, 1)`` is PCG,
``m_k = k`` is full orthogonalization). ``solve_alg1`` is the classic
two-term PCG loop with either the standard or the flexible beta.

The ``audit_*`` functions re-check the exact identities these methods
satisfy on a recorded :class:`SolveTrace`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .exceptions import BreakdownError, InputError, NumericalError, PreconditionerError
from .linalg import SymmetricOperator, all_finite, as_array, as_vector
from .precision import like, psqrt, to_float

__all__ = [
    "EPS_MACH",
    "MemoryPolicy",
    "PolicyReport",
    "StoppingRule",
    "IterationContext",
    "SolveTrace",
    "validate_policy",
    "solve_flexible",
    "solve_alg1",
    "audit_error_transition",
    "OrthogonalityReport",
    "audit_orthogonality",
    "LocalOptimality",
    "audit_local_optimality",
    "audit_sd_reduction",
]

EPS_MACH = 2.0 ** -52
RESIDUAL_REFRESH = 50
DEFAULT_HISTORY_CAP = 512


@dataclass(frozen=True)
class MemoryPolicy:
    """
    Number of previous directions ``m(k)`` to orthogonalize against at step k.

    Use the constructors :meth:`full`, :meth:`psd`, :meth:`pcg`,
    :meth:`truncated` and :meth:`explicit`.
    """

    kind: str
    depth: Optional[int] = None
    sequence: Optional[tuple] = None

    @classmethod
    def full(cls):
        return cls("full")

    @classmethod
    def psd(cls):
        return cls("psd")

    @classmethod
    def pcg(cls):
        return cls("truncated", depth=1)

    @classmethod
    def truncated(cls, depth: int):
        if depth < 0:
            raise InputError("truncation depth must be non-negative")
        return cls("truncated", depth=int(depth))

    @classmethod
    def explicit(cls, sequence: Sequence[int]):
        return cls("explicit", sequence=tuple(int(m) for m in sequence))

    def m(self, k: int) -> int:
        if self.kind == "full":
            return k
        if self.kind == "psd":
            return 0
        if self.kind == "truncated":
            return min(k, self.depth)
        if self.kind == "explicit":
            if k >= len(self.sequence):
                raise InputError(f"explicit memory sequence has no entry for k={k}")
            return self.sequence[k]
        raise InputError(f"unknown policy kind {self.kind!r}")

    __call__ = m

    @property
    def label(self) -> str:
        if self.kind == "truncated":
            return "pcg" if self.depth == 1 else f"truncated{self.depth}"
        return self.kind


@dataclass(frozen=True)
class PolicyReport:
    ok: bool
    index: Optional[int] = None
    message: str = ""

    def __bool__(self):
        return self.ok


def validate_policy(policy: MemoryPolicy, horizon: int) -> PolicyReport:
    """Check ``0 <= m_k <= k`` and ``m_{k+1} <= m_k + 1`` for ``k < horizon``."""
    if horizon < 1:
        raise InputError("horizon must be at least 1")
    prev = None
    for k in range(horizon):
        try:
            m = policy.m(k)
        except InputError as exc:
            return PolicyReport(False, k, str(exc))
        if m < 0 or m > k:
            return PolicyReport(False, k, f"m_{k}={m} violates 0 <= m_k <= k")
        if prev is not None and m > prev + 1:
            return PolicyReport(False, k, f"m_{k}={m} exceeds m_{k - 1}+1={prev + 1}")
        prev = m
    return PolicyReport(True)


@dataclass(frozen=True)
class StoppingRule:
    """
    max_iterations : hard cap on the number of steps.
    error_tolerance : stop once ``||e_k||_A <= tol * ||e_0||_A`` (needs the true solution).
    residual_tolerance : stop once ``||r_k|| <= tol * ||r_0||``.
    """

    max_iterations: int
    error_tolerance: Optional[float] = None
    residual_tolerance: Optional[float] = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InputError("max_iterations must be positive")


@dataclass
class IterationContext:
    """What a preconditioner may look at on step ``k``."""

    k: int
    operator: SymmetricOperator
    directions: Sequence[np.ndarray]
    x: np.ndarray
    x_true: Optional[np.ndarray] = None

    @property
    def error(self) -> np.ndarray:
        if self.x_true is None:
            raise InputError("this preconditioner needs the true solution")
        return self.x_true - self.x


@dataclass
class SolveTrace:
    """
    Record of a solve. Vector histories (``iterates``, ``residuals``,
    ``precond_residuals``) stop growing after ``history_cap`` steps;
    ``directions`` is always complete.
    """

    method: str
    iterates: List[np.ndarray] = field(default_factory=list)
    residuals: List[np.ndarray] = field(default_factory=list)
    precond_residuals: List[np.ndarray] = field(default_factory=list)
    directions: List[np.ndarray] = field(default_factory=list)
    alphas: List[float] = field(default_factory=list)
    betas: List[float] = field(default_factory=list)
    memory: List[int] = field(default_factory=list)
    error_norms: List[float] = field(default_factory=list)
    residual_norms: List[float] = field(default_factory=list)
    precond_info: List[dict] = field(default_factory=list)
    termination: str = ""
    x: Optional[np.ndarray] = None
    history_cap: int = DEFAULT_HISTORY_CAP

    @property
    def iterations(self) -> int:
        return len(self.directions)

    @property
    def reduction_factors(self) -> np.ndarray:
        e = np.asarray(self.error_norms)
        if e.size < 2:
            return np.empty(0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return e[1:] / e[:-1]

    @property
    def history_complete(self) -> bool:
        return len(self.iterates) == self.iterations + 1

    def _record_state(self, x, r):
        if len(self.iterates) <= self.history_cap:
            self.iterates.append(x.copy())
            self.residuals.append(r.copy())

    def _record_s(self, s):
        if len(self.precond_residuals) < self.history_cap:
            self.precond_residuals.append(s.copy())

    def iterations_to(self, rel_tol: float) -> Optional[int]:
        """First k with ``||e_k||_A <= rel_tol * ||e_0||_A``, if any."""
        e = np.asarray(self.error_norms)
        hits = np.nonzero(e <= rel_tol * e[0])[0]
        return int(hits[0]) if hits.size else None


def _a_norm(A: SymmetricOperator, v) -> float:
    return float(psqrt(np.dot(v, A.apply(v))))


def _norm(v) -> float:
    return float(np.linalg.norm(to_float(v)))


def _check_finite(v, what):
    if not all_finite(v):
        raise NumericalError(f"non-finite values in {what}")


def _call_precond(precond, r, ctx):
    s = like(as_array(precond(r, ctx)), r)
    if s.shape != r.shape:
        raise InputError(f"preconditioner returned shape {s.shape}, expected {r.shape}")
    _check_finite(s, f"preconditioned residual at step {ctx.k}")
    sr = np.dot(s, r)
    if sr <= 0 and np.any(r != 0):
        raise PreconditionerError(
            f"preconditioner not SPD on this step (k={ctx.k}, (s, r)={float(sr):.3e})")
    return s, sr, dict(getattr(precond, "last_info", None) or {})


def _reset(precond):
    reset = getattr(precond, "reset", None)
    if reset is not None:
        reset()


def _setup(A, b, x0, stop, true_solution):
    # x0 fixes the arithmetic: float64, or mpfr object arrays
    n = A.n
    x = as_vector(x0, n, "x0").copy()
    b = like(as_vector(b, n, "b"), x)
    x_true = None
    if true_solution is not None:
        x_true = like(as_vector(true_solution, n, "true_solution"), x)
    if stop.error_tolerance is not None and x_true is None:
        raise InputError("error_tolerance requires the true solution")
    return b, x, x_true


def _should_stop(trace, stop, k):
    if stop.error_tolerance is not None and trace.error_norms:
        e0 = trace.error_norms[0]
        if trace.error_norms[-1] <= stop.error_tolerance * e0:
            return "error_tolerance"
    if stop.residual_tolerance is not None:
        r0 = trace.residual_norms[0]
        if trace.residual_norms[-1] <= stop.residual_tolerance * r0:
            return "residual_tolerance"
    if trace.residual_norms[-1] == 0.0:
        return "exact"
    return None


def solve_flexible(A: SymmetricOperator, b, x0, precond: Callable, policy: MemoryPolicy,
                   stop: StoppingRule, true_solution=None,
                   history_cap: int = DEFAULT_HISTORY_CAP) -> SolveTrace:
    """
    Variable-preconditioner iteration with a memory policy.

    Per step: ``r_k = b - A x_k``, ``s_k = B_k^{-1} r_k``,
    ``p_k = s_k - sum_l (A s_k, p_l)/(A p_l, p_l) p_l`` over the last
    ``m_k`` directions, then an exact A-line search along ``p_k``.

    Parameters
    ----------
    A : SymmetricOperator
        SPD system operator.
    b, x0 : array_like
        Right-hand side and initial guess.
    precond : callable
        ``precond(r, ctx) -> s``; see :mod:`flexkrylov.preconditioners`.
    policy : MemoryPolicy
        The sequence ``m_k``.
    stop : StoppingRule
    true_solution : array_like, optional
        Enables A-norm error tracking. Passed to the preconditioner only if it
        declares ``needs_true_solution``.

    Returns
    -------
    SolveTrace
    """
    b, x, x_true = _setup(A, b, x0, stop, true_solution)
    report = validate_policy(policy, stop.max_iterations)
    if not report:
        raise InputError(f"invalid memory policy: {report.message}")
    _reset(precond)
    trace = SolveTrace(method=policy.label, history_cap=history_cap)
    leak_truth = x_true if getattr(precond, "needs_true_solution", False) else None
    pAp_hist: list = []

    r = b - A.apply(x)
    trace._record_state(x, r)
    trace.residual_norms.append(_norm(r))
    if x_true is not None:
        trace.error_norms.append(_a_norm(A, x_true - x))

    for k in range(stop.max_iterations):
        reason = _should_stop(trace, stop, k)
        if reason:
            trace.termination = reason
            break
        ctx = IterationContext(k, A, trace.directions, x, leak_truth)
        s, _, info = _call_precond(precond, r, ctx)
        As = A.apply(s)
        m = policy.m(k)
        p = s.copy()
        if m > 0:
            W = np.array(trace.directions[k - m:k])
            coefs = (W @ As) / np.array(pAp_hist[k - m:k], dtype=W.dtype)
            p = p - coefs @ W
        Ap = A.apply(p)
        pAp = np.dot(p, Ap)
        sAs = np.dot(s, As)
        if pAp <= EPS_MACH * sAs:
            trace.termination = "breakdown"
            trace._record_s(s)
            break
        alpha = np.dot(r, p) / pAp
        x = x + alpha * p
        _check_finite(x, f"iterate {k + 1}")
        r = b - A.apply(x)

        trace._record_s(s)
        trace.directions.append(p)
        pAp_hist.append(pAp)
        trace.alphas.append(float(alpha))
        trace.memory.append(m)
        trace.precond_info.append(info)
        trace._record_state(x, r)
        trace.residual_norms.append(_norm(r))
        if x_true is not None:
            trace.error_norms.append(_a_norm(A, x_true - x))
    else:
        reason = _should_stop(trace, stop, stop.max_iterations)
        trace.termination = reason or "max_iterations"
    trace.x = x
    return trace


def solve_alg1(A: SymmetricOperator, b, x0, precond: Callable, beta_formula: str,
               stop: StoppingRule, true_solution=None,
               history_cap: int = DEFAULT_HISTORY_CAP) -> SolveTrace:
    """
    Two-term PCG loop::

        s_k = B_k^{-1} r_k
        p_k = s_k + beta_k p_{k-1}          (p_0 = s_0)
        alpha_k = (s_k, r_k) / (p_k, A p_k)
        x_{k+1} = x_k + alpha_k p_k,  r_{k+1} = r_k - alpha_k A p_k

    ``beta_formula="standard"`` uses ``(s_k, r_k) / (s_{k-1}, r_{k-1})``;
    ``"modified"`` uses ``(s_k, r_k - r_{k-1}) / (s_{k-1}, r_{k-1})``.
    The recurred residual is replaced by ``b - A x`` every 50 steps.
    """
    if beta_formula not in ("standard", "modified"):
        raise InputError(f"beta_formula must be 'standard' or 'modified', got {beta_formula!r}")
    b, x, x_true = _setup(A, b, x0, stop, true_solution)
    _reset(precond)
    trace = SolveTrace(method=f"alg1-{beta_formula}", history_cap=history_cap)
    leak_truth = x_true if getattr(precond, "needs_true_solution", False) else None

    r = b - A.apply(x)
    trace._record_state(x, r)
    trace.residual_norms.append(_norm(r))
    if x_true is not None:
        trace.error_norms.append(_a_norm(A, x_true - x))
    r_prev = p = sr_prev = None

    for k in range(stop.max_iterations):
        reason = _should_stop(trace, stop, k)
        if reason:
            trace.termination = reason
            break
        ctx = IterationContext(k, A, trace.directions, x, leak_truth)
        s, sr, info = _call_precond(precond, r, ctx)
        if k == 0:
            beta = 0.0
            p = s.copy()
        else:
            if beta_formula == "standard":
                beta = sr / sr_prev
            else:
                beta = np.dot(s, r - r_prev) / sr_prev
            p = s + beta * p
        Ap = A.apply(p)
        pAp = np.dot(p, Ap)
        if pAp <= 0:
            raise BreakdownError(f"(p, Ap) = {float(pAp):.3e} <= 0 at step {k}")
        alpha = sr / pAp
        x = x + alpha * p
        _check_finite(x, f"iterate {k + 1}")
        r_prev, sr_prev = r, sr
        if (k + 1) % RESIDUAL_REFRESH == 0:
            r = b - A.apply(x)
        else:
            r = r - alpha * Ap

        trace._record_s(s)
        trace.directions.append(p)
        trace.alphas.append(float(alpha))
        trace.betas.append(float(beta))
        trace.memory.append(min(k, 1))
        trace.precond_info.append(info)
        trace._record_state(x, r)
        trace.residual_norms.append(_norm(r))
        if x_true is not None:
            trace.error_norms.append(_a_norm(A, x_true - x))
    else:
        reason = _should_stop(trace, stop, stop.max_iterations)
        trace.termination = reason or "max_iterations"
    trace.x = x
    return trace


# ---------------------------------------------------------------------------
# audits


def _require_history(trace: SolveTrace, need_s: bool = False):
    if not trace.history_complete:
        raise InputError("trace history was truncated; rerun with a larger history_cap")
    if need_s and len(trace.precond_residuals) < trace.iterations:
        raise InputError("trace is missing preconditioned residuals")


def _errors(trace: SolveTrace, x_true) -> List[np.ndarray]:
    # subtract in the trace's arithmetic, then round
    return [to_float(like(as_array(x_true), xk) - xk) for xk in trace.iterates]


def _floats(vectors) -> List[np.ndarray]:
    return [to_float(v) for v in vectors]


def audit_error_transition(trace: SolveTrace, A: SymmetricOperator, true_solution) -> float:
    """Max over k of ``||e_{k+1} - (e_k - (Ae_k, p_k)/(Ap_k, p_k) p_k)|| / ||e_k||``."""
    _require_history(trace)
    e = _errors(trace, true_solution)
    worst = 0.0
    for k, p in enumerate(_floats(trace.directions)):
        ek = e[k]
        nek = np.linalg.norm(ek)
        if nek == 0.0:
            continue
        Ap = A.apply(p)
        predicted = ek - (float(np.dot(A.apply(ek), p)) / float(np.dot(Ap, p))) * p
        worst = max(worst, float(np.linalg.norm(e[k + 1] - predicted)) / nek)
    return worst


@dataclass(frozen=True)
class OrthogonalityReport:
    """Largest normalized A-inner products over the enforced windows."""

    directions: float
    errors: Optional[float]
    worst_direction_pair: Optional[tuple] = None

    @property
    def worst(self) -> float:
        return max(self.directions, self.errors or 0.0)


def _cos_a(u, Au, v, Av):
    den = math.sqrt(max(float(np.dot(u, Au)), 0.0) * max(float(np.dot(v, Av)), 0.0))
    if den == 0.0:
        return 0.0
    return abs(float(np.dot(u, Av))) / den


def audit_orthogonality(trace: SolveTrace, A: SymmetricOperator,
                        true_solution=None) -> OrthogonalityReport:
    """
    Window A-orthogonality: ``(p_i, p_j)_A`` for ``k - m_k <= i < j <= k`` and,
    if the true solution is given, ``(e_{k+1}, p_i)_A`` for the same window
    plus ``(e_{k+1}, s_k)_A``. Values are cosines in the A-inner product.
    """
    P = _floats(trace.directions)
    AP = [A.apply(p) for p in P]
    worst_dir, worst_pair = 0.0, None
    for k, m in enumerate(trace.memory):
        for i in range(k - m, k + 1):
            for j in range(i + 1, k + 1):
                c = _cos_a(P[i], AP[i], P[j], AP[j])
                if c > worst_dir:
                    worst_dir, worst_pair = c, (i, j)
    worst_err = None
    if true_solution is not None:
        _require_history(trace, need_s=True)
        e = _errors(trace, true_solution)
        worst_err = 0.0
        for k, m in enumerate(trace.memory):
            e1 = e[k + 1]
            Ae1 = A.apply(e1)
            if float(np.dot(e1, Ae1)) == 0.0:
                continue
            for i in range(k - m, k + 1):
                worst_err = max(worst_err, _cos_a(e1, Ae1, P[i], AP[i]))
            s = to_float(trace.precond_residuals[k])
            worst_err = max(worst_err, _cos_a(e1, Ae1, s, A.apply(s)))
    return OrthogonalityReport(worst_dir, worst_err, worst_pair)


@dataclass(frozen=True)
class LocalOptimality:
    """
    gap : ``| ||e_{k+1}||_A - min_p ||e_k - p||_A | / ||e_k||_A`` over the step subspace.
    rank : numerical rank of that subspace.
    two_term_min : ``min_{a, b} ||e_k - a s_k - b (e_k - e_{k-1})||_A`` (k > 0, m_k > 0).
    two_term_beta : the minimizing ``b``.
    two_term_ok : ``||e_{k+1}||_A <= two_term_min + 1e-10 ||e_k||_A``.
    """

    gap: float
    rank: int
    two_term_min: Optional[float] = None
    two_term_beta: Optional[float] = None
    two_term_ok: Optional[bool] = None


def _pivoted_normal_solve(V: np.ndarray, A: SymmetricOperator, target: np.ndarray,
                          rtol: float = 1e-12):
    """
    Minimize ``||target - V z||_A`` through the A-Gram normal equations with
    diagonally pivoted Cholesky; numerically dependent columns are dropped.

    Returns ``(z, rank)`` with zeros for dropped columns.
    """
    AV = np.column_stack([A.apply(v) for v in V.T])
    scale = np.sqrt(np.maximum(np.einsum("ij,ij->j", V, AV), 0.0))
    keep = scale > 0
    Vs = np.where(keep, V / np.where(keep, scale, 1.0), 0.0)
    AVs = np.where(keep, AV / np.where(keep, scale, 1.0), 0.0)
    G = Vs.T @ AVs
    G = 0.5 * (G + G.T)
    rhs = AVs.T @ target
    ncol = G.shape[0]
    order = list(range(ncol))
    L = np.zeros_like(G)
    R = G.copy()
    rank = 0
    for j in range(ncol):
        piv = max(range(j, ncol), key=lambda i: R[order[i], order[i]])
        order[j], order[piv] = order[piv], order[j]
        d = R[order[j], order[j]]
        if d <= rtol:
            break
        col = order[j]
        L[col, col] = math.sqrt(d)
        for i in order[j + 1:]:
            L[i, col] = R[i, col] / L[col, col]
        for a in order[j + 1:]:
            for bb in order[j + 1:]:
                R[a, bb] -= L[a, col] * L[bb, col]
        rank += 1
    used = order[:rank]
    z = np.zeros(ncol)
    if rank:
        Gu = G[np.ix_(used, used)]
        Lu = np.linalg.cholesky(Gu)
        y = np.linalg.solve(Lu, rhs[used])
        z[used] = np.linalg.solve(Lu.T, y)
    z = np.where(keep, z / np.where(keep, scale, 1.0), 0.0)
    return z, rank


def audit_local_optimality(trace: SolveTrace, k: int, A: SymmetricOperator,
                           true_solution) -> LocalOptimality:
    """
    Brute-force check that step ``k`` is A-optimal over
    ``span{s_k, p_{k-m_k}, ..., p_{k-1}}`` and, for ``k > 0`` with ``m_k > 0``,
    no worse than the best two-term update over ``span{s_k, e_k - e_{k-1}}``.
    """
    _require_history(trace, need_s=True)
    if not 0 <= k < trace.iterations:
        raise InputError(f"step {k} not in trace of {trace.iterations} steps")
    e = _errors(trace, true_solution)
    ek, e1 = e[k], e[k + 1]
    nek = _a_norm(A, ek)
    if nek == 0.0:
        return LocalOptimality(0.0, 0)
    m = trace.memory[k]
    s = to_float(trace.precond_residuals[k])
    V = np.column_stack([s] + _floats(trace.directions[k - m:k]))
    z, rank = _pivoted_normal_solve(V, A, ek)
    best = _a_norm(A, ek - V @ z)
    actual = _a_norm(A, e1)
    gap = abs(actual - best) / nek
    if k == 0 or m == 0:
        return LocalOptimality(gap, rank)
    V2 = np.column_stack([s, ek - e[k - 1]])
    z2, _ = _pivoted_normal_solve(V2, A, ek)
    two = _a_norm(A, ek - V2 @ z2)
    return LocalOptimality(gap, rank, two, float(z2[1]), actual <= two + 1e-10 * nek)


def audit_sd_reduction(trace: SolveTrace, A: SymmetricOperator, true_solution) -> float:
    """
    Max over k of ``| ||e_{k+1}||_A / ||e_k||_A - sin angle_A(e_k, s_k) |``
    on a steepest-descent trace.
    """
    if any(m != 0 for m in trace.memory):
        raise InputError("reduction identity applies to steepest-descent traces (m_k = 0)")
    _require_history(trace, need_s=True)
    from .cone import metric_sin
    from .linalg import Metric

    metric = Metric(A)
    e = _errors(trace, true_solution)
    worst = 0.0
    for k in range(trace.iterations):
        nek = _a_norm(A, e[k])
        if nek == 0.0:
            continue
        ratio = _a_norm(A, e[k + 1]) / nek
        s = to_float(trace.precond_residuals[k])
        worst = max(worst, abs(ratio - metric_sin(metric, e[k], s)))
    return worst
