"""
Experiment harness: the three convergence studies plus a free-form
``custom`` run, with CSV, SVG and plain-text audit output.

All randomness comes from :func:`experiment_rng`, a Philox counter-based
generator keyed by the 64-bit config seed and a tuple of stream labels, so
every sub-run draws from its own reproducible stream and no global RNG
state is touched.
"""
from __future__ import annotations

import csv
import io
import math
import os
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cone import spectral_bound
from .exceptions import InputError, NumericalError
from .linalg import SymmetricOperator, dense_operator, diagonal_operator, laplacian_1d
from .precision import to_mp, working_precision
from .preconditioners import adversarial, fixed_spd, inner_cg, random_cone, two_grid_preconditioner
from .solvers import (MemoryPolicy, SolveTrace, StoppingRule, audit_error_transition,
                      audit_orthogonality, audit_sd_reduction, solve_alg1, solve_flexible)

__all__ = [
    "EXPERIMENTS", "METHODS", "PRECONDITIONERS", "ExperimentConfig", "MethodHistory",
    "AuditEntry", "RunReport", "experiment_rng", "run_experiment", "emit_report",
    "write_csv", "format_real", "CSV_HEADER", "random_spd", "EnvelopeRun", "envelope_study",
]

EXPERIMENTS = ("fig1", "fig2", "fig3", "custom")
METHODS = ("psd", "pcg", "full", "alg1-modified", "alg1-standard")
PRECONDITIONERS = ("adversarial", "random-cone", "inner-cg", "two-grid-fixed",
                   "two-grid-rerandomized", "identity")
CSV_HEADER = ("iteration", "method", "eta_or_mode", "error_A_norm", "reduction_factor",
              "bound", "precond_inner_iters")

# Thresholds used by the audit report.
AUDIT_ORTHOGONALITY = 1e-9
AUDIT_IDENTITY = 1e-10
AUDIT_ENVELOPE = 1e-10

_DEFAULTS = {
    "fig1": dict(n=200, kappa_max=2.0, iterations=60, methods=("full", "alg1-modified",
                                                               "alg1-standard"),
                 problem="laplacian", preconditioner="adversarial", precision=160),
    "fig2": dict(n=2000, eta_list=(0.2, 0.4, 0.6, 0.8), iterations=100, methods=("psd", "pcg"),
                 problem="diagonal", preconditioner="inner-cg", precision=0),
    "fig3": dict(n=3000, coarse_count=600, iterations=400, tolerance=1e-8,
                 methods=("psd", "pcg", "full"), modes=("fixed", "rerandomized"),
                 problem="laplacian", preconditioner="two-grid", precision=0),
    "custom": dict(n=100, iterations=50, methods=("psd", "pcg"), problem="laplacian",
                   preconditioner="identity", precision=0),
}


def experiment_rng(seed: int, *labels) -> np.random.Generator:
    """Philox stream for ``(seed, labels)``; labels are hashed with CRC-32."""
    key = tuple(zlib.crc32(str(lab).encode("utf-8")) for lab in labels)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Parameters of one experiment run. ``None`` fields take the defaults of
    the chosen experiment (see :meth:`resolved`).

    ``precision`` is the working precision in bits for the iteration;
    0 means float64. The adversarial study needs extended precision: in
    float64 the rounding left in the span of old directions is amplified
    by the worst-case preconditioner until it dominates the error.
    """

    experiment: str = "fig1"
    n: Optional[int] = None
    kappa_max: Optional[float] = None
    eta_list: Optional[Tuple[float, ...]] = None
    coarse_count: Optional[int] = None
    iterations: Optional[int] = None
    seed: int = 42
    out: str = "results"
    csv: bool = False
    svg: bool = False
    audit: bool = False
    methods: Optional[Tuple[str, ...]] = None
    modes: Optional[Tuple[str, ...]] = None
    problem: Optional[str] = None
    preconditioner: Optional[str] = None
    tolerance: Optional[float] = None
    precision: Optional[int] = None

    def resolved(self) -> "ExperimentConfig":
        """Fill experiment defaults and validate; raises InputError."""
        if self.experiment not in EXPERIMENTS:
            raise InputError(f"unknown experiment {self.experiment!r}; "
                             f"choose from {', '.join(EXPERIMENTS)}")
        filled = {k: v for k, v in _DEFAULTS[self.experiment].items()
                  if getattr(self, k) is None}
        cfg = replace(self, **filled)
        if cfg.methods is not None:
            object.__setattr__(cfg, "methods", tuple(cfg.methods))
        if cfg.eta_list is not None:
            object.__setattr__(cfg, "eta_list", tuple(float(e) for e in cfg.eta_list))
        cfg._validate()
        return cfg

    def _validate(self):
        if not 0 <= self.seed < 2 ** 64:
            raise InputError("seed must be an unsigned 64-bit integer")
        if self.n is None or self.n < 2:
            raise InputError("n must be at least 2")
        if self.iterations is None or self.iterations < 1:
            raise InputError("iterations must be positive")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise InputError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
        if self.precision is not None and self.precision != 0 and self.precision < 53:
            raise InputError("precision must be 0 (float64) or at least 53 bits")
        pc = self.preconditioner
        if self.experiment == "custom" and pc not in PRECONDITIONERS:
            raise InputError(f"unknown preconditioner {pc!r}; "
                             f"choose from {', '.join(PRECONDITIONERS)}")
        if self.problem not in ("laplacian", "diagonal"):
            raise InputError(f"unknown problem {self.problem!r}")
        if pc in ("adversarial", "random-cone"):
            if self.kappa_max is None or not self.kappa_max > 1.0:
                raise InputError("kappa_max > 1 is required for cone preconditioners")
            if self.iterations >= self.n - 1:
                raise InputError("cone preconditioners need iterations < n - 1")
        if pc == "inner-cg":
            if not self.eta_list:
                raise InputError("eta_list is required for inner-CG preconditioning")
            if any(not 0.0 < e < 1.0 for e in self.eta_list):
                raise InputError("every eta must lie in (0, 1)")
        if pc is not None and pc.startswith("two-grid"):
            if self.coarse_count is None or not 1 <= self.coarse_count <= self.n:
                raise InputError(f"coarse_count must be in 1..{self.n}")
            if self.problem != "laplacian":
                raise InputError("two-grid preconditioning needs the laplacian problem")
        if self.modes is not None and any(m not in ("fixed", "rerandomized")
                                          for m in self.modes):
            raise InputError("modes must be fixed and/or rerandomized")
        if self.tolerance is not None and not 0.0 < self.tolerance < 1.0:
            raise InputError("tolerance must lie in (0, 1)")


@dataclass
class MethodHistory:
    """Convergence history of one (method, variant) sub-run."""

    method: str
    variant: str
    error_norms: List[float]
    inner_iterations: List[Optional[int]]
    bound: Optional[float] = None
    seconds: float = 0.0
    termination: str = ""
    failure: Optional[str] = None
    iterations_to_tol: Optional[int] = None

    @property
    def label(self) -> str:
        return f"{self.method} {self.variant}" if self.variant else self.method

    @property
    def reduction_factors(self) -> np.ndarray:
        e = np.asarray(self.error_norms, dtype=float)
        if e.size < 2:
            return np.empty(0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return e[1:] / e[:-1]

    @property
    def mean_reduction(self) -> float:
        """Geometric mean of the per-step reduction factors."""
        e = np.asarray(self.error_norms, dtype=float)
        if e.size < 2 or e[-1] <= 0:
            return float("nan")
        return float(np.exp(np.log(e[-1] / e[0]) / (e.size - 1)))

    def bound_line(self) -> Optional[np.ndarray]:
        if self.bound is None or not self.error_norms:
            return None
        return self.error_norms[0] * self.bound ** np.arange(len(self.error_norms))


@dataclass(frozen=True)
class AuditEntry:
    name: str
    subject: str
    value: float
    threshold: float

    @property
    def ok(self) -> bool:
        return bool(self.value <= self.threshold)


@dataclass
class RunReport:
    config: ExperimentConfig
    histories: List[MethodHistory] = field(default_factory=list)
    audits: List[AuditEntry] = field(default_factory=list)
    seconds: float = 0.0
    # filled only with keep_traces=True
    traces: Dict[Tuple[str, str], SolveTrace] = field(default_factory=dict)
    operator: Optional[SymmetricOperator] = None
    true_solution: Optional[np.ndarray] = None

    @property
    def failures(self) -> List[MethodHistory]:
        return [h for h in self.histories if h.failure]

    @property
    def audits_ok(self) -> bool:
        return all(a.ok for a in self.audits)

    def history(self, method: str, variant: str = "") -> MethodHistory:
        for h in self.histories:
            if h.method == method and h.variant == variant:
                return h
        raise KeyError((method, variant))

    def statistics(self) -> Dict[str, Dict[str, object]]:
        return {h.label: {"mean_reduction": h.mean_reduction,
                          "iterations": len(h.error_norms) - 1,
                          "iterations_to_tol": h.iterations_to_tol,
                          "seconds": h.seconds} for h in self.histories}

    def audit_text(self) -> str:
        cfg = self.config
        lines = [f"experiment: {cfg.experiment}  n={cfg.n}  seed={cfg.seed}  "
                 f"iterations={cfg.iterations}"]
        if cfg.precision:
            lines.append(f"working precision: {cfg.precision} bits")
        lines.append("")
        lines.append("histories:")
        for h in self.histories:
            status = f"FAILED ({h.failure})" if h.failure else h.termination
            tol = "" if h.iterations_to_tol is None else f"  to_tol={h.iterations_to_tol}"
            lines.append(f"  {h.label:<28} steps={len(h.error_norms) - 1:<4} "
                         f"mean_factor={h.mean_reduction:.6g}{tol}  {status}")
        lines.append("")
        lines.append("audits:")
        if not self.audits:
            lines.append("  (none)")
        for a in self.audits:
            flag = "ok" if a.ok else "FLAGGED"
            lines.append(f"  {a.name:<26} {a.subject:<28} {a.value:.3e} <= {a.threshold:.0e}  "
                         f"{flag}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# running


def _problem(cfg: ExperimentConfig) -> SymmetricOperator:
    if cfg.problem == "diagonal":
        return diagonal_operator(np.arange(1, cfg.n + 1, dtype=float))
    return laplacian_1d(cfg.n)


def _make_precond(cfg, kind, A, rng, variant):
    if kind == "adversarial":
        return adversarial(cfg.kappa_max, rng)
    if kind == "random-cone":
        return random_cone(cfg.kappa_max, rng)
    if kind == "inner-cg":
        return inner_cg(float(variant))
    if kind.startswith("two-grid"):
        mode = variant or kind.split("-", 2)[2]
        return two_grid_preconditioner(A, cfg.coarse_count, mode, rng)
    return fixed_spd(lambda r: r.copy(), label="identity")


def _solve(method, A, b, x0, precond, stop, x_true) -> SolveTrace:
    if method.startswith("alg1-"):
        return solve_alg1(A, b, x0, precond, method[5:], stop, x_true)
    policy = {"psd": MemoryPolicy.psd(), "pcg": MemoryPolicy.pcg(),
              "full": MemoryPolicy.full()}[method]
    return solve_flexible(A, b, x0, precond, policy, stop, x_true)


def _audit_trace(report, subject, method, trace, A, x_true, bound):
    # the two-term identities hold for the (m) family and the modified beta
    if method == "alg1-standard" or not trace.directions:
        return
    add = report.audits.append
    add(AuditEntry("error-transition", subject,
                   audit_error_transition(trace, A, x_true), AUDIT_IDENTITY))
    orth = audit_orthogonality(trace, A, x_true)
    add(AuditEntry("direction-orthogonality", subject, orth.directions, AUDIT_ORTHOGONALITY))
    add(AuditEntry("error-orthogonality", subject, orth.errors, AUDIT_ORTHOGONALITY))
    if method == "psd":
        add(AuditEntry("sd-reduction-identity", subject,
                       audit_sd_reduction(trace, A, x_true), AUDIT_IDENTITY))
    if bound is not None:
        rf = trace.reduction_factors
        excess = float(np.max(rf - bound)) if rf.size else 0.0
        add(AuditEntry("reduction-envelope", subject, max(excess, 0.0), AUDIT_ENVELOPE))


def _variants(cfg) -> List[str]:
    pc = cfg.preconditioner
    if pc == "inner-cg":
        return [repr(float(e)) for e in cfg.eta_list]
    if pc == "two-grid":
        return list(cfg.modes)
    if pc.startswith("two-grid"):
        return [pc.split("-", 2)[2]]
    return [""]


def run_experiment(config: ExperimentConfig, keep_traces: bool = False) -> RunReport:
    """
    Run every (method, variant) pair of the experiment.

    Sub-run numerical failures are recorded in the history and do not abort
    the run. Identical configs give identical reports (timings aside).
    ``keep_traces`` retains the full solver traces for later audits.

    Raises
    ------
    InputError
        For an invalid configuration.
    """
    cfg = config.resolved()
    t_start = time.perf_counter()
    report = RunReport(cfg)
    A = _problem(cfg)
    n = cfg.n
    x0 = experiment_rng(cfg.seed, "x0").standard_normal(n)
    # zero right-hand side: x_true = 0 and e_k = -x_k
    b = np.zeros(n)
    x_true = np.zeros(n)
    bound = None
    if cfg.preconditioner in ("adversarial", "random-cone"):
        bound = spectral_bound(cfg.kappa_max)
    stop = StoppingRule(cfg.iterations, error_tolerance=cfg.tolerance)
    bits = cfg.precision or 0

    for variant in _variants(cfg):
        for method in cfg.methods:
            rng = experiment_rng(cfg.seed, "precond", method, variant)
            precond = _make_precond(cfg, cfg.preconditioner, A, rng, variant)
            subject = f"{method} {variant}".strip()
            t0 = time.perf_counter()
            failure = None
            trace = None
            try:
                if bits:
                    with working_precision(bits):
                        trace = _solve(method, A, b, to_mp(x0), precond, stop, x_true)
                else:
                    trace = _solve(method, A, b, x0, precond, stop, x_true)
            except NumericalError as exc:
                failure = f"{type(exc).__name__}: {exc}"
            seconds = time.perf_counter() - t0
            if trace is None:
                hist = MethodHistory(method, variant, [], [], bound, seconds, "failed", failure)
            else:
                inner = [None] + [info.get("inner_iterations") for info in trace.precond_info]
                hist = MethodHistory(method, variant, [float(v) for v in trace.error_norms],
                                     inner, bound, seconds, trace.termination, None,
                                     trace.iterations_to(cfg.tolerance) if cfg.tolerance else None)
                if cfg.audit:
                    _audit_trace(report, subject, method, trace, A, x_true, bound)
                if keep_traces:
                    report.traces[(method, variant)] = trace
            report.histories.append(hist)
    if keep_traces:
        report.operator, report.true_solution = A, x_true
    report.seconds = time.perf_counter() - t_start
    return report


# ---------------------------------------------------------------------------
# randomized envelope study


def random_spd(n: int, cond: float, rng: np.random.Generator) -> np.ndarray:
    """Dense SPD matrix with log-uniform spectrum in ``[1, cond]`` and Haar eigenvectors."""
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    Q = Q * np.sign(np.diag(R))
    d = np.exp(rng.uniform(0.0, math.log(cond), n))
    d[0], d[-1] = 1.0, cond
    return (Q * d) @ Q.T


@dataclass
class EnvelopeRun:
    index: int
    n: int
    kappa_max: float
    policy: str
    operator: SymmetricOperator
    trace: SolveTrace

    @property
    def bound(self) -> float:
        return spectral_bound(self.kappa_max)

    @property
    def envelope_excess(self) -> float:
        rf = self.trace.reduction_factors
        return float(np.max(rf - self.bound)) if rf.size else -self.bound


def envelope_study(seed: int = 42, runs: int = 200, n_range: Tuple[int, int] = (10, 100),
                   kappas: Sequence[float] = (1.5, 2.0, 4.0, 10.0), cond_max: float = 1e3,
                   policies: Sequence[str] = ("psd", "pcg", "full", "truncated3"),
                   tolerance: float = 1e-6, max_iterations: int = 40,
                   precision: int = 106) -> List[EnvelopeRun]:
    """
    Random SPD systems solved with random preconditioners from the interior
    of the cone of condition ``kappa_max``.

    Run ``i`` uses ``kappas[i % len(kappas)]`` and cycles the memory policies
    every ``len(kappas)`` runs, so all combinations are covered. The
    iteration stops at ``tolerance`` relative A-error or ``max_iterations``.
    ``precision`` > 0 runs the iteration in that many bits, which keeps the
    orthogonality identities at rounding level for long memories.
    """
    named = {"psd": MemoryPolicy.psd(), "pcg": MemoryPolicy.pcg(), "full": MemoryPolicy.full()}
    out = []
    for i in range(runs):
        rng = experiment_rng(seed, "envelope", i)
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        kappa = float(kappas[i % len(kappas)])
        name = policies[(i // len(kappas)) % len(policies)]
        if name in named:
            policy = named[name]
        elif name.startswith("truncated"):
            policy = MemoryPolicy.truncated(int(name[len("truncated"):]))
        else:
            raise InputError(f"unknown policy {name!r}")
        A = dense_operator(random_spd(n, cond_max, rng))
        x0 = rng.standard_normal(n)
        zero = np.zeros(n)
        stop = StoppingRule(min(n - 2, max_iterations), error_tolerance=tolerance)
        precond = random_cone(kappa, rng)
        if precision:
            with working_precision(precision):
                trace = solve_flexible(A, zero, to_mp(x0), precond, policy, stop, zero)
        else:
            trace = solve_flexible(A, zero, x0, precond, policy, stop, zero)
        out.append(EnvelopeRun(i, n, kappa, policy.label, A, trace))
    return out


# ---------------------------------------------------------------------------
# output


def format_real(v) -> str:
    """Shortest-safe round-trip formatting: 17 significant digits."""
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return ""
    return f"{v:.17g}"


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-." else "_" for c in text).strip("_")


def write_csv(rows: Sequence[Sequence[str]], path: str) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(rows)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _history_rows(h: MethodHistory) -> List[List[str]]:
    rf = h.reduction_factors
    line = h.bound_line()
    rows = []
    for j, e in enumerate(h.error_norms):
        inner = h.inner_iterations[j] if j < len(h.inner_iterations) else None
        rows.append([str(j), h.method, h.variant, format_real(e),
                     format_real(rf[j - 1]) if j > 0 else "",
                     format_real(line[j]) if line is not None else "",
                     "" if inner is None else str(inner)])
    return rows


def _bound_rows(h: MethodHistory) -> List[List[str]]:
    line = h.bound_line()
    return [[str(j), "bound", "", format_real(v), format_real(h.bound) if j > 0 else "",
             format_real(v), ""] for j, v in enumerate(line)]


def emit_report(report: RunReport, out: Optional[str] = None, csv_files: Optional[bool] = None,
                svg: Optional[bool] = None, audit: Optional[bool] = None) -> List[str]:
    """
    Write the requested artifacts and return their paths.

    One CSV per history (plus one for the bound line when a spectral bound
    applies), one SVG chart, and ``audit.txt``. Flags default to the
    config's emit flags.
    """
    cfg = report.config
    out = cfg.out if out is None else out
    csv_files = cfg.csv if csv_files is None else csv_files
    svg = cfg.svg if svg is None else svg
    audit = cfg.audit if audit is None else audit
    if not (csv_files or svg or audit):
        return []
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    if csv_files:
        for h in report.histories:
            name = _slug(f"{cfg.experiment}_{h.method}_{h.variant}" if h.variant
                         else f"{cfg.experiment}_{h.method}")
            path = os.path.join(out, name + ".csv")
            write_csv(_history_rows(h), path)
            written.append(path)
        ref = next((h for h in report.histories if h.bound is not None and h.error_norms), None)
        if ref is not None:
            path = os.path.join(out, f"{cfg.experiment}_bound.csv")
            write_csv(_bound_rows(ref), path)
            written.append(path)
    if svg:
        from .plotting import plot_report

        path = os.path.join(out, f"{cfg.experiment}.svg")
        plot_report(report, path)
        written.append(path)
    if audit:
        path = os.path.join(out, "audit.txt")
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(report.audit_text())
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written
