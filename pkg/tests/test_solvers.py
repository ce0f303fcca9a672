import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flexkrylov.cone import Metric, metric_sin, spectral_bound
from flexkrylov.exceptions import InputError, NumericalError, PreconditionerError
from flexkrylov.linalg import dense_operator, diagonal_operator, laplacian_1d
from flexkrylov.precision import to_mp, working_precision
from flexkrylov.preconditioners import adversarial, fixed_spd, random_cone
from flexkrylov.solvers import (MemoryPolicy, StoppingRule, audit_error_transition,
                                audit_local_optimality, audit_orthogonality, audit_sd_reduction,
                                solve_alg1, solve_flexible, validate_policy)

from suites import random_spd_with_kappa

IDENTITY = fixed_spd(lambda r: r.copy(), "identity")


def _rel(trace):
    e = np.asarray(trace.error_norms, dtype=float)
    return e / e[0]


def _random_system(n, kappa_a, kappa_b, seed):
    rng = np.random.default_rng(seed)
    A = dense_operator(random_spd_with_kappa(n, kappa_a, rng))
    Binv = dense_operator(random_spd_with_kappa(n, kappa_b, rng))
    return A, fixed_spd(Binv.apply), rng.standard_normal(n)


# ---------------------------------------------------------------- policies

@pytest.mark.parametrize("policy", [MemoryPolicy.full(), MemoryPolicy.pcg(), MemoryPolicy.psd(),
                                    MemoryPolicy.truncated(3)])
def test_standard_policies_valid(policy):
    assert validate_policy(policy, 100)


def test_policy_violation_reported():
    rep = validate_policy(MemoryPolicy.explicit([0, 2, 3]), 3)
    assert not rep and rep.index == 1
    rep = validate_policy(MemoryPolicy.explicit([1]), 1)
    assert not rep and rep.index == 0
    rep = validate_policy(MemoryPolicy.explicit([0, 1]), 5)
    assert not rep and rep.index == 2


def test_policy_horizon_checked():
    with pytest.raises(InputError):
        validate_policy(MemoryPolicy.full(), 0)
    with pytest.raises(InputError):
        MemoryPolicy.truncated(-1)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=30))
def test_policy_validation_property(steps):
    # build m_k from increments in {+1, 0, -1, -2} clipped to [0, k]
    seq, m = [], 0
    for k, d in enumerate(steps):
        m = 0 if k == 0 else max(0, min(k, m + 1 - d))
        seq.append(m)
    assert validate_policy(MemoryPolicy.explicit(seq), len(seq))
    bad = list(seq)
    bad[-1] = len(bad)
    assert not validate_policy(MemoryPolicy.explicit(bad), len(bad))


def test_invalid_policy_rejected_by_solver():
    A = diagonal_operator([1.0, 2.0])
    with pytest.raises(InputError):
        solve_flexible(A, [0, 0], [1, 1], IDENTITY, MemoryPolicy.explicit([0, 2]),
                       StoppingRule(2))


# ---------------------------------------------------------------- hand examples

def test_hand_example_one_step():
    A = diagonal_operator([1.0, 2.0])
    tr = solve_flexible(A, [0.0, 0.0], [1.0, 1.0], IDENTITY, MemoryPolicy.psd(),
                        StoppingRule(1), true_solution=[0.0, 0.0])
    np.testing.assert_allclose(tr.x, [4 / 9, -1 / 9], rtol=0, atol=1e-16)
    assert tr.reduction_factors[0] == pytest.approx(math.sqrt(2 / 27), rel=1e-14)
    assert audit_error_transition(tr, A, [0.0, 0.0]) <= 1e-15
    assert audit_sd_reduction(tr, A, [0.0, 0.0]) <= 1e-15


def test_hand_example_direct_solve_crosscheck():
    A = np.array([[1.0, 0.0], [0.0, 2.0]])
    x0 = np.array([1.0, 1.0])
    r = -A @ x0
    alpha = (r @ r) / (r @ A @ r)
    x1 = x0 + alpha * r
    e0, e1 = np.linalg.solve(A, np.zeros(2)) - x0, -x1
    assert math.sqrt(e1 @ A @ e1 / (e0 @ A @ e0)) == pytest.approx(math.sqrt(2 / 27), rel=1e-14)


@pytest.mark.parametrize("solver", ["psd", "pcg", "full", "standard", "modified"])
def test_exact_preconditioner_one_step(solver):
    rng = np.random.default_rng(0)
    M = random_spd_with_kappa(12, 40.0, rng)
    A = dense_operator(M)
    P = fixed_spd(lambda r: np.linalg.solve(M, r))
    x0 = rng.standard_normal(12)
    x_true = rng.standard_normal(12)
    b = M @ x_true
    stop = StoppingRule(3, error_tolerance=1e-12)
    if solver in ("standard", "modified"):
        tr = solve_alg1(A, b, x0, P, solver, stop, x_true)
    else:
        policy = {"psd": MemoryPolicy.psd(), "pcg": MemoryPolicy.pcg(),
                  "full": MemoryPolicy.full()}[solver]
        tr = solve_flexible(A, b, x0, P, policy, stop, x_true)
    assert tr.iterations == 1
    assert tr.error_norms[1] <= 1e-12 * tr.error_norms[0]


def test_full_policy_finite_termination():
    rng = np.random.default_rng(3)
    n = 50
    M = random_spd_with_kappa(n, 100.0, rng)
    A = dense_operator(M)
    Binv = dense_operator(random_spd_with_kappa(n, 10.0, rng))
    b = rng.standard_normal(n)
    tr = solve_flexible(A, b, np.zeros(n), fixed_spd(Binv.apply), MemoryPolicy.full(),
                        StoppingRule(n, residual_tolerance=1e-10))
    assert np.linalg.norm(b - M @ tr.x) <= 1e-10 * np.linalg.norm(b)
    np.testing.assert_allclose(tr.x, np.linalg.solve(M, b), rtol=1e-8)


# ---------------------------------------------------------------- errors

def test_non_spd_step_detected():
    A = diagonal_operator([1.0, 2.0])
    flip = fixed_spd(lambda r: -r)
    with pytest.raises(PreconditionerError, match="not SPD"):
        solve_flexible(A, [0, 0], [1, 1], flip, MemoryPolicy.psd(), StoppingRule(2))
    with pytest.raises(PreconditionerError):
        solve_alg1(A, [0, 0], [1, 1], flip, "standard", StoppingRule(2))


def test_non_finite_detected():
    A = diagonal_operator([1.0, 2.0])
    bad = fixed_spd(lambda r: np.array([np.nan, 1.0]))
    with pytest.raises(NumericalError):
        solve_flexible(A, [0, 0], [1, 1], bad, MemoryPolicy.psd(), StoppingRule(2))


def test_bad_arguments():
    A = diagonal_operator([1.0, 2.0])
    with pytest.raises(InputError):
        solve_alg1(A, [0, 0], [1, 1], IDENTITY, "other", StoppingRule(2))
    with pytest.raises(InputError):
        solve_flexible(A, [0, 0], [1, 1, 1], IDENTITY, MemoryPolicy.psd(), StoppingRule(2))
    with pytest.raises(InputError):
        solve_flexible(A, [0, 0], [1, 1], IDENTITY, MemoryPolicy.psd(),
                       StoppingRule(2, error_tolerance=1e-3))
    with pytest.raises(InputError):
        StoppingRule(0)
    with pytest.raises(InputError):
        solve_flexible(A, [0, 0], [1, 1], lambda r, ctx: np.ones(3), MemoryPolicy.psd(),
                       StoppingRule(2))


# ---------------------------------------------------------------- fixed preconditioner

def _four_traces(A, P, x0, steps):
    z = x0 * 0
    stop = StoppingRule(steps)
    return [solve_flexible(A, z, x0, P, MemoryPolicy.full(), stop, z),
            solve_flexible(A, z, x0, P, MemoryPolicy.pcg(), stop, z),
            solve_alg1(A, z, x0, P, "standard", stop, z),
            solve_alg1(A, z, x0, P, "modified", stop, z)]


def _max_gap(traces):
    length = min(len(t.error_norms) for t in traces)
    E = np.array([_rel(t)[:length] for t in traces])
    return np.abs(E - E[0]).max()


# The short recurrences agree with full orthogonalization only in exact
# arithmetic; rounding errors are amplified by roughly the pencil condition
# number per step once the error has dropped far enough. Run these in
# extended precision so the comparison isolates the algebra.

@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1), st.integers(4, 40), st.floats(1.5, 20.0), st.floats(1.5, 20.0))
def test_fixed_preconditioner_equivalence_property(seed, n, kappa_a, kappa_b):
    A, P, x0 = _random_system(n, kappa_a, kappa_b, seed)
    with working_precision(256):
        traces = _four_traces(A, P, to_mp(x0), 60)
    assert _max_gap(traces) <= 1e-8


def test_fixed_preconditioner_equivalence_n200():
    A, P, x0 = _random_system(200, 10.0, 10.0, 7)
    with working_precision(128):
        traces = _four_traces(A, P, to_mp(x0), 60)
    assert all(len(t.error_norms) == 61 for t in traces)
    assert _max_gap(traces) <= 1e-8


@pytest.mark.parametrize("seed, n", [(0, 30), (1, 60), (2, 100)])
def test_standard_and_modified_beta_coincide(seed, n):
    A, P, x0 = _random_system(n, 10.0, 10.0, seed)
    z = np.zeros(n)
    with working_precision(160):
        x0 = to_mp(x0)
        z = to_mp(z)
        stop = StoppingRule(40)
        std = solve_alg1(A, z, x0, P, "standard", stop, z)
        mod = solve_alg1(A, z, x0, P, "modified", stop, z)
    np.testing.assert_allclose(_rel(std), _rel(mod), rtol=0, atol=1e-12)
    # past step n the exact solution is reached and beta is a ratio of rounding residue
    np.testing.assert_allclose(std.betas[:n - 1], mod.betas[:n - 1], rtol=1e-12)


def test_standard_and_modified_beta_float64_early_steps():
    # before the error reaches the rounding regime the float traces agree too
    A, P, x0 = _random_system(100, 10.0, 10.0, 0)
    z = np.zeros(100)
    std = solve_alg1(A, z, x0, P, "standard", StoppingRule(30), z)
    mod = solve_alg1(A, z, x0, P, "modified", StoppingRule(30), z)
    np.testing.assert_allclose(_rel(std), _rel(mod), rtol=0, atol=1e-12)


# ---------------------------------------------------------------- monotonicity and breakdown

@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["psd", "pcg", "full", "truncated2",
                                                   "standard", "modified"]))
def test_monotone_error_property(seed, method):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 40))
    A = dense_operator(random_spd_with_kappa(n, 50.0, rng))
    P = random_cone(3.0, rng)
    x0 = rng.standard_normal(n)
    z = np.zeros(n)
    # stop short of the float64 floor, where the recurred residual is pure drift
    stop = StoppingRule(min(n - 1, 25), error_tolerance=1e-12)
    if method in ("standard", "modified"):
        tr = solve_alg1(A, z, x0, P, method, stop, z)
    else:
        policy = {"psd": MemoryPolicy.psd(), "pcg": MemoryPolicy.pcg(),
                  "full": MemoryPolicy.full(), "truncated2": MemoryPolicy.truncated(2)}[method]
        tr = solve_flexible(A, z, x0, P, policy, stop, z)
    e = np.asarray(tr.error_norms)
    if method == "standard":
        # the standard beta carries no optimality guarantee under variable preconditioning
        assert np.all(np.isfinite(e))
    else:
        assert np.all(e[1:] <= e[:-1] * (1 + 1e-12) + 1e-300)


@pytest.mark.parametrize("n, kappa", [(10, 10.0), (25, 100.0), (40, 1e3)])
def test_breakdown_soundness(n, kappa):
    # full orthogonalization run past n steps must stop on a collapsed direction
    rng = np.random.default_rng(n)
    M = random_spd_with_kappa(n, kappa, rng)
    A = dense_operator(M)
    Binv = dense_operator(random_spd_with_kappa(n, 5.0, rng))
    b = rng.standard_normal(n)
    x0 = rng.standard_normal(n)
    tr = solve_flexible(A, b, x0, fixed_spd(Binv.apply), MemoryPolicy.full(),
                        StoppingRule(3 * n))
    assert tr.termination in ("breakdown", "exact")
    assert np.linalg.norm(b - M @ tr.x) <= 1e-8 * np.linalg.norm(b - M @ x0)


# ---------------------------------------------------------------- variable preconditioning

@pytest.mark.parametrize("seed", range(4))
def test_modified_beta_envelope_random_preconditioner(seed):
    rng = np.random.default_rng(seed)
    n = 60
    A = dense_operator(random_spd_with_kappa(n, 100.0, rng))
    kappa = 4.0
    z = np.zeros(n)
    tr = solve_alg1(A, z, rng.standard_normal(n), random_cone(kappa, rng), "modified",
                    StoppingRule(30, error_tolerance=1e-12), z)
    assert np.all(tr.reduction_factors <= spectral_bound(kappa) + 1e-10)


def test_adversarial_separates_beta_formulas():
    # (1/3)^60 is far below the float64 floor
    A = laplacian_1d(200)
    rng = np.random.default_rng(1)
    finals = {}
    with working_precision(160):
        x0 = to_mp(rng.standard_normal(200))
        z = x0 * 0
        for f in ("standard", "modified"):
            tr = solve_alg1(A, z, x0, adversarial(2.0, np.random.default_rng(2)), f,
                            StoppingRule(60), z)
            finals[f] = tr.error_norms[-1]
    assert len(tr.error_norms) == 61
    assert finals["standard"] >= 2 * finals["modified"]


# ---------------------------------------------------------------- audits

def test_audits_psd_diag():
    A = diagonal_operator([1.0, 2.0])
    z = [0.0, 0.0]
    tr = solve_flexible(A, z, [1.0, 1.0], random_cone(3.0, np.random.default_rng(0)),
                        MemoryPolicy.psd(), StoppingRule(1), z)
    assert audit_error_transition(tr, A, z) <= 1e-13
    rep = audit_orthogonality(tr, A, z)
    assert rep.directions == 0.0 and rep.errors <= 1e-12
    assert audit_local_optimality(tr, 0, A, z).gap <= 1e-12


def test_audits_full_n200():
    A = laplacian_1d(200)
    rng = np.random.default_rng(4)
    z = np.zeros(200)
    Binv = dense_operator(random_spd_with_kappa(200, 10.0, rng))
    tr = solve_flexible(A, z, rng.standard_normal(200), fixed_spd(Binv.apply),
                        MemoryPolicy.full(), StoppingRule(60), z)
    assert audit_error_transition(tr, A, z) <= 1e-12
    assert audit_orthogonality(tr, A, z).worst <= 1e-9


def test_orthogonality_pcg_variable():
    rng = np.random.default_rng(5)
    n = 80
    A = dense_operator(random_spd_with_kappa(n, 100.0, rng))
    z = np.zeros(n)
    tr = solve_flexible(A, z, rng.standard_normal(n), random_cone(5.0, rng), MemoryPolicy.pcg(),
                        StoppingRule(40), z)
    assert audit_orthogonality(tr, A, z).worst <= 1e-10


def test_local_optimality_pcg_fifty_steps():
    rng = np.random.default_rng(6)
    n = 50
    A = dense_operator(random_spd_with_kappa(n, 100.0, rng))
    z = np.zeros(n)
    tr = solve_flexible(A, z, rng.standard_normal(n), random_cone(5.0, rng), MemoryPolicy.pcg(),
                        StoppingRule(49), z)
    for k in range(tr.iterations):
        res = audit_local_optimality(tr, k, A, z)
        assert res.gap <= 1e-10
        if k > 0:
            assert res.two_term_ok


def test_local_optimality_psd_steps():
    rng = np.random.default_rng(8)
    n = 30
    A = dense_operator(random_spd_with_kappa(n, 30.0, rng))
    z = np.zeros(n)
    tr = solve_flexible(A, z, rng.standard_normal(n), random_cone(5.0, rng), MemoryPolicy.psd(),
                        StoppingRule(20), z)
    assert max(audit_local_optimality(tr, k, A, z).gap for k in range(20)) <= 1e-12


def test_adversarial_optimal_beta_is_zero():
    n = 100
    A = laplacian_1d(n)
    rng = np.random.default_rng(9)
    z = np.zeros(n)
    tr = solve_flexible(A, z, rng.standard_normal(n), adversarial(2.0, rng), MemoryPolicy.pcg(),
                        StoppingRule(30), z)
    for k in range(1, tr.iterations):
        res = audit_local_optimality(tr, k, A, z)
        assert abs(res.two_term_beta) <= 1e-8


def test_sd_reduction_examples():
    A = diagonal_operator([1.0, 2.0])
    z = [0.0, 0.0]
    tr = solve_flexible(A, z, [1.0, 1.0], IDENTITY, MemoryPolicy.psd(), StoppingRule(1), z)
    e0 = -np.array([1.0, 1.0])
    assert metric_sin(Metric(A), e0, tr.precond_residuals[0]) == pytest.approx(
        math.sqrt(2 / 27), rel=1e-14)
    exact = fixed_spd(lambda r: r / np.array([1.0, 2.0]))
    tr = solve_flexible(A, z, [1.0, 1.0], exact, MemoryPolicy.psd(), StoppingRule(1), z)
    assert tr.error_norms[1] == 0.0
    assert audit_sd_reduction(tr, A, z) <= 1e-15

    n = 60
    A = laplacian_1d(n)
    z = np.zeros(n)
    tr = solve_flexible(A, z, np.random.default_rng(0).standard_normal(n),
                        adversarial(2.0, np.random.default_rng(1)), MemoryPolicy.psd(),
                        StoppingRule(20), z)
    np.testing.assert_allclose(tr.reduction_factors, 1 / 3, atol=1e-10)
    assert audit_sd_reduction(tr, A, z) <= 1e-10


def test_sd_reduction_rejects_memory():
    A = diagonal_operator([1.0, 2.0, 3.0])
    z = np.zeros(3)
    tr = solve_flexible(A, z, np.ones(3), IDENTITY, MemoryPolicy.pcg(), StoppingRule(2), z)
    with pytest.raises(InputError):
        audit_sd_reduction(tr, A, z)


def test_truncated_history_rejected():
    A = laplacian_1d(20)
    z = np.zeros(20)
    tr = solve_flexible(A, z, np.ones(20), IDENTITY, MemoryPolicy.psd(), StoppingRule(10), z,
                        history_cap=3)
    assert not tr.history_complete and tr.iterations == 10
    with pytest.raises(InputError):
        audit_error_transition(tr, A, z)
    # direction audit needs no iterates
    assert audit_orthogonality(tr, A).errors is None


def test_stopping_rules():
    A = laplacian_1d(30)
    z = np.zeros(30)
    x0 = np.random.default_rng(0).standard_normal(30)
    tr = solve_flexible(A, z, x0, IDENTITY, MemoryPolicy.pcg(),
                        StoppingRule(100, error_tolerance=1e-6), z)
    assert tr.termination == "error_tolerance"
    assert tr.error_norms[-1] <= 1e-6 * tr.error_norms[0] < tr.error_norms[-2]
    assert tr.iterations_to(1e-6) == tr.iterations
    tr = solve_flexible(A, z, x0, IDENTITY, MemoryPolicy.psd(), StoppingRule(5), z)
    assert tr.termination == "max_iterations" and tr.iterations == 5
