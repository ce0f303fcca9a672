import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flexkrylov.exceptions import IndefiniteError, InputError, NumericalError
from flexkrylov.linalg import (JACOBI_MAX, Metric, angle, dense_operator, diagonal_operator,
                               generalized_condition, laplacian_1d, materialize,
                               metric_symmetrize, sym_eig, weighted_inner)
from flexkrylov.precision import to_float, to_mp, working_precision

from suites import random_spd_with_kappa


# ---------------------------------------------------------------- inner products

def test_weighted_inner_examples():
    assert weighted_inner(Metric.euclidean(), [1, 2], [3, 4]) == 11
    assert weighted_inner(Metric(diagonal_operator([1, 2])), [1, 1], [1, 1]) == 3
    assert weighted_inner(Metric.euclidean(), [1, 0], [0, 1]) == 0


def test_weighted_inner_dimension_mismatch():
    with pytest.raises(InputError):
        weighted_inner(Metric.euclidean(), [1, 2], [1, 2, 3])
    with pytest.raises(InputError):
        weighted_inner(Metric(diagonal_operator([1, 2, 3])), [1, 2], [1, 2])


@given(st.integers(0, 2**32 - 1))
def test_metric_positive(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    metric = Metric(dense_operator(random_spd_with_kappa(n, 1e3, rng)))
    x = rng.standard_normal(n)
    assert weighted_inner(metric, x, x) > 0


def test_angle_examples():
    e = Metric.euclidean()
    assert angle(e, [1, 0], [0, 1]) == pytest.approx(math.pi / 2, abs=1e-15)
    assert angle(e, [3, 7], [3, 7]) == pytest.approx(0.0, abs=1e-7)
    assert angle(e, [1, 0], [1, 1]) == pytest.approx(math.pi / 4, abs=1e-15)


def test_angle_clamps_rounding():
    # cosine evaluates marginally above 1 without clamping
    x = np.array([0.1, 0.2, 0.3]) * 3
    assert 0.0 <= angle(Metric.euclidean(), x, x) < 1e-7


def test_angle_zero_vector():
    with pytest.raises(InputError):
        angle(Metric.euclidean(), [0, 0], [1, 0])


def test_angle_scaling_invariance_1000_pairs():
    rng = np.random.default_rng(11)
    metric = Metric(dense_operator(random_spd_with_kappa(6, 50.0, rng)))
    worst = 0.0
    for _ in range(1000):
        x, y = rng.standard_normal(6), rng.standard_normal(6)
        a, b = np.exp(rng.uniform(-5, 5, 2))
        worst = max(worst, abs(angle(metric, a * x, b * y) - angle(metric, x, y)))
    assert worst <= 1e-12


@given(st.floats(1e-6, 1e6), st.floats(1e-6, 1e6), st.integers(0, 2**32 - 1))
def test_angle_scaling_property(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(4), rng.standard_normal(4)
    assert abs(angle(Metric.euclidean(), a * x, b * y)
               - angle(Metric.euclidean(), x, y)) <= 1e-12


# ---------------------------------------------------------------- operators

def test_laplacian_matches_dense():
    A = laplacian_1d(9)
    D = 2 * np.eye(9) - np.eye(9, k=1) - np.eye(9, k=-1)
    np.testing.assert_array_equal(A.dense(), D)
    x = np.random.default_rng(0).standard_normal(9)
    np.testing.assert_allclose(A.apply(x), D @ x, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(A.sparse().toarray(), D)


@pytest.mark.parametrize("make", [lambda: laplacian_1d(30),
                                  lambda: diagonal_operator(np.arange(1.0, 31.0)),
                                  lambda: dense_operator(random_spd_with_kappa(
                                      30, 100.0, np.random.default_rng(3)))])
def test_operator_symmetry(make):
    A = make()
    rng = np.random.default_rng(1)
    norm = np.linalg.norm(A.dense(), 2)
    for _ in range(20):
        x, y = rng.standard_normal(30), rng.standard_normal(30)
        lhs = np.dot(A.apply(x), y)
        rhs = np.dot(x, A.apply(y))
        assert abs(lhs - rhs) <= 1e-12 * np.linalg.norm(x) * np.linalg.norm(y) * norm
    assert sym_eig(A.dense())[0][0] > 0


def test_operator_input_checks():
    with pytest.raises(InputError):
        dense_operator([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(InputError):
        laplacian_1d(4).apply(np.ones(5))
    with pytest.raises(NumericalError):
        dense_operator([[np.inf, 0], [0, 1]])
    with pytest.raises(NumericalError):
        diagonal_operator([1.0, 2.0]).apply(np.array([np.nan, 1.0]))


def test_dense_cap():
    with pytest.raises(InputError):
        laplacian_1d(5000).dense()


def test_mp_matvec_exact():
    # the extended-precision dense product rounds once: compare with rationals
    from fractions import Fraction
    rng = np.random.default_rng(5)
    M = random_spd_with_kappa(12, 10.0, rng)
    A = dense_operator(M)
    with working_precision(128):
        x = to_mp(rng.standard_normal(12)) / 7
        y = A.apply(x)
        for i in range(12):
            exact = sum(Fraction(float(A.dense()[i, j])) * Fraction(*x[j].as_integer_ratio())
                        for j in range(12))
            assert abs(Fraction(*y[i].as_integer_ratio()) - exact) <= abs(exact) * 2.0 ** -127
    np.testing.assert_allclose(to_float(y), A.dense() @ to_float(x), rtol=1e-14)


# ---------------------------------------------------------------- eigensolver

def test_sym_eig_examples():
    w, V = sym_eig(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_allclose(w, [1, 2, 3], atol=1e-15)
    w, _ = sym_eig(np.eye(7))
    np.testing.assert_allclose(w, np.ones(7), atol=1e-15)
    T = 2 * np.eye(3) - np.eye(3, k=1) - np.eye(3, k=-1)
    w, _ = sym_eig(T)
    # 2 - 2 cos(k pi / 4), k = 1, 2, 3
    np.testing.assert_allclose(w, [2 - math.sqrt(2), 2, 2 + math.sqrt(2)], atol=1e-14)
    # characteristic polynomial cross-check
    np.testing.assert_allclose(np.sort(np.roots(np.poly(T))), w, atol=1e-12)


def test_sym_eig_laplacian_formula():
    n = 40
    T = laplacian_1d(n).dense()
    w, _ = sym_eig(T)
    k = np.arange(1, n + 1)
    np.testing.assert_allclose(w, np.sort(2 - 2 * np.cos(k * np.pi / (n + 1))), atol=1e-13)


@pytest.mark.parametrize("n", [1, 2, 5, 17, 64, JACOBI_MAX])
def test_sym_eig_random(n):
    rng = np.random.default_rng(n)
    B = rng.standard_normal((n, n))
    M = B + B.T
    w, V = sym_eig(M)
    assert np.all(np.diff(w) >= 0)
    normM = np.linalg.norm(M)
    assert np.linalg.norm(V @ np.diag(w) @ V.T - M) <= 1e-9 * normM
    assert np.abs(V.T @ V - np.eye(n)).max() <= 1e-10
    res = np.linalg.norm(M @ V - V * w, axis=0)
    assert res.max() <= 1e-10 * np.linalg.norm(M, 2)
    np.testing.assert_allclose(w, np.linalg.eigvalsh(M), atol=1e-11 * np.abs(w).max())


def test_sym_eig_lapack_path():
    rng = np.random.default_rng(2)
    B = rng.standard_normal((JACOBI_MAX + 10,) * 2)
    M = B + B.T
    w, V = sym_eig(M)
    assert np.linalg.norm(V @ np.diag(w) @ V.T - M) <= 1e-9 * np.linalg.norm(M)


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(InputError):
        sym_eig([[1.0, 1.0], [0.0, 1.0]])
    with pytest.raises(InputError):
        sym_eig(np.ones((2, 3)))


def test_sym_eig_graded_and_degenerate():
    M = np.diag([1e-8, 1.0, 1e8])
    w, _ = sym_eig(M)
    np.testing.assert_allclose(w, [1e-8, 1.0, 1e8], rtol=1e-12)
    w, V = sym_eig(np.zeros((4, 4)))
    np.testing.assert_array_equal(w, np.zeros(4))
    np.testing.assert_allclose(V.T @ V, np.eye(4))


# ---------------------------------------------------------------- condition numbers

def test_generalized_condition_examples():
    rng = np.random.default_rng(9)
    M = random_spd_with_kappa(8, 30.0, rng)
    A = dense_operator(M)
    assert generalized_condition(A, np.linalg.inv(M)) == pytest.approx(1.0, abs=1e-10)
    A2 = diagonal_operator([1.0, 2.0])
    assert generalized_condition(A2, lambda r: r) == pytest.approx(2.0, abs=1e-14)


def test_generalized_condition_matches_pencil():
    rng = np.random.default_rng(4)
    A = dense_operator(random_spd_with_kappa(10, 50.0, rng))
    B = random_spd_with_kappa(10, 20.0, rng)
    Binv = np.linalg.inv(B)
    kappa, w = generalized_condition(A, Binv, return_eigs=True)
    ref = np.sort(np.linalg.eigvals(Binv @ A.dense()).real)
    np.testing.assert_allclose(w, ref, rtol=1e-10)
    assert kappa == pytest.approx(ref[-1] / ref[0], rel=1e-10)


def test_generalized_condition_indefinite():
    A = diagonal_operator([1.0, 2.0])
    with pytest.raises(IndefiniteError):
        generalized_condition(A, np.diag([1.0, -1.0]))


def test_metric_symmetrize_similarity():
    rng = np.random.default_rng(6)
    M = random_spd_with_kappa(5, 10.0, rng)
    metric = Metric(dense_operator(M))
    S = random_spd_with_kappa(5, 4.0, rng)
    # C = M^{-1} S is self-adjoint in the M inner product
    C = np.linalg.solve(M, S)
    w, _ = sym_eig(metric_symmetrize(metric, C))
    np.testing.assert_allclose(w, np.sort(np.linalg.eigvals(C).real), rtol=1e-10)


def test_materialize():
    A = laplacian_1d(6)
    np.testing.assert_array_equal(materialize(A.apply, 6), A.dense())
