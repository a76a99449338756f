import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cocokit.linalg_core import (
    ridge_gram_inverse_apply,
    ridge_gram_inverse_apply_fast,
    ridge_residual,
    thin_svd,
)
from oracles import rel_err

SOLVERS = [ridge_gram_inverse_apply, ridge_gram_inverse_apply_fast]


def test_thin_svd_diagonal():
    s = thin_svd(np.diag([3.0, 2.0]))
    np.testing.assert_allclose(s.S, [3, 2])
    np.testing.assert_allclose(np.abs(s.U), np.eye(2))
    np.testing.assert_allclose(np.abs(s.V), np.eye(2))
    np.testing.assert_allclose(s.reconstruct(), np.diag([3.0, 2.0]))


def test_thin_svd_identity():
    np.testing.assert_allclose(thin_svd(np.eye(3)).S, [1, 1, 1])


@pytest.mark.parametrize("shape", [(5, 8), (8, 5), (1, 4), (6, 6)])
def test_thin_svd_contract(rng, shape):
    M = rng.standard_normal(shape)
    s = thin_svd(M)
    r = min(shape)
    assert s.U.shape == (shape[0], r) and s.S.shape == (r,) and s.V.shape == (shape[1], r)
    np.testing.assert_allclose(s.U.T @ s.U, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(s.V.T @ s.V, np.eye(r), atol=1e-10)
    assert rel_err(s.reconstruct(), M) < 1e-8
    assert np.all(s.S >= 0) and np.all(np.diff(s.S) <= 0)


def test_thin_svd_rejects_nonfinite():
    with pytest.raises(ValueError):
        thin_svd(np.array([[1.0, np.nan]]))


@pytest.mark.parametrize("solve", SOLVERS)
def test_ridge_identity(solve):
    np.testing.assert_allclose(solve(np.eye(2), 1.0, 1.0, np.eye(2)), 0.5 * np.eye(2), atol=1e-12)


@pytest.mark.parametrize("solve", SOLVERS)
def test_ridge_zero_gram(rng, solve):
    B = rng.standard_normal((5, 3))
    np.testing.assert_allclose(solve(np.zeros((4, 5)), 2.5, 2.0, B), B / 2, atol=1e-12)
    np.testing.assert_allclose(solve(np.zeros((4, 5)), 1.0, 1.0, B), B, atol=1e-12)


@pytest.mark.parametrize("solve", SOLVERS)
def test_ridge_matches_explicit_inverse(rng, solve):
    X = rng.standard_normal((4, 6))
    B = rng.standard_normal((6, 3))
    oracle = np.linalg.inv(1.3 * X.T @ X + 0.7 * np.eye(6)) @ B
    assert rel_err(solve(X, 1.3, 0.7, B), oracle) < 1e-8


@pytest.mark.parametrize("solve", SOLVERS)
def test_ridge_vector_rhs(rng, solve):
    X = rng.standard_normal((3, 5))
    b = rng.standard_normal(5)
    r = solve(X, 1.0, 0.5, b)
    assert r.shape == (5,)
    assert ridge_residual(X, 1.0, 0.5, b[:, None], r[:, None]) < 1e-10


@pytest.mark.parametrize("solve", SOLVERS)
@pytest.mark.parametrize("lam", [0.0, -1.0])
def test_ridge_rejects_nonpositive_lambda(solve, lam):
    with pytest.raises(ValueError):
        solve(np.eye(2), 1.0, lam, np.eye(2))


def test_fast_path_large_m_spot_check(rng):
    d, m = 8, 5000
    X = rng.standard_normal((d, m))
    B = rng.standard_normal((m, 2))
    R = ridge_gram_inverse_apply_fast(X, 1.0, 0.3, B)
    # direct check of the normal equations on 10 random rows
    rows = rng.choice(m, 10, replace=False)
    lhs = (X.T[rows] @ (X @ R)) + 0.3 * R[rows]
    np.testing.assert_allclose(lhs, B[rows], rtol=1e-8, atol=1e-8)


def test_fast_path_rank_deficient(rng):
    # rank 2 in a 6-dim feature space: zero singular values must not break it
    X = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 9))
    B = rng.standard_normal((9, 4))
    assert rel_err(ridge_gram_inverse_apply_fast(X, 1.0, 1e-2, B),
                   ridge_gram_inverse_apply(X, 1.0, 1e-2, B)) < 1e-8


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 16), m=st.integers(1, 256), lam=st.sampled_from([1e-3, 1e-1, 1.0, 10.0]),
       s=st.floats(0.1, 10.0), seed=st.integers(0, 2**31 - 1))
def test_fast_and_direct_agree(d, m, lam, s, seed):
    r = np.random.default_rng(seed)
    X = r.standard_normal((d, m))
    B = r.standard_normal((m, 3))
    direct = ridge_gram_inverse_apply(X, s, lam, B)
    fast = ridge_gram_inverse_apply_fast(X, s, lam, B)
    assert rel_err(fast, direct) < 1e-8
    assert ridge_residual(X, s, lam, B, direct) < 1e-8
    assert ridge_residual(X, s, lam, B, fast) < 1e-8
