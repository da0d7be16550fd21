import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import nnls

from col0rme._qp import nonneg_active_set, nonneg_fista


def random_problem(seed, m=12, n=6):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(m, n))
    y = rng.normal(size=m)
    w = rng.random(n) * 0.5
    return B, y, w


def oracle(B, y, w):
    # min 0.5||Bx - y||^2 + w.x over x >= 0 is NNLS on the shifted data when w is in range(B^T)
    H = B.T @ B
    g = B.T @ y - w
    y_shift = np.linalg.lstsq(B.T, g, rcond=None)[0]
    return nnls(B, y_shift)[0], H, g


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_active_set_matches_nnls(seed):
    B, y, w = random_problem(seed)
    x_ref, H, _ = oracle(B, y, w)
    res = nonneg_active_set(H, B.T @ y, w)
    assert res.converged
    assert np.allclose(res.x, x_ref, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_fista_kkt(seed):
    B, y, w = random_problem(seed)
    H = B.T @ B
    lip = 1.01 * np.linalg.eigvalsh(H)[-1]
    res = nonneg_fista(H.__matmul__, B.T @ y, w, lip, np.zeros(6), 20000, 1e-13)
    grad = H @ res.x - B.T @ y + w
    pos = res.x > 1e-9
    assert np.all(np.abs(grad[pos]) < 1e-6)
    assert np.all(grad[~pos] > -1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_warm_start_never_increases(seed):
    B, y, w = random_problem(seed)
    H = B.T @ B
    x0 = np.abs(np.random.default_rng(seed + 1).normal(size=6))
    f = lambda x: 0.5 * x @ H @ x - (B.T @ y - w) @ x  # noqa: E731
    lip = 1.01 * np.linalg.eigvalsh(H)[-1]
    for res in (
        nonneg_active_set(H, B.T @ y, w, x0),
        nonneg_fista(H.__matmul__, B.T @ y, w, lip, x0, 5, 1e-12),
    ):
        assert f(res.x) <= f(x0) + 1e-12
        assert np.all(res.x >= 0)


def test_zero_lipschitz_returns_projection():
    res = nonneg_fista(lambda x: 0 * x, np.zeros(3), 0.0, 0.0, np.array([-1.0, 2.0, 0.5]), 10, 1e-6)
    assert res.x.tolist() == [0.0, 2.0, 0.5]


def test_non_finite_rejected():
    with pytest.raises(FloatingPointError):
        nonneg_active_set(np.eye(2), np.array([np.nan, 1.0]), 0.0)
    with pytest.raises(FloatingPointError):
        nonneg_fista(np.eye(2).__matmul__, np.array([np.inf, 1.0]), 0.0, 1.0, np.zeros(2), 5, 1e-6)


def test_singular_hessian():
    # duplicated column: any split is optimal, the objective value is what matters
    B = np.array([[1.0, 1.0], [0.0, 0.0]])
    y = np.array([2.0, 0.0])
    res = nonneg_active_set(B.T @ B, B.T @ y, 0.0)
    assert np.allclose(B @ res.x, y)
