import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import nnls

from col0rme.covariance import stack_statistics
from col0rme.forward import ForwardOperator, GridGeometry, PsfSpec
from col0rme.simulator import (
    AcquisitionConfig,
    EmitterKinetics,
    GroundTruth,
    render_stack,
    sample_emitter_traces,
)
from col0rme.support import (
    Cel0Params,
    CovarianceSystem,
    cel0_penalty,
    cel0_weights,
    extract_support,
    lambda_max,
    lambda_noise_floor,
    run_support_estimation,
    solve_cel0,
    solve_weighted_l1,
    update_s,
)


def penalty_oracle(r, lam, a):
    # term by term from the definition
    total = 0.0
    for ri, ai in zip(np.abs(r), a):
        bp = math.sqrt(2 * lam) / ai
        total += lam - 0.5 * ai**2 * (ri - bp) ** 2 * (ri <= bp)
    return total


@pytest.fixture(scope="module")
def small_op():
    return ForwardOperator.from_psf(GridGeometry(4, 2, 100.0), PsfSpec(229.0), mode="dense")


def random_system(op, seed, noise=0.5):
    rng = np.random.default_rng(seed)
    A = op.khatri_rao()
    r = np.zeros(op.n_fine)
    r[rng.choice(op.n_fine, 3, replace=False)] = rng.uniform(1, 5, 3)
    v = np.eye(op.n_coarse).ravel(order="F")
    E = rng.normal(size=(op.n_coarse, op.n_coarse)) * 1e-3
    r_y = A @ r + noise * v + (E + E.T).ravel(order="F")
    return CovarianceSystem.from_dense(A, r_y, v), A, r_y, v


# -- penalty and weights ------------------------------------------------------


def test_penalty_at_zero():
    a = np.array([0.3, 1.0, 2.5])
    assert cel0_penalty(np.zeros(3), 0.7, a) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 10.0))
def test_penalty_matches_definition(seed, lam):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.1, 3.0, 8)
    r = rng.normal(size=8) * math.sqrt(2 * lam) / a
    assert cel0_penalty(r, lam, a) == pytest.approx(penalty_oracle(r, lam, a), rel=1e-10, abs=1e-12)


def test_penalty_saturates_at_lambda():
    a = np.array([2.0])
    lam = 0.5
    bp = math.sqrt(2 * lam) / 2.0
    for t in (bp, 1.5 * bp, 100.0):
        assert cel0_penalty(np.array([t]), lam, a) == pytest.approx(lam, rel=1e-14)


def test_penalty_monotone_on_grid():
    a = np.array([0.7])
    grid = np.linspace(0, 3, 301)
    vals = [cel0_penalty(np.array([t]), 0.4, a) for t in grid]
    assert np.all(np.diff(vals) >= -1e-15)
    # even in r
    assert cel0_penalty(np.array([-0.5]), 0.4, a) == cel0_penalty(np.array([0.5]), 0.4, a)


def test_penalty_rejects_bad_lambda():
    with pytest.raises(ValueError):
        cel0_penalty(np.zeros(2), 0.0, np.ones(2))


def test_weights_at_zero_and_past_breakpoint():
    a = np.array([0.5, 1.0, 4.0])
    lam = 0.3
    assert np.allclose(cel0_weights(np.zeros(3), lam, a), math.sqrt(2 / lam) * a)
    past = math.sqrt(2 * lam) / a * 1.01
    assert np.all(cel0_weights(past, lam, a) == 0.0)
    assert np.all(cel0_weights(math.sqrt(2 * lam) / a, lam, a) == 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_weights_are_penalty_slope(seed):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(0.01, 5)
    a = rng.uniform(0.2, 3.0, 5)
    bp = math.sqrt(2 * lam) / a
    r = rng.uniform(0.05, 0.95) * bp
    w = cel0_weights(r, lam, a)
    h = 1e-6 * bp
    for i in range(5):
        up, dn = r.copy(), r.copy()
        up[i] += h[i]
        dn[i] -= h[i]
        fd = (cel0_penalty(up, lam, a) - cel0_penalty(dn, lam, a)) / (2 * h[i])
        assert abs(lam * w[i] - fd) < 1e-6 * max(1.0, abs(fd))


# -- weighted l1 --------------------------------------------------------------


def test_identity_operator_soft_threshold():
    op = ForwardOperator(GridGeometry(6, 1), np.ones((1, 1)))
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(40, 6, 6)) * rng.uniform(0.5, 3, size=(1, 6, 6))
    stats = stack_statistics(frames)
    system = CovarianceSystem.from_statistics(stats, op)
    lam = 0.8
    for solver in ("fista", "active-set"):
        r, _ = solve_weighted_l1(system, 0.0, np.ones(36), lam, Cel0Params(lam=lam, inner_tol=1e-14, inner_max=5000, inner_solver=solver))
        expected = np.maximum(0.0, np.diag(stats.cov_matrix) - lam)
        assert np.allclose(r, expected, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_zero_weights_give_nnls_kkt(small_op, seed):
    system, A, r_y, v = random_system(small_op, seed)
    s = 0.3
    params = Cel0Params(lam=1.0, inner_max=200000, inner_tol=1e-15, inner_solver="active-set")
    r, _ = solve_weighted_l1(system, s, np.zeros(system.n), 1.0, params)
    grad = A.T @ (A @ r - r_y + s * v)
    scale = np.abs(A.T @ r_y).max()
    pos = r > 0
    assert np.all(np.abs(grad[pos]) < 1e-6 * scale)
    assert np.all(grad[~pos] > -1e-6 * scale)
    # same optimum value as a generic NNLS solver
    ref = nnls(A, r_y - s * v, maxiter=10000)[0]
    f = lambda x: 0.5 * np.sum((A @ x - r_y + s * v) ** 2)  # noqa: E731
    assert f(r) <= f(ref) * (1 + 1e-8) + 1e-12


def test_huge_lambda_gives_zero(small_op):
    system, *_ = random_system(small_op, 1)
    lam = 1e12 * system.data_sq
    r, _ = solve_weighted_l1(system, 0.0, np.ones(system.n), lam, Cel0Params(lam=lam))
    assert not np.any(r)
    res = solve_cel0(system, Cel0Params(lam=lam))
    assert not np.any(res.r_x) and not res.support.any()


def test_weighted_l1_input_checks(small_op):
    system, *_ = random_system(small_op, 2)
    p = Cel0Params(lam=1.0)
    with pytest.raises(ValueError):
        solve_weighted_l1(system, -1.0, np.ones(system.n), 1.0, p)
    with pytest.raises(ValueError):
        solve_weighted_l1(system, 0.0, -np.ones(system.n), 1.0, p)
    with pytest.raises(ValueError):
        solve_weighted_l1(system, math.nan, np.ones(system.n), 1.0, p)


# -- s update -----------------------------------------------------------------


def test_update_s_examples(small_op):
    A = small_op.khatri_rao()
    v = np.eye(16).ravel(order="F")
    r = np.random.default_rng(0).random(64)
    for c, expected in ((2.5, 2.5), (0.0, 0.0), (-1.0, 0.0)):
        system = CovarianceSystem.from_dense(A, A @ r + c * v, v)
        assert update_s(system, r) == pytest.approx(expected, abs=1e-12)


# -- the full alternation -----------------------------------------------------


def test_descent_and_nonnegativity(small_op):
    for seed in range(5):
        system, *_ = random_system(small_op, seed)
        lam = 1e-3 * lambda_max(system)
        res = solve_cel0(system, Cel0Params(lam=lam))
        assert np.all(res.r_x >= 0) and res.s >= 0
        assert np.all(np.diff(res.objective_trace) <= 1e-10 * system.data_sq)
        assert np.all(np.diff(res.l1_trace) <= 1e-10 * system.data_sq)


def test_needs_explicit_lambda(small_op):
    system, *_ = random_system(small_op, 0)
    with pytest.raises(ValueError):
        solve_cel0(system, Cel0Params(lam=None))
    with pytest.raises(ValueError):
        Cel0Params(lam=-1.0)
    with pytest.raises(ValueError):
        Cel0Params(lam=1.0, outer_max=0)


def test_fixed_point_past_breakpoints(small_op):
    system, *_ = random_system(small_op, 3, noise=0.0)
    lam = 1e-6 * lambda_max(system)
    params = Cel0Params(lam=lam, inner_solver="active-set", outer_tol=1e-12)
    res = solve_cel0(system, params)
    omega = cel0_weights(res.r_x, lam, system.norms)
    assert np.all(omega[res.r_x > 0] == 0)
    r2, _ = solve_weighted_l1(system, res.s, omega, lam, params, init=res.r_x)
    s2 = update_s(system, r2)
    before = system.objective(res.r_x, res.s, lam)
    after = system.objective(r2, s2, lam)
    assert abs(after - before) <= 1e-8 * before


@pytest.mark.parametrize("solver", ["active-set", "fista"])
@pytest.mark.parametrize("c", [3.0, 0.1])
def test_scaling_homogeneity(small_op, c, solver):
    system, A, r_y, v = random_system(small_op, 4)
    lam = 1e-2 * lambda_max(system)
    # the scale-free l1 start; with omega = 1 the start itself is not homogeneous
    params = Cel0Params(lam=lam, inner_solver=solver, init_weights="cel0")
    base = solve_cel0(system, params)
    scaled = solve_cel0(
        CovarianceSystem.from_dense(A, c * r_y, v),
        Cel0Params(lam=lam * c * c, inner_solver=solver, init_weights="cel0"),
    )
    assert np.array_equal(base.support, scaled.support)
    assert np.allclose(scaled.r_x, c * base.r_x, rtol=1e-8, atol=1e-8 * c * base.r_x.max())
    assert scaled.s == pytest.approx(c * base.s, rel=1e-8, abs=1e-12)


def test_constant_stack_gives_empty_support():
    op = ForwardOperator.from_psf(GridGeometry(4, 2), PsfSpec(229.0))
    frames = np.full((10, 4, 4), 7.0)
    res = run_support_estimation(stack_statistics(frames), op, Cel0Params(lam=1.0))
    assert not np.any(res.r_x) and res.s == 0.0 and not res.support.any()


def test_single_emitter_variance_recovered():
    geom = GridGeometry(8, 4, 100.0)
    psf = PsfSpec(229.0)
    op = ForwardOperator.from_psf(geom, psf)
    cfg = AcquisitionConfig(geometry=geom, psf=psf, n_frames=1000, background=100.0, snr_db=None)
    traces, _ = sample_emitter_traces(EmitterKinetics(tau_bleach_s=1e9), 1, 1000, 100.0, np.random.default_rng(1))
    stack, gt = render_stack(GroundTruth(np.array([[14, 17]]), 32, 25.0), traces, cfg, op)
    system = CovarianceSystem.from_statistics(stack_statistics(stack.frames), op)
    res = solve_cel0(system, Cel0Params(lam=1e-6 * lambda_max(system)))
    i = 14 + 32 * 17
    assert res.support_indices.tolist() == [i]
    assert res.r_x[i] == pytest.approx(gt.variance[14, 17], rel=0.05)


def test_extract_support_rules():
    r = np.array([0.0, 1e-5, 0.5, 1.0])
    assert extract_support(r, Cel0Params(lam=1.0)).tolist() == [False, False, True, True]
    assert extract_support(r, Cel0Params(lam=1.0, support_threshold=0.7)).tolist() == [False, False, False, True]
    assert not extract_support(np.zeros(3), Cel0Params(lam=1.0)).any()


def test_noise_floor_lambda_gives_empty_support():
    geom = GridGeometry(12, 4, 100.0)
    op = ForwardOperator.from_psf(geom, PsfSpec(229.0))
    rng = np.random.default_rng(3)
    frames = 100.0 + 10.0 * rng.normal(size=(500, 12, 12))
    system = CovarianceSystem.from_statistics(stack_statistics(frames), op)
    lam = lambda_noise_floor(100.0, 500)
    # r = 0 is a fixed point exactly when lam exceeds the largest single-pixel gain
    assert lam > lambda_max(system)
    res = solve_cel0(system, Cel0Params(lam=lam))
    assert not res.support.any()
    assert res.s == pytest.approx(100.0, rel=0.05)
    assert lambda_noise_floor(100.0, 500, z=3.0) == pytest.approx(lam / 4)
    with pytest.raises(ValueError):
        lambda_noise_floor(1.0, 1)
