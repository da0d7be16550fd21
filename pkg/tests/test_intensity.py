import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from col0rme.forward import ForwardOperator, GridGeometry, PsfSpec, unvec, vec
from col0rme.intensity import (
    IntensityParams,
    build_restricted_gradient_form,
    default_mu,
    lower_median,
    objective,
    objective_gradient,
    restricted_psi,
    run_intensity_estimation,
    solve_x,
    update_b,
)
from col0rme.metrics import psnr


def gradient_norm_oracle(x_img, mask):
    """Half the double sum over support pixels and their 8-neighbours in the support."""
    L = mask.shape[0]
    total = 0.0
    for r in range(L):
        for c in range(L):
            if not mask[r, c]:
                continue
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == dc == 0:
                        continue
                    r2, c2 = r + dr, c + dc
                    if 0 <= r2 < L and 0 <= c2 < L and mask[r2, c2]:
                        total += (x_img[r, c] - x_img[r2, c2]) ** 2
    return 0.5 * total


def random_mask(rng, L, p=0.35):
    mask = rng.random((L, L)) < p
    mask[0, 0] = True
    return mask


def test_two_adjacent_pixels():
    geom = GridGeometry(2, 2)
    mask = np.zeros((4, 4), dtype=bool)
    mask[1, 1] = mask[2, 2] = True  # diagonal neighbours
    form = build_restricted_gradient_form(mask, geom)
    assert form.value(np.array([0.0, 2.0])) == pytest.approx(4.0)


def test_constant_and_isolated():
    geom = GridGeometry(2, 2)
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0:3] = True
    mask[3, 3] = True  # isolated
    form = build_restricted_gradient_form(mask, geom)
    x = np.full(4, 5.0)
    assert form.value(x) == 0.0
    x[-1] = 100.0  # the isolated pixel is last in column-major order
    assert form.indices[-1] == 3 + 4 * 3
    assert form.value(x) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_gradient_form_matches_double_sum(seed):
    rng = np.random.default_rng(seed)
    mask = random_mask(rng, 8)
    form = build_restricted_gradient_form(mask, GridGeometry(4, 2))
    x = rng.normal(size=len(form))
    img = np.zeros(64)
    img[form.indices] = x
    assert form.value(x) == pytest.approx(gradient_norm_oracle(unvec(img, 8), mask), rel=1e-12, abs=1e-12)


def test_empty_support_rejected():
    with pytest.raises(ValueError):
        build_restricted_gradient_form(np.zeros((8, 8), dtype=bool), GridGeometry(4, 2))
    with pytest.raises(ValueError):
        build_restricted_gradient_form(np.array([64]), GridGeometry(4, 2))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_objective_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    geom = GridGeometry(4, 2)
    op = ForwardOperator.from_psf(geom, PsfSpec(229.0))
    form = build_restricted_gradient_form(random_mask(rng, 8), geom)
    P = restricted_psi(op, form.indices)
    mean = rng.random(16) * 10
    x = rng.random(len(form))
    b, mu = rng.random(), rng.uniform(0.01, 2)
    grad_x, grad_b = objective_gradient(mean, P, form, x, b, mu)
    h = 1e-6
    for i in range(len(form)):
        e = np.zeros(len(form))
        e[i] = h
        fd = (objective(mean, P, form, x + e, b, mu) - objective(mean, P, form, x - e, b, mu)) / (2 * h)
        assert abs(fd - grad_x[i]) <= 1e-5 * max(1.0, abs(grad_x[i]))
    fd = (objective(mean, P, form, x, b + h, mu) - objective(mean, P, form, x, b - h, mu)) / (2 * h)
    assert abs(fd - grad_b) <= 1e-5 * max(1.0, abs(grad_b))


def test_identity_columns_projection():
    geom = GridGeometry(4, 1)
    op = ForwardOperator(geom, np.ones((1, 1)))
    mean = np.linspace(-3, 3, 16)
    idx = np.array([0, 3, 5, 10, 15])
    form = build_restricted_gradient_form(idx, geom)
    P = restricted_psi(op, form.indices)
    x = solve_x(mean, P, form, 0.0, 0.0, IntensityParams(mu=0.0))
    assert np.allclose(x, np.maximum(0, mean[idx]), atol=1e-8)


@pytest.mark.parametrize("seed", range(6))
def test_x_step_kkt(seed):
    rng = np.random.default_rng(seed)
    geom = GridGeometry(4, 2)
    op = ForwardOperator.from_psf(geom, PsfSpec(229.0))
    form = build_restricted_gradient_form(random_mask(rng, 8, 0.5), geom)
    P = restricted_psi(op, form.indices)
    mean = rng.normal(size=16) * 5 + 2
    b, mu = 1.0, 0.05
    x = solve_x(mean, P, form, b, mu, IntensityParams(mu=mu, inner_max=200000, inner_tol=1e-15))
    g = P.T @ (P @ x + b - mean) + mu * form.gradient(x)
    assert np.all(np.abs(g[x > 0]) < 1e-6)
    assert np.all(g[x == 0] >= -1e-6)
    # generic bound-constrained solver reaches the same value
    f = lambda z: objective(mean, P, form, z, b, mu)  # noqa: E731
    ref = minimize(f, np.zeros(len(form)), jac=lambda z: P.T @ (P @ z + b - mean) + mu * form.gradient(z),
                   bounds=[(0, None)] * len(form), method="L-BFGS-B", options={"ftol": 1e-15, "gtol": 1e-12})
    assert f(x) <= ref.fun + 1e-8 * max(1.0, abs(ref.fun))


def test_large_mu_gives_constant_fit():
    geom = GridGeometry(4, 2)
    op = ForwardOperator.from_psf(geom, PsfSpec(229.0))
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, 3:5] = True  # connected block
    form = build_restricted_gradient_form(mask, geom)
    P = restricted_psi(op, form.indices)
    mean = np.random.default_rng(0).random(16) * 20 + 5
    b = 1.0
    # best constant c * 1 on the support: least squares along P 1
    u = P @ np.ones(len(form))
    c = max(0.0, float(u @ (mean - b)) / float(u @ u))
    # first-order steps crawl along the Laplacian null space here, so solve exactly
    x = solve_x(mean, P, form, b, 1e8 * mean.max(), IntensityParams(x_solver="active-set"))
    assert np.allclose(x, c, rtol=1e-4)


def test_update_b_examples():
    rng = np.random.default_rng(1)
    P = rng.random((16, 5))
    x = rng.random(5)
    assert update_b(P @ x, P, x) == pytest.approx(0.0, abs=1e-14)
    assert update_b(P @ x + 3.5, P, x) == pytest.approx(3.5)
    assert update_b(P @ x - 1.0, P, x) == 0.0


def test_lower_median():
    assert lower_median(np.array([4.0, 1.0, 3.0, 2.0])) == 2.0
    assert lower_median(np.array([5.0, 1.0, 3.0])) == 3.0


def test_default_mu_rules():
    P = np.diag([2.0, 1.0])
    mean = np.array([1.0, -4.0])
    assert default_mu(mean, P, 0.1, "data") == pytest.approx(0.4)
    assert default_mu(mean, P, 0.1, "spectral") == pytest.approx(0.4, rel=1e-5)
    with pytest.raises(ValueError):
        IntensityParams(mu_rule="bogus")


def exact_instance(seed=0):
    geom = GridGeometry(8, 2, 100.0)
    op = ForwardOperator.from_psf(geom, PsfSpec(229.0))
    rng = np.random.default_rng(seed)
    # a few well-separated emitters keep Psi_Omega well conditioned
    x_true = np.zeros((16, 16))
    for r, c in ((3, 3), (3, 12), (12, 4), (11, 11), (7, 8)):
        x_true[r, c] = rng.uniform(500, 1500)
    b_true = 100.0
    mean = vec(op.apply_psi(x_true)) + b_true
    return op, x_true, b_true, mean


def test_noiseless_exact_support_recovery():
    op, x_true, b_true, mean = exact_instance()
    params = IntensityParams(mu=0.0, max_alt=500, tol=1e-12, inner_max=20000, inner_tol=1e-14)
    res = run_intensity_estimation(mean, x_true > 0, op, params)
    assert psnr(res.x, x_true) > 60
    assert res.b == pytest.approx(b_true, rel=1e-4)
    assert np.all(res.x[x_true == 0] == 0)
    assert np.all(np.diff(res.objective_trace) <= 1e-10 * res.objective_trace[0])


def test_joint_stationarity():
    op, x_true, _, mean = exact_instance(1)
    mean = mean + np.random.default_rng(2).normal(size=mean.size)
    params = IntensityParams(mu=0.5, max_alt=500, tol=1e-12, inner_max=20000, inner_tol=1e-14)
    res = run_intensity_estimation(mean, x_true > 0, op, params)
    form = build_restricted_gradient_form(x_true > 0, op.geometry)
    P = restricted_psi(op, form.indices)
    x = vec(res.x)[form.indices]
    before = objective(mean, P, form, x, res.b, 0.5)
    x2 = solve_x(mean, P, form, res.b, 0.5, params, x0=x)
    b2 = update_b(mean, P, x2)
    after = objective(mean, P, form, x2, b2, 0.5)
    assert abs(before - after) <= 1e-8 * before


def test_scaling():
    op, x_true, _, mean = exact_instance(2)
    mean = mean + np.random.default_rng(3).normal(size=mean.size) * 5
    params = IntensityParams(mu=0.3, max_alt=500, tol=1e-13, inner_max=50000, inner_tol=1e-15)
    a = run_intensity_estimation(mean, x_true > 0, op, params)
    c = 7.0
    b = run_intensity_estimation(c * mean, x_true > 0, op, params)
    assert np.allclose(b.x, c * a.x, rtol=1e-8, atol=1e-8 * c * a.x.max())
    assert b.b == pytest.approx(c * a.b, rel=1e-8)


def test_empty_support_warns():
    op, _, _, mean = exact_instance()
    with pytest.warns(UserWarning):
        res = run_intensity_estimation(mean, np.zeros((16, 16), dtype=bool), op)
    assert res.status == "empty-support"
    assert not res.x.any()
    assert res.b == pytest.approx(mean.mean())
