"""Intensity and constant background on a known support.

Minimises  0.5 ||ybar - Psi_Omega x - b 1||^2 + mu ||grad_Omega x||^2  over x >= 0,
b >= 0 by alternating an accelerated projected-gradient x-step with the
closed-form b-step.  The smoothness term sums squared differences over
8-connected pairs of support pixels, i.e. ``x^T L_Omega x`` with ``L_Omega`` the
graph Laplacian of that neighbourhood graph.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from ._qp import nonneg_active_set, nonneg_fista
from .forward import ForwardOperator, GridGeometry, power_iteration, unvec, vec

# each unordered 8-neighbour pair is generated once from these half-plane offsets
_HALF_OFFSETS = ((0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class IntensityParams:
    mu: float | None = None  # None: chosen by ``mu_rule``
    mu_rel: float = 0.01
    mu_rule: str = "spectral"  # mu_rel * lambda_max(Psi_Omega^T Psi_Omega); "data": mu_rel * ||Psi_Omega^T ybar||_inf
    max_alt: int = 50
    tol: float = 1e-5
    inner_max: int = 2000
    inner_tol: float = 1e-9
    x_solver: str = "fista"  # or "active-set": exact, for badly conditioned (very large mu) x-steps

    def __post_init__(self):
        if self.mu is not None and not self.mu >= 0:
            raise ValueError("mu must be >= 0")
        if self.mu_rule not in ("spectral", "data"):
            raise ValueError(f"unknown mu rule {self.mu_rule!r}")
        if self.x_solver not in ("fista", "active-set"):
            raise ValueError(f"unknown x solver {self.x_solver!r}")
        if self.max_alt < 1 or self.inner_max < 1:
            raise ValueError("iteration caps must be >= 1")


@dataclass
class IntensityResult:
    x: np.ndarray  # (L, L), zero off the support
    b: float
    objective_trace: list[float] = field(default_factory=list)
    status: str = "ok"
    mu: float = 0.0
    n_alt: int = 0


class RestrictedGradient:
    """Quadratic form ``||grad_Omega x||^2 = x^T L x`` over support pixels (in column-major order)."""

    def __init__(self, indices: np.ndarray, fine_size: int):
        self.indices = np.asarray(indices, dtype=int)
        self.fine_size = fine_size
        L = fine_size
        n = len(self.indices)
        pos = np.full(L * L, -1)
        pos[self.indices] = np.arange(n)
        rows, cols = self.indices % L, self.indices // L
        src, dst = [], []
        for dr, dc in _HALF_OFFSETS:
            r2, c2 = rows + dr, cols + dc
            ok = (r2 >= 0) & (r2 < L) & (c2 >= 0) & (c2 < L)
            j = np.full(n, -1)
            j[ok] = pos[r2[ok] + L * c2[ok]]
            hit = j >= 0
            src.append(np.arange(n)[hit])
            dst.append(j[hit])
        src, dst = np.concatenate(src), np.concatenate(dst)
        self.edges = np.stack([src, dst], axis=1)
        m = len(src)
        incidence = sparse.csr_matrix(
            (np.r_[np.ones(m), -np.ones(m)], (np.r_[np.arange(m), np.arange(m)], np.r_[src, dst])),
            shape=(m, n),
        )
        self.incidence = incidence
        self.laplacian = (incidence.T @ incidence).tocsr()

    def __len__(self) -> int:
        return len(self.indices)

    def value(self, x: np.ndarray) -> float:
        d = self.incidence @ x
        return float(d @ d)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (self.laplacian @ x)


def build_restricted_gradient_form(support, geom: GridGeometry) -> RestrictedGradient:
    """``support`` is a boolean ``(L, L)`` mask or an array of column-major fine indices."""
    support = np.asarray(support)
    L = geom.fine_size
    if support.dtype == bool:
        if support.shape != (L, L):
            raise ValueError(f"support mask must be {L}x{L}")
        indices = np.flatnonzero(vec(support))
    else:
        indices = np.unique(support.astype(int))
        if indices.size and (indices[0] < 0 or indices[-1] >= L * L):
            raise ValueError("support index out of range")
    if indices.size == 0:
        raise ValueError("empty support")
    return RestrictedGradient(indices, L)


def restricted_psi(op: ForwardOperator, indices: np.ndarray) -> np.ndarray:
    """Columns of Psi for the support pixels, as a dense ``M^2 x |Omega|`` array."""
    if op.mode == "dense":
        return op.psi_matrix()[:, indices]
    return np.stack([vec(op.psi_column(int(i))) for i in indices], axis=1)


def objective(mean: np.ndarray, psi_omega: np.ndarray, form: RestrictedGradient, x, b, mu) -> float:
    res = mean - psi_omega @ x - b
    return 0.5 * float(res @ res) + mu * form.value(x)


def objective_gradient(mean: np.ndarray, psi_omega: np.ndarray, form: RestrictedGradient, x, b, mu):
    """Gradient of :func:`objective` as ``(d/dx, d/db)``."""
    res = psi_omega @ x + b - mean
    return psi_omega.T @ res + mu * form.gradient(x), float(np.sum(res))


def _x_step_lipschitz(psi_omega: np.ndarray, form: RestrictedGradient, mu: float) -> float:
    def hess(v):
        return psi_omega.T @ (psi_omega @ v) + 2.0 * mu * (form.laplacian @ v)

    return 1.01 * power_iteration(hess, psi_omega.shape[1])


def solve_x(
    mean: np.ndarray,
    psi_omega: np.ndarray,
    form: RestrictedGradient,
    b: float,
    mu: float,
    params: IntensityParams,
    x0: np.ndarray | None = None,
    lipschitz: float | None = None,
) -> np.ndarray:
    """Nonnegative minimiser of the smooth objective for fixed ``b``.

    Projected accelerated gradient by default; ``params.x_solver="active-set"``
    solves the same QP exactly on the explicit ``|Omega| x |Omega|`` Hessian.
    """
    if b < 0 or not math.isfinite(b):
        raise ValueError("background must be finite and >= 0")
    if not np.all(np.isfinite(mean)):
        raise FloatingPointError("non-finite mean image")
    n = psi_omega.shape[1]
    if params.x_solver == "active-set":
        H = psi_omega.T @ psi_omega + 2.0 * mu * form.laplacian.toarray()
        return nonneg_active_set(H, psi_omega.T @ (mean - b), 0.0, x0).x
    if lipschitz is None:
        lipschitz = _x_step_lipschitz(psi_omega, form, mu)

    def hess(v):
        return psi_omega.T @ (psi_omega @ v) + 2.0 * mu * (form.laplacian @ v)

    res = nonneg_fista(
        hess,
        psi_omega.T @ (mean - b),
        0.0,
        lipschitz,
        np.zeros(n) if x0 is None else x0,
        params.inner_max,
        params.inner_tol,
    )
    return res.x


def update_b(mean: np.ndarray, psi_omega: np.ndarray, x: np.ndarray) -> float:
    """Mean residual over all coarse pixels, clamped at zero."""
    return max(0.0, float(np.mean(mean - psi_omega @ x)))


def default_mu(mean: np.ndarray, psi_omega: np.ndarray, mu_rel: float, rule: str = "spectral") -> float:
    """``spectral``: ``mu_rel`` times the largest eigenvalue of ``Psi_Omega^T Psi_Omega``,
    so the smoothness term is weighed against the data term independently of
    the photon scale.  ``data``: ``mu_rel * ||Psi_Omega^T ybar||_inf``.
    """
    if rule == "data":
        return mu_rel * float(np.max(np.abs(psi_omega.T @ mean), initial=0.0))
    return mu_rel * power_iteration(lambda v: psi_omega.T @ (psi_omega @ v), psi_omega.shape[1])


def lower_median(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=float).ravel())
    return float(v[(len(v) - 1) // 2])


def run_intensity_estimation(
    mean: np.ndarray,
    support,
    op: ForwardOperator,
    params: IntensityParams | None = None,
) -> IntensityResult:
    """Alternate x- and b-steps from ``b0 = median(ybar)``.

    ``mean`` is the vectorised (or ``M x M``) temporal mean; ``support`` a fine
    boolean mask or index array.
    """
    params = params or IntensityParams()
    geom = op.geometry
    mean = np.asarray(mean, dtype=float)
    if mean.ndim == 2:
        mean = vec(mean)
    if mean.shape != (op.n_coarse,):
        raise ValueError(f"mean image must have {op.n_coarse} pixels")
    L = geom.fine_size
    support = np.asarray(support)
    if support.size == 0 or (support.dtype == bool and not support.any()):
        warnings.warn("empty support: returning zero intensity and the mean as background", stacklevel=2)
        return IntensityResult(np.zeros((L, L)), max(0.0, float(np.mean(mean))), [], "empty-support")

    form = build_restricted_gradient_form(support, geom)
    psi_omega = restricted_psi(op, form.indices)
    mu = params.mu if params.mu is not None else default_mu(mean, psi_omega, params.mu_rel, params.mu_rule)
    lip = _x_step_lipschitz(psi_omega, form, mu)

    b = lower_median(mean)
    x = np.zeros(len(form))
    trace = [objective(mean, psi_omega, form, x, b, mu)]
    k = 0
    for k in range(1, params.max_alt + 1):
        x_new = solve_x(mean, psi_omega, form, b, mu, params, x0=x, lipschitz=lip)
        b_new = update_b(mean, psi_omega, x_new)
        trace.append(objective(mean, psi_omega, form, x_new, b_new, mu))
        dx = np.linalg.norm(x_new - x)
        scale = math.hypot(np.linalg.norm(x_new), b_new)
        db = abs(b_new - b)
        x, b = x_new, b_new
        if math.hypot(dx, db) <= params.tol * max(scale, np.finfo(float).tiny):
            break
    for j in range(1, len(trace)):
        if trace[j] > trace[j - 1] + 1e-10 * max(abs(trace[0]), 1e-300):
            raise FloatingPointError(f"intensity objective increased at alternation {j}")

    image = np.zeros(L * L)
    image[form.indices] = x
    return IntensityResult(unvec(image, L), b, trace, "ok", mu, k)
