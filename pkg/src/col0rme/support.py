"""Joint estimation of the fine-grid temporal variance and the noise variance.

Minimises  0.5 ||r_y - A r - s v_I||^2 + CEL0(r; lambda)  over r >= 0, s >= 0 by
iteratively reweighted l1 (each weighted problem solved by accelerated
proximal gradient) alternated with the closed-form update of ``s``.

The solver only ever touches the data through ``A^T A``, ``A^T r_y``,
``A^T v_I``, ``||r_y||^2`` and ``<v_I, r_y>``; :class:`CovarianceSystem`
bundles those.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._qp import nonneg_active_set, nonneg_fista
from .covariance import StackStatistics
from .forward import ForwardOperator, operator_spectral_norm, power_iteration


@dataclass(frozen=True)
class Cel0Params:
    lam: float | None  # None: chosen by the caller from the data (see pipeline.localize)
    outer_max: int = 20
    inner_max: int = 500
    outer_tol: float = 1e-4
    inner_tol: float = 1e-6
    support_threshold: float | None = None
    support_rel: float = 1e-3
    inner_solver: str = "fista"  # or "active-set" (needs the Gram matrix)
    init_weights: str = "ones"  # l1 start: "ones" (lam * sum r) or "cel0" (CEL0 slope at zero, scale-free)

    def __post_init__(self):
        if self.inner_solver not in ("active-set", "fista"):
            raise ValueError(f"unknown inner solver {self.inner_solver!r}")
        if self.init_weights not in ("ones", "cel0"):
            raise ValueError(f"unknown initial weights {self.init_weights!r}")
        if self.lam is not None and not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.outer_max < 1 or self.inner_max < 1:
            raise ValueError("iteration caps must be >= 1")
        if not (self.outer_tol > 0 and self.inner_tol > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class SupportResult:
    r_x: np.ndarray
    support: np.ndarray  # boolean mask over fine pixels (column-major)
    s: float
    objective_trace: list[float]
    l1_trace: list[float] = field(default_factory=list)
    n_outer: int = 0
    inner_iterations: list[int] = field(default_factory=list)

    @property
    def support_indices(self) -> np.ndarray:
        return np.flatnonzero(self.support)


class CovarianceSystem:
    """Normal-equation view of the covariance fit for one patch (or a toy instance).

    Parameters are the Gram matrix ``A^T A`` (or ``None`` to go through the
    operator), ``A^T r_y``, ``A^T v_I``, the column norms ``||a_i||``,
    ``||r_y||^2``, ``<v_I, r_y>`` and ``||v_I||^2``.
    """

    def __init__(
        self,
        gram: np.ndarray | None,
        corr: np.ndarray,
        diag_corr: np.ndarray,
        norms: np.ndarray,
        data_sq: float,
        trace: float,
        v_sq: float,
        lipschitz: float | None = None,
        op: ForwardOperator | None = None,
    ):
        if gram is None and op is None:
            raise ValueError("need either a Gram matrix or an operator")
        self.gram = gram
        self.op = op
        self.corr = np.asarray(corr, dtype=float)
        self.diag_corr = np.asarray(diag_corr, dtype=float)
        self.norms = np.asarray(norms, dtype=float)
        self.data_sq = float(data_sq)
        self.trace = float(trace)
        self.v_sq = float(v_sq)
        if not (np.all(np.isfinite(self.corr)) and math.isfinite(self.data_sq)):
            raise FloatingPointError("non-finite covariance data")
        if lipschitz is None:
            if gram is not None:
                lipschitz = 1.01 * power_iteration(gram.__matmul__, self.n)
            else:
                lipschitz = operator_spectral_norm(op) ** 2
        self.lipschitz = float(lipschitz)

    @property
    def n(self) -> int:
        return self.corr.size

    @classmethod
    def from_statistics(
        cls,
        stats: StackStatistics,
        op: ForwardOperator,
        gram: np.ndarray | None = None,
        lipschitz: float | None = None,
        use_gram: bool = True,
    ) -> "CovarianceSystem":
        """Build from stack statistics; ``gram``/``lipschitz`` may be shared between equal-size patches."""
        if stats.size != op.geometry.coarse_size:
            raise ValueError(
                f"statistics are for {stats.size}x{stats.size} frames, operator expects "
                f"{op.geometry.coarse_size}x{op.geometry.coarse_size}"
            )
        if gram is None and use_gram:
            gram = op.gram()
        r_y = stats.cov_vec
        n = op.n_coarse
        norms = op.column_norms()
        if gram is not None:
            if lipschitz is None:
                lipschitz = operator_spectral_norm(op, gram) ** 2
        return cls(
            gram,
            op.apply_A_adjoint(r_y),
            norms,  # A^T v_I = diag(Psi^T Psi) = ||psi_i||^2 = ||a_i||
            norms,
            float(r_y @ r_y),
            float(np.trace(stats.cov_matrix)),
            float(n),
            lipschitz,
            op,
        )

    @classmethod
    def from_dense(cls, A: np.ndarray, r_y: np.ndarray, v: np.ndarray) -> "CovarianceSystem":
        """Generic small instance with an explicit matrix ``A`` and noise direction ``v``."""
        A = np.asarray(A, dtype=float)
        gram = A.T @ A
        return cls(
            gram,
            A.T @ r_y,
            A.T @ v,
            np.linalg.norm(A, axis=0),
            float(r_y @ r_y),
            float(v @ r_y),
            float(v @ v),
            lipschitz=1.01 * float(np.linalg.eigvalsh(gram)[-1]),
        )

    def hess(self, r: np.ndarray) -> np.ndarray:
        if self.gram is None:
            return self.op.apply_A_adjoint(self.op.apply_A(r))
        nz = np.flatnonzero(r)
        if nz.size == 0:
            return np.zeros(self.n)
        if nz.size < self.n // 4:
            # symmetric Gram: rows of the active set give the needed columns
            return self.gram[nz].T @ r[nz]
        return self.gram @ r

    def data_term(self, r: np.ndarray, s: float) -> float:
        """``0.5 ||r_y - A r - s v||^2`` expanded through the normal equations."""
        val = (
            self.data_sq
            - 2.0 * self.corr @ r
            + r @ self.hess(r)
            + 2.0 * s * (self.diag_corr @ r)
            - 2.0 * s * self.trace
            + s * s * self.v_sq
        )
        return 0.5 * max(float(val), 0.0)

    def objective(self, r: np.ndarray, s: float, lam: float) -> float:
        return self.data_term(r, s) + cel0_penalty(r, lam, self.norms)


def cel0_penalty(r: np.ndarray, lam: float, norms: np.ndarray) -> float:
    """Sum over i of ``lam - a_i^2/2 (|r_i| - sqrt(2 lam)/a_i)^2`` on ``|r_i| <= sqrt(2 lam)/a_i``, else ``lam``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    t = np.abs(np.asarray(r, dtype=float))
    a = np.asarray(norms, dtype=float)
    root = math.sqrt(2.0 * lam)
    # expanded form; stays finite (and -> 0) for zero-norm columns
    inside = a * t <= root
    vals = np.where(inside, root * a * t - 0.5 * (a * t) ** 2, lam)
    return float(np.sum(vals))


def cel0_weights(r: np.ndarray, lam: float, norms: np.ndarray) -> np.ndarray:
    """IRL1 weights: ``lam * w_i`` is the slope of the CEL0 term in ``|r_i|`` at ``r``."""
    t = np.abs(np.asarray(r, dtype=float))
    a = np.asarray(norms, dtype=float)
    return np.maximum(a * math.sqrt(2.0 * lam) - a * a * t, 0.0) / lam


def update_s(system: CovarianceSystem, r: np.ndarray) -> float:
    """Closed-form noise variance for fixed ``r``, projected onto ``s >= 0``."""
    return max(0.0, (system.trace - system.diag_corr @ r) / system.v_sq)


def solve_weighted_l1(
    system: CovarianceSystem,
    s: float,
    omega: np.ndarray,
    lam: float,
    params: Cel0Params,
    init: np.ndarray | None = None,
):
    """``argmin_{r >= 0} 0.5 ||r_y - A r - s v||^2 + lam * sum(omega * r)``.

    Uses the active-set solver when the Gram matrix is available and
    requested, monotone FISTA otherwise.  Returns ``(r, n_iter)``.
    """
    if s < 0 or not math.isfinite(s):
        raise ValueError(f"noise variance must be finite and >= 0, got {s}")
    omega = np.broadcast_to(np.asarray(omega, dtype=float), (system.n,))
    if np.any(omega < 0) or not np.all(np.isfinite(omega)):
        raise ValueError("weights must be finite and nonnegative")
    x0 = np.zeros(system.n) if init is None else init
    if params.inner_solver == "active-set" and system.gram is not None:
        res = nonneg_active_set(system.gram, system.corr - s * system.diag_corr, lam * omega, x0)
        return res.x, res.n_iter
    res = nonneg_fista(
        system.hess,
        system.corr - s * system.diag_corr,
        lam * omega,
        system.lipschitz,
        x0,
        params.inner_max,
        params.inner_tol,
    )
    return res.x, res.n_iter


def extract_support(r: np.ndarray, params: Cel0Params) -> np.ndarray:
    if params.support_threshold is not None:
        return r > params.support_threshold
    peak = float(np.max(r, initial=0.0))
    if peak <= 0.0:
        return np.zeros(r.shape, dtype=bool)
    return r > params.support_rel * peak


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    diff = np.linalg.norm(new - old)
    if diff == 0.0:
        return 0.0
    norm = np.linalg.norm(new)
    return diff / norm if norm > 0 else math.inf


def _check_descent(trace: list[float], scale: float, what: str):
    for k in range(1, len(trace)):
        if trace[k] > trace[k - 1] + 1e-10 * scale:
            raise FloatingPointError(
                f"{what} objective increased at iteration {k}: {trace[k - 1]!r} -> {trace[k]!r}"
            )


def solve_cel0(system: CovarianceSystem, params: Cel0Params) -> SupportResult:
    """IRL1 outer loop on a prepared :class:`CovarianceSystem`.

    Starts from the l1-regularised solution (``omega = 1``, alternating with
    ``s`` from ``s = 0``), then alternates CEL0 weights, the weighted-l1
    solve and the closed-form ``s`` update.  With ``init_weights="cel0"`` the
    l1 start uses the CEL0 weights at zero instead, which keeps the whole
    solve homogeneous: data scaled by ``c`` and ``lam`` by ``c**2`` give
    ``r_x`` and ``s`` scaled by ``c``.
    """
    lam = params.lam
    if lam is None:
        raise ValueError("solve_cel0 needs an explicit lambda")
    n = system.n
    if params.init_weights == "cel0":
        ones = cel0_weights(np.zeros(n), lam, system.norms)
    else:
        ones = np.ones(n)
    scale = max(system.data_sq, 1e-300)

    r, s = np.zeros(n), 0.0
    l1_trace = []
    for _ in range(params.outer_max):
        r_new, _ = solve_weighted_l1(system, s, ones, lam, params, init=r)
        s_new = update_s(system, r_new)
        l1_trace.append(system.data_term(r_new, s_new) + lam * float(ones @ r_new))
        done = _rel_change(r_new, r) < params.outer_tol and abs(s_new - s) <= params.outer_tol * max(s_new, 1e-300)
        r, s = r_new, s_new
        if done:
            break
    _check_descent(l1_trace, scale, "l1 initialisation")

    trace = [system.objective(r, s, lam)]
    inner = []
    k = 0
    for k in range(1, params.outer_max + 1):
        omega = cel0_weights(r, lam, system.norms)
        r_new, it = solve_weighted_l1(system, s, omega, lam, params, init=r)
        s = update_s(system, r_new)
        inner.append(it)
        trace.append(system.objective(r_new, s, lam))
        change = _rel_change(r_new, r)
        r = r_new
        if change < params.outer_tol:
            break
    _check_descent(trace, scale, "CEL0")
    return SupportResult(r, extract_support(r, params), s, trace, l1_trace, k, inner)


def run_support_estimation(
    stats: StackStatistics,
    op: ForwardOperator,
    params: Cel0Params,
    system: CovarianceSystem | None = None,
) -> SupportResult:
    if system is None:
        system = CovarianceSystem.from_statistics(stats, op)
    return solve_cel0(system, params)


def lambda_max(system: CovarianceSystem) -> float:
    """Largest single-pixel gain ``0.5 * c_i^2 / ||a_i||^2`` after removing the trace-based noise level.

    ``lam = rel * lambda_max`` puts the CEL0 breakpoint at ``sqrt(rel)`` times the
    brightest (blurred) variance estimate.
    """
    s0 = update_s(system, np.zeros(system.n))
    c = np.maximum(system.corr - s0 * system.diag_corr, 0.0)
    a = system.norms
    ok = a > 0
    return float(np.max(0.5 * c[ok] ** 2 / a[ok] ** 2, initial=0.0))


def lambda_for_variance(system_norms: np.ndarray, variance: float) -> float:
    """λ whose CEL0 breakpoint ``sqrt(2 lam)/||a_i||`` equals ``variance`` at the median column norm."""
    a = float(np.median(system_norms))
    return 0.5 * (variance * a) ** 2


def lambda_noise_floor(noise_variance: float, n_frames: int, z: float = 6.0) -> float:
    """λ that keeps pure noise out of the support.

    With noise only, ``c_i / ||a_i||`` has standard deviation close to
    ``s * sqrt(2 / T)``; this returns the λ whose zero-weight threshold
    ``sqrt(2 lam)`` sits ``z`` of those deviations out.
    """
    if noise_variance < 0 or n_frames < 2 or z <= 0:
        raise ValueError("need noise_variance >= 0, n_frames >= 2, z > 0")
    return 0.5 * (z * noise_variance) ** 2 * 2.0 / n_frames
