"""Solvers for nonnegative, linearly penalised quadratics.

Both solve  min_{x >= 0}  0.5 x^T H x - g^T x + w^T x  with ``w >= 0``:

* :func:`nonneg_fista` -- monotone accelerated proximal gradient; only needs
  products with ``H``.  The proximal map is ``max(0, t - step * w)``.
* :func:`nonneg_active_set` -- Lawson-Hanson active-set iteration on an explicit
  ``H``; exact up to rounding and much faster on the badly conditioned
  covariance systems, where first-order methods stall.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg


@dataclass
class QPResult:
    x: np.ndarray
    value: float
    n_iter: int
    converged: bool


def nonneg_fista(
    hess: Callable[[np.ndarray], np.ndarray],
    linear: np.ndarray,
    penalty: np.ndarray | float,
    lipschitz: float,
    x0: np.ndarray,
    max_iter: int,
    tol: float,
) -> QPResult:
    """FISTA with a monotone safeguard and function-value restart.

    The returned objective never exceeds the one at ``x0`` (projected onto the
    orthant), which is what the outer majorise-minimise loops rely on.
    ``tol`` bounds the relative change between accepted iterates.
    """
    if not np.all(np.isfinite(linear)):
        raise FloatingPointError("non-finite linear term")
    if lipschitz <= 0.0:
        return QPResult(np.maximum(x0, 0.0), 0.0, 0, True)
    step = 1.0 / lipschitz
    shift = step * (linear - penalty)

    x = np.maximum(np.asarray(x0, dtype=float), 0.0)
    Hx = hess(x)
    fx = 0.5 * x @ Hx - linear @ x + np.sum(penalty * x)
    y, Hy, t = x, Hx, 1.0
    restarted = True
    converged = False
    k = 0
    for k in range(1, max_iter + 1):
        z = np.maximum(y - step * Hy + shift, 0.0)
        Hz = hess(z)
        fz = 0.5 * z @ Hz - linear @ z + np.sum(penalty * z)
        if not math.isfinite(fz):
            raise FloatingPointError("non-finite objective in accelerated solver")
        if fz <= fx:
            dx = np.linalg.norm(z - x)
            scale = np.linalg.norm(z)
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            beta = (t - 1.0) / t_new
            y = z + beta * (z - x)
            Hy = Hz + beta * (Hz - Hx)
            x, Hx, fx, t = z, Hz, fz, t_new
            restarted = False
            if dx <= tol * scale or dx == 0.0:
                converged = True
                break
        elif restarted:
            # a plain gradient step from x failed to descend: x is optimal up to rounding
            converged = True
            break
        else:
            # momentum overshot: restart from the last accepted iterate
            y, Hy, t = x, Hx, 1.0
            restarted = True
    return QPResult(x, float(fx), k, converged)


def _solve_passive(H: np.ndarray, h: np.ndarray, idx: np.ndarray) -> np.ndarray | None:
    """Unconstrained minimiser on the passive coordinates ``idx``; None if numerically singular."""
    sub = H[np.ix_(idx, idx)]
    try:
        c = linalg.cho_factor(sub, check_finite=False)
        z = linalg.cho_solve(c, h[idx], check_finite=False)
    except linalg.LinAlgError:
        z = linalg.lstsq(sub, h[idx], check_finite=False)[0]
    if not np.all(np.isfinite(z)):
        return None
    return z


def nonneg_active_set(
    H: np.ndarray,
    linear: np.ndarray,
    penalty: np.ndarray | float,
    x0: np.ndarray | None = None,
    max_iter: int | None = None,
    tol: float = 1e-10,
) -> QPResult:
    """Lawson-Hanson active-set method on the normal equations, warm-started from ``x0``.

    The passive set starts as ``{i : x0_i > 0}``; every step moves along a
    segment towards a subspace minimiser, so the objective never increases
    from ``x0``.  Stops when no zero coordinate has a descent direction larger
    than ``tol * max|g - w|``.
    """
    h = np.asarray(linear, dtype=float) - penalty
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite linear term")
    n = h.size
    max_iter = 3 * n if max_iter is None else max_iter
    x = np.zeros(n) if x0 is None else np.maximum(np.asarray(x0, dtype=float), 0.0)
    passive = x > 0
    blocked = np.zeros(n, dtype=bool)
    thresh = tol * max(float(np.max(np.abs(h), initial=0.0)), np.finfo(float).tiny)

    def grad_neg(x, idx):
        return h - (H[idx].T @ x[idx] if idx.size else 0.0)

    converged = False
    k = 0
    for k in range(1, max_iter + 1):
        entering = -1
        if k > 1 or not passive.any():
            idx = np.flatnonzero(passive)
            w = grad_neg(x, idx)
            w[passive | blocked] = -np.inf
            j = int(np.argmax(w))
            if not w[j] > thresh:
                converged = True
                break
            passive[j] = True
            entering = j
        # restore feasibility on the passive set
        for _ in range(n + 1):
            idx = np.flatnonzero(passive)
            if idx.size == 0:
                x[:] = 0.0
                break
            z = _solve_passive(H, h, idx)
            if z is None:
                if entering < 0:
                    # unusable warm start: begin from zero instead
                    passive[:] = False
                    x[:] = 0.0
                    break
                passive[entering] = False
                blocked[entering] = True
                break
            if np.all(z > 0):
                x[:] = 0.0
                x[idx] = z
                break
            xi = x[idx]
            neg = np.flatnonzero(z <= 0)
            ratios = xi[neg] / (xi[neg] - z[neg])
            alpha = float(np.min(ratios))
            xi = xi + alpha * (z - xi)
            xi[xi <= 0] = 0.0
            # the coordinate that hits zero first leaves, whatever rounding says
            xi[neg[np.argmin(ratios)]] = 0.0
            x[idx] = xi
            passive[idx] = xi > 0
        if entering >= 0:
            if x[entering] > 0:
                blocked[:] = False
            else:
                blocked[entering] = True
    idx = np.flatnonzero(x)
    value = 0.5 * float(x[idx] @ (H[np.ix_(idx, idx)] @ x[idx])) - float(h @ x)
    return QPResult(x, value, k, converged)
