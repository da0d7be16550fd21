"""Patch-parallel support estimation and whole-frame intensity estimation for a stack."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .covariance import ImageStack, StackStatistics, patch_statistics, temporal_mean
from .forward import ForwardOperator, GridGeometry, PsfSpec, build_psf_kernel, operator_spectral_norm, unvec
from .intensity import IntensityParams, IntensityResult, run_intensity_estimation
from .patches import PatchPlan
from .support import Cel0Params, CovarianceSystem, SupportResult, extract_support, lambda_max, solve_cel0

log = logging.getLogger(__name__)


@dataclass
class LocalizationResult:
    geometry: GridGeometry
    plan: PatchPlan
    variance: np.ndarray  # (L, L) stitched r_x
    support: np.ndarray  # (L, L) bool
    lam: float
    patch_results: list[SupportResult] = field(default_factory=list)

    @property
    def noise_variances(self) -> np.ndarray:
        return np.array([r.s for r in self.patch_results])

    @property
    def noise_variance(self) -> float:
        return float(np.mean(self.noise_variances)) if self.patch_results else 0.0

    def support_positions(self) -> np.ndarray:
        """Support pixels as fine ``(row, col)`` pairs in column-major order."""
        cols, rows = np.nonzero(self.support.T)
        return np.stack([rows, cols], axis=1)


def _patch_operator(geometry: GridGeometry, psf: PsfSpec, size: int, memory_budget_mb: float):
    geom = geometry.with_size(size)
    op = ForwardOperator(geom, build_psf_kernel(psf, geom), mode="matrix-free")
    n = op.n_fine
    gram_bytes = 8.0 * n * n + 8.0 * op.n_coarse * n
    if gram_bytes <= memory_budget_mb * 2**20:
        gram = op.gram()
        lip = operator_spectral_norm(op, gram) ** 2
    else:
        log.info("Gram matrix (%.0f MB) exceeds budget; running matrix-free", gram_bytes / 2**20)
        gram, lip = None, operator_spectral_norm(op) ** 2
    return op, gram, lip


def build_systems(
    stack: ImageStack | np.ndarray,
    geometry: GridGeometry,
    psf: PsfSpec,
    plan: PatchPlan,
    memory_budget_mb: float = 512.0,
) -> list[CovarianceSystem]:
    stats = patch_statistics(stack, plan)
    # every patch has the same size, so the operator and Gram matrix are shared
    op, gram, lip = _patch_operator(geometry, psf, plan.patch_size, memory_budget_mb)
    return [
        CovarianceSystem.from_statistics(st, op, gram=gram, lipschitz=lip, use_gram=gram is not None)
        for st in stats
    ]


def localize(
    stack: ImageStack | np.ndarray,
    geometry: GridGeometry,
    psf: PsfSpec,
    params: Cel0Params | None = None,
    lambda_rel: float = 0.05,
    patch_size: int = 12,
    overlap: int = 4,
    threads: int = 1,
    memory_budget_mb: float = 512.0,
    systems: list[CovarianceSystem] | None = None,
) -> LocalizationResult:
    """Support estimation per patch, stitched on the fine grid.

    When ``params`` is None or has ``lam=None`` the regularisation weight is
    ``lambda_rel`` times the largest single-pixel gain over all patches (see
    :func:`support.lambda_max`).
    """
    frames = stack.frames if isinstance(stack, ImageStack) else np.asarray(stack)
    if frames.shape[1] != geometry.coarse_size:
        raise ValueError(f"stack frames are {frames.shape[1:]}, geometry expects M={geometry.coarse_size}")
    plan = PatchPlan.build(geometry.coarse_size, patch_size, overlap, geometry.zoom)
    if systems is None:
        systems = build_systems(frames, geometry, psf, plan, memory_budget_mb)
    params = params or Cel0Params(lam=None)
    if params.lam is None:
        lam = lambda_rel * max(lambda_max(s) for s in systems)
        if not lam > 0:
            # flat data: any positive weight gives the all-zero solution
            lam = 1.0
        params = replace(params, lam=lam)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: solve_cel0(s, params), systems))
    else:
        results = [solve_cel0(s, params) for s in systems]

    P = plan.patch_size * geometry.zoom
    variance = plan.stitch([unvec(r.r_x, P) for r in results])
    support = unvec(extract_support(variance.ravel(order="F"), params), geometry.fine_size)
    return LocalizationResult(geometry, plan, variance, support, params.lam, results)


def intensify(
    stack: ImageStack | np.ndarray,
    support: np.ndarray,
    geometry: GridGeometry,
    psf: PsfSpec,
    params: IntensityParams | None = None,
) -> IntensityResult:
    """Whole-frame intensity and background on a fine-grid support mask."""
    frames = stack.frames if isinstance(stack, ImageStack) else np.asarray(stack)
    op = ForwardOperator(geometry, build_psf_kernel(psf, geometry), mode="matrix-free")
    mean = temporal_mean(frames)
    return run_intensity_estimation(mean, support, op, params or IntensityParams())
