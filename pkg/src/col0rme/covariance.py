"""Temporal mean and zero-lag sample covariance of an image stack, full-frame or per patch."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import unvec, vec
from .patches import PatchPlan


@dataclass
class ImageStack:
    """``T`` frames of ``M x M`` pixels, indexed ``frames[t, row, col]``."""

    frames: np.ndarray
    frame_rate: float = 100.0
    pitch_nm: float = 100.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise ValueError(f"stack must be 3-D (T, M, M), got shape {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("empty stack")
        if frames.shape[1] != frames.shape[2]:
            raise ValueError(f"frames must be square, got {frames.shape[1:]}")
        self.frames = frames

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class StackStatistics:
    mean: np.ndarray  # length M^2, column-major
    cov_vec: np.ndarray  # length M^4
    n_frames: int

    @property
    def size(self) -> int:
        return int(round(np.sqrt(self.mean.size)))

    @property
    def cov_matrix(self) -> np.ndarray:
        n = self.mean.size
        return self.cov_vec.reshape(n, n, order="F")

    @property
    def mean_image(self) -> np.ndarray:
        return unvec(self.mean, self.size)

    @property
    def variance_image(self) -> np.ndarray:
        return unvec(np.diag(self.cov_matrix).copy(), self.size)


def _frames(stack) -> np.ndarray:
    frames = stack.frames if isinstance(stack, ImageStack) else np.asarray(stack)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ValueError("expected a non-empty (T, M, M) stack")
    return frames


def temporal_mean(stack) -> np.ndarray:
    frames = _frames(stack)
    return vec(frames.astype(np.float64).mean(axis=0))


def empirical_covariance(stack, chunk: int = 256) -> np.ndarray:
    """Unbiased (divisor ``T - 1``) covariance of the vectorised frames, itself vectorised."""
    return stack_statistics(stack, chunk).cov_vec


def stack_statistics(stack, chunk: int = 256) -> StackStatistics:
    """Single pass over frames accumulating shifted first and second moments in float64."""
    frames = _frames(stack)
    T = frames.shape[0]
    if T < 2:
        raise ValueError("covariance needs at least 2 frames")
    n = frames.shape[1] * frames.shape[2]
    shift = None
    s1 = np.zeros(n)
    s2 = np.zeros((n, n))
    for start in range(0, T, chunk):
        block = vec(frames[start : start + chunk].astype(np.float64))
        if shift is None:
            # shifting by a provisional mean keeps the one-pass formula well conditioned
            shift = block.mean(axis=0)
        block = block - shift
        s1 += block.sum(axis=0)
        s2 += block.T @ block
    cov = (s2 - np.outer(s1, s1) / T) / (T - 1)
    cov = 0.5 * (cov + cov.T)
    return StackStatistics(shift + s1 / T, cov.ravel(order="F"), T)


def covariance_two_pass(stack) -> np.ndarray:
    """Reference implementation: subtract the exact mean, then average outer products."""
    frames = _frames(stack)
    T = frames.shape[0]
    if T < 2:
        raise ValueError("covariance needs at least 2 frames")
    Y = vec(frames.astype(np.float64))
    D = Y - Y.mean(axis=0)
    return (D.T @ D / (T - 1)).ravel(order="F")


def patch_statistics(stack, plan: PatchPlan, chunk: int = 256) -> list[StackStatistics]:
    frames = _frames(stack)
    if frames.shape[1] != plan.coarse_size or frames.shape[2] != plan.coarse_size:
        raise ValueError(
            f"patch plan is for {plan.coarse_size}x{plan.coarse_size} frames, stack has {frames.shape[1:]}"
        )
    out = []
    for p in plan.patches:
        rs, cs = p.coarse_slices()
        out.append(stack_statistics(frames[:, rs, cs], chunk))
    return out
