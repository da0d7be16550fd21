"""Localisation and intensity metrics: Jaccard index under one-to-one matching, PSNR, FWHM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree


@dataclass
class MatchReport:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (truth, detection, distance nm)

    @property
    def jaccard(self) -> float:
        denom = self.tp + self.fp + self.fn
        return self.tp / denom if denom else 1.0


def _as_points(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        return np.zeros((0, 2))
    return p.reshape(-1, 2)


def _candidates(truth: np.ndarray, det: np.ndarray, radius: float):
    if len(truth) == 0 or len(det) == 0:
        return np.zeros((0, 3))
    dm = cKDTree(truth).sparse_distance_matrix(cKDTree(det), radius, output_type="ndarray")
    return np.stack([dm["i"], dm["j"], dm["v"]], axis=1) if len(dm) else np.zeros((0, 3))


def jaccard_index(detections, truth, delta_nm: float = 40.0, pitch: float = 1.0, mode: str = "greedy") -> MatchReport:
    """Match detections to ground truth within ``delta_nm`` and count TP / FP / FN.

    Points are fine-grid ``(row, col)`` coordinates; ``pitch`` converts them to nm.
    ``greedy`` takes candidate pairs in order of (distance, truth index,
    detection index); ``optimal`` maximises the number of matches and then
    minimises the summed distance.
    """
    if not delta_nm > 0:
        raise ValueError("delta_nm must be positive")
    det = _as_points(detections) * pitch
    tru = _as_points(truth) * pitch
    cand = _candidates(tru, det, delta_nm)
    pairs: list[tuple[int, int, float]] = []
    if len(cand):
        if mode == "greedy":
            order = np.lexsort((cand[:, 1], cand[:, 0], cand[:, 2]))
            used_t, used_d = set(), set()
            for i, j, d in cand[order]:
                i, j = int(i), int(j)
                if i in used_t or j in used_d:
                    continue
                used_t.add(i)
                used_d.add(j)
                pairs.append((i, j, float(d)))
        elif mode == "optimal":
            pairs = _optimal_pairs(cand, delta_nm)
        else:
            raise ValueError(f"unknown matching mode {mode!r}")
    tp = len(pairs)
    return MatchReport(tp, len(det) - tp, len(tru) - tp, pairs)


def _optimal_pairs(cand: np.ndarray, delta: float) -> list[tuple[int, int, float]]:
    ti = np.unique(cand[:, 0].astype(int))
    dj = np.unique(cand[:, 1].astype(int))
    tpos = {t: k for k, t in enumerate(ti)}
    dpos = {d: k for k, d in enumerate(dj)}
    # infeasible cost exceeds any sum of feasible distances, so cardinality is maximised first
    big = delta * (min(len(ti), len(dj)) + 1) + 1.0
    cost = np.full((len(ti), len(dj)), big)
    for i, j, d in cand:
        cost[tpos[int(i)], dpos[int(j)]] = d
    rows, cols = linear_sum_assignment(cost)
    return [
        (int(ti[r]), int(dj[c]), float(cost[r, c]))
        for r, c in zip(rows, cols)
        if cost[r, c] < big
    ]


def psnr(estimate: np.ndarray, truth: np.ndarray) -> float:
    """``10 log10(max(truth)^2 / MSE)``; ``inf`` when the images are identical."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch: {estimate.shape} vs {truth.shape}")
    peak = float(np.max(truth))
    if not np.any(truth) or peak <= 0:
        raise ValueError("ground truth image is identically zero")
    mse = float(np.mean((estimate - truth) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def line_profile(image: np.ndarray, start, end, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sampled profile from ``start`` to ``end`` (pixel coordinates); returns ``(distance_px, values)``."""
    from scipy.ndimage import map_coordinates

    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    length = float(np.linalg.norm(end - start))
    if n is None:
        n = max(2, int(math.ceil(length * 4)) + 1)
    t = np.linspace(0.0, 1.0, n)
    coords = start[:, None] + (end - start)[:, None] * t[None, :]
    values = map_coordinates(np.asarray(image, dtype=float), coords, order=1, mode="constant")
    return t * length, values


def _half_max_width(pos: np.ndarray, values: np.ndarray) -> float:
    k = int(np.argmax(values))
    peak = values[k]
    if np.count_nonzero(values == peak) > 1 or k == 0 or k == len(values) - 1:
        raise ValueError("profile has no unique interior maximum")
    half = 0.5 * peak
    left = np.flatnonzero(values[:k] < half)
    right = np.flatnonzero(values[k + 1 :] < half)
    if left.size == 0 or right.size == 0:
        raise ValueError("profile does not fall below half maximum on both sides")
    i = left[-1]  # values[i] < half <= values[i+1]
    xl = pos[i] + (half - values[i]) / (values[i + 1] - values[i]) * (pos[i + 1] - pos[i])
    j = k + 1 + right[0]  # values[j-1] >= half > values[j]
    xr = pos[j - 1] + (values[j - 1] - half) / (values[j - 1] - values[j]) * (pos[j] - pos[j - 1])
    return float(xr - xl)


def measure_fwhm(image: np.ndarray, pitch_nm: float = 1.0, axis: int | None = 1, line=None) -> float:
    """FWHM in nm of a 1D profile through ``image``.

    With ``line=((r0, c0), (r1, c1))`` the profile follows that segment;
    otherwise it runs along ``axis`` (0: down a column, 1: along a row)
    through the brightest pixel.  Half-maximum crossings are found by linear
    interpolation between samples.
    """
    image = np.asarray(image, dtype=float)
    if line is not None:
        pos, values = line_profile(image, line[0], line[1])
        return _half_max_width(pos, values) * pitch_nm
    if image.ndim == 1:
        values = image
    else:
        r, c = np.unravel_index(int(np.argmax(image)), image.shape)
        values = image[r, :] if axis == 1 else image[:, c]
    return _half_max_width(np.arange(len(values), dtype=float), values) * pitch_nm
