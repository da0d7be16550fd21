"""Synthetic fluctuating stacks with ground truth.

Each emitter is a two-state (on/off) continuous-time Markov chain with
exponential dwell times and an independent exponential bleaching clock.  Its
photon count in a frame is ``photons_per_frame`` times the fraction of the
frame interval spent on.  Frames are rendered as ``Psi(X_t) + b* + noise``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from .covariance import ImageStack
from .forward import ForwardOperator, GridGeometry, PsfSpec

PHANTOM_KINDS = ("tubules", "grid", "points", "parallel")


@dataclass(frozen=True)
class EmitterKinetics:
    tau_on_ms: float = 20.0
    tau_off_ms: float = 40.0
    tau_bleach_s: float = 20.0
    photons_per_frame: float = 1000.0

    def __post_init__(self):
        for name in ("tau_on_ms", "tau_off_ms", "tau_bleach_s", "photons_per_frame"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def on_probability(self) -> float:
        return self.tau_on_ms / (self.tau_on_ms + self.tau_off_ms)


@dataclass(frozen=True)
class AcquisitionConfig:
    geometry: GridGeometry = field(default_factory=lambda: GridGeometry(32))
    psf: PsfSpec = field(default_factory=PsfSpec)
    frame_rate: float = 100.0
    n_frames: int = 700
    background: float = 100.0
    snr_db: float | None = 20.0  # None or inf: no noise
    seed: int = 0
    noise_seed: int | None = None
    poisson: bool = False
    initial_state: str = "stationary"

    def __post_init__(self):
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")
        if self.n_frames < 2:
            raise ValueError("need at least 2 frames")
        if self.background < 0:
            raise ValueError("background must be >= 0")
        if self.initial_state not in ("stationary", "on"):
            raise ValueError("initial_state must be 'stationary' or 'on'")

    @property
    def frame_ms(self) -> float:
        return 1000.0 / self.frame_rate

    def streams(self) -> dict[str, np.random.Generator]:
        """Independent generators for phantom, kinetics and noise, all derived from the seeds."""
        phantom, kinetics = (np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(2))
        noise_seed = self.seed if self.noise_seed is None else self.noise_seed
        noise = np.random.default_rng(np.random.SeedSequence([noise_seed, 0x6E6F697365]))
        return {"phantom": phantom, "kinetics": kinetics, "noise": noise}


@dataclass
class GroundTruth:
    positions: np.ndarray  # (N, 2) fine (row, col) per emitter
    fine_size: int
    fine_pitch: float
    brightness: np.ndarray | None = None  # mean photons/frame per emitter over the acquisition
    intensity: np.ndarray | None = None  # (L, L) time-averaged photons per fine pixel
    variance: np.ndarray | None = None  # (L, L) temporal variance of emission per fine pixel
    noise_variance: float = 0.0
    background: float = 0.0
    signal_power: float = 0.0
    bleach_times_s: np.ndarray | None = None

    @property
    def n_emitters(self) -> int:
        return len(self.positions)

    def pixel_positions(self) -> np.ndarray:
        """Distinct fine pixels holding at least one emitter, sorted by column-major index."""
        L = self.fine_size
        idx = np.unique(self.positions[:, 0] + L * self.positions[:, 1])
        return np.stack([idx % L, idx // L], axis=1)

    def active_pixel_positions(self) -> np.ndarray:
        """Distinct fine pixels that emitted at least one photon."""
        if self.intensity is None:
            return self.pixel_positions()
        # nonzero of the transpose walks pixels in column-major order
        cols, rows = np.nonzero(self.intensity.T)
        return np.stack([rows, cols], axis=1)


# --------------------------------------------------------------------------- kinetics


def sample_emitter_traces(
    kin: EmitterKinetics,
    n: int,
    n_frames: int,
    frame_rate: float,
    rng: np.random.Generator,
    initial_state: str = "stationary",
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame photon counts ``(n, n_frames)`` and bleaching times (s) for ``n`` emitters."""
    dt = 1000.0 / frame_rate
    total = n_frames * dt
    bleach = rng.exponential(kin.tau_bleach_s * 1000.0, size=n)
    if initial_state == "on":
        state0 = np.ones(n, dtype=bool)
    else:
        state0 = rng.random(n) < kin.on_probability
    if n == 0:
        return np.zeros((0, n_frames)), bleach / 1000.0
    end = np.minimum(bleach, total)

    cycle = kin.tau_on_ms + kin.tau_off_ms
    expected = 2.0 * total / cycle
    k = int(expected + 6.0 * math.sqrt(expected) + 8)
    draws = rng.exponential(size=(n, k))
    while True:
        parity = np.arange(draws.shape[1]) % 2 == 0
        on = np.where(parity[None, :], state0[:, None], ~state0[:, None])
        dwell = draws * np.where(on, kin.tau_on_ms, kin.tau_off_ms)
        knots = np.concatenate([np.zeros((n, 1)), np.cumsum(dwell, axis=1)], axis=1)
        if np.all(knots[:, -1] >= end):
            break
        draws = np.concatenate([draws, rng.exponential(size=(n, k))], axis=1)
    on_time = np.concatenate([np.zeros((n, 1)), np.cumsum(dwell * on, axis=1)], axis=1)

    # cumulative on-time is piecewise linear in t: interpolate all rows at once by
    # offsetting each row onto its own disjoint stretch of the time axis
    offset = (np.arange(n) * (knots[:, -1].max() + 1.0))[:, None]
    edges = np.minimum(np.arange(n_frames + 1)[None, :] * dt, end[:, None])
    cum = np.interp((edges + offset).ravel(), (knots + offset).ravel(), on_time.ravel())
    frac = np.diff(cum.reshape(n, n_frames + 1), axis=1) / dt
    return kin.photons_per_frame * np.clip(frac, 0.0, 1.0), bleach / 1000.0


def sample_emitter_trace(kin: EmitterKinetics, config: AcquisitionConfig, rng: np.random.Generator) -> np.ndarray:
    traces, _ = sample_emitter_traces(kin, 1, config.n_frames, config.frame_rate, rng, config.initial_state)
    return traces[0]


# --------------------------------------------------------------------------- phantoms


def _curve_sites(points: np.ndarray, L: int, spacing: float) -> np.ndarray:
    """Resample a polyline at a fixed arc-length spacing and snap to distinct in-grid pixel centres."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.arange(0.0, arc[-1], spacing)
    rows = np.interp(s, arc, points[:, 0])
    cols = np.interp(s, arc, points[:, 1])
    px = np.stack([np.rint(rows), np.rint(cols)], axis=1).astype(int)
    keep = np.all((px >= 0) & (px < L), axis=1)
    px = px[keep]
    if len(px) == 0:
        return px.reshape(0, 2)
    _, first = np.unique(px[:, 0] + L * px[:, 1], return_index=True)
    return px[np.sort(first)]


def _continuous_positions(curves, n: int, L: int, width_px: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` emitters uniform in arc length over all curves, snapped to fine pixels inside the grid."""
    segs = [np.stack([c[:-1], c[1:]], axis=1) for c in curves if len(c) > 1]
    if not segs or n == 0:
        return np.zeros((0, 2), dtype=int)
    segs = np.concatenate(segs)
    length = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1)
    cum = np.cumsum(length)
    out = np.empty((0, 2), dtype=int)
    while len(out) < n:
        m = n - len(out)
        u = rng.uniform(0.0, cum[-1], m)
        k = np.minimum(np.searchsorted(cum, u, side="right"), len(segs) - 1)
        frac = (u - (cum[k] - length[k])) / np.maximum(length[k], 1e-300)
        p = segs[k, 0] + frac[:, None] * (segs[k, 1] - segs[k, 0])
        if width_px > 0:
            p = p + rng.normal(0.0, width_px, p.shape)
        px = np.floor(p + 0.5).astype(int)
        keep = np.all((px >= 0) & (px < L), axis=1)
        out = np.concatenate([out, px[keep]])
    return out[:n]


def _random_curve(L: int, rng: np.random.Generator, curvature: float) -> np.ndarray:
    """Smooth random curve crossing the field: random start on the border, slowly turning heading."""
    step = 0.25
    side = rng.integers(4)
    u = rng.uniform(0.1, 0.9) * (L - 1)
    start, heading = {
        0: ((0.0, u), math.pi / 2),
        1: ((L - 1.0, u), -math.pi / 2),
        2: ((u, 0.0), 0.0),
        3: ((u, L - 1.0), math.pi),
    }[int(side)]
    # heading measured from the +col axis; rows grow downward
    heading += rng.uniform(-0.6, 0.6)
    n_steps = int(4 * L / step)
    turn = np.cumsum(rng.normal(0.0, curvature * math.sqrt(step), n_steps))
    turn = np.convolve(turn, np.ones(25) / 25, mode="same")
    angles = heading + turn
    pts = np.empty((n_steps + 1, 2))
    pts[0] = start
    pts[1:, 0] = start[0] + np.cumsum(step * np.sin(angles))
    pts[1:, 1] = start[1] + np.cumsum(step * np.cos(angles))
    inside = np.all((pts > -1.0) & (pts < L), axis=1)
    stop = np.argmin(inside[1:]) + 1 if not inside[1:].all() else len(pts)
    return pts[:stop]


def emitter_count(density: float, geom: GridGeometry, kin: EmitterKinetics) -> int:
    """Emitters needed for ``density`` active emitters per coarse pixel at t = 0."""
    if density < 0:
        raise ValueError("density must be >= 0")
    return int(round(density * geom.coarse_size**2 / kin.on_probability))


def generate_phantom(
    kind: str,
    geometry: GridGeometry,
    density: float,
    rng: np.random.Generator,
    kinetics: EmitterKinetics | None = None,
    n_emitters: int | None = None,
    n_tubules: int = 4,
    site_spacing: float = 1.0,
    curvature: float = 0.02,
    grid_spacing: int = 8,
    gap_nm: float = 200.0,
    placement: str = "sites",
    width_px: float = 0.0,
) -> GroundTruth:
    """Emitter positions on the fine grid.

    ``tubules``: random smooth curves.  With ``placement="sites"`` emitters are
    spread over sites taken every ``site_spacing`` fine pixels along the curves;
    with ``placement="continuous"`` each emitter sits at a uniform random arc
    length (Gaussian lateral offset of sd ``width_px``) and is snapped to the
    pixel containing it, so pixel counts follow the local path length;
    ``grid``: square lattice with ``grid_spacing``; ``points``: distinct uniform
    random pixels; ``parallel``: two vertical lines ``gap_nm`` apart.  Emitters
    are spread over the sites of a structure (several may share a pixel), except
    for ``points`` where each emitter has its own pixel.
    """
    if kind not in PHANTOM_KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    if placement not in ("sites", "continuous"):
        raise ValueError(f"unknown placement {placement!r}")
    kin = kinetics or EmitterKinetics()
    L = geometry.fine_size
    n = emitter_count(density, geometry, kin) if n_emitters is None else int(n_emitters)

    if kind == "points":
        if n > L * L:
            raise ValueError(f"density too high: {n} emitters for {L * L} fine pixels")
        idx = np.sort(rng.choice(L * L, size=n, replace=False))
        positions = np.stack([idx % L, idx // L], axis=1)
        return GroundTruth(positions.astype(int), L, geometry.fine_pitch)

    if kind == "grid":
        start = grid_spacing // 2
        ax = np.arange(start, L, grid_spacing)
        rr, cc = np.meshgrid(ax, ax, indexing="ij")
        sites = np.stack([rr.ravel(), cc.ravel()], axis=1)
    elif kind == "parallel":
        gap = gap_nm / geometry.fine_pitch
        center = (L - 1) / 2.0
        cols = [int(round(center - gap / 2)), int(round(center + gap / 2))]
        rows = np.arange(0, L, max(1, int(round(site_spacing))))
        sites = np.array([(r, c) for c in cols for r in rows])
    elif placement == "continuous":
        curves = [_random_curve(L, rng, curvature) for _ in range(n_tubules)]
        return GroundTruth(_continuous_positions(curves, n, L, width_px, rng), L, geometry.fine_pitch)
    else:
        curves = []
        for _ in range(n_tubules):
            pts = _random_curve(L, rng, curvature)
            curves.append(_curve_sites(pts, L, site_spacing))
        sites = np.concatenate(curves) if curves else np.zeros((0, 2), dtype=int)
        _, first = np.unique(sites[:, 0] + L * sites[:, 1], return_index=True)
        sites = sites[np.sort(first)]
    if len(sites) == 0 and n > 0:
        raise ValueError("phantom has no sites inside the grid")

    if kind == "tubules":
        which = rng.integers(len(sites), size=n) if n else np.zeros(0, dtype=int)
    else:
        # deterministic even spread over lattice / line sites
        which = np.arange(n) % max(len(sites), 1)
    positions = sites[which].astype(int).reshape(-1, 2)
    return GroundTruth(positions, L, geometry.fine_pitch)


# --------------------------------------------------------------------------- rendering


def add_gaussian_noise(frames: np.ndarray, snr_db: float | None, rng: np.random.Generator):
    """Add i.i.d. Gaussian noise with variance ``mean(frames**2) / 10**(snr_db/10)``.

    Returns ``(noisy, noise_variance, signal_power)``.
    """
    frames = np.asarray(frames, dtype=float)
    power = float(np.mean(frames**2))
    if snr_db is None or math.isinf(snr_db):
        return frames.copy(), 0.0, power
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite, None or inf")
    s = power / 10.0 ** (snr_db / 10.0)
    return frames + rng.normal(0.0, math.sqrt(s), size=frames.shape), s, power


def render_fine_frames(positions: np.ndarray, traces: np.ndarray, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum emitter traces per fine pixel.  Returns ``(pixel_index, per_pixel_traces)``."""
    idx = positions[:, 0] + L * positions[:, 1]
    pix, inverse = np.unique(idx, return_inverse=True)
    agg = sparse.csr_matrix(
        (np.ones(len(idx)), (inverse, np.arange(len(idx)))), shape=(len(pix), len(idx))
    )
    return pix, np.asarray(agg @ traces)


def render_stack(
    gt: GroundTruth,
    traces: np.ndarray,
    config: AcquisitionConfig,
    op: ForwardOperator,
    rng: np.random.Generator | None = None,
    chunk: int = 64,
) -> tuple[ImageStack, GroundTruth]:
    """``Y_t = Psi(X_t) + b* + N_t`` for every frame; fills in the ground-truth images."""
    geom = config.geometry
    if op.geometry != geom:
        raise ValueError("operator geometry does not match acquisition geometry")
    if traces.shape != (gt.n_emitters, config.n_frames):
        raise ValueError(f"traces must have shape ({gt.n_emitters}, {config.n_frames}), got {traces.shape}")
    L, M, T = geom.fine_size, geom.coarse_size, config.n_frames
    if rng is None:
        rng = config.streams()["noise"]

    if gt.n_emitters:
        pix, pix_traces = render_fine_frames(gt.positions, traces, L)
    else:
        pix, pix_traces = np.zeros(0, dtype=int), np.zeros((0, T))
    if config.poisson and len(pix):
        pix_traces = rng.poisson(pix_traces).astype(float)
    prow, pcol = pix % L, pix // L

    clean = np.empty((T, M, M))
    for start in range(0, T, chunk):
        stop = min(T, start + chunk)
        fine = np.zeros((stop - start, L, L))
        fine[:, prow, pcol] = pix_traces[:, start:stop].T
        clean[start:stop] = op.apply_psi(fine)
    clean += config.background
    noisy, s, power = add_gaussian_noise(clean, config.snr_db, rng)

    intensity = np.zeros((L, L))
    variance = np.zeros((L, L))
    if len(pix):
        intensity[prow, pcol] = pix_traces.mean(axis=1)
        variance[prow, pcol] = pix_traces.var(axis=1, ddof=1)
    truth = replace(
        gt,
        brightness=traces.mean(axis=1) if gt.n_emitters else np.zeros(0),
        intensity=intensity,
        variance=variance,
        noise_variance=s,
        background=config.background,
        signal_power=power,
    )
    stack = ImageStack(
        noisy,
        frame_rate=config.frame_rate,
        pitch_nm=geom.coarse_pitch,
        metadata={"noise_variance": s, "signal_power": power, "background": config.background},
    )
    return stack, truth


def simulate(
    config: AcquisitionConfig,
    kinetics: EmitterKinetics,
    kind: str = "tubules",
    density: float = 10.7,
    op: ForwardOperator | None = None,
    **phantom_kw,
) -> tuple[ImageStack, GroundTruth]:
    """Phantom, traces and rendered stack from one configuration (deterministic under its seeds)."""
    streams = config.streams()
    if op is None:
        op = ForwardOperator.from_psf(config.geometry, config.psf)
    gt = generate_phantom(kind, config.geometry, density, streams["phantom"], kinetics, **phantom_kw)
    traces, bleach = sample_emitter_traces(
        kinetics, gt.n_emitters, config.n_frames, config.frame_rate, streams["kinetics"], config.initial_state
    )
    gt.bleach_times_s = bleach
    return render_stack(gt, traces, config, op, streams["noise"])
