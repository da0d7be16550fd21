"""Acquisition model: Gaussian PSF blur on a fine grid followed by q-fold block averaging.

Vectors are column-major (Fortran order) flattenings of square images, so the
fine pixel ``(row, col)`` has index ``row + L * col``.  The covariance-domain
operator ``A = Psi (.) Psi`` maps a fine variance vector ``r`` to
``vec(Psi diag(r) Psi^T)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.signal import fftconvolve

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

Mode = Literal["dense", "matrix-free"]


def vec(image: np.ndarray) -> np.ndarray:
    """Column-major flattening of the last two axes."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.ravel(order="F")
    lead = image.shape[:-2]
    return np.swapaxes(image, -1, -2).reshape(*lead, -1)


def unvec(v: np.ndarray, size: int) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim == 1:
        return v.reshape(size, size, order="F")
    lead = v.shape[:-1]
    return np.swapaxes(v.reshape(*lead, size, size), -1, -2)


@dataclass(frozen=True)
class GridGeometry:
    """Coarse camera grid of ``M x M`` pixels and its ``q``-times finer reconstruction grid."""

    coarse_size: int
    zoom: int = 4
    coarse_pitch: float = 100.0

    def __post_init__(self):
        if int(self.coarse_size) != self.coarse_size or self.coarse_size < 1:
            raise ValueError(f"coarse_size must be a positive integer, got {self.coarse_size}")
        if int(self.zoom) != self.zoom or self.zoom < 1:
            raise ValueError(f"zoom must be a positive integer, got {self.zoom}")
        if not self.coarse_pitch > 0:
            raise ValueError("coarse_pitch must be positive")

    @property
    def fine_size(self) -> int:
        return self.coarse_size * self.zoom

    @property
    def fine_pitch(self) -> float:
        return self.coarse_pitch / self.zoom

    def with_size(self, coarse_size: int) -> "GridGeometry":
        return GridGeometry(coarse_size, self.zoom, self.coarse_pitch)


@dataclass(frozen=True)
class PsfSpec:
    """Isotropic 2D Gaussian PSF.

    ``truncation_radius`` is in fine pixels; ``None`` picks ``ceil(4 sigma)``.
    """

    fwhm_nm: float = 229.0
    truncation_radius: int | None = None

    def __post_init__(self):
        if not self.fwhm_nm > 0:
            raise ValueError("fwhm_nm must be positive")

    @property
    def sigma_nm(self) -> float:
        return self.fwhm_nm / FWHM_PER_SIGMA

    def sigma_px(self, geom: GridGeometry) -> float:
        return self.sigma_nm / geom.fine_pitch

    def radius_px(self, geom: GridGeometry) -> int:
        sigma = self.sigma_px(geom)
        minimum = math.ceil(3.0 * sigma)
        if self.truncation_radius is None:
            return max(1, math.ceil(4.0 * sigma))
        if self.truncation_radius < minimum:
            raise ValueError(
                f"truncation_radius {self.truncation_radius} below ceil(3 sigma) = {minimum} fine pixels"
            )
        return int(self.truncation_radius)


def build_psf_kernel(spec: PsfSpec, geom: GridGeometry) -> np.ndarray:
    """Unit-sum Gaussian sampled at fine-pixel centres, zeroed outside a disc of the truncation radius."""
    if spec.fwhm_nm < geom.fine_pitch:
        raise ValueError(
            f"PSF FWHM {spec.fwhm_nm} nm is below one fine pixel ({geom.fine_pitch} nm): undersampled"
        )
    sigma = spec.sigma_px(geom)
    radius = spec.radius_px(geom)
    offsets = np.arange(-radius, radius + 1, dtype=float)
    r2 = offsets[:, None] ** 2 + offsets[None, :] ** 2
    kernel = np.exp(-r2 / (2.0 * sigma**2))
    kernel[r2 > radius**2] = 0.0
    return kernel / kernel.sum()


def block_average(image: np.ndarray, q: int) -> np.ndarray:
    """Mean over non-overlapping ``q x q`` blocks of the last two axes."""
    if q == 1:
        return image
    *lead, n, m = image.shape
    return image.reshape(*lead, n // q, q, m // q, q).mean(axis=(-3, -1))


def block_replicate(image: np.ndarray, q: int) -> np.ndarray:
    """Adjoint of :func:`block_average`: copy each value into its block, scaled by ``1/q^2``."""
    if q == 1:
        return image
    out = np.repeat(np.repeat(image, q, axis=-2), q, axis=-1)
    return out / (q * q)


class ForwardOperator:
    """Psi = M_q o H and the induced Khatri-Rao operator A = Psi (.) Psi.

    ``mode="dense"`` materialises Psi (``M^2 x L^2``) on construction and A on
    first use; ``"matrix-free"`` evaluates everything through convolutions.
    """

    def __init__(self, geometry: GridGeometry, kernel: np.ndarray, mode: Mode = "matrix-free"):
        kernel = np.asarray(kernel, dtype=float)
        if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
            raise ValueError("kernel must be square with odd side length")
        if mode not in ("dense", "matrix-free"):
            raise ValueError(f"unknown mode {mode!r}")
        self.geometry = geometry
        self.kernel = kernel
        self.mode = mode
        self.radius = kernel.shape[0] // 2
        self._psi: np.ndarray | None = None
        self._A: np.ndarray | None = None
        self._norms: np.ndarray | None = None
        if mode == "dense":
            self._psi = self.psi_matrix()

    @classmethod
    def from_psf(cls, geometry: GridGeometry, psf: PsfSpec, mode: Mode = "matrix-free") -> "ForwardOperator":
        return cls(geometry, build_psf_kernel(psf, geometry), mode)

    @property
    def n_coarse(self) -> int:
        return self.geometry.coarse_size**2

    @property
    def n_fine(self) -> int:
        return self.geometry.fine_size**2

    def _check(self, arr: np.ndarray, size: int, what: str):
        if arr.shape[-2:] != (size, size):
            raise ValueError(f"{what} must have trailing shape ({size}, {size}), got {arr.shape}")

    # -- image-space operator -------------------------------------------------

    def _convolve(self, x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
        if self.radius == 0:
            return x * kernel[0, 0]
        k = kernel.reshape((1,) * (x.ndim - 2) + kernel.shape)
        return fftconvolve(x, k, mode="same", axes=(-2, -1))

    def apply_psi(self, x: np.ndarray) -> np.ndarray:
        """Blur with the zero-padded PSF, then average ``q x q`` blocks.  Accepts ``(..., L, L)``."""
        x = np.asarray(x, dtype=float)
        self._check(x, self.geometry.fine_size, "fine image")
        if self._psi is not None and x.ndim == 2:
            return unvec(self._psi @ vec(x), self.geometry.coarse_size)
        return block_average(self._convolve(x, self.kernel), self.geometry.zoom)

    def apply_psi_adjoint(self, y: np.ndarray) -> np.ndarray:
        """Replicate each coarse value over its block (scaled by ``1/q^2``), then correlate with the kernel."""
        y = np.asarray(y, dtype=float)
        self._check(y, self.geometry.coarse_size, "coarse image")
        if self._psi is not None and y.ndim == 2:
            return unvec(self._psi.T @ vec(y), self.geometry.fine_size)
        up = block_replicate(y, self.geometry.zoom)
        return self._convolve(up, self.kernel[::-1, ::-1])

    def psi_column(self, i: int) -> np.ndarray:
        """Coarse image of a unit fine delta at column-major index ``i``."""
        geom = self.geometry
        L, q, R = geom.fine_size, geom.zoom, self.radius
        row, col = i % L, i // L
        # fine window covering the kernel footprint, widened to whole blocks
        r0, r1 = max(0, row - R), min(L, row + R + 1)
        c0, c1 = max(0, col - R), min(L, col + R + 1)
        br0, br1 = r0 // q, -(-r1 // q)
        bc0, bc1 = c0 // q, -(-c1 // q)
        window = np.zeros(((br1 - br0) * q, (bc1 - bc0) * q))
        window[r0 - br0 * q : r1 - br0 * q, c0 - bc0 * q : c1 - bc0 * q] = self.kernel[
            r0 - row + R : r1 - row + R, c0 - col + R : c1 - col + R
        ]
        out = np.zeros((geom.coarse_size, geom.coarse_size))
        out[br0:br1, bc0:bc1] = block_average(window, q)
        return out

    def psi_matrix(self) -> np.ndarray:
        """Dense ``M^2 x L^2`` matrix of Psi, built column by column."""
        if self._psi is not None:
            return self._psi
        psi = np.empty((self.n_coarse, self.n_fine))
        for i in range(self.n_fine):
            psi[:, i] = vec(self.psi_column(i))
        return psi

    # -- covariance-domain operator ---------------------------------------

    def _psi_rows(self) -> np.ndarray:
        """Psi^T as an ``L^2 x M^2`` array (row k of Psi as column k)."""
        if self._psi is not None:
            return self._psi.T
        M = self.geometry.coarse_size
        deltas = unvec(np.eye(self.n_coarse), M)
        return vec(self.apply_psi_adjoint(deltas)).T

    def khatri_rao(self) -> np.ndarray:
        """Dense ``M^4 x L^2`` matrix of ``Psi (.) Psi``."""
        if self._A is None:
            psi = self.psi_matrix()
            n = self.n_coarse
            self._A = (psi[:, None, :] * psi[None, :, :]).reshape(n * n, -1)
        return self._A

    def apply_A(self, r: np.ndarray) -> np.ndarray:
        """``vec(Psi diag(r) Psi^T)``."""
        r = np.asarray(r, dtype=float)
        if r.shape != (self.n_fine,):
            raise ValueError(f"variance vector must have length {self.n_fine}, got {r.shape}")
        if self.mode == "dense":
            psi = self._psi
            return ((psi * r) @ psi.T).ravel(order="F")
        rows = self._psi_rows() * r[:, None]  # columns of diag(r) Psi^T
        L = self.geometry.fine_size
        blurred = self.apply_psi(unvec(rows.T, L))  # (M^2, M, M)
        # row k of vec(blurred) is column k of Psi diag(r) Psi^T
        return vec(blurred).ravel()

    def apply_A_adjoint(self, z: np.ndarray) -> np.ndarray:
        """``diag(Psi^T Z Psi)`` with ``Z = unvec(z)``."""
        z = np.asarray(z, dtype=float)
        n = self.n_coarse
        if z.shape != (n * n,):
            raise ValueError(f"covariance vector must have length {n * n}, got {z.shape}")
        Z = z.reshape(n, n, order="F")
        if self.mode == "dense":
            psi = self._psi
            return np.einsum("ki,ki->i", psi, Z @ psi)
        rows = self._psi_rows()  # L^2 x M^2, equals Psi^T
        return np.einsum("ik,ik->i", rows @ Z, rows)

    def column_norms(self) -> np.ndarray:
        """``||a_i|| = ||psi_i||^2`` for every fine pixel."""
        if self._norms is None:
            if self._psi is not None:
                self._norms = np.einsum("ki,ki->i", self._psi, self._psi)
            else:
                self._norms = np.array(
                    [np.sum(self.psi_column(i) ** 2) for i in range(self.n_fine)]
                )
        return self._norms

    def gram(self) -> np.ndarray:
        """``A^T A = (Psi^T Psi) o (Psi^T Psi)`` as a dense ``L^2 x L^2`` array."""
        psi = self.psi_matrix()
        g = psi.T @ psi
        return g * g


def power_iteration(matvec, n: int, tol: float = 1e-6, max_iter: int = 500, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD operator given by ``matvec``."""
    rng = np.random.default_rng(seed)
    v = rng.random(n) + 0.5
    v /= np.linalg.norm(v)
    eig = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        new = float(v @ w)
        v = w / norm
        if abs(new - eig) <= tol * abs(new):
            eig = new
            break
        eig = new
    return eig


def operator_spectral_norm(op: ForwardOperator, gram: np.ndarray | None = None, safety: float = 1.01) -> float:
    """Power-iteration estimate of ``||A||_2``, inflated by ``safety``."""
    if gram is not None:
        matvec = gram.__matmul__
    else:
        matvec = lambda r: op.apply_A_adjoint(op.apply_A(r))  # noqa: E731
    return safety * math.sqrt(max(power_iteration(matvec, op.n_fine), 0.0))
