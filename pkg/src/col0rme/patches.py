"""Overlapping square patches over the coarse grid and nearest-centre stitching on the fine grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Patch:
    index: int
    row0: int
    col0: int
    size: int

    def coarse_slices(self) -> tuple[slice, slice]:
        return slice(self.row0, self.row0 + self.size), slice(self.col0, self.col0 + self.size)

    def fine_slices(self, zoom: int) -> tuple[slice, slice]:
        return (
            slice(self.row0 * zoom, (self.row0 + self.size) * zoom),
            slice(self.col0 * zoom, (self.col0 + self.size) * zoom),
        )

    def fine_center(self, zoom: int) -> tuple[float, float]:
        half = self.size * zoom / 2.0 - 0.5
        return self.row0 * zoom + half, self.col0 * zoom + half


def _starts(size: int, patch: int, step: int) -> list[int]:
    if patch >= size:
        return [0]
    starts = list(range(0, size - patch + 1, step))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


@dataclass(frozen=True)
class PatchPlan:
    coarse_size: int
    patch_size: int
    overlap: int
    zoom: int
    patches: tuple[Patch, ...]

    @classmethod
    def build(cls, coarse_size: int, patch_size: int = 12, overlap: int = 4, zoom: int = 4) -> "PatchPlan":
        if patch_size < 1 or overlap < 0:
            raise ValueError("patch_size must be >= 1 and overlap >= 0")
        if overlap >= patch_size and patch_size < coarse_size:
            raise ValueError("overlap must be smaller than patch_size")
        size = min(patch_size, coarse_size)
        starts = _starts(coarse_size, size, max(1, size - overlap))
        patches = []
        # row-major over patch positions; index order is the tie-breaker for stitching
        for r in starts:
            for c in starts:
                patches.append(Patch(len(patches), r, c, size))
        return cls(coarse_size, size, overlap, zoom, tuple(patches))

    @classmethod
    def single(cls, coarse_size: int, zoom: int) -> "PatchPlan":
        return cls(coarse_size, coarse_size, 0, zoom, (Patch(0, 0, 0, coarse_size),))

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def fine_size(self) -> int:
        return self.coarse_size * self.zoom

    def owner_map(self) -> np.ndarray:
        """Patch index owning each fine pixel: the containing patch with the nearest centre."""
        L, q = self.fine_size, self.zoom
        rows, cols = np.mgrid[0:L, 0:L].astype(float)
        best = np.full((L, L), np.inf)
        owner = np.full((L, L), -1, dtype=int)
        for p in self.patches:
            rs, cs = p.fine_slices(q)
            cr, cc = p.fine_center(q)
            d = np.full((L, L), np.inf)
            d[rs, cs] = (rows[rs, cs] - cr) ** 2 + (cols[rs, cs] - cc) ** 2
            take = d < best  # strict: earlier patches win ties
            best[take] = d[take]
            owner[take] = p.index
        return owner

    def stitch(self, pieces: list[np.ndarray]) -> np.ndarray:
        """Assemble per-patch fine images into the full fine grid."""
        if len(pieces) != len(self.patches):
            raise ValueError("one fine image per patch required")
        owner = self.owner_map()
        out = np.zeros((self.fine_size, self.fine_size))
        for p, piece in zip(self.patches, pieces):
            rs, cs = p.fine_slices(self.zoom)
            mask = owner[rs, cs] == p.index
            out[rs, cs][mask] = np.asarray(piece)[mask]
        return out
