"""Occupancy grids and signed-distance fields on regular square/cubic lattices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class OccupancyGrid:
    """Boolean occupancy on a square (2D) or cubic (3D) grid.

    Cell (i, j[, k]) covers the axis-aligned box whose center is at
    ``(i + 0.5) * resolution`` along each axis, with the grid origin at 0.
    """

    cells: np.ndarray
    extent: float

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        object.__setattr__(self, "cells", cells)
        if cells.ndim not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got ndim={cells.ndim}")
        if len(set(cells.shape)) != 1:
            raise ValueError(f"all grid dimensions must be equal, got {cells.shape}")
        if self.extent <= 0:
            raise ValueError("extent must be positive")

    @property
    def ndim(self) -> int:
        return self.cells.ndim

    @property
    def size(self) -> int:
        return self.cells.shape[0]

    @property
    def resolution(self) -> float:
        return self.extent / self.size


@dataclass(frozen=True)
class SdfGrid:
    """Signed distances (meters) sampled at the cell centers of an OccupancyGrid.

    Negative inside obstacles, positive outside. Values are capped at the grid
    diagonal when one side of the boundary is empty (all-free / all-occupied).
    """

    values: np.ndarray
    extent: float
    occupied: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "occupied", np.asarray(self.occupied, dtype=bool))
        if values.ndim not in (2, 3):
            raise ValueError(f"sdf must be 2D or 3D, got ndim={values.ndim}")
        if values.shape != self.occupied.shape:
            raise ValueError("values and occupancy shapes differ")

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def resolution(self) -> float:
        return self.extent / self.size

    def in_bounds(self, pos: np.ndarray) -> np.ndarray:
        """Elementwise bounds check for positions of shape (..., ndim)."""
        pos = np.asarray(pos)
        return np.all((pos >= 0.0) & (pos <= self.extent), axis=-1)

    def query(self, pos: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of the SDF at positions of shape (..., ndim).

        Positions are clamped to the cell-center lattice, so queries between the
        grid edge and the first cell center return the edge-cell value.
        """
        pos = np.asarray(pos, dtype=np.float64)
        if pos.shape[-1] != self.ndim:
            raise ValueError(f"expected {self.ndim}-dim positions, got {pos.shape}")
        n = self.size
        g = pos / self.resolution - 0.5
        g = np.clip(g, 0.0, n - 1.0)
        lo = np.floor(g).astype(np.intp)
        lo = np.minimum(lo, n - 2)
        frac = g - lo

        out = np.zeros(pos.shape[:-1], dtype=np.float64)
        # Accumulate over the 2**ndim corners of the surrounding cell.
        for corner in range(1 << self.ndim):
            idx = []
            w = np.ones(pos.shape[:-1], dtype=np.float64)
            for axis in range(self.ndim):
                if corner >> axis & 1:
                    idx.append(lo[..., axis] + 1)
                    w = w * frac[..., axis]
                else:
                    idx.append(lo[..., axis])
                    w = w * (1.0 - frac[..., axis])
            out += w * self.values[tuple(idx)]
        return out


def cell_centers(size: int, extent: float) -> np.ndarray:
    res = extent / size
    return (np.arange(size) + 0.5) * res


def occupancy_to_sdf(grid: OccupancyGrid) -> SdfGrid:
    """Two-sided exact Euclidean distance transform of an occupancy grid.

    Outside obstacles: +distance to the nearest occupied cell center.
    Inside obstacles: -distance to the nearest free cell center.
    All-free / all-occupied grids get one-sided values capped at the grid
    diagonal.
    """
    occ = grid.cells
    res = grid.resolution
    cap = grid.extent * np.sqrt(grid.ndim)
    if not occ.any():
        values = np.full(occ.shape, cap, dtype=np.float64)
    elif occ.all():
        values = np.full(occ.shape, -cap, dtype=np.float64)
    else:
        # distance_transform_edt: distance from nonzero cells to the nearest zero.
        outside = ndimage.distance_transform_edt(~occ) * res
        inside = ndimage.distance_transform_edt(occ) * res
        values = np.where(occ, -inside, outside)
    return SdfGrid(values=values, extent=grid.extent, occupied=occ.copy())
