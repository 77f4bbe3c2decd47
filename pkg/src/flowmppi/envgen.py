"""Random environment generation, start/goal sampling, and point-cloud ingestion.

Environments are 4 m per side, rasterized on 64-cell grids. Cluttered
environments contain random discs (2D) or spheres (3D); rooms environments are
four rooms formed by two crossing walls with narrow passages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grids import OccupancyGrid, SdfGrid, cell_centers, occupancy_to_sdf

DEFAULT_EXTENT = 4.0
DEFAULT_GRID_SIZE = 64
MIN_START_GOAL_SEPARATION = 4.0

# Bounding-sphere radius of the quadrotor cylinder (radius 0.1 m, height 0.05 m).
QUADROTOR_RADIUS = math.sqrt(0.1**2 + 0.025**2)
PLANAR_RADIUS = 0.0

START_VELOCITY_STD = 0.5


@dataclass(frozen=True)
class ObstacleParams:
    """Disc/sphere clutter parameters. Counts inclusive, radii in meters."""

    count_min: int = 4
    count_max: int = 10
    radius_min: float = 0.25
    radius_max: float = 0.7

    def __post_init__(self):
        if self.count_min < 0 or self.count_max < self.count_min:
            raise ValueError("bad obstacle count range")
        if self.radius_min <= 0 or self.radius_max < self.radius_min:
            raise ValueError("bad obstacle radius range")


@dataclass(frozen=True)
class PassageParams:
    """Rooms-environment parameters. Passage widths in meters."""

    width_min: float = 0.3
    width_max: float = 0.6
    wall_thickness_cells: int = 2
    passages_per_segment_max: int = 2

    def __post_init__(self):
        if self.width_min <= 0 or self.width_max < self.width_min:
            raise ValueError("bad passage width range")
        if self.wall_thickness_cells < 1:
            raise ValueError("wall thickness must be >= 1 cell")
        if self.passages_per_segment_max < 1:
            raise ValueError("need at least one passage per wall segment")


@dataclass(frozen=True)
class Task:
    """One navigation problem: an environment plus start and goal states."""

    sdf: SdfGrid = field(repr=False)
    x0: np.ndarray
    x_goal: np.ndarray
    system: str


def gen_cluttered(
    rng: np.random.Generator,
    dim: int,
    params: ObstacleParams = ObstacleParams(),
    size: int = DEFAULT_GRID_SIZE,
    extent: float = DEFAULT_EXTENT,
    max_retries: int = 50,
) -> OccupancyGrid:
    """Random disc- (2D) or sphere-shaped (3D) obstacles of random size,
    location and number. A cell is occupied iff its center lies inside an
    obstacle. Retries until at least one free cell remains."""
    if dim not in (2, 3):
        raise ValueError("dim must be 2 or 3")
    centers = cell_centers(size, extent)
    axes = np.meshgrid(*([centers] * dim), indexing="ij")
    for _ in range(max_retries):
        n = int(rng.integers(params.count_min, params.count_max + 1))
        cells = np.zeros((size,) * dim, dtype=bool)
        for _ in range(n):
            c = rng.uniform(0.0, extent, size=dim)
            r = rng.uniform(params.radius_min, params.radius_max)
            d2 = np.zeros_like(cells, dtype=np.float64)
            for a in range(dim):
                d2 += (axes[a] - c[a]) ** 2
            cells |= d2 <= r * r
        if not cells.all():
            return OccupancyGrid(cells=cells, extent=extent)
    raise RuntimeError("obstacle parameters filled the grid on every retry")


def _carve_gap(cells, wall_axis, wall_lo, wall_hi, gap_slices):
    idx = [slice(None)] * cells.ndim
    idx[wall_axis] = slice(wall_lo, wall_hi)
    for axis, sl in gap_slices:
        idx[axis] = sl
    cells[tuple(idx)] = False


def gen_rooms(
    rng: np.random.Generator,
    dim: int,
    params: PassageParams = PassageParams(),
    size: int = DEFAULT_GRID_SIZE,
    extent: float = DEFAULT_EXTENT,
) -> OccupancyGrid:
    """Four rooms formed by two full-length walls crossing at the grid center,
    with 1..passages_per_segment_max randomly placed gaps per interior wall
    segment so that all rooms stay mutually reachable."""
    if dim not in (2, 3):
        raise ValueError("dim must be 2 or 3")
    res = extent / size
    t = params.wall_thickness_cells
    lo = size // 2 - t // 2
    hi = lo + t

    cells = np.zeros((size,) * dim, dtype=bool)
    # Wall normal to axis 0 (spans all of axes 1..) and normal to axis 1.
    for wall_axis in (0, 1):
        idx = [slice(None)] * dim
        idx[wall_axis] = slice(lo, hi)
        cells[tuple(idx)] = True

    # Each wall is cut into two segments by the other wall. Carve gaps starting
    # inside each segment; oversized gaps may spill past it (a full-wall-length
    # passage removes the wall entirely, intersection included).
    for wall_axis in (0, 1):
        along_axis = 1 - wall_axis
        for seg_lo, seg_hi in ((0, lo), (hi, size)):
            seg_len = seg_hi - seg_lo
            n_gaps = int(rng.integers(1, params.passages_per_segment_max + 1))
            for _ in range(n_gaps):
                w_cells = max(1, int(round(rng.uniform(params.width_min, params.width_max) / res)))
                start = seg_lo + int(rng.integers(0, max(1, seg_len - w_cells + 1)))
                gap_slices = [(along_axis, slice(start, min(start + w_cells, size)))]
                if dim == 3:
                    # Holes pierce the wall; pick a z-interval of the same width.
                    z_start = int(rng.integers(0, max(1, size - w_cells + 1)))
                    gap_slices.append((2, slice(z_start, min(z_start + w_cells, size))))
                _carve_gap(cells, wall_axis, lo, hi, gap_slices)
    return OccupancyGrid(cells=cells, extent=extent)


def free_space_connected(grid: OccupancyGrid, min_fraction: float = 0.99) -> bool:
    """True if the largest connected free region holds >= min_fraction of free cells."""
    free = ~grid.cells
    if not free.any():
        return False
    structure = ndimage.generate_binary_structure(grid.ndim, 1)
    labels, n = ndimage.label(free, structure=structure)
    if n <= 1:
        return True
    counts = np.bincount(labels.ravel())[1:]
    return counts.max() / free.sum() >= min_fraction


class InfeasibleEnvironment(RuntimeError):
    """No valid start/goal pair was found within the retry limit."""


def _collision_radius(system: str) -> float:
    if system == "planar":
        return PLANAR_RADIUS
    if system == "quadrotor":
        return QUADROTOR_RADIUS
    raise ValueError(f"unknown system {system!r}")


def sample_start_goal(
    sdf: SdfGrid,
    rng: np.random.Generator,
    system: str,
    max_retries: int = 2000,
    min_separation: float = MIN_START_GOAL_SEPARATION,
    velocity_std: float = START_VELOCITY_STD,
) -> tuple[np.ndarray, np.ndarray]:
    """Collision-free start/goal pair with position separation >= 4 m.

    Planar states are (x, y, vx, vy) with start velocity drawn per axis from
    N(0, velocity_std^2) and zero goal velocity. Quadrotor states are 12-dim
    with the same start linear-velocity draw, zero attitude and rates, and a
    fully zero-rate goal.
    """
    radius = _collision_radius(system)
    pdim = sdf.ndim
    if system == "planar" and pdim != 2:
        raise ValueError("planar system needs a 2D environment")
    if system == "quadrotor" and pdim != 3:
        raise ValueError("quadrotor system needs a 3D environment")

    def draw_position():
        for _ in range(max_retries):
            pos = rng.uniform(0.0, sdf.extent, size=pdim)
            if sdf.query(pos) > radius:
                return pos
        raise InfeasibleEnvironment("no collision-free position found")

    for _ in range(max_retries):
        p0 = draw_position()
        pg = draw_position()
        if np.linalg.norm(p0 - pg) >= min_separation:
            break
    else:
        raise InfeasibleEnvironment(
            f"no start/goal pair with separation >= {min_separation} m"
        )

    if system == "planar":
        v0 = rng.normal(0.0, velocity_std, size=2)
        x0 = np.concatenate([p0, v0])
        xg = np.concatenate([pg, np.zeros(2)])
    else:
        x0 = np.zeros(12)
        x0[:3] = p0
        x0[6:9] = rng.normal(0.0, velocity_std, size=3)
        xg = np.zeros(12)
        xg[:3] = pg
    return x0, xg


def ingest_points(
    points: np.ndarray,
    extent: float = DEFAULT_EXTENT,
    size: int = DEFAULT_GRID_SIZE,
    dim: int = 3,
) -> tuple[OccupancyGrid, int]:
    """Bin a point cloud into an occupancy grid.

    A cell is occupied iff at least one point falls inside it. Points outside
    [0, extent)^dim are dropped; the dropped count is returned. Raises if no
    point lands in bounds.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != dim:
        raise ValueError(f"expected (n, {dim}) points, got {points.shape}")
    if points.shape[0] == 0:
        raise ValueError("empty point set")
    res = extent / size
    inside = np.all((points >= 0.0) & (points < extent), axis=1)
    dropped = int((~inside).sum())
    kept = points[inside]
    if kept.shape[0] == 0:
        raise ValueError("all points fall outside the grid bounds")
    idx = np.floor(kept / res).astype(np.intp)
    cells = np.zeros((size,) * dim, dtype=bool)
    cells[tuple(idx.T)] = True
    return OccupancyGrid(cells=cells, extent=extent), dropped


def read_xyz_ascii(path) -> np.ndarray:
    """ASCII XYZ: one whitespace-separated point per line."""
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape[1] != 3:
        raise ValueError(f"expected 3 columns in {path}, got {pts.shape[1]}")
    return pts


def read_xyz_binary(path) -> np.ndarray:
    """Binary little-endian float32 XYZ triples."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size == 0 or raw.size % 3 != 0:
        raise ValueError(f"{path}: size is not a multiple of 3 float32 values")
    return raw.reshape(-1, 3).astype(np.float64)


def generate_environment(
    rng: np.random.Generator,
    kind: str,
    dim: int,
    size: int = DEFAULT_GRID_SIZE,
    extent: float = DEFAULT_EXTENT,
    obstacle_params: ObstacleParams = ObstacleParams(),
    passage_params: PassageParams = PassageParams(),
) -> SdfGrid:
    if kind == "cluttered":
        grid = gen_cluttered(rng, dim, obstacle_params, size=size, extent=extent)
    elif kind == "rooms":
        grid = gen_rooms(rng, dim, passage_params, size=size, extent=extent)
    else:
        raise ValueError(f"unknown environment kind {kind!r}")
    return occupancy_to_sdf(grid)


def generate_task(
    rng: np.random.Generator,
    kind: str,
    system: str,
    size: int = DEFAULT_GRID_SIZE,
    extent: float = DEFAULT_EXTENT,
    obstacle_params: ObstacleParams = ObstacleParams(),
    passage_params: PassageParams = PassageParams(),
    env_retries: int = 20,
) -> Task:
    """Environment plus one feasible start/goal pair; regenerates the
    environment if pair sampling proves infeasible."""
    dim = 2 if system == "planar" else 3
    for _ in range(env_retries):
        sdf = generate_environment(
            rng, kind, dim, size=size, extent=extent,
            obstacle_params=obstacle_params, passage_params=passage_params,
        )
        try:
            x0, xg = sample_start_goal(sdf, rng, system)
        except InfeasibleEnvironment:
            continue
        return Task(sdf=sdf, x0=x0, x_goal=xg, system=system)
    raise InfeasibleEnvironment("could not generate a feasible task")
