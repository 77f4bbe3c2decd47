import numpy as np
import pytest

from flowmppi.envgen import (InfeasibleEnvironment, ObstacleParams,
                             PassageParams, QUADROTOR_RADIUS, free_space_connected,
                             gen_cluttered, gen_rooms, ingest_points,
                             read_xyz_ascii, read_xyz_binary, sample_start_goal)
from flowmppi.grids import OccupancyGrid, cell_centers, occupancy_to_sdf


class ScriptedRng:
    """Replays queued values for integers/uniform/normal draws."""

    def __init__(self, integers=(), uniforms=(), normals=()):
        self._integers = list(integers)
        self._uniforms = list(uniforms)
        self._normals = list(normals)

    def integers(self, low, high=None, size=None):
        return self._integers.pop(0)

    def uniform(self, low, high=None, size=None):
        v = self._uniforms.pop(0)
        return np.asarray(v) if size is not None else v

    def normal(self, loc, scale, size=None):
        return np.asarray(self._normals.pop(0))


def test_zero_obstacles_gives_free_grid():
    grid = gen_cluttered(np.random.default_rng(0), 2,
                         ObstacleParams(count_min=0, count_max=0))
    assert not grid.cells.any()


def test_single_disc_rasterization_matches_per_cell_distance_oracle():
    # one disc, center (2, 2), radius 0.5 on a 64-cell, 4 m grid
    rng = ScriptedRng(integers=[1], uniforms=[np.array([2.0, 2.0]), 0.5])
    grid = gen_cluttered(rng, 2, ObstacleParams(count_min=1, count_max=1,
                                                radius_min=0.5, radius_max=0.5))
    centers = cell_centers(64, 4.0)
    xs, ys = np.meshgrid(centers, centers, indexing="ij")
    expected = (xs - 2.0) ** 2 + (ys - 2.0) ** 2 <= 0.25
    assert np.array_equal(grid.cells, expected)
    res = 4.0 / 64
    area_cells = np.pi * 0.5**2 / res**2
    perimeter_cells = 2 * np.pi * 0.5 / res
    assert abs(grid.cells.sum() - area_cells) <= perimeter_cells


def test_cluttered_deterministic_for_fixed_seed():
    a = gen_cluttered(np.random.default_rng(42), 2)
    b = gen_cluttered(np.random.default_rng(42), 2)
    assert np.array_equal(a.cells, b.cells)
    assert a.cells.tobytes() == b.cells.tobytes()


def test_cluttered_3d_spheres():
    grid = gen_cluttered(np.random.default_rng(1), 3)
    assert grid.cells.ndim == 3
    assert grid.cells.any() and not grid.cells.all()


def test_rooms_full_length_passage_degenerates_to_empty_grid():
    params = PassageParams(width_min=4.0, width_max=4.0)
    grid = gen_rooms(np.random.default_rng(0), 2, params)
    assert not grid.cells.any()


@pytest.mark.parametrize("seed", range(10))
def test_rooms_free_space_connected(seed):
    grid = gen_rooms(np.random.default_rng(seed), 2)
    assert free_space_connected(grid, min_fraction=0.99)


def test_rooms_3d_connected():
    grid = gen_rooms(np.random.default_rng(3), 3)
    assert free_space_connected(grid, min_fraction=0.99)


def test_rooms_wall_thickness_outside_gaps():
    params = PassageParams(wall_thickness_cells=2)
    grid = gen_rooms(np.random.default_rng(7), 2, params)
    size = grid.size
    lo = size // 2 - 1
    # columns crossing the x-wall are either fully open (gap) or exactly 2 thick
    for j in range(size):
        col = grid.cells[lo : lo + 2, j]
        assert col.all() or not col.any()
    for i in range(size):
        row = grid.cells[i, lo : lo + 2]
        assert row.all() or not row.any()


def test_rooms_has_four_rooms_before_gaps():
    # with zero-width-ish gaps the walls split space into 4 regions
    from scipy import ndimage

    params = PassageParams(width_min=0.3, width_max=0.3,
                           passages_per_segment_max=1)
    grid = gen_rooms(np.random.default_rng(1), 2, params)
    # fill the gaps back in: walls without gaps leave exactly 4 components
    size = grid.size
    lo = size // 2 - 1
    cells = grid.cells.copy()
    cells[lo : lo + 2, :] = True
    cells[:, lo : lo + 2] = True
    labels, n = ndimage.label(~cells)
    assert n == 4


def test_start_goal_separation_and_collision_free():
    sdf = occupancy_to_sdf(OccupancyGrid(np.zeros((64, 64), dtype=bool), 4.0))
    rng = np.random.default_rng(0)
    for _ in range(1000):
        x0, xg = sample_start_goal(sdf, rng, "planar")
        assert np.linalg.norm(x0[:2] - xg[:2]) >= 4.0
        assert sdf.query(x0[:2]) > 0 and sdf.query(xg[:2]) > 0
        assert np.all(xg[2:] == 0.0)


def test_start_goal_quadrotor_properties():
    sdf = occupancy_to_sdf(OccupancyGrid(np.zeros((32, 32, 32), dtype=bool), 4.0))
    rng = np.random.default_rng(1)
    x0, xg = sample_start_goal(sdf, rng, "quadrotor")
    assert x0.shape == (12,) and xg.shape == (12,)
    assert np.all(x0[3:6] == 0.0) and np.all(x0[9:] == 0.0)  # zero attitude/rates
    assert np.all(xg[3:] == 0.0)
    assert sdf.query(x0[:3]) > QUADROTOR_RADIUS
    assert np.linalg.norm(x0[:3] - xg[:3]) >= 4.0


def test_start_goal_infeasible_two_close_cells():
    cells = np.ones((8, 8), dtype=bool)
    cells[2, 2] = False
    cells[2, 4] = False  # 1 m apart at extent 4 (res 0.5)
    sdf = occupancy_to_sdf(OccupancyGrid(cells, extent=4.0))
    with pytest.raises(InfeasibleEnvironment):
        sample_start_goal(sdf, np.random.default_rng(0), "planar", max_retries=300)


def test_ingest_single_point_at_cell_center():
    grid, dropped = ingest_points(np.array([[0.25, 0.25, 0.25]]), extent=4.0, size=8)
    assert dropped == 0
    assert grid.cells.sum() == 1
    assert grid.cells[0, 0, 0]


def test_ingest_eight_corner_points_one_cell():
    eps = 1e-6
    res = 4.0 / 8
    corners = np.array([[x, y, z] for x in (eps, res - eps)
                        for y in (eps, res - eps) for z in (eps, res - eps)])
    grid, dropped = ingest_points(corners, extent=4.0, size=8)
    assert dropped == 0
    assert grid.cells.sum() == 1


def test_ingest_all_points_out_of_bounds_errors():
    with pytest.raises(ValueError):
        ingest_points(np.array([[5.0, 5.0, 5.0], [-1.0, 0.0, 0.0]]), extent=4.0, size=8)


def test_ingest_reports_dropped_count():
    pts = np.array([[1.0, 1.0, 1.0], [9.0, 9.0, 9.0], [2.0, 2.0, 2.0]])
    grid, dropped = ingest_points(pts, extent=4.0, size=8)
    assert dropped == 1
    assert grid.cells.sum() == 2


def test_xyz_readers_roundtrip(tmp_path):
    pts = np.array([[0.5, 1.0, 1.5], [2.0, 2.5, 3.0]])
    ascii_path = tmp_path / "cloud.xyz"
    ascii_path.write_text("\n".join(" ".join(map(str, p)) for p in pts) + "\n")
    assert np.allclose(read_xyz_ascii(ascii_path), pts)
    bin_path = tmp_path / "cloud.bin"
    pts.astype("<f4").tofile(bin_path)
    assert np.allclose(read_xyz_binary(bin_path), pts)


def test_cluttered_rejects_parameters_that_fill_the_grid():
    params = ObstacleParams(count_min=40, count_max=40,
                            radius_min=3.0, radius_max=3.0)
    with pytest.raises(RuntimeError):
        gen_cluttered(np.random.default_rng(0), 2, params, max_retries=5)
