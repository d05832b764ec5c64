"""
Tests for the foothold generator: dense cloud, filtering, erosion and
candidate selection.
"""

import itertools
import math

import numpy as np
import pytest
from shapely.geometry import Point

from backend.models.foothold import FootholdCandidate, FootholdParams, FootState, GridCloud
from backend.models.geometry import Frame, PointCloud, Pose
from backend.models.perception import PlaneModel, PolygonSegment
from backend.models.scenario import StaircaseScene
from services.foothold_service import (
    FootholdGenerator, build_dense_cloud, convex_hull_2d, erode_cells, filter_cloud, grid_debug_rows,
    layer_and_erode, points_in_hull, rasterize_polygon, select_candidates, wrap_angle
)
from services.simulation_service import tread_surfaces

FLAT = FootState(0.0, 0.0, 0.0, 0.0)


def flat_polygon(xy, z: float, is_tread: bool = True) -> PolygonSegment:
    vertices = np.column_stack([np.asarray(xy, dtype=float), np.full(len(xy), z)])
    return PolygonSegment(vertices, PlaneModel([0.0, 0.0, 1.0], -z), is_tread=is_tread)


def box_polygon(x0, x1, y0, y1, z) -> PolygonSegment:
    return flat_polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], z)


def staircase_polygons(scene: StaircaseScene):
    """Ground-truth treads plus a floor patch in front of the first riser."""
    polygons = [box_polygon(-1.0, scene.origin[0], -0.5 * scene.width, 0.5 * scene.width, 0.0)]
    for surface in tread_surfaces(scene):
        xy = np.asarray(surface.polygon.exterior.coords)[:-1]
        polygons.append(flat_polygon(xy, surface.height))
    return polygons


def world_base(x=0.0, y=0.0, z=0.0, yaw=0.0) -> Pose:
    return Pose.from_xyz_yaw(x, y, z, yaw, Frame.W, Frame.B)


def grid_of(points, g_res=0.02) -> GridCloud:
    points = np.asarray(points, dtype=float)
    cells = np.floor(points[:, :2] / g_res).astype(int)
    return GridCloud(cells, points, g_res)


def naive_erosion(occupancy: np.ndarray, iterations: int) -> np.ndarray:
    current = occupancy.copy()
    rows, cols = current.shape
    for _ in range(iterations):
        nxt = np.zeros_like(current)
        for r in range(rows):
            for c in range(cols):
                if not current[r, c]:
                    continue
                nxt[r, c] = all(
                    0 <= r + dr < rows and 0 <= c + dc < cols and current[r + dr, c + dc]
                    for dr in (-1, 0, 1) for dc in (-1, 0, 1)
                )
        current = nxt
    return current


class TestConvexHull:
    """Test convex_hull_2d() and points_in_hull()."""

    def test_matches_pairwise_halfplane_oracle(self, rng):
        for _ in range(500):
            n = int(rng.integers(3, 13))
            pts = rng.uniform(-1.0, 1.0, (n, 2))
            hull = convex_hull_2d(pts)
            assert hull is not None

            expected = set()
            for i, j in itertools.permutations(range(n), 2):
                edge = pts[j] - pts[i]
                rel = pts - pts[i]
                cross = edge[0] * rel[:, 1] - edge[1] * rel[:, 0]
                if np.all(cross >= -1e-12):
                    expected.update((i, j))
            assert set(hull.vertices.tolist()) == expected

    def test_triangle_is_its_own_hull(self):
        tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        hull = convex_hull_2d(tri)
        assert sorted(hull.vertices.tolist()) == [0, 1, 2]

    def test_collinear_is_degenerate(self):
        assert convex_hull_2d(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])) is None
        assert convex_hull_2d(np.array([[0.0, 0.0], [1.0, 1.0]])) is None

    def test_boundary_counts_as_inside(self):
        hull = convex_hull_2d(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))
        inside = points_in_hull(hull, np.array([[1.0, 0.5], [0.0, 0.0], [0.5, 0.5], [1.01, 0.5]]))
        assert inside.tolist() == [True, True, True, False]


class TestBuildDenseCloud:
    """Test build_dense_cloud()."""

    def test_unit_square_heights(self):
        cloud = build_dense_cloud([box_polygon(0, 1, 0, 1, 0.13)], 0.1)
        assert len(cloud) > 0
        assert np.all(cloud.points[:, 2] == 0.13)
        assert cloud.frame is Frame.W

    def test_unit_square_lattice(self):
        cloud = build_dense_cloud([box_polygon(0, 1, 0, 1, 0.0)], 0.5)
        assert len(cloud) == 9
        expected = {(x, y) for x in (0.0, 0.5, 1.0) for y in (0.0, 0.5, 1.0)}
        assert {tuple(p) for p in cloud.points[:, :2].tolist()} == expected

    def test_height_is_vertex_mean(self):
        poly = flat_polygon([(0, 0), (1, 0), (1, 1), (0, 1)], 0.0)
        tilted = PolygonSegment(poly.vertices + np.array([[0, 0, 0.1], [0, 0, 0.2], [0, 0, 0.3], [0, 0, 0.2]]),
                                poly.plane)
        points = rasterize_polygon(tilted, 0.25)
        assert np.allclose(points[:, 2], 0.2)

    def test_triangle_stays_inside(self):
        cloud = build_dense_cloud([flat_polygon([(0, 0), (1, 0), (0, 1)], 0.0)], 0.1)
        assert np.all(cloud.points[:, 0] + cloud.points[:, 1] <= 1.0 + 1e-9)

    def test_degenerate_polygon_skipped(self, caplog):
        collinear = flat_polygon([(0, 0), (1, 0), (2, 0)], 0.0)
        cloud = build_dense_cloud([collinear, box_polygon(0, 1, 0, 1, 0.0)], 0.5)
        assert len(cloud) == 9
        assert set(cloud.labels.tolist()) == {1}
        assert 'degenerate' in caplog.text

    def test_union_keeps_earlier_points(self):
        first = build_dense_cloud([box_polygon(0, 1, 0, 1, 0.0)], 0.25)
        both = build_dense_cloud([box_polygon(0, 1, 0, 1, 0.0), box_polygon(2, 3, 0, 1, 0.13)], 0.25)
        before = {tuple(p) for p in first.points.tolist()}
        assert before <= {tuple(p) for p in both.points.tolist()}


class TestFilterCloud:
    """Test filter_cloud()."""

    def test_outside_range_removed(self):
        p = FootholdParams()
        cloud = PointCloud(np.array([[p.g_range + p.g_res, 0.0, 0.0], [0.5, 0.0, 0.0]]), Frame.W)
        grid = filter_cloud(cloud, world_base(), FLAT, p)
        assert len(grid) == 1
        assert grid.points[0, 0] == pytest.approx(0.5)

    def test_cell_keeps_maximum(self):
        cloud = PointCloud(np.array([[0.005, 0.005, 0.1], [0.01, 0.01, 0.2]]), Frame.W)
        grid = filter_cloud(cloud, world_base(), FLAT, FootholdParams(g_z=0.5))
        assert len(grid) == 1
        assert grid.z[0] == pytest.approx(0.2)

    def test_step_up_threshold(self):
        cloud = PointCloud(np.array([[0.1, 0.0, 0.2], [0.3, 0.0, 0.13]]), Frame.W)
        grid = filter_cloud(cloud, world_base(), FLAT, FootholdParams(g_z=0.18))
        assert grid.z.tolist() == pytest.approx([0.13])

    def test_result_is_base_frame(self):
        cloud = PointCloud(np.array([[1.5, 2.0, 0.9]]), Frame.W)
        grid = filter_cloud(cloud, world_base(1.0, 2.0, 0.8, math.pi / 2), FLAT, FootholdParams())
        assert grid.frame is Frame.B
        assert np.allclose(grid.points, [[0.0, -0.5, 0.1]], atol=1e-12)

    def test_canonical_order(self, rng):
        cloud = PointCloud(rng.uniform(-0.5, 0.5, (400, 3)) * [1, 1, 0.1], Frame.W)
        grid = filter_cloud(cloud, world_base(), FootState(-1, -1, -1, -1), FootholdParams(g_z=2.0))
        keys = [tuple(c) for c in grid.cells.tolist()]
        assert keys == sorted(keys)
        assert len(set(keys)) == len(keys)

    def test_empty(self):
        grid = filter_cloud(PointCloud(np.zeros((0, 3)), Frame.W), world_base(), FLAT, FootholdParams())
        assert len(grid) == 0


class TestLayerAndErode:
    """Test erode_cells() and layer_and_erode()."""

    def test_isolated_cell_removed(self):
        grid = grid_of([[0.01, 0.01, 0.13]])
        out = layer_and_erode(grid, FootState(-1, -1, -1, -1), FootholdParams(n_erosion=1))
        assert len(out) == 0

    def test_block_keeps_interior(self):
        cells = [(i, j) for i in range(10) for j in range(10)]
        points = [[(i + 0.5) * 0.02, (j + 0.5) * 0.02, 0.13] for i, j in cells]
        out = layer_and_erode(GridCloud(cells, points, 0.02), FootState(-1, -1, -1, -1), FootholdParams(n_erosion=1))
        assert out.cell_set() == {(i, j) for i in range(1, 9) for j in range(1, 9)}
        assert set(out.layers.tolist()) == {2}

    def test_layer_index(self):
        assert math.floor(0.13 / FootholdParams().h_layer) == 2

    def test_sole_band_gets_extra_pass(self):
        cells = [(i, j) for i in range(10) for j in range(10)]
        points = [[(i + 0.5) * 0.02, (j + 0.5) * 0.02, 0.0] for i, j in cells]
        out = layer_and_erode(GridCloud(cells, points, 0.02), FLAT, FootholdParams(n_erosion=1))
        assert out.cell_set() == {(i, j) for i in range(2, 8) for j in range(2, 8)}

    def test_layers_erode_separately(self):
        low = [(i, j) for i in range(6) for j in range(6)]
        high = [(i, j) for i in range(6, 12) for j in range(6)]
        points = [[(i + 0.5) * 0.02, (j + 0.5) * 0.02, 0.0] for i, j in low]
        points += [[(i + 0.5) * 0.02, (j + 0.5) * 0.02, 0.13] for i, j in high]
        out = layer_and_erode(GridCloud(low + high, points, 0.02), FootState(-1, -1, -1, -1),
                              FootholdParams(n_erosion=1))
        assert (5, 2) not in out.cell_set()
        assert (6, 2) not in out.cell_set()
        assert (4, 2) in out.cell_set() and (7, 2) in out.cell_set()

    def test_matches_naive_scan(self, rng):
        for _ in range(200):
            occupancy = rng.random((32, 32)) < rng.uniform(0.5, 0.95)
            iterations = int(rng.integers(1, 4))
            cells = np.argwhere(occupancy)
            mask = erode_cells(cells, iterations)
            expected = naive_erosion(occupancy, iterations)
            assert np.array_equal(mask, expected[cells[:, 0], cells[:, 1]])

    def test_empty_grid(self):
        out = layer_and_erode(GridCloud(np.zeros((0, 2)), np.zeros((0, 3)), 0.02), FLAT, FootholdParams())
        assert len(out) == 0


class TestSelectCandidates:
    """Test select_candidates()."""

    def test_single_eligible_cell(self):
        grid = grid_of([[0.3, 0.0, 0.13], [0.1, 0.0, 0.0]])
        cand = select_candidates(grid, world_base(), FLAT, FootholdParams())
        assert np.allclose(cand.p_star, [0.3, 0.0, 0.13])
        assert cand.p_star2 is None

    def test_nearest_wins(self):
        grid = grid_of([[0.5, 0.0, 0.13], [0.0, 0.3, 0.13]])
        cand = select_candidates(grid, world_base(), FLAT, FootholdParams())
        assert np.allclose(cand.p_star, [0.0, 0.3, 0.13])

    def test_tie_breaks_on_x(self):
        grid = grid_of([[0.0, 0.3, 0.13], [0.0, -0.3, 0.13], [-0.3, 0.0, 0.13]])
        cand = select_candidates(grid, world_base(), FLAT, FootholdParams())
        assert np.allclose(cand.p_star, [-0.3, 0.0, 0.13])

    def test_direction(self):
        grid = grid_of([[1.0, 1.0, 0.13]])
        cand = select_candidates(grid, world_base(), FLAT, FootholdParams(g_range=2.0))
        assert cand.theta_rel == pytest.approx(math.pi / 4)

    def test_direction_relative_to_heading(self):
        grid = grid_of([[0.3, 0.0, 0.13]])
        cand = select_candidates(grid, world_base(yaw=3.0), FLAT, FootholdParams())
        assert cand.theta_rel == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(cand.p_star[:2], [0.3 * math.cos(3.0), 0.3 * math.sin(3.0)])

    def test_next_level(self):
        grid = grid_of([[0.3, 0.0, 0.13], [0.35, 0.0, 0.14], [0.5, 0.0, 0.26], [0.9, 0.0, 0.39]])
        cand = select_candidates(grid, world_base(), FLAT, FootholdParams())
        assert cand.height == pytest.approx(0.13)
        assert np.allclose(cand.p_star2, [0.5, 0.0, 0.26])

    def test_sole_band_not_eligible(self):
        grid = grid_of([[0.3, 0.0, 0.02], [0.2, 0.0, -0.1]])
        assert select_candidates(grid, world_base(), FLAT, FootholdParams()) is None

    def test_empty_grid(self):
        grid = GridCloud(np.zeros((0, 2)), np.zeros((0, 3)), 0.02)
        assert select_candidates(grid, world_base(), FLAT, FootholdParams()) is None

    def test_wrap_angle(self):
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)

    def test_candidate_rejects_unwrapped_angle(self):
        with pytest.raises(ValueError):
            FootholdCandidate(np.zeros(3), 4.0)


class TestFootState:
    """Test FootState."""

    def test_minimum(self):
        assert FootState(0.1, 0.05, 0.2, 0.3).z_foot == 0.05

    def test_from_contacts(self):
        contacts = np.zeros((8, 3))
        contacts[:, 2] = [0.1, 0.12, 0.2, 0.15, 0.3, 0.31, 0.4, 0.41]
        state = FootState.from_contacts(contacts)
        assert (state.lltoe, state.llheel, state.rrtoe, state.rrheel) == (0.1, 0.15, 0.3, 0.4)

    def test_params_resolution_below_range(self):
        with pytest.raises(ValueError):
            FootholdParams(g_res=1.0, g_range=1.0)


class TestFootholdGenerator:
    """Test the chained generator on the ground-truth staircase."""

    def test_first_tread_from_the_floor(self, staircase):
        base = world_base(0.0, 0.0, 0.8)
        result = FootholdGenerator().generate(staircase_polygons(staircase), base, FootState(-0.8, -0.8, -0.8, -0.8),
                                              stamp=1.5)
        cand = result.candidate
        assert cand is not None
        assert cand.height == pytest.approx(staircase.level_height(1))
        assert 0.3 < cand.p_star[0] < 0.38
        assert abs(cand.theta_rel) < 0.1
        assert cand.stamp == 1.5
        assert cand.region.contains_cell_of(cand.p_star)
        assert cand.region.footprint.area == pytest.approx(staircase.tread * staircase.width, rel=1e-3)
        assert cand.p_star2 is None

    def test_safety_margin(self, staircase):
        p = FootholdParams(g_z=1.0)
        base = world_base(0.0, 0.0, 0.8)
        result = FootholdGenerator(p).generate(staircase_polygons(staircase), base,
                                               FootState(-0.8, -0.8, -0.8, -0.8))
        surfaces = {round(s.height, 6): s.polygon for s in tread_surfaces(staircase)}
        checked = 0
        for (i, j), point in zip(result.eroded.cells.tolist(), result.eroded.points):
            height = round(point[2] + 0.8, 6)
            if height not in surfaces:
                continue
            centre = Point((i + 0.5) * p.g_res, (j + 0.5) * p.g_res)
            tread = surfaces[height]
            assert tread.covers(centre)
            assert tread.exterior.distance(centre) >= (p.n_erosion - 0.5) * p.g_res - 1e-9
            checked += 1
        assert checked > 0

    def test_no_candidate_on_flat_floor(self):
        polygons = [box_polygon(-1, 1, -1, 1, 0.0)]
        result = FootholdGenerator().generate(polygons, world_base(0, 0, 0.8), FootState(-0.8, -0.8, -0.8, -0.8))
        assert result.candidate is None
        assert len(result.filtered) > 0

    def test_grid_debug_rows(self):
        cells = [(i, j) for i in range(5) for j in range(5)]
        points = [[(i + 0.5) * 0.02, (j + 0.5) * 0.02, 0.13] for i, j in cells]
        grid = GridCloud(cells, points, 0.02)
        eroded = layer_and_erode(grid, FootState(-1, -1, -1, -1), FootholdParams(n_erosion=1))
        rows = grid_debug_rows(grid, eroded, 0.05)
        assert len(rows) == 25
        assert sum(r['eroded_flag'] for r in rows) == 9
        assert set(rows[0]) == {'i', 'j', 'x', 'y', 'z', 'k', 'eroded_flag'}
        assert all(r['k'] == 2 for r in rows)
