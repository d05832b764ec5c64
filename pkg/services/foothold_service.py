"""
Foothold Service - polygon map to eroded base-frame grid to candidates.

Pipeline: build_dense_cloud -> filter_cloud -> layer_and_erode ->
select_candidates. FootholdGenerator chains them and attaches the
placement region the planner needs.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial import ConvexHull, QhullError
from shapely.geometry import Polygon
from shapely.ops import unary_union

from backend.models.foothold import (
    FootholdCandidate, FootholdParams, FootholdRegion, FootState, GridCloud
)
from backend.models.geometry import Frame, PointCloud, Pose
from backend.models.perception import PolygonSegment
from services.geometry_service import invert, transform_cloud, transform_points

logger = logging.getLogger(__name__)

HULL_TOLERANCE = 1e-9
FOOTPRINT_CLOSING = 0.015
EIGHT_NEIGHBOURHOOD = np.ones((3, 3), dtype=bool)


def convex_hull_2d(xy: np.ndarray) -> Optional[ConvexHull]:
    """
    Planar convex hull.

    Returns:
        scipy ConvexHull, or None when the points are collinear or fewer
        than three
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if xy.shape[0] < 3:
        return None
    try:
        return ConvexHull(xy)
    except QhullError:
        return None


def points_in_hull(hull: ConvexHull, xy: np.ndarray, tol: float = HULL_TOLERANCE) -> np.ndarray:
    """Boundary-inclusive containment test against the hull facets."""
    return np.all(xy @ hull.equations[:, :2].T + hull.equations[:, 2] <= tol, axis=1)


def _lattice(lo: float, hi: float, pitch: float) -> np.ndarray:
    count = int(math.floor((hi - lo) / pitch + 1e-9)) + 1
    return lo + pitch * np.arange(count)


def rasterize_polygon(polygon: PolygonSegment, pitch: float) -> Optional[np.ndarray]:
    """
    Fill one polygon's flattened hull with a bounding-box lattice.

    Returns:
        (N, 3) points at the polygon's mean vertex height, or None for a
        degenerate hull
    """
    xy = polygon.vertices[:, :2]
    hull = convex_hull_2d(xy)
    if hull is None:
        return None
    corners = xy[hull.vertices]
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    gx, gy = np.meshgrid(_lattice(lo[0], hi[0], pitch), _lattice(lo[1], hi[1], pitch), indexing='ij')
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    inside = grid[points_in_hull(hull, grid)]
    z = np.full((inside.shape[0], 1), float(polygon.vertices[:, 2].mean()))
    return np.hstack([inside, z])


def build_dense_cloud(polygons: Iterable[PolygonSegment], g_res: float) -> PointCloud:
    """
    Union of rasterized polygons.

    Args:
        polygons: world-frame polygon segments
        g_res: lattice pitch, meters

    Returns:
        World-frame cloud; labels hold the source polygon index
    """
    chunks, labels = [], []
    for index, polygon in enumerate(polygons):
        points = rasterize_polygon(polygon, g_res)
        if points is None:
            logger.warning(f"Polygon {index} skipped: degenerate (collinear) hull")
            continue
        chunks.append(points)
        labels.append(np.full(points.shape[0], index))
    if not chunks:
        return PointCloud(np.zeros((0, 3)), Frame.W, np.zeros(0, dtype=int))
    return PointCloud(np.vstack(chunks), Frame.W, np.concatenate(labels))


def filter_cloud(cloud: PointCloud, base_pose: Pose, foot: FootState, p: FootholdParams) -> GridCloud:
    """
    Range crop, per-cell maximum and step-up threshold, in the base frame.

    Args:
        cloud: world-frame dense cloud
        base_pose: T_W_B
        foot: sole heights (base frame)
        p: foothold params

    Returns:
        GridCloud in canonical (i, j) order; may be empty
    """
    local = transform_cloud(invert(base_pose.with_frames(Frame.W, Frame.B)), cloud).points
    in_range = (np.abs(local[:, 0]) <= p.g_range) & (np.abs(local[:, 1]) <= p.g_range)
    local = local[in_range]
    if local.shape[0] == 0:
        return GridCloud(np.zeros((0, 2)), np.zeros((0, 3)), p.g_res)

    cells = np.floor(local[:, :2] / p.g_res).astype(np.int64)
    order = np.lexsort((-local[:, 2], cells[:, 1], cells[:, 0]))
    cells, local = cells[order], local[order]
    first = np.ones(cells.shape[0], dtype=bool)
    first[1:] = np.any(cells[1:] != cells[:-1], axis=1)
    cells, local = cells[first], local[first]

    keep = local[:, 2] <= foot.z_foot + p.g_z
    return GridCloud(cells[keep], local[keep], p.g_res)


def erode_cells(cells: np.ndarray, iterations: int) -> np.ndarray:
    """
    8-neighbourhood binary erosion of a sparse cell set.

    Returns:
        Boolean mask over `cells` of the survivors
    """
    if cells.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    origin = cells.min(axis=0) - 1
    shape = cells.max(axis=0) - origin + 2
    occupancy = np.zeros(shape, dtype=bool)
    idx = cells - origin
    occupancy[idx[:, 0], idx[:, 1]] = True
    eroded = binary_erosion(occupancy, structure=EIGHT_NEIGHBOURHOOD, iterations=iterations, border_value=0)
    return eroded[idx[:, 0], idx[:, 1]]


def layer_and_erode(grid: GridCloud, foot: FootState, p: FootholdParams) -> GridCloud:
    """
    Split into height layers and erode each one.

    Cells in the sole band [z_foot - delta_foot, z_foot + delta_foot]
    get one extra erosion pass over the band's own occupancy.

    Returns:
        Surviving cells with their layer index filled in
    """
    if len(grid) == 0:
        return GridCloud(grid.cells, grid.points, grid.g_res, np.zeros(0, dtype=np.int64))
    layers = np.floor(grid.z / p.h_layer).astype(np.int64)
    survivors = np.zeros(len(grid), dtype=bool)
    for k in np.unique(layers):
        members = np.flatnonzero(layers == k)
        survivors[members] = erode_cells(grid.cells[members], p.n_erosion)

    band = np.abs(grid.z - foot.z_foot) <= p.delta_foot
    band_survivors = np.flatnonzero(survivors & band)
    if band_survivors.size:
        survivors[band_survivors] = erode_cells(grid.cells[band_survivors], 1)

    layered = GridCloud(grid.cells, grid.points, grid.g_res, layers, grid.frame)
    logger.debug(f"Erosion kept {int(survivors.sum())}/{len(grid)} cells over {np.unique(layers).size} layers")
    return layered.subset(survivors)


def wrap_angle(angle: float) -> float:
    return float(math.atan2(math.sin(angle), math.cos(angle)))


def _nearest(points: np.ndarray, eligible: np.ndarray) -> Optional[int]:
    index = np.flatnonzero(eligible)
    if index.size == 0:
        return None
    pts = points[index]
    dist = np.hypot(pts[:, 0], pts[:, 1])
    return int(index[np.lexsort((pts[:, 1], pts[:, 0], dist))[0]])


def select_candidates(grid: GridCloud, base_pose: Pose, foot: FootState,
                      p: FootholdParams) -> Optional[FootholdCandidate]:
    """
    Nearest cell above the sole band (p*) and the nearest one above it (p**).

    Ties in XY distance break lexicographically on (x, y).

    Returns:
        FootholdCandidate with world-frame points, or None when no cell is
        eligible (the robot must not step)
    """
    if len(grid) == 0:
        return None
    z = grid.z
    star = _nearest(grid.points, z > foot.z_foot + p.delta_foot)
    if star is None:
        return None
    star2 = _nearest(grid.points, (z > foot.z_foot + p.delta_foot) & (z > z[star] + 0.5 * p.h_layer))

    p_star_w = transform_points(base_pose, grid.points[star])[0]
    offset = p_star_w - base_pose.translation
    theta = wrap_angle(math.atan2(offset[1], offset[0]) - base_pose.rotation.yaw)
    p_star2_w = None if star2 is None else transform_points(base_pose, grid.points[star2])[0]
    return FootholdCandidate(
        p_star=p_star_w,
        theta_rel=theta,
        p_star2=p_star2_w,
        p_star_base=grid.points[star].copy(),
        n_cells=len(grid),
    )


def tread_footprint(polygons: Iterable[PolygonSegment], height: float, tolerance: float):
    """
    Closed union of the flattened hulls of polygons near `height`.

    Tread polygons are preferred; any polygon at that height is used when
    none is flagged as a tread.
    """
    near = [poly for poly in polygons if abs(poly.mean_height - height) <= tolerance]
    treads = [poly for poly in near if poly.is_tread] or near
    hulls = []
    for poly in treads:
        hull = convex_hull_2d(poly.vertices[:, :2])
        if hull is not None:
            hulls.append(Polygon(poly.vertices[hull.vertices, :2]))
    if not hulls:
        return Polygon()
    return unary_union(hulls).buffer(FOOTPRINT_CLOSING).buffer(-FOOTPRINT_CLOSING)


@dataclass(frozen=True)
class FootholdResult:
    """Everything one generator pass produced."""

    candidate: Optional[FootholdCandidate]
    filtered: GridCloud
    eroded: GridCloud
    dense_points: int


class FootholdGenerator:
    """Chains the foothold stages for one polygon map and robot state."""

    def __init__(self, params: Optional[FootholdParams] = None):
        self.params = params or FootholdParams()

    def generate(self, polygons: List[PolygonSegment], base_pose: Pose, foot: FootState,
                 stamp: float = 0.0) -> FootholdResult:
        """
        Run the full foothold pipeline.

        Args:
            polygons: world-frame polygon map
            base_pose: T_W_B at planning time
            foot: sole heights in the base frame
            stamp: time tag copied to the candidate

        Returns:
            FootholdResult; candidate is None when nothing is eligible
        """
        p = self.params
        dense = build_dense_cloud(polygons, p.g_res / p.oversample)
        filtered = filter_cloud(dense, base_pose, foot, p)
        eroded = layer_and_erode(filtered, foot, p)
        candidate = select_candidates(eroded, base_pose, foot, p)

        if candidate is None:
            logger.info(f"No foothold candidate ({len(eroded)} cells after erosion, z_foot={foot.z_foot:.3f})")
            return FootholdResult(None, filtered, eroded, len(dense))

        level = np.abs(eroded.z - candidate.p_star_base[2]) <= 0.5 * p.h_layer
        region = FootholdRegion(
            cells=eroded.subset(level).cell_set(),
            base_pose=base_pose,
            g_res=p.g_res,
            height=candidate.height,
            footprint=tread_footprint(polygons, candidate.height, 0.5 * p.h_layer),
        )
        candidate = FootholdCandidate(
            p_star=candidate.p_star,
            theta_rel=candidate.theta_rel,
            p_star2=candidate.p_star2,
            p_star_base=candidate.p_star_base,
            region=region,
            n_cells=len(eroded),
            stamp=stamp,
        )
        logger.debug(
            f"Candidate at ({candidate.p_star[0]:.3f}, {candidate.p_star[1]:.3f}, {candidate.p_star[2]:.3f}), "
            f"theta_rel={candidate.theta_rel:.3f}, {len(region.cells)} cells on its level"
        )
        return FootholdResult(candidate, filtered, eroded, len(dense))


def grid_debug_rows(filtered: GridCloud, eroded: GridCloud, h_layer: float) -> List[dict]:
    """Rows (i, j, x, y, z, k, eroded_flag) for the grid CSV dump."""
    kept = eroded.cell_set()
    rows = []
    for (i, j), (x, y, z) in zip(filtered.cells.tolist(), filtered.points.tolist()):
        rows.append({
            'i': i, 'j': j, 'x': x, 'y': y, 'z': z,
            'k': int(math.floor(z / h_layer)),
            'eroded_flag': int((i, j) in kept),
        })
    return rows
