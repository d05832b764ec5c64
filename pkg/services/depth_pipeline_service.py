"""
Depth Pipeline Service - depth frame to world-frame polygon segments.

Stages, each a pure function:
    decimate -> diffuse -> compute_normals -> detect_plane_regions
    -> fit_plane_ransac (per region) -> footprint tracing -> world polygons

PolygonMapper wraps the pipeline with a fixed PerceptionConfig, logging
and per-frame timing for the scenario loop and the CLI.
"""

import logging
import threading
import time
from collections import deque
from functools import lru_cache
from typing import Deque, Dict, List, Optional, Tuple, Union

import cv2
import numpy as np
from shapely.geometry import MultiPolygon, Polygon

from backend.errors import ConfigurationError
from backend.models.geometry import CameraIntrinsics, DepthImage, Frame, PointCloud, Pose
from backend.models.perception import (
    DiffusionParams, NormalMap, PerceptionConfig, PipelineParams, PixelRegion,
    PlaneFit, PlaneModel, PolygonSegment, RansacParams
)
from services.geometry_service import backproject_image, pixel_rays, transform_points

logger = logging.getLogger(__name__)

# Cues are scaled to int16 before cv2.Canny
CUE_SCALE = 1000.0
DEGENERATE_CROSS = 1e-12
# Recent per-frame times kept by PolygonMapper
FRAME_TIME_WINDOW = 1000


# ---------------------------------------------------------------------------
# Decimation and smoothing
# ---------------------------------------------------------------------------

def decimate(img: DepthImage, intr: CameraIntrinsics, factor: int) -> Tuple[DepthImage, CameraIntrinsics]:
    """
    Block-reduce a frame by averaging inverse depth over valid pixels.

    Inverse depth is affine in (u, v) on a plane, so the block mean lands
    exactly on the plane at the block centre. A block needs at least half
    of its pixels valid.

    Args:
        img: full-resolution depth
        intr: full-resolution intrinsics
        factor: block size (1 returns the inputs unchanged)

    Returns:
        (decimated depth, matching intrinsics)
    """
    if factor == 1:
        return img, intr
    s = factor
    h, w = img.height // s, img.width // s
    data = img.data[:h * s, :w * s]
    valid = data > 0
    inv = np.where(valid, 1.0 / np.where(valid, data, 1.0), 0.0)
    inv_sum = inv.reshape(h, s, w, s).sum(axis=(1, 3))
    count = valid.reshape(h, s, w, s).sum(axis=(1, 3))
    ok = count * 2 >= s * s
    depth = np.zeros((h, w))
    depth[ok] = count[ok] / inv_sum[ok]

    small = CameraIntrinsics(
        fx=intr.fx / s, fy=intr.fy / s,
        cx=(intr.cx - (s - 1) / 2.0) / s, cy=(intr.cy - (s - 1) / 2.0) / s,
        width=w, height=h,
    )
    return DepthImage(depth), small


def diffuse(img: DepthImage, p: DiffusionParams) -> DepthImage:
    """
    Perona-Malik anisotropic diffusion over the 4-neighbourhood.

    I <- I + lambda * sum_i c_i * dI_i with c = exp(-(|dI| / kappa)^2).
    Differences touching an invalid pixel are zero, so invalid pixels
    neither change nor leak into their neighbours.

    Raises:
        ConfigurationError: lambda outside (0, 0.25], kappa <= 0 or
            negative iteration count
    """
    if not 0.0 < p.lam <= 0.25:
        raise ConfigurationError(f"Diffusion lambda {p.lam} outside stability bound (0, 0.25]")
    if p.kappa <= 0 or p.iterations < 0:
        raise ConfigurationError(f"Invalid diffusion params: kappa={p.kappa}, iterations={p.iterations}")
    if p.iterations == 0:
        return img

    current = img.data.copy()
    valid = img.valid
    # pairs where both pixels are valid, vertical then horizontal
    pair_v = valid[1:, :] & valid[:-1, :]
    pair_h = valid[:, 1:] & valid[:, :-1]
    inv_k2 = 1.0 / (p.kappa * p.kappa)

    for _ in range(p.iterations):
        dv = np.where(pair_v, current[1:, :] - current[:-1, :], 0.0)
        dh = np.where(pair_h, current[:, 1:] - current[:, :-1], 0.0)
        fv = np.exp(-dv * dv * inv_k2) * dv
        fh = np.exp(-dh * dh * inv_k2) * dh

        flux = np.zeros_like(current)
        flux[:-1, :] += fv   # south neighbour
        flux[1:, :] -= fv    # north neighbour
        flux[:, :-1] += fh   # east neighbour
        flux[:, 1:] -= fh    # west neighbour
        current = np.where(valid, current + p.lam * flux, 0.0)

    return DepthImage(current)


# ---------------------------------------------------------------------------
# Normals and regions
# ---------------------------------------------------------------------------

def compute_normals(img: DepthImage, intr: CameraIntrinsics) -> NormalMap:
    """
    Surface normals from the cross product of image-axis tangents.

    Tangents are Sobel-smoothed differences of the backprojected point
    image. Every Sobel difference is a combination of chords between
    surface points, so normals are exact on planes. Normals are flipped
    to face the camera (n_z < 0). A pixel is valid when its whole 3x3
    neighbourhood is valid and it is not on the image border.
    """
    points, valid = backproject_image(img, intr)
    h, w = valid.shape
    if h < 3 or w < 3:
        return NormalMap(np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool))

    a = cv2.Sobel(points, cv2.CV_64F, 1, 0, ksize=3)
    b = cv2.Sobel(points, cv2.CV_64F, 0, 1, ksize=3)
    n = np.cross(a, b)
    norm = np.linalg.norm(n, axis=-1)

    support = cv2.erode(valid.astype(np.uint8), np.ones((3, 3), np.uint8),
                        borderType=cv2.BORDER_CONSTANT, borderValue=0).astype(bool)
    mask = support & (norm >= DEGENERATE_CROSS)
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False

    normals = np.zeros_like(n)
    normals[mask] = n[mask] / norm[mask, None]
    flip = normals[..., 2] > 0
    normals[flip] = -normals[flip]
    return NormalMap(normals, mask)


def _depth_cue(img: DepthImage, ratio: float) -> Tuple[np.ndarray, np.ndarray]:
    """Relative second difference of inverse depth along u and v."""
    d = img.data
    valid = d > 0
    w = np.where(valid, 1.0 / np.where(valid, d, 1.0), 0.0)
    gx = np.zeros_like(w)
    gy = np.zeros_like(w)

    ok_u = valid[:, 2:] & valid[:, 1:-1] & valid[:, :-2]
    ok_v = valid[2:, :] & valid[1:-1, :] & valid[:-2, :]
    center_u = np.where(ok_u, w[:, 1:-1], 1.0)
    center_v = np.where(ok_v, w[1:-1, :], 1.0)
    gx[:, 1:-1] = np.where(ok_u, np.abs(w[:, 2:] - 2 * w[:, 1:-1] + w[:, :-2]) / center_u, 0.0)
    gy[1:-1, :] = np.where(ok_v, np.abs(w[2:, :] - 2 * w[1:-1, :] + w[:-2, :]) / center_v, 0.0)

    # relative orientation of the two components, from the first derivative
    du = np.zeros_like(w)
    dv = np.zeros_like(w)
    du[:, 1:-1] = w[:, 2:] - w[:, :-2]
    dv[1:-1, :] = w[2:, :] - w[:-2, :]
    gy = np.where(du * dv < 0, -gy, gy)
    return gx / ratio, gy / ratio


def _normal_cue(normals: NormalMap) -> Tuple[np.ndarray, np.ndarray]:
    """Central normal difference per axis, 1.0 for a right-angle crease."""
    n = normals.normals
    m = normals.mask
    h, w = m.shape
    dn_u = np.zeros((h, w, 3))
    dn_v = np.zeros((h, w, 3))

    ok_u = m[:, 2:] & m[:, :-2]
    ok_v = m[2:, :] & m[:-2, :]
    dn_u[:, 1:-1] = np.where(ok_u[..., None], n[:, 2:] - n[:, :-2], 0.0)
    dn_v[1:-1, :] = np.where(ok_v[..., None], n[2:, :] - n[:-2, :], 0.0)
    gx = np.linalg.norm(dn_u, axis=-1) / np.sqrt(2.0)
    gy = np.linalg.norm(dn_v, axis=-1) / np.sqrt(2.0)
    sign = np.einsum('ijk,ijk->ij', dn_u, dn_v)
    gy = np.where(sign < 0, -gy, gy)
    return gx, gy


def edge_map(normals: NormalMap, img: DepthImage, params: PipelineParams) -> np.ndarray:
    """
    Canny edges of the fused depth/normal discontinuity cue.

    Per pixel the stronger of the two cue vectors is kept and clipped to
    unit magnitude; cv2.Canny runs on it through its custom-gradient
    entry point.
    """
    dgx, dgy = _depth_cue(img, params.depth_jump_ratio)
    ngx, ngy = _normal_cue(normals)
    use_depth = np.hypot(dgx, dgy) >= np.hypot(ngx, ngy)
    gx = np.where(use_depth, dgx, ngx)
    gy = np.where(use_depth, dgy, ngy)
    mag = np.hypot(gx, gy)
    scale = np.where(mag > 1.0, 1.0 / np.maximum(mag, 1e-12), 1.0)
    gx = np.where(normals.mask, gx * scale, 0.0)
    gy = np.where(normals.mask, gy * scale, 0.0)

    dx = np.ascontiguousarray(np.rint(gx * CUE_SCALE).astype(np.int16))
    dy = np.ascontiguousarray(np.rint(gy * CUE_SCALE).astype(np.int16))
    edges = cv2.Canny(dx, dy, params.canny_low * CUE_SCALE, params.canny_high * CUE_SCALE,
                      L2gradient=True)
    if params.edge_dilation > 0:
        edges = cv2.dilate(edges, np.ones((3, 3), np.uint8), iterations=params.edge_dilation)
    return edges > 0


def detect_plane_regions(normals: NormalMap, img: DepthImage,
                         params: Optional[PipelineParams] = None) -> List[PixelRegion]:
    """
    Split the frame into 4-connected regions bounded by Canny contours.

    Args:
        normals: normal map of img
        img: depth image (usually diffused)
        params: segmentation params (defaults if omitted)

    Returns:
        Disjoint regions of at least min_region_pixels, in label order
    """
    params = params or PipelineParams()
    if normals.mask.shape != img.data.shape:
        raise ConfigurationError("Normal map and depth image sizes differ")
    if not normals.mask.any():
        return []

    free = normals.mask & ~edge_map(normals, img, params)
    count, labels, stats, _ = cv2.connectedComponentsWithStats(
        free.astype(np.uint8), connectivity=4, ltype=cv2.CV_32S
    )
    keep = [k for k in range(1, count) if stats[k, cv2.CC_STAT_AREA] >= params.min_region_pixels]
    if not keep:
        return []

    flat = labels.ravel()
    order = np.argsort(flat, kind='stable')
    bounds = np.searchsorted(flat[order], np.arange(count + 1))
    width = labels.shape[1]
    regions = []
    for k in keep:
        idx = order[bounds[k]:bounds[k + 1]]
        regions.append(PixelRegion(label=k, rows=idx // width, cols=idx % width))
    logger.debug(f"Detected {len(regions)} regions ({count - 1 - len(regions)} below size limit)")
    return regions


# ---------------------------------------------------------------------------
# Plane fitting
# ---------------------------------------------------------------------------

def least_squares_plane(points: np.ndarray) -> Tuple[np.ndarray, float]:
    """Total least-squares plane (normal, d) through (N, 3) points."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, vecs = np.linalg.eigh(centered.T @ centered)
    normal = vecs[:, 0]
    return normal, float(-normal @ centroid)


def fit_plane_ransac(points: Union[PointCloud, np.ndarray], p: RansacParams) -> Optional[PlaneFit]:
    """
    Fit a plane with 3-point RANSAC and a least-squares refit.

    Hypotheses are scored on a seeded subset of at most max_eval_points
    points; the winner's inliers over the full set feed the refit.

    Args:
        points: PointCloud or (N, 3) array
        p: RANSAC params (seed makes the result deterministic)

    Returns:
        PlaneFit, or None ("no plane") when fewer than 3 points are given
        or the best hypothesis has fewer than min_inliers inliers
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float).reshape(-1, 3)
    n_pts = pts.shape[0]
    if n_pts < 3:
        logger.debug(f"RANSAC skipped: {n_pts} points")
        return None

    rng = np.random.default_rng(p.seed)
    if n_pts > p.max_eval_points:
        subset = pts[np.sort(rng.choice(n_pts, p.max_eval_points, replace=False))]
    else:
        subset = pts

    samples = rng.integers(0, n_pts, size=(p.max_iterations, 3))
    p0, p1, p2 = pts[samples[:, 0]], pts[samples[:, 1]], pts[samples[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    norms = np.linalg.norm(normals, axis=1)
    usable = norms > DEGENERATE_CROSS
    if not usable.any():
        logger.debug("RANSAC found no non-degenerate hypothesis")
        return None
    normals[usable] /= norms[usable, None]
    offsets = -np.einsum('ij,ij->i', normals, p0)

    scores = (np.abs(subset @ normals.T + offsets) <= p.inlier_threshold).sum(axis=0)
    scores[~usable] = -1
    best = int(np.argmax(scores))

    inliers = np.flatnonzero(np.abs(pts @ normals[best] + offsets[best]) <= p.inlier_threshold)
    if inliers.size < max(p.min_inliers, 3):
        logger.debug(f"RANSAC best hypothesis has {inliers.size} inliers (< {p.min_inliers})")
        return None

    normal, d = least_squares_plane(pts[inliers])
    if normal @ normals[best] < 0:
        normal, d = -normal, -d
    residual = pts[inliers] @ normal + d
    model = PlaneModel(normal=normal, d=d, inlier_count=int(inliers.size),
                       rms_residual=float(np.sqrt(np.mean(residual * residual))))
    return PlaneFit(model=model, inliers=inliers)


# ---------------------------------------------------------------------------
# Polygon extraction
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _cached_rays(intr: CameraIntrinsics) -> np.ndarray:
    rays = pixel_rays(intr)
    rays.setflags(write=False)
    return rays


def _plane_basis(normal: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(normal, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(normal, e1)


def _largest_polygon(geometry) -> Optional[Polygon]:
    if isinstance(geometry, MultiPolygon):
        geometry = max(geometry.geoms, key=lambda g: g.area)
    if not isinstance(geometry, Polygon) or geometry.is_empty:
        return None
    return geometry


def trace_footprint(region: PixelRegion, plane: PlaneModel, img: DepthImage,
                    intr: CameraIntrinsics, factor: int, params: PipelineParams,
                    threshold: float) -> Optional[np.ndarray]:
    """
    Outer contour of a plane's inlier footprint at full resolution.

    The decimated region is upsampled, grown by footprint_grow_pixels and
    every valid pixel within threshold of the plane joins the footprint
    when it is connected to the region. The outer contour is projected
    onto the plane and simplified with Douglas-Peucker.

    Returns:
        (K, 3) camera-frame polygon vertices on the plane, or None
    """
    s = factor
    g = params.footprint_grow_pixels
    height, width = img.height, img.width
    r0 = max(0, int(region.rows.min()) * s - g)
    r1 = min(height, (int(region.rows.max()) + 1) * s + g)
    c0 = max(0, int(region.cols.min()) * s - g)
    c1 = min(width, (int(region.cols.max()) + 1) * s + g)

    seed = np.zeros((r1 - r0, c1 - c0), dtype=np.uint8)
    for dr in range(s):
        for dc in range(s):
            rr = region.rows * s + dr - r0
            cc = region.cols * s + dc - c0
            seed[rr, cc] = 1
    grown = cv2.dilate(seed, np.ones((2 * g + 1, 2 * g + 1), np.uint8)) if g > 0 else seed

    depth = img.data[r0:r1, c0:c1]
    points = _cached_rays(intr)[r0:r1, c0:c1] * depth[..., None]
    inlier = (depth > 0) & (grown > 0) & (np.abs(points @ plane.normal + plane.d) <= threshold)

    count, labels = cv2.connectedComponents(inlier.astype(np.uint8), connectivity=8)
    touching = np.unique(labels[(seed > 0) & inlier])
    touching = touching[touching > 0]
    if touching.size == 0:
        return None
    footprint = np.isin(labels, touching).astype(np.uint8)

    contours, _ = cv2.findContours(footprint, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    if not contours:
        return None
    contour = max(contours, key=cv2.contourArea)[:, 0, :]
    if contour.shape[0] < 3:
        return None

    boundary = points[contour[:, 1], contour[:, 0]]
    boundary = plane.project(boundary)
    origin = boundary.mean(axis=0)
    e1, e2 = _plane_basis(plane.normal)
    flat = np.column_stack([(boundary - origin) @ e1, (boundary - origin) @ e2])

    outline = Polygon(flat)
    if not outline.is_valid:
        outline = outline.buffer(0)
    outline = _largest_polygon(outline)
    if outline is None:
        return None
    simplified = _largest_polygon(outline.simplify(params.simplify_tolerance, preserve_topology=True))
    if simplified is None:
        return None
    coords = np.asarray(simplified.exterior.coords)[:-1]
    if coords.shape[0] < 3:
        return None
    return origin + coords[:, :1] * e1 + coords[:, 1:2] * e2


def _plane_to_world(plane: PlaneModel, camera_pose_W: Pose) -> PlaneModel:
    n_w = camera_pose_W.rotation.matrix @ plane.normal
    n_w = n_w / np.linalg.norm(n_w)
    d_w = plane.d - n_w @ camera_pose_W.translation
    return PlaneModel(normal=n_w, d=d_w, inlier_count=plane.inlier_count,
                      rms_residual=plane.rms_residual)


def extract_polygon_map(img: DepthImage, intr: CameraIntrinsics, camera_pose_W: Pose,
                        cfg: Optional[PerceptionConfig] = None, stamp: float = 0.0) -> List[PolygonSegment]:
    """
    Turn one depth frame into world-frame polygon segments.

    Args:
        img: full-resolution depth frame
        intr: its intrinsics
        camera_pose_W: T_W_C at capture time
        cfg: perception configuration
        stamp: capture time, seconds

    Returns:
        Polygons in region order; regions whose plane fit or footprint
        fails are dropped
    """
    cfg = cfg or PerceptionConfig()
    pipeline = cfg.pipeline
    if not img.valid.any():
        return []

    small, small_intr = decimate(img, intr, pipeline.decimation)
    smooth = diffuse(small, cfg.diffusion)
    normals = compute_normals(smooth, small_intr)
    regions = detect_plane_regions(normals, smooth, pipeline)
    raw_points, _ = backproject_image(small, small_intr)

    cos_tilt = np.cos(np.radians(pipeline.max_tilt_deg))
    polygons: List[PolygonSegment] = []
    dropped: Dict[str, int] = {'plane': 0, 'footprint': 0}

    for index, region in enumerate(regions):
        ransac = cfg.ransac.model_copy(update={'seed': cfg.ransac.seed + index})
        fit = fit_plane_ransac(raw_points[region.rows, region.cols], ransac)
        if fit is None:
            dropped['plane'] += 1
            continue

        plane = fit.model
        if plane.d < 0:
            # face the camera: the optical centre is on the positive side
            plane = PlaneModel(normal=-plane.normal, d=-plane.d,
                               inlier_count=plane.inlier_count, rms_residual=plane.rms_residual)

        vertices = trace_footprint(region, plane, img, intr, pipeline.decimation, pipeline,
                                   cfg.ransac.inlier_threshold)
        if vertices is None:
            dropped['footprint'] += 1
            continue

        world_plane = _plane_to_world(plane, camera_pose_W)
        polygons.append(PolygonSegment(
            vertices=transform_points(camera_pose_W, vertices),
            plane=world_plane,
            stamp=stamp,
            is_tread=bool(abs(world_plane.normal[2]) >= cos_tilt),
            frame=Frame.W,
        ))

    if dropped['plane'] or dropped['footprint']:
        logger.debug(f"Dropped regions: {dropped['plane']} without plane, "
                     f"{dropped['footprint']} without footprint")
    return polygons


class PolygonMapper:
    """
    Framework-agnostic polygon mapping service.

    Holds one PerceptionConfig and keeps running timing statistics so
    callers can report the detection frequency. Only the most recent
    `window` per-frame times are kept; the totals cover every frame.
    Safe to share between worker threads.
    """

    def __init__(self, config: Optional[PerceptionConfig] = None, window: int = FRAME_TIME_WINDOW):
        """
        Initialize polygon mapper.

        Args:
            config: Perception configuration (defaults if omitted)
            window: Number of recent per-frame times to keep
        """
        if window < 1:
            raise ConfigurationError(f"window must be >= 1, got {window}")
        self.config = config or PerceptionConfig()
        self.frame_times: Deque[float] = deque(maxlen=window)
        self.frames = 0
        self.wall_s = 0.0
        self.slowest_s = 0.0
        self._lock = threading.Lock()
        self._in_flight = 0
        self._busy_since = 0.0

    def extract(self, img: DepthImage, intr: CameraIntrinsics, camera_pose_W: Pose,
                stamp: float = 0.0) -> List[PolygonSegment]:
        """Run extract_polygon_map and record its wall time."""
        start = self._begin()
        try:
            polygons = extract_polygon_map(img, intr, camera_pose_W, self.config, stamp)
        finally:
            elapsed = self._end(start)

        treads = sum(1 for p in polygons if p.is_tread)
        logger.debug(f"Frame {stamp:.3f}s: {len(polygons)} polygons ({treads} treads) in {elapsed * 1e3:.1f} ms")
        return polygons

    def _begin(self) -> float:
        with self._lock:
            start = time.perf_counter()
            if self._in_flight == 0:
                self._busy_since = start
            self._in_flight += 1
        return start

    def _end(self, start: float) -> float:
        with self._lock:
            end = time.perf_counter()
            elapsed = end - start
            self._in_flight -= 1
            if self._in_flight == 0:
                self.wall_s += end - self._busy_since
            self.frames += 1
            self.slowest_s = max(self.slowest_s, elapsed)
            self.frame_times.append(elapsed)
        return elapsed

    def detection_frequency(self) -> Tuple[float, float]:
        """
        (mean, min) frames per second.

        The mean is frames processed over the wall time during which at
        least one frame was in flight, so concurrent workers are not
        double counted. The min is the rate of the slowest frame.
        """
        with self._lock:
            if not self.frames or self.wall_s <= 0:
                return 0.0, 0.0
            return self.frames / self.wall_s, 1.0 / self.slowest_s
