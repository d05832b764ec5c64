"""
Perception types: parameter blocks, normal maps, planes and polygons.
"""

from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from backend.errors import ValidationError
from backend.models.geometry import Frame


class DiffusionParams(BaseModel):
    """Perona-Malik anisotropic diffusion on the depth image."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: float = Field(0.2, gt=0, le=0.25, alias='lambda',
                       description="Step weight; <= 0.25 keeps the 4-neighbour scheme stable")
    iterations: int = Field(5, ge=0, description="Number of diffusion steps")
    kappa: float = Field(0.03, gt=0, description="Conduction scale, meters")


class RansacParams(BaseModel):
    """Per-region plane fitting."""

    model_config = ConfigDict(frozen=True)

    max_iterations: int = Field(200, ge=1)
    inlier_threshold: float = Field(0.01, gt=0, description="Point-to-plane distance, meters")
    min_inliers: int = Field(50, ge=3)
    seed: int = Field(0, ge=0)
    max_eval_points: int = Field(2000, ge=3, description="Hypotheses are scored on at most this many points")


class PipelineParams(BaseModel):
    """Segmentation and polygon extraction knobs."""

    model_config = ConfigDict(frozen=True)

    decimation: int = Field(4, ge=1, description="Block size used before segmentation")
    min_region_pixels: int = Field(30, ge=1, description="Smallest region kept, decimated pixels")
    canny_low: float = Field(0.05, gt=0, le=1)
    canny_high: float = Field(0.15, gt=0, le=1)
    depth_jump_ratio: float = Field(0.1, gt=0, description="Relative depth kink that saturates the depth cue")
    edge_dilation: int = Field(1, ge=0, description="3x3 dilation passes applied to the edge map")
    simplify_tolerance: float = Field(0.01, gt=0, description="Douglas-Peucker tolerance, meters")
    max_tilt_deg: float = Field(15.0, ge=0, lt=90, description="Tread flag: max normal tilt from vertical")
    footprint_grow_pixels: int = Field(16, ge=0, description="Full-resolution growth around a region")


class PerceptionConfig(BaseModel):
    """Everything extract_polygon_map needs besides the frame itself."""

    model_config = ConfigDict(frozen=True)

    diffusion: DiffusionParams = Field(default_factory=DiffusionParams)
    ransac: RansacParams = Field(default_factory=RansacParams)
    pipeline: PipelineParams = Field(default_factory=PipelineParams)


@dataclass(frozen=True)
class NormalMap:
    """Per-pixel unit normals (camera frame) and their validity mask."""

    normals: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.normals.shape[:2] != self.mask.shape or self.normals.shape[-1] != 3:
            raise ValidationError("NormalMap normals must be (H, W, 3) matching the mask")
        self.normals.setflags(write=False)
        self.mask.setflags(write=False)


@dataclass(frozen=True)
class PlaneModel:
    """Plane n . p + d = 0 with fit statistics."""

    normal: np.ndarray
    d: float
    inlier_count: int = 0
    rms_residual: float = 0.0

    def __post_init__(self):
        n = np.array(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-9:
            raise ValidationError(f"Plane normal must be unit length, got |n| = {norm}")
        if self.rms_residual < 0:
            raise ValidationError("rms_residual must be non-negative")
        n.setflags(write=False)
        object.__setattr__(self, 'normal', n)
        object.__setattr__(self, 'd', float(self.d))

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Signed distance of (N, 3) points."""
        return np.asarray(points) @ self.normal + self.d

    def project(self, points: np.ndarray) -> np.ndarray:
        """Orthogonal projection of (N, 3) points onto the plane."""
        pts = np.asarray(points, dtype=float)
        return pts - np.outer(self.distance(pts), self.normal)


@dataclass(frozen=True)
class PlaneFit:
    """Result of fit_plane_ransac: the refit model and inlier indices."""

    model: PlaneModel
    inliers: np.ndarray


@dataclass(frozen=True)
class PixelRegion:
    """Connected set of pixels bounded by contour pixels."""

    label: int
    rows: np.ndarray
    cols: np.ndarray

    @property
    def size(self) -> int:
        return int(self.rows.shape[0])


@dataclass(frozen=True)
class PolygonSegment:
    """Planar polygon in the world frame, one per fitted region."""

    vertices: np.ndarray
    plane: PlaneModel
    stamp: float = 0.0
    is_tread: bool = False
    frame: Frame = Frame.W

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        if v.shape[0] < 3:
            raise ValidationError(f"PolygonSegment needs >= 3 vertices, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("PolygonSegment vertices must be finite")
        v.setflags(write=False)
        object.__setattr__(self, 'vertices', v)

    @property
    def mean_height(self) -> float:
        return float(self.vertices[:, 2].mean())