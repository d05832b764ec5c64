"""
Geometry Service - rigid transforms, rotation exp/log and backprojection.

Pure functions over the immutable types of backend.models.geometry;
safe to call from any thread.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from backend.errors import FrameMismatchError, UsageError, ValidationError
from backend.models.geometry import (
    CameraIntrinsics, DepthImage, Frame, PointCloud, Pose, Rotation
)

logger = logging.getLogger(__name__)

# compose() re-projects onto SO(3) once drift from orthonormality exceeds this
REORTHONORMALIZE_THRESHOLD = 1e-10


def reorthonormalize(matrix: np.ndarray) -> np.ndarray:
    """
    Nearest rotation matrix in the Frobenius sense (SVD projection).

    Args:
        matrix: 3x3 matrix close to a rotation

    Returns:
        Orthonormal 3x3 matrix with determinant +1
    """
    u, _, vt = np.linalg.svd(matrix)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def compose_rotation_matrices(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with the re-orthonormalization policy of compose()."""
    m = a @ b
    if np.max(np.abs(m @ m.T - np.eye(3))) > REORTHONORMALIZE_THRESHOLD:
        m = reorthonormalize(m)
    return m


def rotation_exp(w) -> Rotation:
    """
    Exponential map so(3) -> SO(3) (Rodrigues).

    Args:
        w: axis-angle 3-vector, radians

    Returns:
        Rotation; exp(0) is exactly the identity

    Raises:
        ValidationError: non-finite input
    """
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape != (3,) or not np.all(np.isfinite(w)):
        raise ValidationError(f"rotation_exp needs a finite 3-vector, got {w!r}")
    if not np.any(w):
        return Rotation.identity()
    return Rotation(ScipyRotation.from_rotvec(w).as_matrix())


def rotation_log(rotation: Rotation) -> np.ndarray:
    """
    Logarithm map SO(3) -> so(3).

    At an angle of exactly pi the axis is ambiguous; any valid axis is
    returned (its sign is whatever the quaternion conversion yields).

    Args:
        rotation: valid Rotation (validated on construction)

    Returns:
        Axis-angle 3-vector with norm in [0, pi]
    """
    if not isinstance(rotation, Rotation):
        rotation = Rotation(rotation)
    if np.array_equal(rotation.matrix, np.eye(3)):
        return np.zeros(3)
    return ScipyRotation.from_matrix(rotation.matrix).as_rotvec()


def compose(a: Pose, b: Pose) -> Pose:
    """
    Compose two poses: (a ∘ b)(p) = a(b(p)).

    Raises:
        FrameMismatchError: both poses are tagged and a.child != b.parent
    """
    if a.child is not None and b.parent is not None and a.child != b.parent:
        raise FrameMismatchError(
            f"Cannot compose T_{a.parent}_{a.child} with T_{b.parent}_{b.child}"
        )
    rotation = compose_rotation_matrices(a.rotation.matrix, b.rotation.matrix)
    translation = a.rotation.matrix @ b.translation + a.translation
    return Pose(Rotation(rotation), translation, a.parent, b.child)


def invert(a: Pose) -> Pose:
    """Inverse transform; frame tags are swapped."""
    rt = a.rotation.matrix.T
    return Pose(Rotation(rt), -rt @ a.translation, a.child, a.parent)


def transform_points(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Apply pose to an (N, 3) array of points."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts @ pose.rotation.matrix.T + pose.translation


def transform_cloud(pose: Pose, cloud: PointCloud) -> PointCloud:
    """
    Re-express a cloud in pose.parent.

    Raises:
        FrameMismatchError: pose.child is tagged and differs from cloud.frame
    """
    if pose.child is not None and pose.child != cloud.frame:
        raise FrameMismatchError(f"Pose maps from {pose.child}, cloud is in {cloud.frame}")
    frame = pose.parent if pose.parent is not None else cloud.frame
    return PointCloud(transform_points(pose, cloud.points), frame, cloud.labels)


def _check_pixel(depth: DepthImage, u: int, v: int) -> None:
    if not (0 <= u < depth.width and 0 <= v < depth.height):
        raise UsageError(f"Pixel ({u}, {v}) outside {depth.width}x{depth.height} image")


def backproject(depth: DepthImage, intr: CameraIntrinsics, u: int, v: int) -> Optional[np.ndarray]:
    """
    Lift one pixel to a camera-frame point.

    Args:
        depth: depth image (meters)
        intr: pinhole intrinsics
        u: column index
        v: row index

    Returns:
        [(u - cx) D / fx, (v - cy) D / fy, D], or None when D is the
        invalid sentinel

    Raises:
        UsageError: pixel outside the image

    Examples:
        >>> backproject(DepthImage(np.full((480, 640), 1.0)), CameraIntrinsics(fx=500, fy=500), 420, 240)
        array([0.2, 0. , 1. ])
    """
    _check_pixel(depth, u, v)
    d = depth.data[v, u]
    if d <= 0:
        return None
    return np.array([(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d])


def pixel_rays(intr: CameraIntrinsics, width: Optional[int] = None,
               height: Optional[int] = None) -> np.ndarray:
    """
    Unnormalized viewing rays ((u - cx)/fx, (v - cy)/fy, 1) for every pixel.

    Returns:
        (H, W, 3) array; multiplying by depth gives the backprojected point
    """
    width = width or intr.width
    height = height or intr.height
    u = (np.arange(width, dtype=float) - intr.cx) / intr.fx
    v = (np.arange(height, dtype=float) - intr.cy) / intr.fy
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def backproject_image(depth: DepthImage, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized backprojection of a whole frame.

    Returns:
        (points, valid): (H, W, 3) camera-frame points (zeros where invalid)
        and the (H, W) validity mask
    """
    rays = pixel_rays(intr, depth.width, depth.height)
    points = rays * depth.data[..., None]
    return points, depth.valid


def pose_from_quaternion(t, q_wxyz, parent: Optional[Frame] = None,
                         child: Optional[Frame] = None) -> Pose:
    return Pose(Rotation.from_quaternion(q_wxyz), np.asarray(t, dtype=float), parent, child)


def random_rotation(rng: np.random.Generator) -> Rotation:
    """Uniformly distributed rotation from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Rotation.from_quaternion(q)
