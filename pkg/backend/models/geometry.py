"""
Geometry value types shared by every module.

Conventions:
    * Rotations are 3x3 row-major matrices acting on column vectors
      (p_parent = R @ p_child + t).
    * A Pose named T_A_B maps coordinates in frame B into frame A.
    * Camera optical frame is z-forward, x-right, y-down.
    * Depth images use 0 as the invalid sentinel.

All types are immutable; numpy payloads are stored read-only.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.transform import Rotation as ScipyRotation

from backend.errors import ValidationError

ORTHONORMAL_TOLERANCE = 1e-9


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class Frame(str, Enum):
    """Coordinate frame tags."""
    W = 'W'  # world
    B = 'B'  # base (torso)
    L = 'L'  # lidar
    C = 'C'  # camera optical frame


@dataclass(frozen=True)
class Rotation:
    """Orthonormal 3x3 matrix with determinant +1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValidationError(f"Rotation needs a finite 3x3 matrix, got shape {m.shape}")
        err = np.max(np.abs(m @ m.T - np.eye(3)))
        if err > ORTHONORMAL_TOLERANCE:
            raise ValidationError(f"Rotation is not orthonormal (max |RR^T - I| = {err:.3e})")
        det = np.linalg.det(m)
        if abs(det - 1.0) > ORTHONORMAL_TOLERANCE:
            raise ValidationError(f"Rotation determinant must be +1, got {det:.12f}")
        object.__setattr__(self, 'matrix', _frozen(m))

    @classmethod
    def identity(cls) -> 'Rotation':
        return cls(np.eye(3))

    @classmethod
    def from_quaternion(cls, q_wxyz) -> 'Rotation':
        """Build from a unit quaternion [w, x, y, z] (normalized on the way in)."""
        w, x, y, z = np.asarray(q_wxyz, dtype=float)
        return cls(ScipyRotation.from_quat([x, y, z, w]).as_matrix())

    @classmethod
    def about_z(cls, angle: float) -> 'Rotation':
        c, s = np.cos(angle), np.sin(angle)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))

    def as_quaternion(self) -> np.ndarray:
        """Unit quaternion [w, x, y, z] with w >= 0."""
        x, y, z, w = ScipyRotation.from_matrix(self.matrix).as_quat()
        q = np.array([w, x, y, z])
        return -q if w < 0 else q

    @property
    def yaw(self) -> float:
        """Heading of the body x-axis projected on the world XY plane."""
        return float(np.arctan2(self.matrix[1, 0], self.matrix[0, 0]))


@dataclass(frozen=True)
class Pose:
    """
    Rigid transform in SE(3) with optional frame tags.

    parent/child are checked by compose() only when both sides carry tags.
    """

    rotation: Rotation
    translation: np.ndarray
    parent: Optional[Frame] = None
    child: Optional[Frame] = None

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValidationError(f"Pose translation must be a finite 3-vector, got {self.translation!r}")
        object.__setattr__(self, 'translation', _frozen(t))

    @classmethod
    def identity(cls, parent: Optional[Frame] = None, child: Optional[Frame] = None) -> 'Pose':
        return cls(Rotation.identity(), np.zeros(3), parent, child)

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float, yaw: float,
                     parent: Optional[Frame] = None, child: Optional[Frame] = None) -> 'Pose':
        return cls(Rotation.about_z(yaw), np.array([x, y, z]), parent, child)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, parent: Optional[Frame] = None,
                    child: Optional[Frame] = None) -> 'Pose':
        m = np.asarray(matrix, dtype=float)
        return cls(Rotation(m[:3, :3]), m[:3, 3], parent, child)

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    def with_frames(self, parent: Optional[Frame], child: Optional[Frame]) -> 'Pose':
        return Pose(self.rotation, self.translation, parent, child)


class CameraIntrinsics(BaseModel):
    """Pinhole intrinsics; no distortion model."""

    model_config = ConfigDict(frozen=True)

    fx: float = Field(460.0, gt=0, description="Focal length along u, pixels")
    fy: float = Field(460.0, gt=0, description="Focal length along v, pixels")
    cx: float = Field(320.0, ge=0, description="Principal point u, pixels")
    cy: float = Field(240.0, ge=0, description="Principal point v, pixels")
    width: int = Field(640, gt=0, description="Image width, pixels")
    height: int = Field(480, gt=0, description="Image height, pixels")

    @model_validator(mode='after')
    def _principal_point_inside(self) -> 'CameraIntrinsics':
        if not (self.cx < self.width and self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        return self


@dataclass(frozen=True)
class DepthImage:
    """Row-major depth grid in meters, data[v, u]; 0 marks invalid pixels."""

    data: np.ndarray

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        if d.ndim != 2:
            raise ValidationError(f"DepthImage must be 2-D, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValidationError("DepthImage contains non-finite values")
        if np.any(d < 0):
            raise ValidationError("DepthImage contains negative depths")
        object.__setattr__(self, 'data', _frozen(d))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.data > 0


@dataclass(frozen=True)
class PointCloud:
    """N x 3 points, meters, tagged with the frame they are expressed in."""

    points: np.ndarray
    frame: Frame = Frame.W
    labels: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValidationError("PointCloud contains non-finite coordinates")
        object.__setattr__(self, 'points', _frozen(p))
        if self.labels is not None:
            labels = np.array(self.labels, dtype=int).reshape(-1)
            if labels.shape[0] != p.shape[0]:
                raise ValidationError("PointCloud labels must match the number of points")
            object.__setattr__(self, 'labels', _frozen(labels))

    def __len__(self) -> int:
        return self.points.shape[0]
