"""
Foothold types: parameters, sole heights, base-frame grid and candidates.
"""

from dataclasses import dataclass, field
from typing import FrozenSet, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from shapely.geometry import Polygon
from shapely.geometry.base import BaseGeometry

from backend.errors import ValidationError
from backend.models.estimation import CONTACTS_PER_FOOT
from backend.models.geometry import Frame, Pose


class FootholdParams(BaseModel):
    """Dense cloud, filtering and erosion parameters."""

    model_config = ConfigDict(frozen=True)

    g_res: float = Field(0.02, gt=0, description="Grid resolution, meters")
    g_range: float = Field(1.0, gt=0, description="XY half-range around the base, meters")
    g_z: float = Field(0.18, gt=0, description="Max step-up above the sole, meters")
    h_layer: float = Field(0.05, gt=0, description="Layer height, meters")
    n_erosion: int = Field(2, ge=1, description="Erosion passes per layer")
    delta_foot: float = Field(0.02, gt=0, description="Half-width of the sole-height band, meters")
    oversample: int = Field(2, ge=1, description="Rasterization pitch is g_res / oversample")

    @model_validator(mode='after')
    def _resolution_below_range(self) -> 'FootholdParams':
        if self.g_res >= self.g_range:
            raise ValueError(f"g_res ({self.g_res}) must be smaller than g_range ({self.g_range})")
        return self


@dataclass(frozen=True)
class FootState:
    """Sole point heights in the base frame."""

    lltoe: float
    rrtoe: float
    llheel: float
    rrheel: float

    @property
    def z_foot(self) -> float:
        return min(self.lltoe, self.rrtoe, self.llheel, self.rrheel)

    @classmethod
    def from_contacts(cls, contacts_B: np.ndarray) -> 'FootState':
        """
        Build from the eight contact points (base frame).

        Toe/heel heights take the lower of the outer and inner contact.
        """
        z = np.asarray(contacts_B, dtype=float).reshape(-1, 3)[:, 2]
        left, right = z[:CONTACTS_PER_FOOT], z[CONTACTS_PER_FOOT:]
        return cls(
            lltoe=float(min(left[0], left[1])),
            rrtoe=float(min(right[0], right[1])),
            llheel=float(min(left[2], left[3])),
            rrheel=float(min(right[2], right[3])),
        )


@dataclass(frozen=True)
class GridCloud:
    """
    One point per occupied (i, j) cell, in canonical (i, j) order.

    points holds the retained point of each cell in the base frame;
    layers is floor(z / h_layer), filled by layer_and_erode.
    """

    cells: np.ndarray
    points: np.ndarray
    g_res: float
    layers: Optional[np.ndarray] = None
    frame: Frame = Frame.B

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 2)
        points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if cells.shape[0] != points.shape[0]:
            raise ValidationError("GridCloud cells and points must have the same length")
        if not np.all(np.isfinite(points)):
            raise ValidationError("GridCloud heights must be finite")
        if cells.shape[0] and np.unique(cells, axis=0).shape[0] != cells.shape[0]:
            raise ValidationError("GridCloud has duplicate cells")
        cells.setflags(write=False)
        points.setflags(write=False)
        object.__setattr__(self, 'cells', cells)
        object.__setattr__(self, 'points', points)
        if self.layers is not None:
            layers = np.asarray(self.layers, dtype=np.int64).reshape(-1)
            layers.setflags(write=False)
            object.__setattr__(self, 'layers', layers)

    def __len__(self) -> int:
        return self.cells.shape[0]

    @property
    def z(self) -> np.ndarray:
        return self.points[:, 2]

    def subset(self, keep: np.ndarray) -> 'GridCloud':
        layers = None if self.layers is None else self.layers[keep]
        return GridCloud(self.cells[keep], self.points[keep], self.g_res, layers, self.frame)

    def cell_set(self) -> FrozenSet[Tuple[int, int]]:
        return frozenset(map(tuple, self.cells.tolist()))


@dataclass(frozen=True)
class FootholdRegion:
    """
    Where a foot may land around a candidate.

    cells are the eroded base-frame cells at the candidate's level; the
    footprint is the continuous world-XY outline of the tread.
    """

    cells: FrozenSet[Tuple[int, int]]
    base_pose: Pose
    g_res: float
    height: float
    footprint: BaseGeometry = field(default_factory=Polygon, compare=False)

    def contains_cell_of(self, xy_world) -> bool:
        """True when the world-XY point falls in an eroded cell."""
        p = np.array([xy_world[0], xy_world[1], self.base_pose.translation[2]])
        local = self.base_pose.rotation.matrix.T @ (p - self.base_pose.translation)
        cell = (int(np.floor(local[0] / self.g_res)), int(np.floor(local[1] / self.g_res)))
        return cell in self.cells

    def covers(self, shape: BaseGeometry) -> bool:
        return bool(self.footprint.covers(shape))


@dataclass(frozen=True)
class FootholdCandidate:
    """
    Selected foothold.

    p_star/p_star2 are world-frame points; theta_rel is the direction of
    p_star relative to the base heading, wrapped to [-pi, pi].
    """

    p_star: np.ndarray
    theta_rel: float
    p_star2: Optional[np.ndarray] = None
    p_star_base: Optional[np.ndarray] = None
    region: Optional[FootholdRegion] = field(default=None, compare=False)
    n_cells: int = 0
    stamp: float = 0.0

    def __post_init__(self):
        if not -np.pi <= self.theta_rel <= np.pi:
            raise ValidationError(f"theta_rel must be wrapped to [-pi, pi], got {self.theta_rel}")
        object.__setattr__(self, 'p_star', np.asarray(self.p_star, dtype=float).reshape(3))
        if self.p_star2 is not None:
            object.__setattr__(self, 'p_star2', np.asarray(self.p_star2, dtype=float).reshape(3))

    @property
    def height(self) -> float:
        return float(self.p_star[2])
