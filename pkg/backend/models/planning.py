"""
Footstep planning types.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from shapely.geometry import Polygon

from backend.errors import ValidationError


class Side(str, Enum):
    """Foot side."""
    LEFT = 'L'
    RIGHT = 'R'

    @property
    def other(self) -> 'Side':
        return Side.RIGHT if self is Side.LEFT else Side.LEFT

    @property
    def sign(self) -> float:
        return 1.0 if self is Side.LEFT else -1.0


class GaitMode(str, Enum):
    """DS: both feet on each level before ascending. SS: one foot per level."""
    DS = 'DS'
    SS = 'SS'


class PlanStatus(str, Enum):
    OK = 'ok'
    TRUNCATED = 'truncated'
    NO_FOOTHOLDS = 'no_footholds'


class GaitParams(BaseModel):
    """Foot placement offsets, swing shape and timing."""

    model_config = ConfigDict(frozen=True)

    y_b: float = Field(0.1, gt=0, description="Lateral foot offset from the torso, meters")
    z_t: float = Field(0.8, gt=0, description="Torso height above the soles, meters")
    z_max: float = Field(0.18, gt=0, description="Swing apex above the start height, meters")
    t_lift: float = Field(0.4, gt=0, description="Lift phase, seconds")
    t_land: float = Field(0.4, gt=0, description="Landing phase, seconds")
    t_step: Optional[float] = Field(None, gt=0, description="Horizontal interpolation period (default T)")
    dt_plan: float = Field(0.01, gt=0, description="Plan discretization, seconds")
    step_period: float = Field(1.7, gt=0, description="Time between consecutive touchdowns, seconds")
    gait_mode: GaitMode = GaitMode.DS
    first_side: Side = Side.LEFT

    @property
    def swing_period(self) -> float:
        """T = t_lift + t_land."""
        return self.t_lift + self.t_land

    @property
    def horizontal_period(self) -> float:
        return self.t_step if self.t_step is not None else self.swing_period

    @property
    def ticks_per_step(self) -> int:
        return int(round(self.step_period / self.dt_plan))

    @model_validator(mode='after')
    def _swing_fits_step(self) -> 'GaitParams':
        if self.ticks_per_step * self.dt_plan < self.swing_period - 1e-12:
            raise ValueError(
                f"step_period ({self.step_period}s) shorter than the swing ({self.swing_period}s)"
            )
        return self


class FootGeometry(BaseModel):
    """Sole rectangle: length along the heading, width across it."""

    model_config = ConfigDict(frozen=True)

    length: float = Field(0.26, gt=0, description="Meters")
    width: float = Field(0.096, gt=0, description="Meters")


@dataclass(frozen=True)
class TorsoPose:
    """Torso position and yaw, [x, y, z, phi]."""

    x: float
    y: float
    z: float
    phi: float

    def __post_init__(self):
        values = (self.x, self.y, self.z, self.phi)
        if not all(math.isfinite(v) for v in values):
            raise ValidationError(f"TorsoPose must be finite, got {values}")
        object.__setattr__(self, 'phi', math.atan2(math.sin(self.phi), math.cos(self.phi)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.phi])


@dataclass(frozen=True)
class OrientedRectangle:
    """Rectangle of extent w along theta and h across it."""

    center: np.ndarray
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValidationError(f"Rectangle sides must be positive, got w={self.w}, h={self.h}")
        object.__setattr__(self, 'center', np.asarray(self.center, dtype=float).reshape(2))

    @property
    def axes(self) -> np.ndarray:
        """Unit edge directions (2, 2): along theta and across."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, s], [-s, c]])

    def corners(self) -> np.ndarray:
        """(4, 2) corners in counter-clockwise order."""
        along, across = self.axes * np.array([[0.5 * self.w], [0.5 * self.h]])
        return self.center + np.array([
            -along - across, along - across, along + across, -along + across
        ])

    def to_polygon(self) -> Polygon:
        return Polygon(self.corners())


@dataclass(frozen=True)
class PlannedStep:
    """
    One foot placement.

    t is the touchdown time relative to the plan start; the swing covers
    [t - T, t]. swing rows are (t, x, y, z).
    """

    index: int
    side: Side
    p_f: np.ndarray
    p_t: TorsoPose
    t: float
    swing: np.ndarray
    start: np.ndarray
    rectangle: OrientedRectangle

    @property
    def liftoff(self) -> float:
        return float(self.swing[0, 0])


@dataclass(frozen=True)
class FootstepPlan:
    """Timed placements plus how planning ended."""

    steps: List[PlannedStep] = field(default_factory=list)
    status: PlanStatus = PlanStatus.OK
    message: str = ''
    gait_mode: GaitMode = GaitMode.DS

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def duration(self) -> float:
        return self.steps[-1].t if self.steps else 0.0
