"""
Simulation harness types: scene, noise, sensor mounting, scenario
configuration and the run report.
"""

import json
import math
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from backend.models.estimation import EstimatorParams, FusionParams
from backend.models.foothold import FootholdParams
from backend.models.geometry import CameraIntrinsics, Frame, Pose, Rotation
from backend.models.perception import PerceptionConfig
from backend.models.planning import FootGeometry, GaitMode, GaitParams

SCHEMA_VERSION = 1


class StaircaseScene(BaseModel):
    """
    Straight staircase of solid boxes on a ground plane.

    Level k (1..n_steps) is the tread at height k * rise; the last level
    is the landing. origin is the foot of the first riser, yaw the
    climbing direction.
    """

    model_config = ConfigDict(frozen=True)

    n_steps: int = Field(4, ge=1, description="Number of rises, landing included")
    rise: float = Field(0.13, gt=0, description="Meters")
    tread: float = Field(0.28, gt=0, description="Meters")
    width: float = Field(1.0, gt=0, description="Meters")
    landing_depth: float = Field(0.8, gt=0, description="Meters")
    nosing: float = Field(0.0, ge=0, description="Protrusion of each tread edge, meters")
    nosing_thickness: float = Field(0.03, gt=0, description="Meters")
    origin: Tuple[float, float, float] = (0.30, 0.0, 0.0)
    yaw: float = Field(0.0, description="Climbing direction, radians")
    ground: bool = Field(True, description="Infinite floor at the origin height")

    @model_validator(mode='after')
    def _nosing_fits(self) -> 'StaircaseScene':
        if self.nosing >= self.tread:
            raise ValueError(f"nosing ({self.nosing}) must be shorter than the tread ({self.tread})")
        if self.nosing_thickness > self.rise:
            raise ValueError("nosing_thickness cannot exceed the rise")
        return self

    def level_height(self, level: int) -> float:
        return self.origin[2] + level * self.rise

    def world_pose(self) -> Pose:
        """T_W_S of the scene frame (x up the stairs, z up)."""
        return Pose(Rotation.about_z(self.yaw), np.array(self.origin), Frame.W, None)


class NoiseModel(BaseModel):
    """Noise levels for every synthetic sensor and the actuators."""

    model_config = ConfigDict(frozen=True)

    depth_sigma: float = Field(0.0, ge=0, description="Depth noise std, meters")
    depth_dropout: float = Field(0.0, ge=0, le=1, description="Fraction of pixels set invalid")
    drift_rate: float = Field(0.0, ge=0, description="Kinematic drift, m/s along a random direction")
    lio_sigma: float = Field(0.0, ge=0, description="LIO position noise std, meters")
    lio_rot_sigma: float = Field(0.0, ge=0, description="LIO attitude noise std, radians")
    actuation_sigma: float = Field(0.0, ge=0, description="Foot placement noise std per axis, meters")
    imu_sigma: float = Field(0.0, ge=0, description="Acceleration noise std, m/s^2")
    proprio_sigma: float = Field(0.0, ge=0, description="Leg-odometry measurement noise std, meters")
    seed: int = Field(0, ge=0)


class CameraMount(BaseModel):
    """Depth camera on the torso, pitched down about the base y axis."""

    model_config = ConfigDict(frozen=True)

    x_offset: float = Field(0.05, description="Forward offset from the base, meters")
    y_offset: float = Field(0.0, description="Lateral offset, meters")
    height: float = Field(0.4, description="Height above the base, meters")
    pitch_deg: float = Field(60.0, gt=0, lt=90, description="Downward pitch, degrees")

    def extrinsics(self) -> Pose:
        """T_B_C with the optical frame z forward, x right, y down."""
        pitch = math.radians(self.pitch_deg)
        c, s = math.cos(pitch), math.sin(pitch)
        x_axis = np.array([0.0, -1.0, 0.0])
        z_axis = np.array([c, 0.0, -s])
        y_axis = np.cross(z_axis, x_axis)
        rotation = Rotation(np.column_stack([x_axis, y_axis, z_axis]))
        return Pose(rotation, np.array([self.x_offset, self.y_offset, self.height]), Frame.B, Frame.C)


class TickRates(BaseModel):
    """Loop rates, Hz."""

    model_config = ConfigDict(frozen=True)

    perception_hz: float = Field(20.0, gt=0)
    estimator_hz: float = Field(200.0, gt=0)
    lio_hz: float = Field(20.0, gt=0)

    @model_validator(mode='after')
    def _estimator_fastest(self) -> 'TickRates':
        if self.estimator_hz < max(self.perception_hz, self.lio_hz):
            raise ValueError("estimator_hz must be at least the perception and LIO rates")
        return self


class ScenarioConfig(BaseModel):
    """One scenario file (JSON, schema 1)."""

    model_config = ConfigDict(frozen=True, populate_by_name=True, extra='forbid')

    schema_version: Literal[1] = Field(SCHEMA_VERSION, alias='schema')
    name: str = 'staircase'
    scene: StaircaseScene = Field(default_factory=StaircaseScene)
    noise: NoiseModel = Field(default_factory=NoiseModel)
    intrinsics: CameraIntrinsics = Field(default_factory=CameraIntrinsics)
    mount: CameraMount = Field(default_factory=CameraMount)
    perception: PerceptionConfig = Field(default_factory=PerceptionConfig)
    estimator: EstimatorParams = Field(default_factory=EstimatorParams)
    fusion: FusionParams = Field(default_factory=FusionParams)
    foothold: FootholdParams = Field(default_factory=FootholdParams)
    gait: GaitParams = Field(default_factory=GaitParams)
    foot: FootGeometry = Field(default_factory=FootGeometry)
    rates: TickRates = Field(default_factory=TickRates)
    lidar_offset: Tuple[float, float, float] = Field((0.0, 0.0, 0.45), description="T_B_L translation")
    start_x: float = Field(-0.3, description="Initial torso x in the scene frame (first riser at 0), meters")
    stance_settle_s: float = Field(0.5, ge=0, description="DS pause at stance before perceiving")
    inter_plan_drift: bool = Field(False, description="SS: suppress LIO corrections while walking")
    max_levels: Optional[int] = Field(None, ge=1, description="Stop after this many levels")

    @property
    def gait_mode(self) -> GaitMode:
        return self.gait.gait_mode

    @model_validator(mode='after')
    def _estimator_matches_rates(self) -> 'ScenarioConfig':
        ratio = self.estimator.dt * self.rates.estimator_hz
        if abs(ratio - 1.0) > 1e-9:
            raise ValueError(
                f"estimator.dt ({self.estimator.dt}) must equal 1 / rates.estimator_hz ({self.rates.estimator_hz})"
            )
        return self

    def with_seed(self, seed: int) -> 'ScenarioConfig':
        return self.model_copy(update={'noise': self.noise.model_copy(update={'seed': seed})})

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2)


class RunStatus(str, Enum):
    """How a scenario run ended."""
    COMPLETED = 'completed'
    NO_CANDIDATES = 'no_candidates'
    FALL = 'fall'
    STALL = 'stall'

    @property
    def is_failure(self) -> bool:
        return self is not RunStatus.COMPLETED


class ExecutedStep(BaseModel):
    """Planned vs executed placement of one foot."""

    index: int
    side: str
    level: int
    planned: List[float]
    executed: List[float]
    error_mm: float = Field(..., ge=0, description="Horizontal planned-vs-executed distance")
    vertical_error_mm: float = Field(..., ge=0)
    t_planned: float
    t_executed: float
    inside_tread: bool


class TimingBlock(BaseModel):
    """Wall-clock measurements; excluded from determinism checks."""

    detection_hz_mean: float = 0.0
    detection_hz_min: float = 0.0
    frames: int = 0
    perception_wall_s: float = 0.0
    run_wall_s: float = 0.0


class RunReport(BaseModel):
    """Outcome and metrics of one scenario run."""

    status: RunStatus
    message: str = ''
    gait_mode: GaitMode = GaitMode.DS
    seed: int = 0
    T_total: float = Field(0.0, ge=0, description="Simulated seconds until the last touchdown")
    steps_completed: int = Field(0, ge=0, description="Levels climbed")
    placements: int = Field(0, ge=0)
    planned_steps: int = Field(0, ge=0)
    e_m: float = Field(0.0, ge=0, description="Max planned-vs-executed foothold error, mm")
    step_errors: List[float] = Field(default_factory=list, description="mm")
    vertical_errors: List[float] = Field(default_factory=list, description="mm")
    steps: List[ExecutedStep] = Field(default_factory=list)
    tracking_error: Dict[str, List[float]] = Field(default_factory=dict, description="Fused minus truth per axis, m")
    mean_level_time: float = 0.0
    longest_detection_gap: float = 0.0
    detections: int = 0
    timing: TimingBlock = Field(default_factory=TimingBlock)

    @model_validator(mode='after')
    def _consistent(self) -> 'RunReport':
        if self.placements > self.planned_steps:
            raise ValueError("placements cannot exceed planned steps")
        expected = max(self.step_errors) if self.step_errors else 0.0
        if abs(self.e_m - expected) > 1e-12:
            raise ValueError(f"e_m ({self.e_m}) must equal the max step error ({expected})")
        return self

    @property
    def detection_frequency(self) -> Tuple[float, float]:
        return self.timing.detection_hz_mean, self.timing.detection_hz_min

    def canonical_json(self, include_timing: bool = False) -> str:
        """Sorted-key JSON; without timing it is identical across reruns."""
        exclude = None if include_timing else {'timing'}
        return json.dumps(self.model_dump(mode='json', exclude=exclude), sort_keys=True, separators=(',', ':'))
