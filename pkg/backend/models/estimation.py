"""
State-estimation types: KF state/observation layouts, parameters and
odometry samples.

State layout (30):   [p_base(3), v_base(3), p_c1..p_c8 (24)]
Observation (56):    [rel. positions (24), rel. velocities (24), heights (8)]

Contacts are ordered left toe-outer, left toe-inner, left heel-outer,
left heel-inner, then the same four for the right foot.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from backend.errors import ValidationError
from backend.models.geometry import Pose

N_CONTACTS = 8
STATE_DIM = 6 + 3 * N_CONTACTS
OBS_DIM = 3 * N_CONTACTS + 3 * N_CONTACTS + N_CONTACTS
CONTACTS_PER_FOOT = 4


def _vector(values, dim: int, name: str) -> np.ndarray:
    v = np.array(values, dtype=float).reshape(-1)
    if v.shape != (dim,):
        raise ValidationError(f"{name} must have dimension {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} contains non-finite values")
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class StateVector:
    """Base position, base velocity and eight contact points (world frame)."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'values', _vector(self.values, STATE_DIM, 'StateVector'))

    @classmethod
    def from_parts(cls, p_base, v_base, contacts) -> 'StateVector':
        return cls(np.concatenate([np.ravel(p_base), np.ravel(v_base), np.ravel(contacts)]))

    @property
    def p_base(self) -> np.ndarray:
        return self.values[0:3]

    @property
    def v_base(self) -> np.ndarray:
        return self.values[3:6]

    @property
    def contacts(self) -> np.ndarray:
        return self.values[6:].reshape(N_CONTACTS, 3)


@dataclass(frozen=True)
class ObservationVector:
    """Contact positions/velocities relative to the base and contact heights."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'values', _vector(self.values, OBS_DIM, 'ObservationVector'))

    @classmethod
    def from_parts(cls, rel_positions, rel_velocities, heights) -> 'ObservationVector':
        return cls(np.concatenate([np.ravel(rel_positions), np.ravel(rel_velocities), np.ravel(heights)]))

    @property
    def rel_positions(self) -> np.ndarray:
        return self.values[0:24].reshape(N_CONTACTS, 3)

    @property
    def rel_velocities(self) -> np.ndarray:
        return self.values[24:48].reshape(N_CONTACTS, 3)

    @property
    def heights(self) -> np.ndarray:
        return self.values[48:56]


class EstimatorParams(BaseModel):
    """Kalman filter timing and noise levels (diagonal covariances)."""

    model_config = ConfigDict(frozen=True)

    dt: float = Field(0.005, gt=0, description="Estimator tick, seconds")
    q_position: float = Field(1e-4, ge=0, description="Process noise variance, base position")
    q_velocity: float = Field(1e-3, ge=0, description="Process noise variance, base velocity")
    q_contact: float = Field(1e-6, ge=0, description="Process noise variance, contact points")
    r_meas: float = Field(1e-4, gt=0, description="Measurement noise variance")
    swing_inflation: float = Field(100.0, ge=1, description="R multiplier for swing-contact rows")
    touchdown_variance: float = Field(1e-2, gt=0, description="Contact variance after a touchdown reset")

    def process_noise(self) -> np.ndarray:
        """30x30 diagonal Q."""
        diag = np.concatenate([
            np.full(3, self.q_position),
            np.full(3, self.q_velocity),
            np.full(3 * N_CONTACTS, self.q_contact),
        ])
        return np.diag(diag)

    def measurement_noise(self, contact_flags: Sequence[bool]) -> np.ndarray:
        """56x56 diagonal R with swing-contact rows inflated."""
        stance = np.asarray(contact_flags, dtype=bool).reshape(N_CONTACTS)
        factor = np.where(stance, 1.0, self.swing_inflation)
        diag = np.concatenate([np.repeat(factor, 3), np.repeat(factor, 3), factor]) * self.r_meas
        return np.diag(diag)


class FusionParams(BaseModel):
    """Complementary filter time constant."""

    model_config = ConfigDict(frozen=True)

    tau: float = Field(0.05, ge=0, description="Seconds; math.inf keeps the kinematic pose")

    def alpha(self, dt: float) -> float:
        """alpha = tau / (tau + dt), 1 for an infinite tau."""
        if dt <= 0:
            raise ValidationError(f"Fusion dt must be positive, got {dt}")
        if math.isinf(self.tau):
            return 1.0
        return self.tau / (self.tau + dt)


class OdomSource(str, Enum):
    """Origin of an odometry sample."""
    KINEMATIC = 'kinematic'
    LIO = 'lio'
    FUSED = 'fused'
    TRUTH = 'truth'


@dataclass(frozen=True)
class OdomSample:
    """Timestamped pose from one source."""

    stamp: float
    pose: Pose
    source: OdomSource


@dataclass(frozen=True)
class UpdateDiagnostics:
    """What kf_update did with one observation."""

    skipped: bool = False
    reason: Optional[str] = None
    innovation_norm: float = 0.0
    nis: float = 0.0


@dataclass(frozen=True)
class EstimatorSnapshot:
    """Immutable view of the estimator at one tick."""

    stamp: float
    state: StateVector
    covariance_diag: np.ndarray
    kinematic_pose: Optional[Pose]
    fused_pose: Optional[Pose]
    lio_applied: int
    lio_dropped: int
    updates_skipped: int
