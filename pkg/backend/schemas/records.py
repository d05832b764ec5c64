"""
Line-oriented record schemas.

Every JSON Lines file the tools read or write has one record type here;
records convert to and from the domain types.
"""

from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from backend.models.estimation import OdomSample, OdomSource
from backend.models.foothold import FootholdCandidate
from backend.models.geometry import Frame, Pose
from backend.models.perception import PlaneModel, PolygonSegment
from backend.models.planning import PlannedStep
from services.geometry_service import pose_from_quaternion


class PoseRecord(BaseModel):
    """Pose as translation + unit quaternion [w, x, y, z]."""

    t: List[float] = Field(..., min_length=3, max_length=3)
    q: List[float] = Field(..., min_length=4, max_length=4)
    parent: Optional[Frame] = None
    child: Optional[Frame] = None

    model_config = ConfigDict(json_schema_extra={
        "example": {"t": [0.0, 0.0, 0.8], "q": [1.0, 0.0, 0.0, 0.0], "parent": "W", "child": "B"}
    })

    @classmethod
    def from_pose(cls, pose: Pose) -> 'PoseRecord':
        return cls(t=pose.translation.tolist(), q=pose.rotation.as_quaternion().tolist(),
                   parent=pose.parent, child=pose.child)

    def to_pose(self) -> Pose:
        return pose_from_quaternion(self.t, self.q, self.parent, self.child)


class OdomRecord(BaseModel):
    """One odometry sample."""

    stamp: float
    source: OdomSource
    t: List[float] = Field(..., min_length=3, max_length=3)
    q: List[float] = Field(..., min_length=4, max_length=4)

    model_config = ConfigDict(json_schema_extra={
        "example": {"stamp": 0.05, "source": "lio", "t": [0.01, 0.0, 0.8], "q": [1.0, 0.0, 0.0, 0.0]}
    })

    @classmethod
    def from_sample(cls, sample: OdomSample) -> 'OdomRecord':
        return cls(stamp=sample.stamp, source=sample.source, t=sample.pose.translation.tolist(),
                   q=sample.pose.rotation.as_quaternion().tolist())

    def to_sample(self) -> OdomSample:
        return OdomSample(self.stamp, pose_from_quaternion(self.t, self.q, Frame.W, Frame.B), self.source)


class PolygonRecord(BaseModel):
    """Planar polygon in the world frame; the plane is normal . p + d = 0."""

    stamp: float
    vertices: List[List[float]] = Field(..., min_length=3)
    normal: List[float] = Field(..., min_length=3, max_length=3)
    d: float
    inliers: int = Field(0, ge=0)
    rms: float = Field(0.0, ge=0)
    is_tread: bool = False
    frame: Frame = Frame.W

    @classmethod
    def from_segment(cls, segment: PolygonSegment) -> 'PolygonRecord':
        plane = segment.plane
        return cls(
            stamp=segment.stamp,
            vertices=segment.vertices.tolist(),
            normal=plane.normal.tolist(),
            d=plane.d,
            inliers=plane.inlier_count,
            rms=plane.rms_residual,
            is_tread=segment.is_tread,
            frame=segment.frame,
        )

    def to_segment(self) -> PolygonSegment:
        n = np.asarray(self.normal, dtype=float)
        plane = PlaneModel(n / np.linalg.norm(n), self.d, self.inliers, self.rms)
        return PolygonSegment(np.asarray(self.vertices), plane, self.stamp, self.is_tread, self.frame)


class CandidateRecord(BaseModel):
    """Selected foothold candidate."""

    stamp: float
    p_star: List[float]
    p_star2: Optional[List[float]] = None
    theta_rel: float
    n_cells: int

    @classmethod
    def from_candidate(cls, candidate: FootholdCandidate) -> 'CandidateRecord':
        return cls(
            stamp=candidate.stamp,
            p_star=candidate.p_star.tolist(),
            p_star2=None if candidate.p_star2 is None else candidate.p_star2.tolist(),
            theta_rel=candidate.theta_rel,
            n_cells=candidate.n_cells,
        )


class PlanStepRecord(BaseModel):
    """One planned step; swing rows are [t, x, z]."""

    i: int
    t: float
    side: str
    p_f: List[float]
    p_t: List[float]
    swing: List[List[float]]

    @classmethod
    def from_step(cls, step: PlannedStep) -> 'PlanStepRecord':
        return cls(
            i=step.index,
            t=step.t,
            side=step.side.value,
            p_f=step.p_f.tolist(),
            p_t=step.p_t.as_array().tolist(),
            swing=step.swing[:, [0, 1, 3]].tolist(),
        )
