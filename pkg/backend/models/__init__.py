"""Domain types for the polygon-map stair-climbing stack."""
from backend.models.geometry import CameraIntrinsics, DepthImage, Frame, PointCloud, Pose, Rotation
from backend.models.perception import (
    DiffusionParams, PerceptionConfig, PipelineParams, PlaneModel, PolygonSegment, RansacParams
)
from backend.models.estimation import (
    EstimatorParams, FusionParams, ObservationVector, OdomSample, OdomSource, StateVector
)
from backend.models.foothold import FootholdCandidate, FootholdParams, FootState, GridCloud
from backend.models.planning import (
    FootGeometry, FootstepPlan, GaitMode, GaitParams, OrientedRectangle, PlanStatus, Side, TorsoPose
)
from backend.models.scenario import (
    CameraMount, NoiseModel, RunReport, RunStatus, ScenarioConfig, StaircaseScene, TickRates
)

__all__ = [
    'CameraIntrinsics', 'DepthImage', 'Frame', 'PointCloud', 'Pose', 'Rotation',
    'DiffusionParams', 'PerceptionConfig', 'PipelineParams', 'PlaneModel', 'PolygonSegment', 'RansacParams',
    'EstimatorParams', 'FusionParams', 'ObservationVector', 'OdomSample', 'OdomSource', 'StateVector',
    'FootholdCandidate', 'FootholdParams', 'FootState', 'GridCloud',
    'FootGeometry', 'FootstepPlan', 'GaitMode', 'GaitParams', 'OrientedRectangle', 'PlanStatus', 'Side',
    'TorsoPose',
    'CameraMount', 'NoiseModel', 'RunReport', 'RunStatus', 'ScenarioConfig', 'StaircaseScene', 'TickRates',
]
