"""
Simulation Service - staircase world, synthetic sensors and actuation.

Everything here is deterministic given a seed: each noise source draws
from its own named stream (rng_stream) so that changing one source
leaves the others' draws untouched.
"""

import logging
import math
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Point, Polygon
from shapely.geometry.base import BaseGeometry

from backend.errors import UsageError, ValidationError
from backend.models.estimation import ObservationVector, OdomSample, OdomSource
from backend.models.geometry import CameraIntrinsics, DepthImage, Frame, Pose, Rotation
from backend.models.planning import FootGeometry, FootstepPlan, PlannedStep, Side, TorsoPose
from backend.models.scenario import ExecutedStep, NoiseModel, StaircaseScene
from services.footstep_planner_service import swing_profile
from services.geometry_service import (
    compose, invert, pixel_rays, rotation_exp, transform_points
)

logger = logging.getLogger(__name__)

GROUND_ID = 0
MISS_ID = -1
FACES_PER_BOX = 6
# Points this close to a tread outline count as on it
EDGE_TOLERANCE = 1e-9


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named noise source."""
    return np.random.default_rng([seed, zlib.crc32(name.encode('utf-8'))])


# ---------------------------------------------------------------------------
# Scene geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneBox:
    """Axis-aligned box in the scene frame."""

    lo: np.ndarray
    hi: np.ndarray


@dataclass(frozen=True)
class TreadSurface:
    """
    Walkable top surface of one level, world frame.

    clear excludes the strip under the next level's nosing.
    """

    level: int
    height: float
    polygon: BaseGeometry
    clear: BaseGeometry


def scene_boxes(scene: StaircaseScene) -> List[SceneBox]:
    """Solid step boxes followed by the nosing boxes."""
    half = 0.5 * scene.width
    end = (scene.n_steps - 1) * scene.tread + scene.landing_depth
    boxes = [
        SceneBox(np.array([(k - 1) * scene.tread, -half, 0.0]), np.array([end, half, k * scene.rise]))
        for k in range(1, scene.n_steps + 1)
    ]
    if scene.nosing > 0:
        for k in range(1, scene.n_steps + 1):
            front = (k - 1) * scene.tread
            boxes.append(SceneBox(
                np.array([front - scene.nosing, -half, k * scene.rise - scene.nosing_thickness]),
                np.array([front, half, k * scene.rise]),
            ))
    return boxes


def _to_world(scene: StaircaseScene, xy: np.ndarray, z: float) -> np.ndarray:
    pts = np.column_stack([xy, np.full(len(xy), z)])
    return transform_points(scene.world_pose(), pts)


def _outline(scene: StaircaseScene, x0: float, x1: float) -> Polygon:
    half = 0.5 * scene.width
    corners = np.array([[x0, -half], [x1, -half], [x1, half], [x0, half]])
    return Polygon(_to_world(scene, corners, 0.0)[:, :2])


def tread_surfaces(scene: StaircaseScene) -> List[TreadSurface]:
    """Ground-truth tread and clear footprints for levels 1..n_steps."""
    end = (scene.n_steps - 1) * scene.tread + scene.landing_depth
    surfaces = []
    for k in range(1, scene.n_steps + 1):
        x0 = (k - 1) * scene.tread - scene.nosing
        x1 = k * scene.tread if k < scene.n_steps else end
        x_clear = x1 - scene.nosing if k < scene.n_steps else end
        surfaces.append(TreadSurface(
            level=k,
            height=scene.level_height(k),
            polygon=_outline(scene, x0, x1),
            clear=_outline(scene, x0, x_clear),
        ))
    return surfaces


def surface_under(surfaces: Sequence[TreadSurface], xy) -> Optional[TreadSurface]:
    """Highest tread whose outline contains the point; the upper tread wins on a shared edge."""
    point = Point(float(xy[0]), float(xy[1]))
    hits = [s for s in surfaces if s.polygon.distance(point) <= EDGE_TOLERANCE]
    return max(hits, key=lambda s: s.level) if hits else None


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _cast(scene: StaircaseScene, camera_pose: Pose, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Slab-method ray cast. Returns (depth along the optical axis, surface ids)."""
    rays = pixel_rays(intr).reshape(-1, 3)
    T_S_C = compose(invert(scene.world_pose()), camera_pose)
    origin = T_S_C.translation
    direction = rays @ T_S_C.rotation.matrix.T
    n = direction.shape[0]

    best = np.full(n, np.inf)
    ids = np.full(n, MISS_ID, dtype=np.int64)
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / direction
        for b, box in enumerate(scene_boxes(scene)):
            t1 = (box.lo - origin) * inv
            t2 = (box.hi - origin) * inv
            t_min = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf)
            t_max = np.nan_to_num(np.maximum(t1, t2), nan=np.inf)
            axis = np.argmax(t_min, axis=1)
            t_near = t_min[np.arange(n), axis]
            t_far = t_max.min(axis=1)
            hit = (t_near <= t_far) & (t_near > 0) & (t_near < best)
            side = (direction[np.arange(n), axis] < 0).astype(np.int64)
            best[hit] = t_near[hit]
            ids[hit] = 1 + b * FACES_PER_BOX + 2 * axis[hit] + side[hit]

        if scene.ground and origin[2] > 0:
            t_ground = -origin[2] / direction[:, 2]
            hit = (direction[:, 2] < 0) & (t_ground > 0) & (t_ground < best)
            best[hit] = t_ground[hit]
            ids[hit] = GROUND_ID

    depth = np.where(np.isfinite(best), best, 0.0)
    shape = (intr.height, intr.width)
    return depth.reshape(shape), ids.reshape(shape)


def render_surface_ids(scene: StaircaseScene, camera_pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """
    Per-pixel surface id: 0 ground, -1 miss, otherwise
    1 + box * 6 + axis * 2 + (1 if the face is the box's upper side).
    """
    return _cast(scene, camera_pose, intr)[1]


def render_depth(scene: StaircaseScene, camera_pose: Pose, intr: CameraIntrinsics, noise: NoiseModel,
                 rng: Optional[np.random.Generator] = None) -> DepthImage:
    """
    Ray-cast depth frame.

    Args:
        scene: staircase
        camera_pose: T_W_C (optical frame)
        intr: pinhole intrinsics
        noise: depth_sigma and depth_dropout are applied in that order
        rng: generator; defaults to the 'render' stream of noise.seed

    Returns:
        DepthImage with 0 for misses and dropped pixels
    """
    rng = rng if rng is not None else rng_stream(noise.seed, 'render')
    depth, _ = _cast(scene, camera_pose, intr)
    valid = depth > 0
    if noise.depth_sigma > 0:
        depth = depth + valid * rng.normal(0.0, noise.depth_sigma, depth.shape)
    if noise.depth_dropout > 0:
        depth = np.where(rng.random(depth.shape) < noise.depth_dropout, 0.0, depth)
    return DepthImage(np.clip(depth, 0.0, None))


# ---------------------------------------------------------------------------
# Odometry and proprioception
# ---------------------------------------------------------------------------

class OdometrySimulator:
    """
    Kinematic drift and LIO noise generator.

    The drift direction is a random unit vector drawn once per run; the
    kinematic stream is truth + drift_rate * (t - start) * direction.
    """

    def __init__(self, noise: NoiseModel, rng: Optional[np.random.Generator] = None, start: float = 0.0):
        self.noise = noise
        self.rng = rng if rng is not None else rng_stream(noise.seed, 'odometry')
        direction = self.rng.normal(size=3)
        self.direction = direction / np.linalg.norm(direction)
        self.start = start

    def drift(self, stamp: float) -> np.ndarray:
        return self.noise.drift_rate * (stamp - self.start) * self.direction

    @property
    def drift_velocity(self) -> np.ndarray:
        return self.noise.drift_rate * self.direction

    def kinematic(self, truth: OdomSample) -> OdomSample:
        pose = Pose(truth.pose.rotation, truth.pose.translation + self.drift(truth.stamp),
                    truth.pose.parent, truth.pose.child)
        return OdomSample(truth.stamp, pose, OdomSource.KINEMATIC)

    def lio(self, truth: OdomSample) -> OdomSample:
        offset = self.rng.normal(0.0, 1.0, 3) * self.noise.lio_sigma
        tilt = self.rng.normal(0.0, 1.0, 3) * self.noise.lio_rot_sigma
        rotation = Rotation(truth.pose.rotation.matrix @ rotation_exp(tilt).matrix)
        pose = Pose(rotation, truth.pose.translation + offset, truth.pose.parent, truth.pose.child)
        return OdomSample(truth.stamp, pose, OdomSource.LIO)


def simulate_odometry(true_traj: Sequence[OdomSample], noise: NoiseModel,
                      rng: Optional[np.random.Generator] = None) -> Tuple[List[OdomSample], List[OdomSample]]:
    """
    Drifting kinematic stream and noisy LIO stream from ground truth.

    Returns:
        (kinematic, lio) sample lists aligned with true_traj
    """
    stamps = [s.stamp for s in true_traj]
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        raise ValidationError("simulate_odometry needs non-decreasing stamps")
    sim = OdometrySimulator(noise, rng, start=stamps[0] if stamps else 0.0)
    kinematic = [sim.kinematic(s) for s in true_traj]
    lio = [sim.lio(s) for s in true_traj]
    return kinematic, lio


def straight_walk(start: TorsoPose, speed: float, duration: float, rate_hz: float) -> List[OdomSample]:
    """Ground-truth base poses for a constant-speed walk along the start heading."""
    if duration <= 0 or rate_hz <= 0:
        raise UsageError("straight_walk needs a positive duration and rate")
    heading = np.array([math.cos(start.phi), math.sin(start.phi), 0.0])
    samples = []
    for k in range(int(round(duration * rate_hz)) + 1):
        t = k / rate_hz
        pose = Pose(Rotation.about_z(start.phi), start.position + speed * t * heading, Frame.W, Frame.B)
        samples.append(OdomSample(t, pose, OdomSource.TRUTH))
    return samples


def foot_contacts(center: np.ndarray, phi: float, side: Side, geom: FootGeometry) -> np.ndarray:
    """Toe-outer, toe-inner, heel-outer, heel-inner points of one sole (4, 3)."""
    along = np.array([math.cos(phi), math.sin(phi), 0.0]) * (0.5 * geom.length)
    lateral = np.array([-math.sin(phi), math.cos(phi), 0.0]) * (0.5 * geom.width * side.sign)
    center = np.asarray(center, dtype=float)
    return np.array([
        center + along + lateral,
        center + along - lateral,
        center - along + lateral,
        center - along - lateral,
    ])


def synthesize_observation(contacts: np.ndarray, contact_velocities: np.ndarray, p_base: np.ndarray,
                           v_base: np.ndarray, rotation: Rotation, sigma: float,
                           rng: np.random.Generator) -> ObservationVector:
    """
    Leg-odometry observation in the base frame.

    Relative positions and velocities are rotated into the base frame;
    heights stay world z. Gaussian noise of std sigma on every entry.
    """
    rt = rotation.matrix.T
    rel = (contacts - p_base) @ rt.T
    vel = (contact_velocities - v_base) @ rt.T
    heights = contacts[:, 2].copy()
    y = np.concatenate([rel.ravel(), vel.ravel(), heights])
    y = y + rng.normal(0.0, 1.0, y.shape) * sigma
    return ObservationVector(y)


# ---------------------------------------------------------------------------
# Ground-truth motion
# ---------------------------------------------------------------------------

class TorsoTrajectory:
    """
    Piecewise torso motion: holds still, or moves between two poses over
    [t0, t1] with a cosine-smoothed blend (zero velocity at both ends).
    """

    def __init__(self, start: TorsoPose, t0: float = 0.0):
        self._segments: List[Tuple[float, float, np.ndarray, np.ndarray]] = []
        self._rest = start.position
        self._rest_time = t0
        self.yaw = start.phi

    def move_to(self, t0: float, t1: float, target: TorsoPose) -> None:
        if t1 <= t0:
            raise UsageError("Torso segment must have positive duration")
        start = self.position(t0)
        self._segments.append((t0, t1, start, target.position))
        self._rest, self._rest_time = target.position, t1
        self.yaw = target.phi

    def _segment(self, t: float):
        for seg in reversed(self._segments):
            if seg[0] <= t:
                return seg
        return None

    def position(self, t: float) -> np.ndarray:
        seg = self._segment(t)
        if seg is None:
            return self._segments[0][2].copy() if self._segments else self._rest.copy()
        t0, t1, a, b = seg
        if t >= t1:
            return b.copy()
        s = 0.5 * (1.0 - math.cos(math.pi * (t - t0) / (t1 - t0)))
        return a + (b - a) * s

    def velocity(self, t: float) -> np.ndarray:
        seg = self._segment(t)
        if seg is None or t >= seg[1]:
            return np.zeros(3)
        t0, t1, a, b = seg
        rate = 0.5 * math.pi / (t1 - t0) * math.sin(math.pi * (t - t0) / (t1 - t0))
        return (b - a) * rate

    def acceleration(self, t: float) -> np.ndarray:
        seg = self._segment(t)
        if seg is None or t >= seg[1]:
            return np.zeros(3)
        t0, t1, a, b = seg
        rate = 0.5 * (math.pi / (t1 - t0)) ** 2 * math.cos(math.pi * (t - t0) / (t1 - t0))
        return (b - a) * rate

    def pose(self, t: float) -> Pose:
        return Pose(Rotation.about_z(self.yaw), self.position(t), Frame.W, Frame.B)


@dataclass
class FootMotion:
    """Swing of one foot between liftoff and touchdown."""

    side: Side
    liftoff: float
    touchdown: float
    start: np.ndarray
    end: np.ndarray


class FeetState:
    """True foot centers over time plus the eight contact points."""

    def __init__(self, feet: Dict[Side, np.ndarray], phi: float, geom: FootGeometry, gait):
        self.rest = {side: np.asarray(p, dtype=float) for side, p in feet.items()}
        self.phi = phi
        self.geom = geom
        self.gait = gait
        self.swings: List[FootMotion] = []

    def add_swing(self, motion: FootMotion) -> None:
        self.swings.append(motion)

    def _active(self, side: Side, t: float) -> Optional[FootMotion]:
        for motion in self.swings:
            if motion.side is side and motion.liftoff <= t < motion.touchdown:
                return motion
        return None

    def center(self, side: Side, t: float) -> np.ndarray:
        motion = self._active(side, t)
        if motion is None:
            landed = [m for m in self.swings if m.side is side and m.touchdown <= t]
            return landed[-1].end.copy() if landed else self.rest[side].copy()
        tau = min(t - motion.liftoff, self.gait.swing_period)
        z_0 = float(motion.end[2] - motion.start[2])
        xy, z = swing_profile(tau, motion.start[:2], motion.end[:2], min(z_0, self.gait.z_max), self.gait)
        return np.array([xy[0], xy[1], motion.start[2] + z])

    def in_stance(self, side: Side, t: float) -> bool:
        return self._active(side, t) is None

    def contacts(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """(8, 3) contact points and their 8 stance flags."""
        points, flags = [], []
        for side in (Side.LEFT, Side.RIGHT):
            points.append(foot_contacts(self.center(side, t), self.phi, side, self.geom))
            flags.extend([self.in_stance(side, t)] * 4)
        return np.vstack(points), np.array(flags)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def execute_step(step: PlannedStep, at_perception: Pose, at_execution: Pose, noise: NoiseModel,
                 rng: np.random.Generator, surfaces: Optional[Sequence[TreadSurface]],
                 geom: FootGeometry, t_offset: float = 0.0) -> ExecutedStep:
    """
    Place one foot in the true world.

    The plan lives in the estimated world frame. at_perception and
    at_execution are the estimate-to-truth corrections (T_true o T_est^-1)
    when the map was built and when the foot lands; the planned foothold
    is the target under the first, the executed one under the second
    plus Gaussian actuation noise in XY.

    Args:
        step: planned step
        at_perception: correction when the map was perceived
        at_execution: correction at touchdown
        noise: actuation_sigma
        rng: actuation stream
        surfaces: true treads; None skips the tread checks
        geom: sole rectangle
        t_offset: plan start time in the run

    Returns:
        ExecutedStep with errors in millimeters
    """
    target = np.asarray(step.p_f, dtype=float)
    planned = transform_points(at_perception, target)[0]
    commanded = transform_points(at_execution, target)[0]
    executed = commanded.copy()
    executed[:2] += rng.normal(0.0, 1.0, 2) * noise.actuation_sigma
    phi = step.rectangle.theta + at_execution.rotation.yaw

    level, inside = -1, True
    if surfaces is not None:
        surface = surface_under(surfaces, executed)
        if surface is None:
            inside = False
        else:
            level = surface.level
            executed[2] = surface.height
            rect = Polygon(foot_contacts(executed, phi, step.side, geom)[[0, 2, 3, 1], :2])
            inside = bool(surface.clear.covers(rect))

    return ExecutedStep(
        index=step.index,
        side=step.side.value,
        level=level,
        planned=planned.tolist(),
        executed=executed.tolist(),
        error_mm=float(np.hypot(*(executed[:2] - planned[:2]))) * 1e3,
        vertical_error_mm=abs(float(executed[2] - planned[2])) * 1e3,
        t_planned=t_offset + step.t,
        t_executed=t_offset + step.t,
        inside_tread=inside,
    )


def execute_plan(plan: FootstepPlan, noise: NoiseModel, surfaces: Optional[Sequence[TreadSurface]] = None,
                 rng: Optional[np.random.Generator] = None, geom: Optional[FootGeometry] = None,
                 t_offset: float = 0.0) -> List[ExecutedStep]:
    """
    Execute a plan with perfect state knowledge.

    Stops after the first step whose rectangle leaves its tread.
    """
    rng = rng if rng is not None else rng_stream(noise.seed, 'actuation')
    geom = geom or FootGeometry()
    identity = Pose.identity()
    executed = []
    for step in plan.steps:
        result = execute_step(step, identity, identity, noise, rng, surfaces, geom, t_offset)
        executed.append(result)
        if not result.inside_tread:
            logger.info(f"Step {step.index} left its tread at {result.executed}")
            break
    return executed
