"""
Footstep Planner Service - foot targets, swing trajectories and timing.

Targets come from torso poses (foot_from_torso) snapped into foothold
regions; consecutive foot rectangles are checked with a separating-axis
test. Times sit on the plan grid t_i = i * ticks_per_step * dt_plan.
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import shapely
from shapely.geometry import LineString, Point

from backend.errors import UsageError
from backend.models.foothold import FootholdCandidate, FootholdRegion, FootState
from backend.models.geometry import Pose
from backend.models.perception import PolygonSegment
from backend.models.planning import (
    FootGeometry, FootstepPlan, GaitMode, GaitParams, OrientedRectangle, PlannedStep,
    PlanStatus, Side, TorsoPose
)
from services.foothold_service import FootholdGenerator
from services.geometry_service import invert, transform_points

logger = logging.getLogger(__name__)

SNAP_RADIUS = 0.05
HEEL_MARGIN = 0.04
RESCALE_ATTEMPTS = 3
PATH_EXTENSION = 2.0
TIME_TOLERANCE = 1e-12


def _search_offsets() -> np.ndarray:
    ds, dl = np.meshgrid(0.0025 * np.arange(-20, 21), 0.01 * np.arange(-5, 6), indexing='ij')
    ds, dl = ds.ravel(), dl.ravel()
    dist = np.hypot(ds, dl)
    keep = dist <= SNAP_RADIUS + 1e-12
    ds, dl, dist = ds[keep], dl[keep], dist[keep]
    order = np.lexsort((dl, ds, dist))
    return np.column_stack([ds[order], dl[order]])


# (along, across) offsets from the nominal target, nearest first
SEARCH_OFFSETS = _search_offsets()


def foot_from_torso(p_t: TorsoPose, side: Side, g: GaitParams) -> np.ndarray:
    """
    p_f = p_t + R_z(phi) b_f, b_f = [0, +/-y_b, -z_t].

    Examples:
        >>> foot_from_torso(TorsoPose(0, 0, 0.8, 0), Side.LEFT, GaitParams())
        array([0. , 0.1, 0. ])
    """
    c, s = math.cos(p_t.phi), math.sin(p_t.phi)
    lateral = side.sign * g.y_b
    return np.array([p_t.x - s * lateral, p_t.y + c * lateral, p_t.z - g.z_t])


def swing_profile(t: float, x_start, x_end, z_0: float, g: GaitParams):
    """
    Swing position at time t after liftoff.

    Lift: z = z_max sin(pi t / (2 t_lift)).
    Land: z = z_0 + (z_max - z_0) cos(pi (t - t_lift) / (2 t_land)),
    continuous at t_lift for any z_0.
    x moves linearly over the horizontal period (T unless t_step is set).

    Args:
        t: seconds since liftoff, in [0, T]
        x_start: start coordinate(s)
        x_end: end coordinate(s)
        z_0: landing height relative to the start
        g: gait params

    Returns:
        (x, z)

    Raises:
        UsageError: t outside [0, T] or z_0 above the swing apex
    """
    period = g.swing_period
    if t < -TIME_TOLERANCE or t > period + TIME_TOLERANCE:
        raise UsageError(f"Swing time {t} outside [0, {period}]")
    if z_0 > g.z_max:
        raise UsageError(f"Landing height {z_0:.3f} above the swing apex {g.z_max:.3f}")
    t = min(max(t, 0.0), period)

    frac = min(t / g.horizontal_period, 1.0)
    x = np.asarray(x_start, dtype=float) + (np.asarray(x_end, dtype=float) - np.asarray(x_start, dtype=float)) * frac
    if t <= g.t_lift:
        z = g.z_max * math.sin(math.pi * t / (2.0 * g.t_lift))
    else:
        z = z_0 + (g.z_max - z_0) * math.cos(math.pi * (t - g.t_lift) / (2.0 * g.t_land))
    if x.ndim == 0:
        x = float(x)
    return x, z


def swing_times(g: GaitParams) -> np.ndarray:
    """Grid k*dt_plan over [0, T] plus the breakpoints t_lift and T."""
    period = g.swing_period
    grid = g.dt_plan * np.arange(int(math.floor(period / g.dt_plan + 1e-9)) + 1)
    return np.unique(np.concatenate([grid[grid <= period], [g.t_lift, period]]))


def sample_swing(start: np.ndarray, end: np.ndarray, touchdown: float, g: GaitParams) -> np.ndarray:
    """
    Sampled swing ending at `touchdown`.

    Returns:
        (M, 4) rows of (t, x, y, z) with t in [touchdown - T, touchdown]
    """
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    z_0 = float(end[2] - start[2])
    rows = []
    for tau in swing_times(g):
        xy, z = swing_profile(float(tau), start[:2], end[:2], z_0, g)
        rows.append((touchdown - g.swing_period + tau, xy[0], xy[1], start[2] + z))
    return np.array(rows)


def foot_rectangle(p_f: np.ndarray, phi: float, geom: FootGeometry) -> OrientedRectangle:
    return OrientedRectangle(np.asarray(p_f, dtype=float)[:2], geom.length, geom.width, phi)


def rect_intersect(a: OrientedRectangle, b: OrientedRectangle) -> bool:
    """
    Closed-rectangle overlap by the separating-axis test.

    Touching edges count as intersecting.
    """
    corners_a, corners_b = a.corners(), b.corners()
    for axis in np.vstack([a.axes, b.axes]):
        pa, pb = corners_a @ axis, corners_b @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


class _PathLine:
    """Torso path as a planar polyline with arc-length lookups."""

    def __init__(self, path: Sequence[TorsoPose]):
        xy = [(p.x, p.y) for p in path]
        if len(xy) == 1 or LineString(xy).length == 0:
            first = path[0]
            xy = [(first.x, first.y),
                  (first.x + PATH_EXTENSION * math.cos(first.phi), first.y + PATH_EXTENSION * math.sin(first.phi))]
        self.line = LineString(xy)
        pts = np.asarray(xy)
        self._cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
        self._pts = pts

    def heading_at(self, s: float) -> float:
        i = int(np.clip(np.searchsorted(self._cum, s, side='right') - 1, 0, len(self._pts) - 2))
        d = self._pts[i + 1] - self._pts[i]
        return math.atan2(d[1], d[0])

    def pose_at(self, s: float, z: float) -> TorsoPose:
        point = self.line.interpolate(s)
        return TorsoPose(point.x, point.y, z, self.heading_at(s))

    def project(self, xy) -> float:
        return float(self.line.project(Point(xy[0], xy[1])))

    def extent(self, footprint) -> Optional[Tuple[float, float]]:
        if footprint.is_empty:
            return None
        crossing = self.line.intersection(footprint)
        if crossing.is_empty:
            return None
        s = [self.project(c) for c in shapely.get_coordinates(crossing)]
        return min(s), max(s)


def _target_coordinate(line: _PathLine, candidate: FootholdCandidate, geom: FootGeometry) -> float:
    """Along-path coordinate of the nominal torso for a candidate level."""
    span = line.extent(candidate.region.footprint) if candidate.region is not None else None
    if span is None:
        return line.project(candidate.p_star)
    s_min, s_max = span
    return s_min + 0.5 * geom.length + min(HEEL_MARGIN, 0.5 * (s_max - s_min - geom.length))


def _placement_ok(rect: OrientedRectangle, region: Optional[FootholdRegion],
                  other: Optional[OrientedRectangle]) -> bool:
    if other is not None and rect_intersect(rect, other):
        return False
    if region is None:
        return True
    return region.contains_cell_of(rect.center) and region.covers(rect.to_polygon())


def _place(nominal: TorsoPose, side: Side, region: Optional[FootholdRegion], other: Optional[OrientedRectangle],
           geom: FootGeometry, g: GaitParams) -> Optional[Tuple[np.ndarray, OrientedRectangle]]:
    base = foot_from_torso(nominal, side, g)
    along = np.array([math.cos(nominal.phi), math.sin(nominal.phi)])
    across = np.array([-along[1], along[0]])
    for ds, dl in SEARCH_OFFSETS:
        center = base[:2] + ds * along + dl * across
        rect = OrientedRectangle(center, geom.length, geom.width, nominal.phi)
        if _placement_ok(rect, region, other):
            return np.array([center[0], center[1], base[2]]), rect
    return None


def plan_steps(
    torso_path: Sequence[TorsoPose],
    candidates: Optional[Sequence[FootholdCandidate]],
    foot_geom: Optional[FootGeometry] = None,
    g: Optional[GaitParams] = None,
    stance: Optional[Dict[Side, np.ndarray]] = None,
    first_index: int = 1,
) -> FootstepPlan:
    """
    Plan timed foot placements along a torso path.

    Args:
        torso_path: non-empty torso poses; the first one is the current torso
        candidates: one candidate per level to step onto, in order;
            None plans on open floor through the remaining waypoints
        foot_geom: sole rectangle (26 x 9.6 cm by default)
        g: gait params (mode, first side, timing)
        stance: current foot positions; defaults to foot_from_torso(torso_path[0])
        first_index: index of the first step on the global plan grid

    Returns:
        FootstepPlan with status ok, truncated or no_footholds

    Raises:
        UsageError: empty torso path
    """
    if not torso_path:
        raise UsageError("plan_steps needs a non-empty torso path")
    geom = foot_geom or FootGeometry()
    g = g or GaitParams()
    feet = {side: np.asarray(stance[side], dtype=float) if stance else foot_from_torso(torso_path[0], side, g)
            for side in Side}
    phi0 = torso_path[0].phi
    rects = {side: foot_rectangle(feet[side], phi0, geom) for side in Side}
    line = _PathLine(torso_path)

    if candidates is not None and len(candidates) == 0:
        return FootstepPlan([], PlanStatus.NO_FOOTHOLDS, 'no foothold candidates', g.gait_mode)

    # (side, region, nominal torso, along-path coordinate)
    targets = []
    side = g.first_side
    if candidates is None:
        for pose in torso_path[1:]:
            sides = [side, side.other] if g.gait_mode is GaitMode.DS else [side]
            for s in sides:
                targets.append((s, None, pose, line.project((pose.x, pose.y))))
            side = side if g.gait_mode is GaitMode.DS else side.other
    else:
        for candidate in candidates:
            s_target = _target_coordinate(line, candidate, geom)
            nominal = line.pose_at(s_target, candidate.height + g.z_t)
            sides = [side, side.other] if g.gait_mode is GaitMode.DS else [side]
            for s in sides:
                targets.append((s, candidate.region, nominal, s_target))
            side = side if g.gait_mode is GaitMode.DS else side.other

    steps: List[PlannedStep] = []
    for side, region, nominal, s_target in targets:
        other = rects[side.other]
        placed = _place(nominal, side, region, other, geom, g)
        attempt = 0
        while placed is None and attempt < RESCALE_ATTEMPTS:
            attempt += 1
            s_prev = line.project(feet[side])
            s_scaled = s_prev + (s_target - s_prev) * (1.0 - 0.25 * attempt)
            shorter = line.pose_at(s_scaled, nominal.z)
            logger.debug(f"Step {len(steps) + first_index} ({side.value}) infeasible; stride rescale {attempt}")
            placed = _place(shorter, side, region, other, geom, g)

        if placed is None:
            message = f"no feasible placement for step {len(steps) + first_index} ({side.value})"
            logger.info(f"Plan truncated: {message}")
            return FootstepPlan(steps, PlanStatus.TRUNCATED, message, g.gait_mode)

        p_f, rect = placed
        if p_f[2] - feet[side][2] > g.z_max:
            message = (f"step {len(steps) + first_index} rises {p_f[2] - feet[side][2]:.3f} m, "
                       f"above the swing apex {g.z_max:.3f} m")
            logger.info(f"Plan truncated: {message}")
            return FootstepPlan(steps, PlanStatus.TRUNCATED, message, g.gait_mode)

        index = len(steps) + first_index
        t = (index * g.ticks_per_step) * g.dt_plan
        swing = sample_swing(feet[side], p_f, t, g)
        start = feet[side]
        feet[side] = p_f
        rects[side] = rect
        mid = 0.5 * (feet[Side.LEFT] + feet[Side.RIGHT])
        torso = TorsoPose(mid[0], mid[1], mid[2] + g.z_t, nominal.phi)
        steps.append(PlannedStep(index, side, p_f, torso, t, swing, start, rect))

    return FootstepPlan(steps, PlanStatus.OK, '', g.gait_mode)


def foot_state_for(mode: GaitMode, feet: Dict[Side, np.ndarray], base_pose: Pose,
                   lead: Optional[Side] = None) -> FootState:
    """
    Sole heights in the base frame for candidate selection.

    DS uses both feet. SS uses the leading (support) foot only so the
    next level above it becomes eligible.
    """
    local = transform_points(invert(base_pose), np.vstack([feet[Side.LEFT], feet[Side.RIGHT]]))
    left, right = float(local[0, 2]), float(local[1, 2])
    if mode is GaitMode.SS and lead is not None:
        z = left if lead is Side.LEFT else right
        return FootState(z, z, z, z)
    return FootState(left, right, left, right)


def torso_pose_of(base_pose: Pose) -> TorsoPose:
    t = base_pose.translation
    return TorsoPose(float(t[0]), float(t[1]), float(t[2]), base_pose.rotation.yaw)


class FootstepPlanner:
    """Plans steps onto candidate levels with fixed gait and foot geometry."""

    def __init__(self, gait: Optional[GaitParams] = None, foot_geom: Optional[FootGeometry] = None):
        self.gait = gait or GaitParams()
        self.foot_geom = foot_geom or FootGeometry()

    def plan(self, torso_path: Sequence[TorsoPose], candidates: Optional[Sequence[FootholdCandidate]],
             stance: Optional[Dict[Side, np.ndarray]] = None, first_index: int = 1,
             first_side: Optional[Side] = None) -> FootstepPlan:
        gait = self.gait if first_side is None else self.gait.model_copy(update={'first_side': first_side})
        plan = plan_steps(torso_path, candidates, self.foot_geom, gait, stance, first_index)
        logger.debug(f"Planned {len(plan)} step(s) from index {first_index}: {plan.status.value}")
        return plan

    def plan_level(self, base_pose: Pose, candidate: FootholdCandidate, stance: Dict[Side, np.ndarray],
                   first_index: int, first_side: Side) -> FootstepPlan:
        """Plan the step(s) onto one candidate level along the current heading."""
        return self.plan([torso_pose_of(base_pose)], [candidate], stance, first_index, first_side)

    def plan_staircase(self, polygons: List[PolygonSegment], base_pose: Pose, stance: Dict[Side, np.ndarray],
                       generator: FootholdGenerator, max_levels: Optional[int] = None) -> FootstepPlan:
        """
        Plan level after level from one static polygon map.

        After each level the virtual robot stands on its new footholds and
        candidates are regenerated from there.

        Returns:
            Combined plan; no_footholds when the first level has no candidate
        """
        mode = self.gait.gait_mode
        feet = {side: np.asarray(stance[side], dtype=float) for side in Side}
        steps: List[PlannedStep] = []
        side = self.gait.first_side
        lead: Optional[Side] = None
        levels = 0
        status, message = PlanStatus.OK, ''

        while max_levels is None or levels < max_levels:
            foot = foot_state_for(mode, feet, base_pose, lead)
            candidate = generator.generate(polygons, base_pose, foot).candidate
            if candidate is None and mode is GaitMode.SS and lead is not None \
                    and feet[lead.other][2] < feet[lead][2] - 1e-6:
                # trailing foot joins the leading one on the top level
                foot = foot_state_for(mode, feet, base_pose, lead.other)
                candidate = generator.generate(polygons, base_pose, foot).candidate
                side = lead.other
            if candidate is None:
                if not steps:
                    status, message = PlanStatus.NO_FOOTHOLDS, 'no foothold candidate from the start pose'
                break

            sub = self.plan_level(base_pose, candidate, feet, len(steps) + 1, side)
            steps.extend(sub.steps)
            for step in sub.steps:
                feet[step.side] = step.p_f
            if sub.status is not PlanStatus.OK:
                status, message = PlanStatus.TRUNCATED, sub.message
                break
            levels += 1
            last = sub.steps[-1]
            lead = last.side
            side = last.side.other
            base_pose = Pose.from_xyz_yaw(last.p_t.x, last.p_t.y, last.p_t.z, last.p_t.phi,
                                          base_pose.parent, base_pose.child)

        logger.info(f"Staircase plan: {len(steps)} step(s) over {levels} level(s), status {status.value}")
        return FootstepPlan(steps, status, message, mode)
