"""
Tests for foot placement, swing trajectories, the rectangle overlap test
and plan assembly.
"""

import math

import numpy as np
import pytest
from shapely.geometry import box

from backend.errors import UsageError
from backend.models.foothold import FootholdCandidate, FootholdRegion
from backend.models.geometry import Frame, Pose
from backend.models.planning import (
    FootGeometry, FootstepPlan, GaitMode, GaitParams, OrientedRectangle, PlanStatus, Side, TorsoPose
)
from services.foothold_service import FootholdGenerator
from services.footstep_planner_service import (
    FootstepPlanner, foot_from_torso, foot_rectangle, foot_state_for, plan_steps, rect_intersect, sample_swing,
    swing_profile, swing_times
)
from services.simulation_service import tread_surfaces
from tests.test_foothold import box_polygon, staircase_polygons

START = TorsoPose(0.0, 0.0, 0.8, 0.0)


def stance_at(torso: TorsoPose, g: GaitParams = GaitParams()):
    return {side: foot_from_torso(torso, side, g) for side in Side}


def inside(rect: OrientedRectangle, pts: np.ndarray) -> np.ndarray:
    d = pts - rect.center
    u, v = d @ rect.axes[0], d @ rect.axes[1]
    return (np.abs(u) <= 0.5 * rect.w) & (np.abs(v) <= 0.5 * rect.h)


def assert_plan_invariants(plan: FootstepPlan, g: GaitParams, torso: TorsoPose):
    """Swing shape, time grid and overlap checks for every emitted step."""
    geom = FootGeometry()
    rects = {side: foot_rectangle(foot_from_torso(torso, side, g), torso.phi, geom) for side in Side}
    previous = None
    for step in plan.steps:
        z = step.swing[:, 3] - step.start[2]
        z_0 = step.p_f[2] - step.start[2]
        assert z.min() >= min(0.0, z_0) - 1e-12
        assert z.max() == pytest.approx(g.z_max, abs=1e-9)
        assert z[-1] == pytest.approx(z_0, abs=1e-12)
        assert step.swing[-1, 0] == pytest.approx(step.t)
        assert step.t == (step.index * g.ticks_per_step) * g.dt_plan
        assert not rect_intersect(step.rectangle, rects[step.side.other])
        rects[step.side] = step.rectangle
        if previous is not None:
            assert step.t > previous.t
            if g.gait_mode is GaitMode.SS:
                assert step.side is not previous.side
        previous = step


class TestFootFromTorso:
    """Test foot_from_torso()."""

    def test_left_at_zero_yaw(self):
        assert np.allclose(foot_from_torso(START, Side.LEFT, GaitParams()), [0.0, 0.1, 0.0])

    def test_right_at_zero_yaw(self):
        assert np.allclose(foot_from_torso(START, Side.RIGHT, GaitParams()), [0.0, -0.1, 0.0])

    def test_quarter_turn(self):
        p = foot_from_torso(TorsoPose(0.0, 0.0, 0.8, math.pi / 2), Side.LEFT, GaitParams())
        assert np.allclose(p, [-0.1, 0.0, 0.0], atol=1e-12)

    def test_matches_matrix_product(self, rng):
        g = GaitParams(y_b=0.12, z_t=0.75)
        for _ in range(100):
            torso = TorsoPose(*rng.normal(size=3), rng.uniform(-math.pi, math.pi))
            c, s = math.cos(torso.phi), math.sin(torso.phi)
            rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            for side, sign in ((Side.LEFT, 1.0), (Side.RIGHT, -1.0)):
                expected = torso.position + rz @ np.array([0.0, sign * g.y_b, -g.z_t])
                assert np.allclose(foot_from_torso(torso, side, g), expected, atol=1e-12)


class TestSwingProfile:
    """Test swing_profile() and sample_swing()."""

    def test_liftoff(self):
        x, z = swing_profile(0.0, 0.2, 0.5, 0.13, GaitParams())
        assert (x, z) == (0.2, 0.0)

    def test_apex(self):
        g = GaitParams()
        _, z = swing_profile(g.t_lift, 0.0, 1.0, 0.13, g)
        assert z == pytest.approx(g.z_max)

    def test_touchdown(self):
        g = GaitParams()
        x, z = swing_profile(g.swing_period, [0.0, 1.0], [0.3, 1.2], 0.13, g)
        assert np.allclose(x, [0.3, 1.2])
        assert z == pytest.approx(0.13, abs=1e-12)

    def test_continuous_at_apex(self):
        g = GaitParams()
        for z_0 in (-0.1, 0.0, 0.13):
            _, before = swing_profile(g.t_lift - 1e-9, 0.0, 1.0, z_0, g)
            _, after = swing_profile(g.t_lift + 1e-9, 0.0, 1.0, z_0, g)
            assert abs(before - after) < 1e-6

    def test_x_linear_in_time(self):
        g = GaitParams()
        x, _ = swing_profile(0.25 * g.swing_period, 0.0, 0.4, 0.0, g)
        assert x == pytest.approx(0.1)

    def test_separate_horizontal_period(self):
        g = GaitParams(t_step=0.4)
        x, _ = swing_profile(0.6, 0.0, 0.4, 0.0, g)
        assert x == pytest.approx(0.4)

    def test_time_outside_swing(self):
        g = GaitParams()
        with pytest.raises(UsageError):
            swing_profile(-0.01, 0.0, 1.0, 0.0, g)
        with pytest.raises(UsageError):
            swing_profile(g.swing_period + 0.01, 0.0, 1.0, 0.0, g)

    def test_landing_above_apex(self):
        with pytest.raises(UsageError):
            swing_profile(0.1, 0.0, 1.0, 0.25, GaitParams(z_max=0.18))

    def test_sample_grid_includes_breakpoints(self):
        g = GaitParams(t_lift=0.305, t_land=0.4)
        times = swing_times(g)
        assert times[0] == 0.0
        assert g.t_lift in times
        assert times[-1] == pytest.approx(g.swing_period)
        assert np.all(np.diff(times) > 0)

    def test_sample_swing_ends_on_target(self):
        g = GaitParams()
        rows = sample_swing(np.array([0.0, 0.1, 0.0]), np.array([0.3, 0.1, 0.13]), 1.7, g)
        assert rows[0, 0] == pytest.approx(1.7 - g.swing_period)
        assert rows[-1, 0] == pytest.approx(1.7)
        assert np.allclose(rows[-1, 1:], [0.3, 0.1, 0.13])
        assert rows[:, 3].max() == pytest.approx(g.z_max)


class TestRectIntersect:
    """Test rect_intersect()."""

    def test_identical(self):
        r = OrientedRectangle([0.0, 0.0], 0.26, 0.096, 0.3)
        assert rect_intersect(r, r)

    def test_far_apart(self):
        assert not rect_intersect(OrientedRectangle([0, 0], 1, 1), OrientedRectangle([10, 0], 1, 1))

    def test_touching_counts(self):
        assert rect_intersect(OrientedRectangle([0, 0], 1, 1), OrientedRectangle([1, 0], 1, 1))

    def test_diagonal_gap(self):
        a = OrientedRectangle([0, 0], 1, 1, math.pi / 4)
        b = OrientedRectangle([1.2, 1.2], 1, 1, math.pi / 4)
        assert not rect_intersect(a, b)
        assert not a.to_polygon().intersects(b.to_polygon())

    def test_matches_sampling_oracle(self, rng):
        n = 200
        for k in range(500):
            a = OrientedRectangle(rng.uniform(-1, 1, 2), rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0),
                                  rng.uniform(-math.pi, math.pi))
            if k % 2:
                gap = rng.uniform(-0.01, 0.01)
                offset = a.axes[0] * (0.5 * a.w + gap) + a.axes[1] * rng.uniform(-0.5, 0.5) * a.h
                b = OrientedRectangle(a.center + offset + a.axes[0] * 0.05, 0.1, rng.uniform(0.1, 1.0),
                                      a.theta + rng.choice([0.0, rng.uniform(-0.3, 0.3)]))
            else:
                b = OrientedRectangle(rng.uniform(-1, 1, 2), rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0),
                                      rng.uniform(-math.pi, math.pi))

            corners = np.vstack([a.corners(), b.corners()])
            lo, hi = corners.min(axis=0), corners.max(axis=0)
            gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n))
            pts = np.column_stack([gx.ravel(), gy.ravel()])
            pitch = float(np.max((hi - lo) / (n - 1)))
            sampled = bool(np.any(inside(a, pts) & inside(b, pts)))
            result = rect_intersect(a, b)
            if sampled:
                assert result
            elif result:
                # overlap thinner than the sample pitch
                assert not a.to_polygon().buffer(-pitch).intersects(b.to_polygon().buffer(-pitch))


class TestPlanSteps:
    """Test plan_steps()."""

    def test_open_floor(self):
        path = [START, TorsoPose(0.3, 0.0, 0.8, 0.0), TorsoPose(0.6, 0.0, 0.8, 0.0)]
        g = GaitParams()
        plan = plan_steps(path, None, g=g)
        assert plan.status is PlanStatus.OK
        assert [s.side for s in plan.steps] == [Side.LEFT, Side.RIGHT, Side.LEFT, Side.RIGHT]
        for step in plan.steps:
            assert step.p_f[1] == pytest.approx(step.side.sign * g.y_b)
            assert step.p_f[2] == pytest.approx(0.0)
        assert_plan_invariants(plan, g, START)

    def test_open_floor_single_step(self):
        path = [START, TorsoPose(0.25, 0.0, 0.8, 0.0), TorsoPose(0.5, 0.0, 0.8, 0.0)]
        g = GaitParams(gait_mode=GaitMode.SS)
        plan = plan_steps(path, None, g=g)
        assert [s.side for s in plan.steps] == [Side.LEFT, Side.RIGHT]

    def test_empty_candidates(self):
        plan = plan_steps([START], [])
        assert plan.status is PlanStatus.NO_FOOTHOLDS
        assert len(plan) == 0

    def test_empty_path(self):
        with pytest.raises(UsageError):
            plan_steps([], None)

    def test_overlap_truncates(self):
        g = GaitParams(y_b=0.03)
        base = Pose.from_xyz_yaw(0.0, 0.0, 0.8, 0.0, Frame.W, Frame.B)
        cells = frozenset((i, j) for i in range(50) for j in range(-10, 10))
        region = FootholdRegion(cells, base, 0.02, 0.13, box(0.3, -0.06, 0.6, 0.06))
        candidate = FootholdCandidate(np.array([0.45, 0.0, 0.13]), 0.0, region=region)
        plan = plan_steps([START], [candidate], g=g)
        assert plan.status is PlanStatus.TRUNCATED
        assert [s.side for s in plan.steps] == [Side.LEFT]
        assert region.covers(plan.steps[0].rectangle.to_polygon())
        assert 'step 2' in plan.message

    def test_rise_above_apex_truncates(self):
        candidate = FootholdCandidate(np.array([0.45, 0.0, 0.3]), 0.0)
        plan = plan_steps([START], [candidate], g=GaitParams(z_max=0.18))
        assert plan.status is PlanStatus.TRUNCATED
        assert len(plan) == 0
        assert 'apex' in plan.message

    def test_first_side(self):
        plan = FootstepPlanner().plan([START, TorsoPose(0.3, 0, 0.8, 0)], None, first_side=Side.RIGHT)
        assert plan.steps[0].side is Side.RIGHT

    def test_power_of_two_grid_is_exact(self):
        g = GaitParams(dt_plan=2.0 ** -7, step_period=1.5)
        path = [START] + [TorsoPose(0.2 * k, 0.0, 0.8, 0.0) for k in range(1, 6)]
        plan = plan_steps(path, None, g=g)
        for step in plan.steps:
            assert step.t == step.index * g.ticks_per_step * 2.0 ** -7

    def test_randomized_invariants(self, rng):
        for _ in range(1000):
            t_lift, t_land = rng.uniform(0.2, 0.6, 2)
            g = GaitParams(
                z_max=rng.uniform(0.1, 0.3),
                t_lift=float(t_lift),
                t_land=float(t_land),
                step_period=round(float(t_lift + t_land + rng.uniform(0.01, 0.5)), 2),
                gait_mode=(GaitMode.DS, GaitMode.SS)[int(rng.integers(2))],
                first_side=(Side.LEFT, Side.RIGHT)[int(rng.integers(2))],
            )
            phi = rng.uniform(-math.pi, math.pi)
            path = [TorsoPose(0.0, 0.0, 0.8, phi)]
            for _ in range(int(rng.integers(1, 5))):
                phi += rng.uniform(-0.2, 0.2)
                stride = rng.uniform(0.1, 0.4)
                last = path[-1]
                path.append(TorsoPose(last.x + stride * math.cos(phi), last.y + stride * math.sin(phi), 0.8, phi))
            plan = plan_steps(path, None, g=g)
            assert_plan_invariants(plan, g, path[0])


class TestPlanStaircase:
    """Test FootstepPlanner.plan_staircase() on the ground-truth staircase."""

    def test_double_step(self, staircase):
        planner = FootstepPlanner()
        base = Pose.from_xyz_yaw(0.0, 0.0, 0.8, 0.0, Frame.W, Frame.B)
        plan = planner.plan_staircase(staircase_polygons(staircase), base, stance_at(START), FootholdGenerator())
        assert plan.status is PlanStatus.OK
        heights = [s.p_f[2] for s in plan.steps]
        assert heights == pytest.approx([0.13, 0.13, 0.26, 0.26, 0.39, 0.39, 0.52, 0.52])
        for first, second in zip(plan.steps[::2], plan.steps[1::2]):
            assert first.side is not second.side
            assert first.p_f[2] == pytest.approx(second.p_f[2])

        surfaces = {s.level: s.polygon for s in tread_surfaces(staircase)}
        for k, step in enumerate(plan.steps):
            assert surfaces[k // 2 + 1].covers(step.rectangle.to_polygon())
        assert_plan_invariants(plan, planner.gait, START)

    def test_single_step(self, staircase):
        planner = FootstepPlanner(GaitParams(gait_mode=GaitMode.SS, z_max=0.3))
        base = Pose.from_xyz_yaw(0.0, 0.0, 0.8, 0.0, Frame.W, Frame.B)
        plan = planner.plan_staircase(staircase_polygons(staircase), base, stance_at(START), FootholdGenerator())
        assert plan.status is PlanStatus.OK
        assert [s.p_f[2] for s in plan.steps] == pytest.approx([0.13, 0.26, 0.39, 0.52, 0.52])
        assert [s.side for s in plan.steps] == [Side.LEFT, Side.RIGHT, Side.LEFT, Side.RIGHT, Side.LEFT]

    def test_max_levels(self, staircase):
        base = Pose.from_xyz_yaw(0.0, 0.0, 0.8, 0.0, Frame.W, Frame.B)
        plan = FootstepPlanner().plan_staircase(staircase_polygons(staircase), base, stance_at(START),
                                                FootholdGenerator(), max_levels=2)
        assert len(plan) == 4

    def test_no_footholds(self):
        base = Pose.from_xyz_yaw(0.0, 0.0, 0.8, 0.0, Frame.W, Frame.B)
        plan = FootstepPlanner().plan_staircase([box_polygon(-1, 1, -1, 1, 0.0)], base, stance_at(START),
                                                FootholdGenerator())
        assert plan.status is PlanStatus.NO_FOOTHOLDS


class TestFootStateFor:
    """Test foot_state_for()."""

    def test_double_step_uses_both_feet(self):
        feet = {Side.LEFT: np.array([0.0, 0.1, 0.13]), Side.RIGHT: np.array([0.0, -0.1, 0.0])}
        base = Pose.from_xyz_yaw(0.0, 0.0, 0.8, 0.0, Frame.W, Frame.B)
        state = foot_state_for(GaitMode.DS, feet, base)
        assert state.z_foot == pytest.approx(-0.8)

    def test_single_step_uses_lead(self):
        feet = {Side.LEFT: np.array([0.0, 0.1, 0.13]), Side.RIGHT: np.array([0.0, -0.1, 0.0])}
        base = Pose.from_xyz_yaw(0.0, 0.0, 0.8, 0.0, Frame.W, Frame.B)
        state = foot_state_for(GaitMode.SS, feet, base, Side.LEFT)
        assert state.z_foot == pytest.approx(0.13 - 0.8)
