"""
Scenario Service - closed-loop staircase runs and perception benchmarks.

ScenarioRunner drives one run: ground-truth motion, synthetic sensors,
the estimator, perception, foothold selection, planning and kinematic
execution, then aggregates a RunReport. Runs are sequential and fully
determined by the config and its seed.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from backend.models.estimation import OdomSample, OdomSource, StateVector
from backend.models.geometry import DepthImage, Frame, Pose, Rotation
from backend.models.perception import PolygonSegment
from backend.models.planning import FootstepPlan, GaitMode, PlanStatus, Side, TorsoPose
from backend.models.scenario import (
    ExecutedStep, RunReport, RunStatus, ScenarioConfig, TimingBlock
)
from services.depth_pipeline_service import PolygonMapper
from services.foothold_service import FootholdGenerator
from services.footstep_planner_service import FootstepPlanner, foot_from_torso, foot_state_for
from services.geometry_service import compose, invert, transform_points
from services.simulation_service import (
    FeetState, FootMotion, OdometrySimulator, TorsoTrajectory, execute_step, render_depth,
    rng_stream, synthesize_observation, tread_surfaces
)
from services.state_estimation_service import BaseStateEstimator

logger = logging.getLogger(__name__)

# seconds of simulated time allowed per level before a run is declared stalled
STALL_SECONDS_PER_LEVEL = 12.0
HEIGHT_TOLERANCE = 1e-6


@dataclass
class Perception:
    """One processed frame and the estimate-to-truth correction at that time."""

    stamp: float
    polygons: List[PolygonSegment]
    correction: Pose
    base_pose: Pose


class ScenarioRunner:
    """
    Runs one closed-loop staircase scenario.

    DS: after each touchdown pair the robot settles, perceives, plans both
    feet for the next level and executes. SS: the next level is perceived
    and planned during the current swing; with inter_plan_drift the LIO
    corrections are suppressed while walking.
    """

    def __init__(
        self,
        config: ScenarioConfig,
        progress_callback: Optional[Callable[[str, float, str], None]] = None,
    ):
        """
        Initialize scenario runner.

        Args:
            config: Validated scenario configuration
            progress_callback: Optional callback for progress updates
                              Signature: callback(stage: str, percent: float, message: str)
        """
        self.config = config
        self.progress_callback = progress_callback or (lambda *args: None)

        seed = config.noise.seed
        self.rng_render = rng_stream(seed, 'render')
        self.rng_proprio = rng_stream(seed, 'proprioception')
        self.rng_actuation = rng_stream(seed, 'actuation')
        self.odometry = OdometrySimulator(config.noise, rng_stream(seed, 'odometry'))

        self.mapper = PolygonMapper(config.perception)
        self.generator = FootholdGenerator(config.foothold)
        self.planner = FootstepPlanner(config.gait, config.foot)
        self.surfaces = tread_surfaces(config.scene)
        self.T_B_C = config.mount.extrinsics()
        self.T_B_L = Pose(Rotation.identity(), np.array(config.lidar_offset), Frame.B, Frame.L)

        scene = config.scene
        start_w = transform_points(scene.world_pose(), np.array([config.start_x, 0.0, 0.0]))[0]
        start = TorsoPose(start_w[0], start_w[1], start_w[2] + config.gait.z_t, scene.yaw)
        self.feet = {side: foot_from_torso(start, side, config.gait) for side in Side}
        self.torso = TorsoTrajectory(start)
        self.feet_motion = FeetState(self.feet, scene.yaw, config.foot, config.gait)

        contacts, _ = self.feet_motion.contacts(0.0)
        self.estimator = BaseStateEstimator(
            config.estimator, config.fusion, self.T_B_L,
            StateVector.from_parts(start.position, np.zeros(3), contacts),
        )

        self.dt = config.estimator.dt
        self._tick = 0
        self._lio_every = max(1, int(round(config.rates.estimator_hz / config.rates.lio_hz)))
        self._trace_every = max(1, int(round(config.rates.estimator_hz / config.rates.perception_hz)))
        self._prev_contacts = contacts
        self._fused: Optional[Pose] = None
        self.tracking: Dict[str, List[float]] = {'t': [], 'x': [], 'y': [], 'z': []}
        self.detection_stamps: List[float] = []
        self.levels = {Side.LEFT: 0, Side.RIGHT: 0}

    def _emit_progress(self, stage: str, percent: float, message: str):
        """Emit progress update via callback."""
        self.progress_callback(stage, percent, message)
        logger.info(f"Progress: {stage} ({percent:.1f}%) - {message}")

    # -- simulation clock ---------------------------------------------------

    @property
    def now(self) -> float:
        return self._tick * self.dt

    def _step_estimator(self) -> None:
        t = self.now
        noise = self.config.noise
        truth = self.torso.pose(t)
        velocity = self.torso.velocity(t)
        contacts, flags = self.feet_motion.contacts(t)
        contact_velocities = np.where(np.repeat(flags, 3).reshape(-1, 3), 0.0,
                                      (contacts - self._prev_contacts) / self.dt)
        self._prev_contacts = contacts

        p_kin = truth.translation + self.odometry.drift(t)
        v_kin = velocity + self.odometry.drift_velocity
        y = synthesize_observation(contacts, contact_velocities, p_kin, v_kin, truth.rotation,
                                   noise.proprio_sigma, self.rng_proprio)
        u = self.torso.acceleration(t) + self.rng_proprio.normal(0.0, 1.0, 3) * noise.imu_sigma

        if self._tick % self._lio_every == 0:
            lidar = OdomSample(t, compose(truth, self.T_B_L), OdomSource.TRUTH)
            self.estimator.push_lio(t, self.odometry.lio(lidar).pose)

        snapshot = self.estimator.step(t, u, y, flags, truth.rotation)
        self._fused = snapshot.fused_pose
        if self._tick % self._trace_every == 0:
            error = self._fused.translation - truth.translation
            self.tracking['t'].append(round(t, 9))
            for axis, value in zip('xyz', error):
                self.tracking[axis].append(float(value))
        self._tick += 1

    def advance_to(self, t: float) -> None:
        """Tick the estimator up to and including time t."""
        while self.now <= t + 1e-9:
            self._step_estimator()

    def correction(self) -> Pose:
        """T_true o T_est^-1 at the current tick."""
        truth = self.torso.pose((self._tick - 1) * self.dt)
        return compose(truth, invert(self._fused)).with_frames(None, None)

    # -- perception / planning ---------------------------------------------

    def perceive(self, t: float) -> Perception:
        """Render from the true camera pose, map with the estimated one."""
        self.advance_to(t)
        stamp = (self._tick - 1) * self.dt
        camera_true = compose(self.torso.pose(stamp), self.T_B_C)
        image = render_depth(self.config.scene, camera_true, self.config.intrinsics, self.config.noise, self.rng_render)
        camera_est = compose(self._fused, self.T_B_C)
        polygons = self.mapper.extract(image, self.config.intrinsics, camera_est, stamp)
        if any(p.is_tread for p in polygons):
            self.detection_stamps.append(stamp)
        return Perception(stamp, polygons, self.correction(), self._fused)

    def _stance_estimate(self, perception: Perception) -> Dict[Side, np.ndarray]:
        to_est = invert(perception.correction)
        return {side: transform_points(to_est, self.feet[side])[0] for side in Side}

    def _plan(self, perception: Perception, side: Side, lead: Optional[Side]) -> Tuple[Optional[FootstepPlan], Side]:
        mode = self.config.gait_mode
        stance = self._stance_estimate(perception)
        base = perception.base_pose.with_frames(Frame.W, Frame.B)
        candidate = self.generator.generate(
            perception.polygons, base, foot_state_for(mode, stance, base, lead), perception.stamp
        ).candidate
        if candidate is None and mode is GaitMode.SS and lead is not None \
                and self.levels[lead.other] < self.levels[lead]:
            side = lead.other
            candidate = self.generator.generate(
                perception.polygons, base, foot_state_for(mode, stance, base, side), perception.stamp
            ).candidate
        if candidate is None:
            return None, side
        return self.planner.plan_level(base, candidate, stance, 1, side), side

    def _on_top(self) -> bool:
        top = self.config.scene.n_steps
        return self.levels[Side.LEFT] == top and self.levels[Side.RIGHT] == top

    # -- main loop -----------------------------------------------------------

    def run(self) -> RunReport:
        """
        Execute the scenario.

        Returns:
            RunReport; failures are reported through its status
        """
        cfg = self.config
        g = cfg.gait
        mode = cfg.gait_mode
        wall_start = time.perf_counter()
        target_levels = min(cfg.max_levels or cfg.scene.n_steps, cfg.scene.n_steps)
        deadline = STALL_SECONDS_PER_LEVEL * (cfg.scene.n_steps + 1)

        self._emit_progress('start', 0, f"{cfg.name}: {mode.value} gait, seed {cfg.noise.seed}")
        executed: List[ExecutedStep] = []
        planned_steps = 0
        status, message = RunStatus.COMPLETED, ''
        t0 = 0.0
        side, lead = g.first_side, None
        perception = self.perceive(t0 + cfg.stance_settle_s)

        while True:
            if min(self.levels.values()) >= target_levels:
                break
            if t0 > deadline:
                status, message = RunStatus.STALL, f"no progress after {t0:.1f}s"
                break

            plan, side = self._plan(perception, side, lead)
            if plan is None:
                if not self._on_top():
                    status, message = RunStatus.NO_CANDIDATES, f"no foothold candidate at {perception.stamp:.2f}s"
                break
            planned_steps += len(plan)
            if plan.status is not PlanStatus.OK or not plan.steps:
                status, message = RunStatus.STALL, plan.message or 'empty plan'
                break

            next_perception = None
            failed = False
            for step in plan.steps:
                touchdown = t0 + step.t
                liftoff = touchdown - g.swing_period
                self.advance_to(liftoff)
                result = execute_step(step, perception.correction, self.correction(), cfg.noise,
                                      self.rng_actuation, self.surfaces, cfg.foot, t0)
                result = result.model_copy(update={'t_executed': round(touchdown, 9)})
                end = np.array(result.executed)
                self.feet_motion.add_swing(FootMotion(step.side, liftoff, touchdown, self.feet[step.side], end))
                self.feet[step.side] = end
                torso_true = transform_points(perception.correction, step.p_t.position)[0]
                self.torso.move_to(liftoff, touchdown, TorsoPose(*torso_true, step.p_t.phi))

                if mode is GaitMode.SS:
                    if cfg.inter_plan_drift:
                        self.estimator.lio_enabled = False
                    next_perception = self.perceive(liftoff + 0.5 * g.swing_period)
                self.advance_to(touchdown)

                executed.append(result)
                self.levels[step.side] = max(result.level, 0)
                logger.debug(f"Step {len(executed)} ({step.side.value}) level {result.level}, "
                             f"error {result.error_mm:.2f} mm")
                if not result.inside_tread:
                    status, message = RunStatus.FALL, f"step {len(executed)} left its tread"
                    failed = True
                    break
                t0 = touchdown

            if failed:
                break
            lead, side = plan.steps[-1].side, plan.steps[-1].side.other
            percent = 100.0 * min(self.levels.values()) / max(target_levels, 1)
            self._emit_progress('climbing', percent, f"levels L{self.levels[Side.LEFT]} R{self.levels[Side.RIGHT]}")
            perception = next_perception if next_perception is not None else self.perceive(t0 + cfg.stance_settle_s)

        report = self._report(status, message, executed, planned_steps, t0, time.perf_counter() - wall_start)
        self._emit_progress('complete', 100, f"{report.status.value}: {report.steps_completed} level(s), "
                                              f"e_m={report.e_m:.2f} mm")
        return report

    def _report(self, status: RunStatus, message: str, executed: List[ExecutedStep], planned_steps: int,
                t_total: float, wall: float) -> RunReport:
        errors = [s.error_mm for s in executed]
        levels = min(self.levels.values())
        gaps = np.diff(self.detection_stamps) if len(self.detection_stamps) > 1 else np.zeros(0)
        hz_mean, hz_min = self.mapper.detection_frequency()
        return RunReport(
            status=status,
            message=message,
            gait_mode=self.config.gait_mode,
            seed=self.config.noise.seed,
            T_total=round(t_total, 9),
            steps_completed=levels,
            placements=len(executed),
            planned_steps=max(planned_steps, len(executed)),
            e_m=max(errors) if errors else 0.0,
            step_errors=errors,
            vertical_errors=[s.vertical_error_mm for s in executed],
            steps=executed,
            tracking_error=self.tracking,
            mean_level_time=round(t_total / levels, 9) if levels else 0.0,
            longest_detection_gap=round(float(gaps.max()), 9) if gaps.size else 0.0,
            detections=len(self.detection_stamps),
            timing=TimingBlock(
                detection_hz_mean=hz_mean,
                detection_hz_min=hz_min,
                frames=self.mapper.frames,
                perception_wall_s=self.mapper.wall_s,
                run_wall_s=wall,
            ),
        )


def run_scenario(cfg: ScenarioConfig,
                 progress_callback: Optional[Callable[[str, float, str], None]] = None) -> RunReport:
    """Run one scenario; see ScenarioRunner."""
    return ScenarioRunner(cfg, progress_callback).run()


# ---------------------------------------------------------------------------
# Throughput benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchResult:
    """Per-frame processing times and the derived rates."""

    frame_times: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    workers: int = 1
    polygons_per_frame: List[int] = field(default_factory=list)
    detection_hz: float = 0.0

    @property
    def frames(self) -> int:
        return len(self.frame_times)

    @property
    def sustained_hz(self) -> float:
        return self.frames / self.wall_time if self.wall_time > 0 else 0.0

    @property
    def rates(self) -> np.ndarray:
        return 1.0 / np.asarray(self.frame_times)

    def histogram(self, bins: int = 10) -> Tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.rates, bins=bins)


def approach_frames(cfg: ScenarioConfig, count: int) -> List[Tuple[DepthImage, Pose]]:
    """
    Frames rendered while walking up to the start pose, 0.3 m toward the first riser.

    Returns:
        (depth image, T_W_C) pairs
    """
    rng = rng_stream(cfg.noise.seed, 'render')
    scene = cfg.scene
    frames = []
    for k in range(count):
        x = cfg.start_x - 0.3 * (count - 1 - k) / max(count - 1, 1)
        base_w = transform_points(scene.world_pose(), np.array([x, 0.0, 0.0]))[0]
        base = Pose(Rotation.about_z(scene.yaw), base_w + np.array([0.0, 0.0, cfg.gait.z_t]), Frame.W, Frame.B)
        camera = compose(base, cfg.mount.extrinsics())
        frames.append((render_depth(scene, camera, cfg.intrinsics, cfg.noise, rng), camera))
    return frames


def bench(cfg: ScenarioConfig, frames: int = 50, workers: int = 1,
          progress_callback: Optional[Callable[[str, float, str], None]] = None) -> BenchResult:
    """
    Measure extract_polygon_map throughput.

    Frames are processed on a thread pool of `workers`; results keep the
    frame order.
    """
    emit = progress_callback or (lambda *args: None)
    emit('rendering', 0, f"Rendering {frames} frames")
    images = approach_frames(cfg, frames)
    mapper = PolygonMapper(cfg.perception)

    def process(item):
        image, camera = item
        start = time.perf_counter()
        polygons = mapper.extract(image, cfg.intrinsics, camera)
        return time.perf_counter() - start, len(polygons)

    emit('processing', 10, f"Processing on {workers} worker(s)")
    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(process, images))
    wall = time.perf_counter() - start

    result = BenchResult(
        frame_times=[r[0] for r in results],
        wall_time=wall,
        workers=workers,
        polygons_per_frame=[r[1] for r in results],
        detection_hz=mapper.detection_frequency()[0],
    )
    logger.info(f"Bench: {result.frames} frames in {wall:.2f}s ({result.sustained_hz:.1f} Hz sustained)")
    emit('complete', 100, f"{result.sustained_hz:.1f} Hz")
    return result


def format_histogram(result: BenchResult, bins: int = 10, width: int = 40) -> str:
    """Text histogram of per-frame rates."""
    counts, edges = result.histogram(bins)
    peak = max(int(counts.max()), 1)
    lines = []
    for count, lo, hi in zip(counts, edges[:-1], edges[1:]):
        bar = '#' * int(math.ceil(width * count / peak)) if count else ''
        lines.append(f"{lo:7.1f}-{hi:7.1f} Hz | {bar} {count}")
    return '\n'.join(lines)
