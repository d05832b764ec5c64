#!/usr/bin/env python3
"""
PolyMap command line tools.

Every stage of the stair-climbing stack can be run on its own from
files, or the whole closed loop from one scenario file.

USAGE:
    # Render depth frames of the configured staircase
    python scripts/polymap_cli.py render --config scenario.json --seed 7 --frames 5 --out frames/

    # Polygon map from rendered frames
    python scripts/polymap_cli.py map --frames frames/ --out polygons.jsonl

    # Foothold candidates and a staircase plan from a polygon map
    python scripts/polymap_cli.py plan --polygons polygons.jsonl --pose frames/base_000.json --out plan/

    # Replay (or synthesize) odometry through the complementary filter
    python scripts/polymap_cli.py estimate --seed 3 --duration 20 --out est/

    # Closed-loop run
    python scripts/polymap_cli.py run --config scenario.json --seed 1
    python scripts/polymap_cli.py run --write-default scenario.json

    # Perception throughput
    python scripts/polymap_cli.py bench --seed 1 --frames 100 --workers 4

EXIT CODES:
    0 success, 2 invalid input or arguments, 3 scenario failure
"""

import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

import functools
import logging
from typing import Dict, List, Optional

import click
from dotenv import load_dotenv
from pydantic import ValidationError as PydanticValidationError

from backend.config import configure_logging, get_settings
from backend.errors import FusionDivergenceError, ScenarioFailure, UsageError, ValidationError
from backend.models.estimation import OdomSample, OdomSource
from backend.models.planning import PlanStatus, Side, TorsoPose
from backend.models.scenario import ScenarioConfig
from backend.schemas import CandidateRecord, OdomRecord, PlanStepRecord, PolygonRecord
from services.depth_pipeline_service import PolygonMapper
from services.foothold_service import FootholdGenerator, grid_debug_rows
from services.footstep_planner_service import (
    FootstepPlanner, foot_from_torso, foot_state_for, torso_pose_of
)
from services.geometry_service import compose, invert
from services.scenario_service import approach_frames, bench, format_histogram, run_scenario
from services.simulation_service import rng_stream, simulate_odometry, straight_walk
from services.state_estimation_service import drift_rows, replay_fusion
from services.storage_service import (
    StorageService, read_depth, read_intrinsics, read_jsonl, read_pose, write_csv, write_depth,
    write_dict_csv, write_intrinsics, write_jsonl, write_pose
)

# Load environment variables
load_dotenv()

logger = logging.getLogger('polymap_cli')

EXIT_INVALID = 2
EXIT_FAILURE = 3


def on_progress(stage: str, percent: float, message: str):
    """Progress bar on one terminal line."""
    bar_length = 40
    filled = int(bar_length * percent / 100)
    bar = '█' * filled + '░' * (bar_length - filled)
    click.echo(f"\r[{bar}] {percent:.1f}% - {stage}: {message}", nl=False)
    if percent >= 100:
        click.echo()


def exit_codes(func):
    """Map package errors onto the documented exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ScenarioFailure as e:
            click.echo(f"❌ {e}", err=True)
            sys.exit(EXIT_FAILURE)
        except FusionDivergenceError as e:
            click.echo(f"❌ Estimator diverged: {e}", err=True)
            sys.exit(EXIT_FAILURE)
        except (ValidationError, UsageError, PydanticValidationError) as e:
            click.echo(f"❌ Invalid input: {e}", err=True)
            sys.exit(EXIT_INVALID)

    return wrapper


def load_config(path: Optional[str], seed: Optional[int] = None) -> ScenarioConfig:
    """Scenario from a JSON file (defaults when no file is given), reseeded if asked."""
    cfg = ScenarioConfig() if path is None else ScenarioConfig.model_validate_json(Path(path).read_text())
    return cfg if seed is None else cfg.with_seed(seed)


def output_dir(ctx, out: Optional[str], name: str) -> Path:
    if out is not None:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return StorageService(ctx.obj['settings'].OUTPUT_DIR).create_run_dir(name)


@click.group()
@click.option('--log-level', default=None, help='Override POLYMAP_LOG_LEVEL')
@click.pass_context
def cli(ctx, log_level: Optional[str]):
    """PolyMap - polygon-map stair climbing simulator"""
    ctx.ensure_object(dict)
    settings = get_settings()
    configure_logging(settings, log_level)
    ctx.obj['settings'] = settings
    logger.debug(f"{settings.APP_NAME} {settings.APP_VERSION}")


@cli.command('render')
@click.option('--config', '-c', 'config_path', type=click.Path(exists=True), help='Scenario JSON')
@click.option('--seed', required=True, type=int, help='Noise seed')
@click.option('--frames', '-n', default=1, show_default=True, type=click.IntRange(min=1))
@click.option('--out', '-o', type=click.Path(file_okay=False), help='Output directory')
@click.pass_context
@exit_codes
def render_cmd(ctx, config_path: Optional[str], seed: int, frames: int, out: Optional[str]):
    """Render depth frames approaching the first riser."""
    cfg = load_config(config_path, seed)
    target = output_dir(ctx, out, 'render')
    T_C_B = invert(cfg.mount.extrinsics())

    write_intrinsics(target / 'intrinsics.json', cfg.intrinsics)
    for k, (image, camera) in enumerate(approach_frames(cfg, frames)):
        write_depth(target / f"frame_{k:03d}.pmdi", image)
        write_pose(target / f"camera_{k:03d}.json", camera)
        write_pose(target / f"base_{k:03d}.json", compose(camera, T_C_B))
    click.echo(f"✅ Rendered {frames} frame(s) to {target}")


@cli.command('map')
@click.option('--frames', '-f', 'frames_dir', required=True, type=click.Path(exists=True, file_okay=False),
              help='Directory written by render')
@click.option('--config', '-c', 'config_path', type=click.Path(exists=True), help='Scenario JSON')
@click.option('--out', '-o', required=True, type=click.Path(dir_okay=False), help='Polygon JSONL')
@exit_codes
def map_cmd(frames_dir: str, config_path: Optional[str], out: str):
    """Extract world-frame polygons from depth frames."""
    cfg = load_config(config_path)
    frames_dir = Path(frames_dir)
    intr = read_intrinsics(frames_dir / 'intrinsics.json')
    frame_paths = sorted(frames_dir.glob('frame_*.pmdi'))
    if not frame_paths:
        raise UsageError(f"No frame_*.pmdi files in {frames_dir}")

    mapper = PolygonMapper(cfg.perception)
    records: List[PolygonRecord] = []
    for k, frame_path in enumerate(frame_paths):
        camera = read_pose(frames_dir / frame_path.name.replace('frame_', 'camera_').replace('.pmdi', '.json'))
        polygons = mapper.extract(read_depth(frame_path), intr, camera, stamp=k / cfg.rates.perception_hz)
        records.extend(PolygonRecord.from_segment(p) for p in polygons)

    write_jsonl(out, records)
    hz_mean, hz_min = mapper.detection_frequency()
    click.echo(f"✅ {len(records)} polygon(s) from {len(frame_paths)} frame(s) "
               f"({hz_mean:.1f} Hz mean, {hz_min:.1f} Hz min) -> {out}")


@cli.command('plan')
@click.option('--polygons', '-p', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Polygon JSONL written by map')
@click.option('--pose', required=True, type=click.Path(exists=True, dir_okay=False), help='T_W_B pose JSON')
@click.option('--config', '-c', 'config_path', type=click.Path(exists=True), help='Scenario JSON')
@click.option('--levels', type=click.IntRange(min=1), help='Plan at most this many levels')
@click.option('--out', '-o', type=click.Path(file_okay=False), help='Output directory')
@click.pass_context
@exit_codes
def plan_cmd(ctx, polygons: str, pose: str, config_path: Optional[str], levels: Optional[int],
             out: Optional[str]):
    """Foothold candidates and a footstep plan from a static polygon map."""
    cfg = load_config(config_path)
    segments = [r.to_segment() for r in read_jsonl(polygons, PolygonRecord)]
    base_pose = read_pose(pose)
    start = torso_pose_of(base_pose)
    stance = {side: foot_from_torso(start, side, cfg.gait) for side in Side}
    target = output_dir(ctx, out, 'plan')

    generator = FootholdGenerator(cfg.foothold)
    first = generator.generate(segments, base_pose, foot_state_for(cfg.gait_mode, stance, base_pose, None))
    write_dict_csv(target / 'grid.csv', grid_debug_rows(first.filtered, first.eroded, cfg.foothold.h_layer))
    candidates = [] if first.candidate is None else [CandidateRecord.from_candidate(first.candidate)]
    write_jsonl(target / 'candidates.jsonl', candidates)

    plan = FootstepPlanner(cfg.gait, cfg.foot).plan_staircase(
        segments, base_pose, stance, generator, levels or cfg.max_levels
    )
    write_jsonl(target / 'plan.jsonl', (PlanStepRecord.from_step(s) for s in plan.steps))

    click.echo(f"Plan: {len(plan)} step(s), status {plan.status.value}, {plan.duration:.2f}s -> {target}")
    if plan.status is PlanStatus.NO_FOOTHOLDS:
        raise ScenarioFailure(plan.message or 'no foothold candidate')
    if plan.status is PlanStatus.TRUNCATED:
        click.echo(f"⚠️  Truncated: {plan.message}")


def _split_streams(samples: List[OdomSample]) -> Dict[OdomSource, List[OdomSample]]:
    streams: Dict[OdomSource, List[OdomSample]] = {source: [] for source in OdomSource}
    for sample in samples:
        streams[sample.source].append(sample)
    for stream in streams.values():
        stream.sort(key=lambda s: s.stamp)
    return streams


@cli.command('estimate')
@click.option('--odom', type=click.Path(exists=True, dir_okay=False),
              help='Odometry JSONL (kinematic, lio and optionally truth records)')
@click.option('--config', '-c', 'config_path', type=click.Path(exists=True), help='Scenario JSON')
@click.option('--seed', type=int, help='Synthesize a straight walk with this seed (no --odom)')
@click.option('--duration', default=20.0, show_default=True, type=click.FloatRange(min=0, min_open=True),
              help='Synthetic walk length, seconds')
@click.option('--speed', default=0.2, show_default=True, type=float, help='Synthetic walk speed, m/s')
@click.option('--tau', type=click.FloatRange(min=0, min_open=True), help='Override the filter time constant')
@click.option('--out', '-o', type=click.Path(file_okay=False), help='Output directory')
@click.pass_context
@exit_codes
def estimate_cmd(ctx, odom: Optional[str], config_path: Optional[str], seed: Optional[int], duration: float,
                 speed: float, tau: Optional[float], out: Optional[str]):
    """Fuse kinematic and LIO odometry; write the fused stream and drift CSV."""
    if (odom is None) == (seed is None):
        raise UsageError("Give exactly one of --odom or --seed")
    cfg = load_config(config_path, seed)
    fusion = cfg.fusion if tau is None else cfg.fusion.model_copy(update={'tau': tau})
    target = output_dir(ctx, out, 'estimate')

    if odom is not None:
        streams = _split_streams([r.to_sample() for r in read_jsonl(odom, OdomRecord)])
    else:
        start = TorsoPose(0.0, 0.0, cfg.gait.z_t, 0.0)
        truth = straight_walk(start, speed, duration, cfg.rates.estimator_hz)
        kinematic, lio = simulate_odometry(truth, cfg.noise, rng_stream(cfg.noise.seed, 'odometry'))
        every = max(1, int(round(cfg.rates.estimator_hz / cfg.rates.lio_hz)))
        streams = {OdomSource.KINEMATIC: kinematic, OdomSource.LIO: lio[::every], OdomSource.TRUTH: truth}
        write_jsonl(target / 'odom.jsonl', (OdomRecord.from_sample(s)
                                            for source in (OdomSource.KINEMATIC, OdomSource.LIO, OdomSource.TRUTH)
                                            for s in streams[source]))

    if not streams[OdomSource.KINEMATIC]:
        raise ValidationError("Odometry input has no kinematic samples")
    fused = replay_fusion(streams[OdomSource.KINEMATIC], streams[OdomSource.LIO], fusion)
    write_jsonl(target / 'fused.jsonl', (OdomRecord.from_sample(s) for s in fused))

    truth = streams.get(OdomSource.TRUTH) or []
    if truth:
        compared = {OdomSource.FUSED: fused, OdomSource.KINEMATIC: streams[OdomSource.KINEMATIC]}
        if streams[OdomSource.LIO]:
            compared[OdomSource.LIO] = streams[OdomSource.LIO]
        header, rows = drift_rows(compared, truth)
        write_csv(target / 'drift.csv', header, rows)
        last = rows[-1]
        click.echo(f"Final fused error: ({last[1]:+.4f}, {last[2]:+.4f}, {last[3]:+.4f}) m")
    else:
        logger.warning("No truth samples in the input; drift.csv not written")
    click.echo(f"✅ {len(fused)} fused sample(s) -> {target}")


@cli.command('run')
@click.option('--config', '-c', 'config_path', type=click.Path(exists=True), help='Scenario JSON')
@click.option('--seed', type=int, help='Noise seed, overrides the config (required unless --write-default)')
@click.option('--out', '-o', type=click.Path(file_okay=False), help='Output directory')
@click.option('--write-default', type=click.Path(dir_okay=False), help='Write the default scenario and exit')
@click.option('--quiet', '-q', is_flag=True, help='No progress bar')
@click.pass_context
@exit_codes
def run_cmd(ctx, config_path: Optional[str], seed: Optional[int], out: Optional[str],
            write_default: Optional[str], quiet: bool):
    """Run one closed-loop staircase scenario."""
    if write_default:
        Path(write_default).write_text(ScenarioConfig().to_json())
        click.echo(f"✅ Default scenario written to {write_default}")
        return
    if seed is None:
        raise UsageError("--seed is required")

    cfg = load_config(config_path, seed)
    storage = StorageService(ctx.obj['settings'].OUTPUT_DIR)
    target = output_dir(ctx, out, cfg.name)
    (target / 'scenario.json').write_text(cfg.to_json())

    report = run_scenario(cfg, None if quiet else on_progress)

    (target / 'report.json').write_text(report.model_dump_json(indent=2))
    tracking = report.tracking_error
    write_csv(target / 'tracking.csv', ['t', 'ex', 'ey', 'ez'],
              zip(tracking.get('t', []), tracking.get('x', []), tracking.get('y', []), tracking.get('z', [])))
    write_dict_csv(target / 'steps.csv', [
        {
            'index': s.index, 'side': s.side, 'level': s.level,
            'planned_x': s.planned[0], 'planned_y': s.planned[1], 'planned_z': s.planned[2],
            'executed_x': s.executed[0], 'executed_y': s.executed[1], 'executed_z': s.executed[2],
            'error_mm': s.error_mm, 'vertical_error_mm': s.vertical_error_mm,
            't_planned': s.t_planned, 't_executed': s.t_executed, 'inside_tread': int(s.inside_tread),
        }
        for s in report.steps
    ])
    storage.write_manifest(target)

    click.echo(f"\n📊 {report.status.value}: {report.steps_completed} level(s) in {report.T_total:.2f}s, "
               f"e_m = {report.e_m:.2f} mm, {report.placements}/{report.planned_steps} placements")
    hz_mean, hz_min = report.detection_frequency
    click.echo(f"   detection {hz_mean:.1f} Hz mean / {hz_min:.1f} Hz min over {report.timing.frames} frame(s)")
    click.echo(f"   outputs in {target}")
    if report.status.is_failure:
        raise ScenarioFailure(f"Scenario ended with {report.status.value}: {report.message}", report)


@cli.command('bench')
@click.option('--config', '-c', 'config_path', type=click.Path(exists=True), help='Scenario JSON')
@click.option('--seed', required=True, type=int, help='Noise seed')
@click.option('--frames', '-n', default=50, show_default=True, type=click.IntRange(min=1))
@click.option('--workers', '-w', type=click.IntRange(min=1), help='Default: POLYMAP_PERCEPTION_WORKERS')
@click.option('--bins', default=10, show_default=True, type=click.IntRange(min=1))
@click.pass_context
@exit_codes
def bench_cmd(ctx, config_path: Optional[str], seed: int, frames: int, workers: Optional[int], bins: int):
    """Perception throughput with a per-frame rate histogram."""
    cfg = load_config(config_path, seed)
    workers = workers or ctx.obj['settings'].PERCEPTION_WORKERS
    result = bench(cfg, frames, workers, on_progress)

    click.echo(format_histogram(result, bins))
    rates = result.rates
    click.echo(f"\n{result.frames} frame(s), {workers} worker(s): {result.sustained_hz:.1f} Hz sustained, "
               f"per-frame {rates.mean():.1f} Hz mean / {rates.min():.1f} Hz min")


if __name__ == '__main__':
    cli()
