"""
State Estimation Service - contact-aided Kalman filter and LIO fusion.

kf_predict / kf_update / lio_to_base / fuse_pose are pure functions.
ComplementaryPoseFilter and BaseStateEstimator hold the sequential state
used by the scenario loop; readers get immutable snapshots.
"""

import logging
import threading
from collections import deque
from functools import lru_cache
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.ndimage import uniform_filter1d

from backend.errors import FusionDivergenceError, ValidationError
from backend.models.estimation import (
    N_CONTACTS, OBS_DIM, STATE_DIM, EstimatorParams, EstimatorSnapshot, FusionParams,
    ObservationVector, OdomSample, OdomSource, StateVector, UpdateDiagnostics
)
from backend.models.geometry import Frame, Pose, Rotation
from services.geometry_service import (
    compose, compose_rotation_matrices, invert, rotation_exp, rotation_log
)

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-10
SYMMETRY_TOLERANCE = 1e-9
DIVERGENCE_EPSILON = 1e-6


@lru_cache(maxsize=16)
def transition_matrices(dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Constant-acceleration model.

    Returns:
        (A, B): A (30x30) with the dt*I velocity block and identity on the
        contacts; B (30x3) = [0.5 dt^2 I; dt I; 0]
    """
    a = np.eye(STATE_DIM)
    a[0:3, 3:6] = dt * np.eye(3)
    b = np.zeros((STATE_DIM, 3))
    b[0:3] = 0.5 * dt * dt * np.eye(3)
    b[3:6] = dt * np.eye(3)
    a.setflags(write=False)
    b.setflags(write=False)
    return a, b


@lru_cache(maxsize=1)
def observation_matrix() -> np.ndarray:
    """
    H (56x30).

    Rows 0-23 observe p_c,i - p_base, rows 24-47 observe -v_base (stance
    contacts do not move), rows 48-55 observe the z of each contact.
    """
    h = np.zeros((OBS_DIM, STATE_DIM))
    for i in range(N_CONTACTS):
        rows = slice(3 * i, 3 * i + 3)
        h[rows, 0:3] = -np.eye(3)
        h[rows, 6 + 3 * i:9 + 3 * i] = np.eye(3)
        h[24 + 3 * i:27 + 3 * i, 3:6] = -np.eye(3)
        h[48 + i, 6 + 3 * i + 2] = 1.0
    h.setflags(write=False)
    return h


def check_covariance(p: np.ndarray, dim: int = STATE_DIM) -> np.ndarray:
    """
    Validate a covariance matrix.

    Raises:
        ValidationError: wrong shape, asymmetric or not PSD
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (dim, dim):
        raise ValidationError(f"Covariance must be {dim}x{dim}, got {p.shape}")
    scale = max(1.0, float(np.max(np.abs(p))))
    if np.max(np.abs(p - p.T)) > SYMMETRY_TOLERANCE * scale:
        raise ValidationError("Covariance is not symmetric")
    min_eig = float(np.linalg.eigvalsh(p)[0])
    if min_eig < -PSD_TOLERANCE * scale:
        raise ValidationError(f"Covariance is not PSD (min eigenvalue {min_eig:.3e})")
    return p


def kf_predict(x: StateVector, p: np.ndarray, u, params: EstimatorParams) -> Tuple[StateVector, np.ndarray]:
    """
    Propagate state and covariance by one tick.

    Args:
        x: state
        p: 30x30 covariance
        u: world-frame base acceleration (3,)
        params: estimator params (dt, Q)

    Returns:
        (A x + B u, A P A^T + Q), covariance symmetrized

    Raises:
        ValidationError: P not symmetric PSD
    """
    p = check_covariance(p)
    a, b = transition_matrices(params.dt)
    u = np.asarray(u, dtype=float).reshape(3)
    x_next = a @ x.values + b @ u
    p_next = a @ p @ a.T + params.process_noise()
    return StateVector(x_next), 0.5 * (p_next + p_next.T)


def kf_update(x: StateVector, p: np.ndarray, y: ObservationVector, contact_flags: Sequence[bool],
              params: EstimatorParams) -> Tuple[StateVector, np.ndarray, UpdateDiagnostics]:
    """
    Linear KF measurement update with Joseph-form covariance.

    The observation must already be expressed in world-aligned axes
    (relative positions/velocities rotated by the IMU attitude).

    Args:
        x: state
        p: 30x30 covariance
        y: 56-dim observation
        contact_flags: True for stance contacts; swing rows get R inflated
        params: estimator params

    Returns:
        (x', P', diagnostics); when the innovation covariance cannot be
        factorized the inputs are returned unchanged with skipped=True
    """
    if len(contact_flags) != N_CONTACTS:
        raise ValidationError(f"Expected {N_CONTACTS} contact flags, got {len(contact_flags)}")
    h = observation_matrix()
    r = params.measurement_noise(contact_flags)
    innovation = y.values - h @ x.values
    s = h @ p @ h.T + r
    try:
        factor = cho_factor(s)
    except LinAlgError:
        logger.warning("Innovation covariance is singular; update skipped")
        return x, p, UpdateDiagnostics(skipped=True, reason='singular innovation covariance')

    gain = cho_solve(factor, h @ p).T
    x_next = x.values + gain @ innovation
    ikh = np.eye(STATE_DIM) - gain @ h
    p_next = ikh @ p @ ikh.T + gain @ r @ gain.T
    p_next = 0.5 * (p_next + p_next.T)
    nis = float(innovation @ cho_solve(factor, innovation))
    return StateVector(x_next), p_next, UpdateDiagnostics(
        innovation_norm=float(np.linalg.norm(innovation)), nis=nis
    )


def lio_to_base(T_W_lidar: Pose, T_B_lidar: Pose) -> Pose:
    """Base pose from a LIO pose and the lidar mounting extrinsics."""
    return compose(T_W_lidar, invert(T_B_lidar))


def fuse_pose(kinematic: Pose, lio: Pose, fp: FusionParams, dt: float) -> Pose:
    """
    Complementary blend of a kinematic and a LIO pose.

    p = alpha p_kin + (1 - alpha) p_lio
    R = R_kin exp((1 - alpha) log(R_kin^T R_lio)), alpha = tau / (tau + dt)

    Raises:
        FusionDivergenceError: the attitudes differ by pi - 1e-6 or more
        ValidationError: dt <= 0
    """
    alpha = fp.alpha(dt)
    translation = alpha * kinematic.translation + (1.0 - alpha) * lio.translation

    delta = rotation_log(Rotation(kinematic.rotation.matrix.T @ lio.rotation.matrix))
    angle = float(np.linalg.norm(delta))
    if angle >= np.pi - DIVERGENCE_EPSILON:
        raise FusionDivergenceError(f"Kinematic and LIO attitudes differ by {angle:.6f} rad")
    correction = rotation_exp((1.0 - alpha) * delta)
    rotation = compose_rotation_matrices(kinematic.rotation.matrix, correction.matrix)
    return Pose(Rotation(rotation), translation, kinematic.parent, kinematic.child)


class ComplementaryPoseFilter:
    """
    Recursive complementary filter over kinematic and LIO poses.

    Between LIO samples the fused pose follows the kinematic increments;
    each LIO sample pulls it back with fuse_pose using the time since the
    previous LIO sample as dt.
    """

    def __init__(self, params: FusionParams):
        self.params = params
        self.fused: Optional[Pose] = None
        self._last_kinematic: Optional[Pose] = None
        self._last_lio_stamp: Optional[float] = None
        self._start_stamp: Optional[float] = None

    def update(self, stamp: float, kinematic: Pose, lio: Optional[Pose] = None) -> Pose:
        """Advance to `stamp` and return the fused pose."""
        if self.fused is None:
            self.fused = lio if lio is not None else kinematic
            self._last_kinematic = kinematic
            self._start_stamp = stamp
            if lio is not None:
                self._last_lio_stamp = stamp
            return self.fused

        increment = compose(invert(self._last_kinematic), kinematic)
        prediction = compose(self.fused, increment)
        self._last_kinematic = kinematic

        if lio is not None:
            since = self._last_lio_stamp if self._last_lio_stamp is not None else self._start_stamp
            dt = stamp - since
            if dt > 0:
                prediction = fuse_pose(prediction, lio, self.params, dt)
            self._last_lio_stamp = stamp
        self.fused = prediction
        return self.fused


class BaseStateEstimator:
    """
    Sequential estimator: KF over base + contacts, fused with LIO.

    One thread calls step(); any thread may call snapshot(). LIO samples
    are queued with non-decreasing stamps and applied at the nearest
    tick; samples that arrive too late are dropped and counted.
    """

    def __init__(
        self,
        params: EstimatorParams,
        fusion: FusionParams,
        T_B_lidar: Pose,
        initial_state: StateVector,
        initial_covariance: Optional[np.ndarray] = None,
    ):
        """
        Initialize estimator.

        Args:
            params: KF params
            fusion: complementary filter params
            T_B_lidar: lidar mounting extrinsics
            initial_state: initial 30-dim state
            initial_covariance: initial P (default: 1e-4 I)
        """
        self.params = params
        self.T_B_lidar = T_B_lidar
        self.x = initial_state
        self.P = np.eye(STATE_DIM) * 1e-4 if initial_covariance is None else check_covariance(initial_covariance)
        self.filter = ComplementaryPoseFilter(fusion)
        self.lio_enabled = True

        self._queue: Deque[Tuple[float, Pose]] = deque()
        self._last_lio_stamp = -np.inf
        self._previous_flags = np.ones(N_CONTACTS, dtype=bool)
        self._lock = threading.Lock()
        self._snapshot: Optional[EstimatorSnapshot] = None
        self.lio_applied = 0
        self.lio_dropped = 0
        self.lio_suppressed = 0
        self.updates_skipped = 0

    def push_lio(self, stamp: float, T_W_lidar: Pose) -> bool:
        """
        Queue a LIO sample.

        Returns:
            False when the sample is older than the newest queued one and
            was dropped
        """
        newest = self._queue[-1][0] if self._queue else self._last_lio_stamp
        if stamp < newest:
            self.lio_dropped += 1
            logger.warning(f"Dropped late LIO sample at {stamp:.3f}s (newest {newest:.3f}s, "
                           f"{self.lio_dropped} dropped so far)")
            return False
        self._queue.append((stamp, T_W_lidar))
        return True

    def _pop_lio(self, stamp: float) -> Optional[Pose]:
        half = 0.5 * self.params.dt
        chosen = None
        while self._queue and self._queue[0][0] < stamp + half:
            sample_stamp, pose = self._queue.popleft()
            self._last_lio_stamp = sample_stamp
            if sample_stamp < stamp - half:
                self.lio_dropped += 1
                logger.warning(f"LIO sample at {sample_stamp:.3f}s missed its tick; dropped")
                continue
            chosen = pose
        if chosen is None:
            return None
        if not self.lio_enabled:
            self.lio_suppressed += 1
            return None
        self.lio_applied += 1
        return lio_to_base(chosen, self.T_B_lidar)

    def _reset_touchdowns(self, y_world: ObservationVector, flags: np.ndarray) -> None:
        touchdown = flags & ~self._previous_flags
        if not touchdown.any():
            return
        values = self.x.values.copy()
        for i in np.flatnonzero(touchdown):
            cols = slice(6 + 3 * i, 9 + 3 * i)
            values[cols] = values[0:3] + y_world.rel_positions[i]
            self.P[cols, :] = 0.0
            self.P[:, cols] = 0.0
            self.P[cols, cols] = np.eye(3) * self.params.touchdown_variance
        self.x = StateVector(values)

    def step(self, stamp: float, u, y_body: ObservationVector, contact_flags: Sequence[bool],
             imu_rotation: Rotation) -> EstimatorSnapshot:
        """
        Advance one tick.

        Args:
            stamp: tick time, seconds
            u: world-frame acceleration from the IMU
            y_body: observation with relative vectors in the base frame
            contact_flags: stance flags per contact
            imu_rotation: base attitude used to rotate y into world axes

        Returns:
            Snapshot after the tick
        """
        r = imu_rotation.matrix
        y_world = ObservationVector.from_parts(
            y_body.rel_positions @ r.T, y_body.rel_velocities @ r.T, y_body.heights
        )
        flags = np.asarray(contact_flags, dtype=bool)

        self._reset_touchdowns(y_world, flags)
        self.x, self.P = kf_predict(self.x, self.P, u, self.params)
        self.x, self.P, diagnostics = kf_update(self.x, self.P, y_world, flags, self.params)
        if diagnostics.skipped:
            self.updates_skipped += 1
        self._previous_flags = flags

        kinematic = Pose(imu_rotation, self.x.p_base, Frame.W, Frame.B)
        fused = self.filter.update(stamp, kinematic, self._pop_lio(stamp))

        snapshot = EstimatorSnapshot(
            stamp=stamp,
            state=self.x,
            covariance_diag=np.diag(self.P).copy(),
            kinematic_pose=kinematic,
            fused_pose=fused,
            lio_applied=self.lio_applied,
            lio_dropped=self.lio_dropped,
            updates_skipped=self.updates_skipped,
        )
        with self._lock:
            self._snapshot = snapshot
        return snapshot

    def snapshot(self) -> Optional[EstimatorSnapshot]:
        with self._lock:
            return self._snapshot


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def trajectory_errors(estimates: List[OdomSample], truth: List[OdomSample]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Position error of a stream against linearly interpolated truth.

    Returns:
        (stamps (N,), errors (N, 3))
    """
    t_truth = np.array([s.stamp for s in truth])
    p_truth = np.array([s.pose.translation for s in truth])
    stamps = np.array([s.stamp for s in estimates])
    positions = np.array([s.pose.translation for s in estimates])
    reference = np.column_stack([np.interp(stamps, t_truth, p_truth[:, k]) for k in range(3)])
    return stamps, positions - reference


def replay_fusion(kinematic: List[OdomSample], lio: List[OdomSample], fp: FusionParams) -> List[OdomSample]:
    """
    Run the complementary filter over recorded streams.

    Each LIO sample is applied at the kinematic sample nearest in time;
    LIO samples with no kinematic sample within half a kinematic period
    are ignored.
    """
    if not kinematic:
        return []
    stamps = np.array([s.stamp for s in kinematic])
    half = 0.5 * float(np.median(np.diff(stamps))) if len(stamps) > 1 else np.inf
    assigned = {}
    for sample in lio:
        i = int(np.argmin(np.abs(stamps - sample.stamp)))
        if abs(stamps[i] - sample.stamp) <= half:
            assigned[i] = sample.pose
    skipped = len(lio) - len(assigned)
    if skipped:
        logger.warning(f"{skipped} LIO sample(s) not applied (no matching tick or superseded)")

    fusion = ComplementaryPoseFilter(fp)
    fused = []
    for i, sample in enumerate(kinematic):
        pose = fusion.update(sample.stamp, sample.pose, assigned.get(i))
        fused.append(OdomSample(sample.stamp, pose, OdomSource.FUSED))
    return fused


def drift_rows(streams: Dict[OdomSource, List[OdomSample]], truth: List[OdomSample]) -> Tuple[List[str], List[list]]:
    """
    Per-source position error against truth on the first stream's clock.

    Returns:
        (header, rows) with columns t, ex_<source>, ey_<source>, ez_<source>...
    """
    sources = list(streams)
    clock = np.array([s.stamp for s in streams[sources[0]]])
    header = ['t']
    columns = [clock]
    for source in sources:
        stamps, errors = trajectory_errors(streams[source], truth)
        header.extend(f"{axis}_{source.value}" for axis in ('ex', 'ey', 'ez'))
        columns.extend(np.interp(clock, stamps, errors[:, k]) for k in range(3))
    rows = np.column_stack(columns).tolist()
    return header, rows


def high_frequency_power(signal: np.ndarray, fs: float, cutoff_hz: float = 2.0) -> float:
    """
    Mean power above roughly cutoff_hz.

    The signal minus its centred moving average over one cutoff period
    (windowed differencing) keeps the fast content; linear trends cancel
    because the window length is forced odd.
    Edges of one window are discarded.

    Args:
        signal: (N,) or (N, k) samples
        fs: sampling rate, Hz
        cutoff_hz: corner frequency

    Returns:
        Mean over samples of the squared residual summed over axes
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    window = max(3, int(round(fs / cutoff_hz)) | 1)
    if x.shape[0] <= 2 * window:
        raise ValidationError(f"Need more than {2 * window} samples for the high-frequency estimate")
    residual = x - uniform_filter1d(x, size=window, axis=0, mode='nearest')
    core = residual[window:-window]
    return float(np.mean(np.sum(core * core, axis=1)))
