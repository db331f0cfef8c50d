"""Scan-to-submap odometry fused with preintegrated IMU in a sliding graph.

Each incoming cloud is registered against a rolling submap of the last few
scans, seeded by the IMU prediction. The registration result enters the
sliding factor graph as a world-frame pose prior on a fresh augmented-state
vertex, tied to its predecessor by a preintegration edge, and the tail of
the graph is re-optimized. The graph is periodically collapsed onto its
newest vertex so cost stays bounded over long runs.

Degradation paths: a degenerate registration drops the pose prior and the
frame rides on inertia alone; a missing IMU window drops the
preintegration edge and the frontend degrades to pure scan matching with a
constant-velocity prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import CalibrationSet, Config, ImuSample, ImuWindow
from .factor_graph import (
    EdgeKind,
    FactorGraph,
    OptimizerConfig,
    PreintegrationMeasurement,
    RobustKernel,
    VertexKind,
)
from .geometry import Pose3
from .preintegration import (
    ImuBias,
    ImuNoise,
    PreintegratedImu,
    edge_information,
    integrate,
    integrate_window,
    predict,
)
from .preprocess import PointCloud, voxel_centroids, voxel_downsample
from .registration import (
    DegenerateAlignment,
    RegistrationParams,
    estimate_point_covariances,
    prepare_target,
    register,
)
from .state import NavState

# a propagation request this far past the last IMU sample is served from
# the stale pose instead of extrapolating
PROPAGATION_GAP = 0.1  # s

DEGENERATE_COVARIANCE = np.eye(6) * 1e6


@dataclass(frozen=True)
class SubmapMember:
    """One contributing scan: its points in its own frame, and that frame."""

    member_id: int
    points: np.ndarray
    pose: Pose3
    covariances: np.ndarray | None = None


@dataclass
class Submap:
    """Rolling aggregate of the last few registered scans.

    Points are stored in the frame of the newest member so coordinates stay
    small; the prepared registration model is cached until the next fold.
    """

    submap_id: int
    cloud: PointCloud
    members: tuple[SubmapMember, ...]
    origin: Pose3
    _model: object = field(default=None, repr=False, compare=False)

    def member_ids(self) -> tuple[int, ...]:
        return tuple(m.member_id for m in self.members)

    def model(self, params: RegistrationParams):
        if self._model is None:
            self._model = prepare_target(self.cloud, params)
        return self._model


def _aggregate(members: tuple[SubmapMember, ...], origin: Pose3, stamp: float,
               r_submap: float) -> PointCloud:
    """Members merged into the origin frame, voxel-averaged at r_submap.

    Surface covariances are deliberately not carried over from the member
    scans: single-sweep neighborhoods degenerate to ring arcs at range, and
    normals re-estimated on the dense multi-view aggregate are far better.
    """
    into = origin.inverse()
    parts = [into.compose(m.pose).transform(m.points) for m in members]
    centroids, _, _ = voxel_centroids(np.vstack(parts), r_submap)
    return PointCloud(stamp, centroids)


def new_submap(member_id: int, cloud: PointCloud, pose: Pose3, r_submap: float) -> Submap:
    member = SubmapMember(member_id, cloud.points, pose, cloud.covariances)
    agg = _aggregate((member,), pose, cloud.timestamp, r_submap)
    return Submap(member_id, agg, (member,), pose)


def fold_into_submap(
    submap: Submap,
    member_id: int,
    cloud: PointCloud,
    pose: Pose3,
    ell: int,
    r_submap: float,
) -> Submap:
    """New submap with the cloud appended and the oldest member evicted.

    The aggregate is rebuilt in the new origin frame (the pose of the scan
    being folded) and voxel-deduplicated at r_submap.
    """
    if not np.all(np.isfinite(pose.translation)):
        raise ValueError("non-finite fold pose")
    members = submap.members + (
        SubmapMember(member_id, cloud.points, pose, cloud.covariances),
    )
    if len(members) > ell:
        members = members[-ell:]
    return Submap(
        member_id, _aggregate(members, pose, cloud.timestamp, r_submap), members, pose
    )


@dataclass(frozen=True)
class OdometryEstimate:
    """Per-scan output: optimized state plus the evidence that shaped it."""

    timestamp: float
    state: NavState
    relative_pose: Pose3  # previous body frame -> current body frame
    covariance: np.ndarray  # 6x6 of the scan-matching result
    preintegration: PreintegratedImu | None
    converged: bool
    degenerate: bool

    def __post_init__(self) -> None:
        cov = np.asarray(self.covariance, dtype=float).reshape(6, 6)
        if not np.all(np.isfinite(cov)):
            raise ValueError("non-finite covariance")
        object.__setattr__(self, "covariance", cov)


def odometry_log_line(est: OdometryEstimate) -> str:
    """Trajectory-file line plus the covariance diagonal, space separated."""
    qw, qx, qy, qz = est.state.pose.rotation.q
    tx, ty, tz = est.state.pose.translation
    diag = " ".join("%.6e" % v for v in np.diag(est.covariance))
    return "%.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f %s" % (
        est.timestamp, tx, ty, tz, qx, qy, qz, qw, diag,
    )


class LioFrontend:
    """Sequential scan-to-submap odometry over a sliding factor graph."""

    def __init__(
        self,
        config: Config,
        calibration: CalibrationSet | None = None,
        initial_state: NavState | None = None,
    ) -> None:
        self.config = config
        self.calibration = calibration or CalibrationSet()
        self.gravity = np.array([0.0, 0.0, -self.calibration.gravity])
        self.noise = ImuNoise(
            config.gyro_noise_density,
            config.accel_noise_density,
            config.gyro_bias_walk,
            config.accel_bias_walk,
        )
        # iterate registration down to half a millimeter; the sub-0.1 mm
        # default buys nothing against centimeter-level range noise
        self.params = RegistrationParams(
            method=config.method, r_align=config.r_align, d_max=config.d_max,
            trans_eps=5e-4, rot_eps=5e-4,
        )
        self._initial_state = initial_state
        self.graph = FactorGraph()
        self.submap: Submap | None = None
        self._vertex_ids: list[int] = []
        self._latest: OdometryEstimate | None = None
        self._scan_count = 0
        # increments below a micrometer are far beyond sensor precision;
        # stopping there keeps the per-scan optimization well inside budget
        self._optimizer = OptimizerConfig(max_iterations=8, increment_tolerance=1e-6)
        # the pre-reset settle touches every vertex, so cap it hard; each
        # window was already optimized and only boundary gradients remain
        self._settle = OptimizerConfig(max_iterations=3, increment_tolerance=1e-6)
        # propagation buffer: IMU samples since the last processed scan
        self._prop_times: list[float] = []
        self._prop_gyro: list[np.ndarray] = []
        self._prop_accel: list[np.ndarray] = []

    @property
    def latest(self) -> OdometryEstimate | None:
        return self._latest

    @property
    def vertex_count(self) -> int:
        return len(self._vertex_ids)

    def _bias(self) -> ImuBias:
        state = self._latest.state
        return ImuBias(state.gyro_bias, state.accel_bias)

    def _with_covariances(self, cloud: PointCloud) -> PointCloud:
        """Attach surface covariances once; registration and the submap
        aggregate both reuse them."""
        if (
            self.params.method != "GICP"
            or cloud.covariances is not None
            or len(cloud.points) < self.params.k_neighbors
        ):
            return cloud
        return estimate_point_covariances(cloud, self.params.k_neighbors)

    def process_scan(
        self, cloud: PointCloud, window: ImuWindow | None
    ) -> OdometryEstimate:
        """Fold one preprocessed cloud into the odometry solution.

        The window must span from the previous scan's timestamp to this
        one's; None degrades to scan matching with constant-velocity
        prediction.
        """
        cloud = self._with_covariances(cloud)
        if self._latest is None:
            return self._bootstrap(cloud, window)

        prev = self._latest
        dt = cloud.timestamp - prev.timestamp
        if dt <= 0.0:
            raise ValueError("scans must arrive in time order")

        preint = None
        if window is not None and len(window) >= 2:
            preint = integrate_window(window, self._bias(), self.noise)
            predicted = predict(prev.state, preint, self.gravity)
        else:
            drift = Pose3(
                prev.state.pose.rotation,
                prev.state.pose.translation + prev.state.velocity * dt,
            )
            predicted = replace(prev.state, pose=drift)

        lo_pose = None
        result = None
        try:
            guess = self.submap.origin.inverse().compose(predicted.pose)
            result = register(cloud, self.submap.model(self.params), guess, self.params)
            lo_pose = self.submap.origin.compose(result.T)
        except DegenerateAlignment:
            pass

        if lo_pose is None and preint is None:
            # nothing measurable this frame: hold the prediction, add no vertex
            estimate = OdometryEstimate(
                cloud.timestamp, predicted,
                prev.state.pose.inverse().compose(predicted.pose),
                DEGENERATE_COVARIANCE, None, False, True,
            )
            self._latest = estimate
            self._reset_propagation(cloud.timestamp)
            return estimate

        prev_vid = self._vertex_ids[-1]
        vid = self.graph.add_vertex(VertexKind.AUGMENTED_STATE, predicted)
        self._vertex_ids.append(vid)
        if preint is not None:
            self.graph.add_edge(
                EdgeKind.PREINTEGRATION,
                (prev_vid, vid),
                PreintegrationMeasurement(preint, self.gravity),
                edge_information(preint),
            )
        if lo_pose is not None:
            info = np.linalg.inv(result.covariance * self.config.lo_cov_scale)
            self.graph.add_edge(
                EdgeKind.POSE_PRIOR,
                vid,
                lo_pose,
                (info + info.T) / 2.0,
                RobustKernel.HUBER,
            )

        scope = self._vertex_ids[-self.config.window_size :]
        report = self.graph.optimize(scope=scope, config=self._optimizer)

        if len(self._vertex_ids) >= self.config.reset_period:
            # settle the whole graph first so the gradients of vertices that
            # left the sliding window are near zero; the marginal prior then
            # summarizes a consistent solution instead of a stale one
            self.graph.optimize(config=self._settle)
            self.graph = self.graph.marginalize_onto_prior(vid)
            self._vertex_ids = [vid]
        state = self.graph.get_estimate(vid)

        self._scan_count += 1
        self.submap = fold_into_submap(
            self.submap, self._scan_count, cloud, state.pose,
            self.config.ell, self.config.r_submap,
        )

        estimate = OdometryEstimate(
            cloud.timestamp,
            state,
            prev.state.pose.inverse().compose(state.pose),
            result.covariance if result is not None else DEGENERATE_COVARIANCE,
            preint,
            bool(report.converged and (result is None or result.converged)),
            lo_pose is None,
        )
        self._latest = estimate
        self._reset_propagation(cloud.timestamp)
        return estimate

    def _bootstrap(self, cloud: PointCloud, window: ImuWindow | None) -> OdometryEstimate:
        if self._initial_state is not None:
            state = self._initial_state
        elif window is not None and len(window) >= 2:
            state = _attitude_from_window(window, self.calibration.gravity)
        else:
            state = NavState()
        vid = self.graph.add_vertex(VertexKind.AUGMENTED_STATE, state, fixed=True)
        self._vertex_ids = [vid]
        self._scan_count = 0
        self.submap = new_submap(0, cloud, state.pose, self.config.r_submap)
        estimate = OdometryEstimate(
            cloud.timestamp, state, Pose3.identity(),
            np.eye(6) * 1e-6, None, True, False,
        )
        self._latest = estimate
        self._reset_propagation(cloud.timestamp)
        return estimate

    # --- high-frequency propagation ---------------------------------------------

    def _reset_propagation(self, anchor_time: float) -> None:
        self._prop_anchor = anchor_time
        self._prop_times = [anchor_time]
        self._prop_gyro = [None]
        self._prop_accel = [None]

    def propagate(self, sample: ImuSample) -> tuple[Pose3, bool]:
        """Latest optimized pose advanced by IMU samples since that scan.

        Returns (pose, stale). A sample separated from the previous one by
        more than PROPAGATION_GAP marks the stream stale: the last computed
        pose is returned unchanged until scans resume.
        """
        if self._latest is None:
            raise RuntimeError("propagate before the first processed scan")
        last_t = self._prop_times[-1]
        if sample.timestamp <= last_t:
            return self._propagated_pose(), False
        if sample.timestamp - last_t > PROPAGATION_GAP:
            return self._propagated_pose(), True
        if self._prop_gyro[0] is None:
            # anchor the buffer at the scan time with the first real sample
            self._prop_gyro[0] = sample.angular_velocity
            self._prop_accel[0] = sample.linear_acceleration
        self._prop_times.append(sample.timestamp)
        self._prop_gyro.append(sample.angular_velocity)
        self._prop_accel.append(sample.linear_acceleration)
        return self._propagated_pose(), False

    def _propagated_pose(self) -> Pose3:
        state = self._latest.state
        if len(self._prop_times) < 2:
            return state.pose
        preint = integrate(
            np.array(self._prop_times),
            np.array(self._prop_gyro),
            np.array(self._prop_accel),
            self._bias(),
            self.noise,
        )
        return predict(state, preint, self.gravity).pose


def _attitude_from_window(window: ImuWindow, gravity: float) -> NavState:
    """Roll/pitch from the mean specific force, gyro bias from the mean rate."""
    from .dataset import ImuData
    from .preintegration import initialize_from_imu

    data = ImuData(window.times, window.gyro, window.accel)
    return initialize_from_imu(data, gravity, duration=window.times[-1] - window.times[0])
