"""Synthetic worlds: ray-cast LiDAR sweeps, IMU streams, GNSS fixes.

A world is a set of axis-aligned boxes observed from a trajectory composed
of segments with constant body-frame angular velocity and constant
body-frame acceleration. Both rotation and translation have closed forms
inside each segment, so ground truth is exact and the synthesized IMU is
consistent with it. Straight runs, ramps, and circular arcs are all
expressible: a level turn at constant speed is just omega x v in the body
frame, which is constant.

Generated datasets use the on-disk layout the ingest module reads back:
zero-padded per-scan PLY files named by start nanosecond, plain-text IMU
and GNSS streams, a YAML calibration file, and a key-value config. The
world sits in a local frame whose xy axes coincide with UTM easting and
northing at a chosen anchor, so GNSS fixes are produced by inverting the
map projection and re-projecting them is exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import REQUIRED_KEYS
from .evaluation import Trajectory, write_trajectory
from .geodesy import utm_to_geodetic
from .geometry import Pose3, Rot3, skew
from .ply import write_ply

GRAVITY_MAGNITUDE = 9.81
_EPS_ANGLE = 1e-9


@dataclass(frozen=True)
class Segment:
    """Constant body angular velocity and body acceleration for a duration."""

    duration: float
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    acceleration: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        if self.duration <= 0.0:
            raise ValueError("segment duration must be positive")
        object.__setattr__(
            self, "angular_velocity",
            np.asarray(self.angular_velocity, dtype=float).reshape(3),
        )
        object.__setattr__(
            self, "acceleration",
            np.asarray(self.acceleration, dtype=float).reshape(3),
        )


def _rotation_integrals(omega: np.ndarray, u: float) -> tuple[np.ndarray, np.ndarray]:
    """First and second time integrals of Exp(omega s) over [0, u]."""
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    w2 = w @ w
    x = theta * u
    if x < _EPS_ANGLE:
        a1, a2 = u * u / 2.0, u**3 / 6.0
        b1, b2 = u**3 / 6.0, u**4 / 24.0
    else:
        a1 = (1.0 - np.cos(x)) / theta**2
        a2 = (x - np.sin(x)) / theta**3
        b1 = a2
        b2 = (x * x / 2.0 - 1.0 + np.cos(x)) / theta**4
    first = u * np.eye(3) + a1 * w + a2 * w2
    second = u * u / 2.0 * np.eye(3) + b1 * w + b2 * w2
    return first, second


@dataclass(frozen=True)
class MotionSample:
    """Ground-truth kinematic state plus the body rates that produced it."""

    pose: Pose3
    velocity: np.ndarray  # world frame
    angular_velocity: np.ndarray  # body frame
    acceleration: np.ndarray  # body frame


class TrajectorySpline:
    """Piecewise closed-form trajectory; continuous pose and velocity."""

    def __init__(
        self,
        segments: list[Segment],
        start: Pose3 | None = None,
        start_velocity: np.ndarray | None = None,
    ) -> None:
        if not segments:
            raise ValueError("need at least one segment")
        self.segments = tuple(segments)
        pose = start if start is not None else Pose3.identity()
        vel = (
            np.zeros(3)
            if start_velocity is None
            else np.asarray(start_velocity, dtype=float).reshape(3)
        )
        # knot states by exact propagation through each segment
        self._knots = [(pose, vel)]
        times = [0.0]
        for seg in self.segments:
            pose, vel = self._advance(pose, vel, seg, seg.duration)
            self._knots.append((pose, vel))
            times.append(times[-1] + seg.duration)
        self._times = np.array(times)

    @staticmethod
    def _advance(
        pose: Pose3, vel: np.ndarray, seg: Segment, u: float
    ) -> tuple[Pose3, np.ndarray]:
        first, second = _rotation_integrals(seg.angular_velocity, u)
        R0 = pose.rotation
        rot = R0.compose(Rot3.exp(seg.angular_velocity * u))
        p = pose.translation + vel * u + R0.matrix() @ second @ seg.acceleration
        v = vel + R0.matrix() @ first @ seg.acceleration
        return Pose3(rot, p), v

    @property
    def duration(self) -> float:
        return float(self._times[-1])

    def state(self, t: float) -> MotionSample:
        if not 0.0 <= t <= self.duration + 1e-9:
            raise ValueError(f"time {t} outside [0, {self.duration}]")
        k = int(np.searchsorted(self._times, t, side="right") - 1)
        k = min(max(k, 0), len(self.segments) - 1)
        seg = self.segments[k]
        pose0, vel0 = self._knots[k]
        u = min(t - self._times[k], seg.duration)
        pose, vel = self._advance(pose0, vel0, seg, u)
        return MotionSample(pose, vel, seg.angular_velocity, seg.acceleration)

    def states(self, times: np.ndarray) -> list[MotionSample]:
        return [self.state(float(t)) for t in times]


@dataclass(frozen=True)
class LidarModel:
    rate: float = 10.0  # sweeps per second
    sweep_duration: float = 0.095  # s, strictly below the sweep period
    n_azimuth: int = 360
    ring_elevations: tuple[float, ...] = tuple(
        np.deg2rad(np.linspace(-15.0, 15.0, 16))
    )
    max_range: float = 80.0
    min_range: float = 0.5
    range_sigma: float = 0.01  # m


@dataclass(frozen=True)
class ImuModel:
    rate: float = 200.0
    gyro_density: float = 2e-3  # rad/s/sqrt(Hz)
    accel_density: float = 2e-2  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1e-5
    accel_walk: float = 1e-4
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class GnssModel:
    rate: float = 1.0
    sigma: float = 1.0  # m per axis
    dropout: float = 0.0  # fraction of fixes lost, in [0, 1)
    zone: int = 32
    hemisphere: str = "N"
    easting: float = 443000.0
    northing: float = 5212000.0
    altitude: float = 300.0
    lever_arm: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SimWorld:
    """Boxes, a trajectory through them, and sensor models."""

    boxes: tuple[tuple[np.ndarray, np.ndarray], ...]
    spline: TrajectorySpline
    lidar: LidarModel = LidarModel()
    imu: ImuModel = ImuModel()
    gnss: GnssModel | None = None

    def __post_init__(self) -> None:
        fixed = []
        for lo, hi in self.boxes:
            lo = np.asarray(lo, dtype=float).reshape(3)
            hi = np.asarray(hi, dtype=float).reshape(3)
            if np.any(hi <= lo):
                raise ValueError("box with non-positive extent")
            fixed.append((lo, hi))
        object.__setattr__(self, "boxes", tuple(fixed))
        if self.lidar.sweep_duration >= 1.0 / self.lidar.rate:
            raise ValueError("sweep duration must be below the sweep period")


def ray_cast(
    origins: np.ndarray,
    directions: np.ndarray,
    boxes: tuple[tuple[np.ndarray, np.ndarray], ...],
) -> np.ndarray:
    """Distance to the nearest box along each unit ray, inf on a miss."""
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    directions = np.asarray(directions, dtype=float).reshape(-1, 3)
    best = np.full(len(origins), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
    for lo, hi in boxes:
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
        # a zero direction component gives nan; the slab then constrains
        # nothing when the origin lies inside it and everything otherwise
        near = np.fmin(t1, t2)
        far = np.fmax(t1, t2)
        inside = (origins >= lo) & (origins <= hi)
        near = np.where(np.isnan(near), np.where(inside, -np.inf, np.inf), near)
        far = np.where(np.isnan(far), np.where(inside, np.inf, -np.inf), far)
        t_near = near.max(axis=1)
        t_far = far.min(axis=1)
        hit = (t_near <= t_far) & (t_far > 0.0)
        dist = np.where(t_near > 1e-9, t_near, t_far)
        best = np.where(hit & (dist < best), dist, best)
    return best


def _sweep_rays(lidar: LidarModel) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions (sensor frame) and firing offsets for one sweep."""
    az = 2.0 * np.pi * np.arange(lidar.n_azimuth) / lidar.n_azimuth
    el = np.asarray(lidar.ring_elevations)
    offsets = lidar.sweep_duration * np.arange(lidar.n_azimuth) / lidar.n_azimuth
    az_grid = np.repeat(az, el.size)
    el_grid = np.tile(el, az.size)
    dirs = np.column_stack(
        [
            np.cos(el_grid) * np.cos(az_grid),
            np.cos(el_grid) * np.sin(az_grid),
            np.sin(el_grid),
        ]
    )
    return dirs, np.repeat(offsets, el.size)


def simulate_sweep(
    world: SimWorld, start_time: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One motion-distorted sweep: sensor-frame points and firing offsets.

    Each azimuth column is cast from the sensor pose at its own firing
    time, and the returned coordinates live in that firing-time frame,
    exactly as a spinning sensor reports them.
    """
    lidar = world.lidar
    dirs, offsets = _sweep_rays(lidar)
    columns = world.spline.states(start_time + offsets[:: len(lidar.ring_elevations)])
    rings = len(lidar.ring_elevations)
    origins = np.repeat([s.pose.translation for s in columns], rings, axis=0)
    world_dirs = np.vstack(
        [
            dirs[k * rings : (k + 1) * rings] @ s.pose.rotation.matrix().T
            for k, s in enumerate(columns)
        ]
    )
    ranges = ray_cast(origins, world_dirs, world.boxes)
    if lidar.range_sigma > 0.0:
        noisy = ranges + lidar.range_sigma * rng.standard_normal(len(ranges))
    else:
        noisy = ranges
    keep = (ranges >= lidar.min_range) & (ranges <= lidar.max_range)
    return dirs[keep] * noisy[keep, None], offsets[keep]


def simulate_imu(
    world: SimWorld, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(times, gyro, accel) over the whole trajectory, with bias and noise."""
    imu = world.imu
    dt = 1.0 / imu.rate
    times = np.arange(0.0, world.spline.duration + 0.5 * dt, dt)
    gravity = np.array([0.0, 0.0, -GRAVITY_MAGNITUDE])
    gyro = np.zeros((times.size, 3))
    accel = np.zeros((times.size, 3))
    bg = np.asarray(imu.gyro_bias, dtype=float).copy()
    ba = np.asarray(imu.accel_bias, dtype=float).copy()
    sg = imu.gyro_density * np.sqrt(imu.rate)
    sa = imu.accel_density * np.sqrt(imu.rate)
    for i, sample in enumerate(world.spline.states(times)):
        R = sample.pose.rotation
        specific = sample.acceleration - R.inverse().rotate(gravity)
        gyro[i] = sample.angular_velocity + bg
        accel[i] = specific + ba
        if sg > 0.0 or sa > 0.0:
            gyro[i] += sg * rng.standard_normal(3)
            accel[i] += sa * rng.standard_normal(3)
        bg = bg + imu.gyro_walk * np.sqrt(dt) * rng.standard_normal(3)
        ba = ba + imu.accel_walk * np.sqrt(dt) * rng.standard_normal(3)
    return times, gyro, accel


def simulate_gnss(world: SimWorld, rng: np.random.Generator) -> list[tuple]:
    """(time, lat, lon, alt, var) fixes with noise and random dropout."""
    gnss = world.gnss
    if gnss is None:
        return []
    out = []
    t = 0.05  # offset so fixes never collide with scan starts
    var = max(gnss.sigma, 1e-3) ** 2
    while t <= world.spline.duration:
        sample = world.spline.state(t)
        keep = rng.random() >= gnss.dropout
        noise = gnss.sigma * rng.standard_normal(3)
        if keep:
            antenna = sample.pose.transform(np.asarray(gnss.lever_arm))
            p = antenna + noise
            lat, lon = utm_to_geodetic(
                gnss.zone,
                gnss.easting + p[0],
                gnss.northing + p[1],
                gnss.hemisphere,
            )
            out.append((t, lat, lon, gnss.altitude + p[2], var))
        t += 1.0 / gnss.rate
    return out


def scan_start_times(world: SimWorld) -> np.ndarray:
    period = 1.0 / world.lidar.rate
    n = int(np.floor((world.spline.duration - world.lidar.sweep_duration) / period)) + 1
    return np.arange(n) * period


def ground_truth(world: SimWorld) -> Trajectory:
    """Body poses at every scan start time."""
    times = scan_start_times(world)
    poses = tuple(s.pose for s in world.spline.states(times))
    return Trajectory(times, poses)


def write_dataset(
    world: SimWorld,
    out_dir: Path | str,
    seed: int = 0,
    config: dict[str, object] | None = None,
) -> Path:
    """Write the full on-disk dataset; same seed gives identical bytes.

    Produces scans/, imu.csv, gnss.csv (if modeled), calib.yaml, a config
    file, and ground_truth.txt with the body pose at each scan start.
    """
    root = Path(out_dir)
    (root / "scans").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    for t in scan_start_times(world):
        points, offsets = simulate_sweep(world, float(t), rng)
        name = "%018d.ply" % int(round(t * 1e9))
        write_ply(
            root / "scans" / name,
            {
                "x": points[:, 0].astype(np.float32),
                "y": points[:, 1].astype(np.float32),
                "z": points[:, 2].astype(np.float32),
                "time_offset": offsets.astype(np.float32),
            },
            comments=("sweep_duration %.6f" % world.lidar.sweep_duration,),
        )

    times, gyro, accel = simulate_imu(world, rng)
    with open(root / "imu.csv", "w", encoding="ascii") as f:
        f.write("# t gx gy gz ax ay az\n")
        for i in range(times.size):
            f.write(
                "%.9f %.9f %.9f %.9f %.9f %.9f %.9f\n"
                % (times[i], *gyro[i], *accel[i])
            )

    fixes = simulate_gnss(world, rng)
    if fixes:
        with open(root / "gnss.csv", "w", encoding="ascii") as f:
            f.write("# t lat lon alt var_e var_n var_u\n")
            for t, lat, lon, alt, var in fixes:
                f.write(
                    "%.9f %.12f %.12f %.6f %.6f %.6f %.6f\n"
                    % (t, lat, lon, alt, var, var, var)
                )

    lever = world.gnss.lever_arm if world.gnss else (0.0, 0.0, 0.0)
    with open(root / "calib.yaml", "w", encoding="ascii") as f:
        f.write("T_base_lidar:\n")
        f.write("  translation: [0.0, 0.0, 0.0]\n")
        f.write("  quaternion_wxyz: [1.0, 0.0, 0.0, 0.0]\n")
        f.write("T_base_gnss_antenna: [%.6f, %.6f, %.6f]\n" % tuple(lever))
        f.write("gravity: %.4f\n" % GRAVITY_MAGNITUDE)

    values = dict(DEFAULT_SIM_CONFIG)
    values.update(config or {})
    with open(root / "config", "w", encoding="ascii") as f:
        for key, value in values.items():
            f.write(f"{key} {value}\n")

    write_trajectory(root / "ground_truth.txt", ground_truth(world))
    return root


DEFAULT_SIM_CONFIG: dict[str, object] = {
    **REQUIRED_KEYS,
    "r_input": 0.15,
    "r_align": 0.3,
    "d_max": 1.0,
    "c_min": 0.5,
    "c_max": 80.0,
    "r_submap": 0.15,
}


# --- world builders ---------------------------------------------------------------


def _floor_and_pillars(
    rng: np.random.Generator,
    x_range: tuple[float, float],
    y_range: tuple[float, float],
    count: int,
) -> list[tuple[np.ndarray, np.ndarray]]:
    boxes = [
        (
            np.array([x_range[0], y_range[0], -0.2]),
            np.array([x_range[1], y_range[1], 0.0]),
        )
    ]
    for _ in range(count):
        cx = rng.uniform(*x_range)
        cy = rng.uniform(*y_range)
        sx, sy = rng.uniform(0.3, 0.9, 2)
        h = rng.uniform(0.8, 3.0)
        boxes.append(
            (np.array([cx - sx, cy - sy, 0.0]), np.array([cx + sx, cy + sy, h]))
        )
    return boxes


def corridor_world(
    length: float = 30.0,
    width: float = 6.0,
    height: float = 4.0,
    speed: float = 1.0,
    feature_seed: int = 42,
    lidar: LidarModel | None = None,
    imu: ImuModel | None = None,
    gnss: GnssModel | None = None,
) -> SimWorld:
    """Straight constant-velocity run between two feature-bearing walls."""
    rng = np.random.default_rng(feature_seed)
    half = width / 2.0
    boxes = [
        (np.array([-2.0, -half - 0.3, -0.2]), np.array([length + 2.0, -half, height])),
        (np.array([-2.0, half, -0.2]), np.array([length + 2.0, half + 0.3, height])),
        (np.array([length + 1.0, -half, -0.2]), np.array([length + 1.3, half, height])),
        (np.array([-2.3, -half, -0.2]), np.array([-2.0, half, height])),
    ]
    # wall-hugging clutter so the along-axis direction is observable
    for side in (-1.0, 1.0):
        x = 1.0
        while x < length:
            depth = rng.uniform(0.2, 0.6)
            span = rng.uniform(0.4, 1.2)
            h = rng.uniform(0.6, 2.5)
            y0 = side * half - (depth if side > 0 else 0.0)
            boxes.append(
                (np.array([x, y0, 0.0]), np.array([x + span, y0 + depth, h]))
            )
            x += rng.uniform(2.0, 4.5)
    boxes += _floor_and_pillars(rng, (-2.0, length + 2.0), (-half, half), 0)
    ramp = 1.0
    cruise = (length - 0.5 * speed * ramp) / speed
    spline = TrajectorySpline(
        [
            Segment(ramp, acceleration=np.array([speed / ramp, 0.0, 0.0])),
            Segment(cruise),
        ],
        start=Pose3(Rot3.identity(), np.array([0.0, 0.0, 1.5])),
    )
    return SimWorld(
        tuple(boxes),
        spline,
        lidar or LidarModel(),
        imu or ImuModel(),
        gnss,
    )


def square_loop_world(
    perimeter: float = 200.0,
    corridor_width: float = 8.0,
    wall_height: float = 4.0,
    speed: float = 4.0,
    turn_radius: float = 2.0,
    overlap: float = 12.0,
    feature_seed: int = 7,
    lidar: LidarModel | None = None,
    imu: ImuModel | None = None,
    gnss: GnssModel | None = None,
) -> SimWorld:
    """Square ring corridor traversed once plus an overlap past the start.

    The drive path is a rounded square of the given perimeter; pillars
    scattered through the ring keep every leg fully observable.
    """
    side_path = perimeter / 4.0
    w = corridor_width
    side = side_path + w  # outer wall length
    rng = np.random.default_rng(feature_seed)

    t_wall = 0.3
    boxes = [
        # outer walls
        (np.array([-t_wall, -t_wall, -0.2]), np.array([side + t_wall, 0.0, wall_height])),
        (np.array([-t_wall, side, -0.2]), np.array([side + t_wall, side + t_wall, wall_height])),
        (np.array([-t_wall, 0.0, -0.2]), np.array([0.0, side, wall_height])),
        (np.array([side, 0.0, -0.2]), np.array([side + t_wall, side, wall_height])),
        # inner block
        (np.array([w, w, -0.2]), np.array([side - w, side - w, wall_height])),
        # floor
        (np.array([-t_wall, -t_wall, -0.2]), np.array([side + t_wall, side + t_wall, 0.0])),
    ]
    # pillars inside the ring, clear of the drive path centerline
    centers = []
    for _ in range(36):
        u = rng.uniform(0.0, side)
        leg = rng.integers(0, 4)
        lane = rng.uniform(0.6, w / 2.0 - 1.6)
        offset = lane if rng.random() < 0.5 else w - lane
        if leg == 0:
            centers.append((u, offset))
        elif leg == 1:
            centers.append((side - offset, u))
        elif leg == 2:
            centers.append((u, side - offset))
        else:
            centers.append((offset, u))
    path_half = w / 2.0
    for cx, cy in centers:
        # keep the centerline corridor clear so the platform never collides
        on_lane = (
            abs(cy - path_half) < 1.0
            or abs(cy - (side - path_half)) < 1.0
            or abs(cx - path_half) < 1.0
            or abs(cx - (side - path_half)) < 1.0
        )
        if on_lane:
            continue
        sx, sy = rng.uniform(0.25, 0.7, 2)
        h = rng.uniform(1.0, 3.2)
        boxes.append(
            (np.array([cx - sx, cy - sy, 0.0]), np.array([cx + sx, cy + sy, h]))
        )

    # drive path: rounded square at half corridor width from the outer wall
    leg_len = side_path - 2.0 * turn_radius
    turn_rate = speed / turn_radius
    turn_time = (np.pi / 2.0) / turn_rate
    ramp = speed / 2.0  # reach cruise at 2 m/s^2
    ramp_dist = 0.5 * 2.0 * ramp * ramp
    if ramp_dist >= leg_len:
        raise ValueError("ramp outruns the first leg")
    turn = Segment(
        turn_time,
        angular_velocity=np.array([0.0, 0.0, turn_rate]),
        acceleration=np.array([0.0, turn_rate * speed, 0.0]),
    )
    segments = [
        Segment(ramp, acceleration=np.array([2.0, 0.0, 0.0])),
        Segment((leg_len - ramp_dist) / speed),
        turn,
    ]
    for _ in range(3):
        segments.append(Segment(leg_len / speed))
        segments.append(turn)
    segments.append(Segment(overlap / speed))

    start = Pose3(
        Rot3.identity(), np.array([path_half + turn_radius, path_half, 1.5])
    )
    spline = TrajectorySpline(segments, start=start)
    return SimWorld(
        tuple(boxes),
        spline,
        lidar or LidarModel(),
        imu or ImuModel(),
        gnss,
    )


def stationary_world(
    duration: float = 2.0,
    lidar: LidarModel | None = None,
    imu: ImuModel | None = None,
) -> SimWorld:
    """Motionless platform inside a small box room; handy for determinism tests."""
    boxes = [
        (np.array([-5.0, -4.0, -0.2]), np.array([5.0, -3.7, 3.0])),
        (np.array([-5.0, 3.7, -0.2]), np.array([5.0, 4.0, 3.0])),
        (np.array([-5.3, -4.0, -0.2]), np.array([-5.0, 4.0, 3.0])),
        (np.array([5.0, -4.0, -0.2]), np.array([5.3, 4.0, 3.0])),
        (np.array([-5.3, -4.0, -0.2]), np.array([5.3, 4.0, 0.0])),
        (np.array([1.0, 1.0, 0.0]), np.array([2.0, 2.3, 1.4])),
        (np.array([-3.0, -2.0, 0.0]), np.array([-2.2, -0.8, 1.9])),
    ]
    spline = TrajectorySpline(
        [Segment(duration)],
        start=Pose3(Rot3.identity(), np.array([0.0, 0.0, 1.5])),
    )
    return SimWorld(tuple(boxes), spline, lidar or LidarModel(), imu or ImuModel())


_PRESETS = {
    "corridor": corridor_world,
    "square_loop": square_loop_world,
    "stationary": stationary_world,
}


def world_from_spec(spec: dict) -> SimWorld:
    """Build a world from a parsed spec mapping: preset name plus overrides.

    The mapping must carry `preset`; remaining top-level keys are forwarded
    to the builder, and `lidar`, `imu`, `gnss` sub-mappings override those
    model fields.
    """
    if not isinstance(spec, dict) or "preset" not in spec:
        raise ValueError("world spec must be a mapping with a 'preset' key")
    spec = dict(spec)
    name = spec.pop("preset")
    if name not in _PRESETS:
        raise ValueError(
            "unknown preset %r (have: %s)" % (name, ", ".join(sorted(_PRESETS)))
        )
    kwargs = {}
    for model_key, cls in (("lidar", LidarModel), ("imu", ImuModel), ("gnss", GnssModel)):
        if model_key in spec:
            sub = spec.pop(model_key)
            if sub is None:
                continue
            if not isinstance(sub, dict):
                raise ValueError(f"{model_key} spec must be a mapping")
            if "ring_elevations" in sub:
                sub["ring_elevations"] = tuple(float(v) for v in sub["ring_elevations"])
            kwargs[model_key] = cls(**sub)
    builder = _PRESETS[name]
    try:
        return builder(**spec, **kwargs)
    except TypeError as exc:
        raise ValueError(f"bad world spec for preset {name!r}: {exc}") from exc
