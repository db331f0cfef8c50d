"""Dataset loading: time-ordered sensor streams, calibration, configuration.

Directory layout:
    scans/<start_ns>.ply   per-sweep clouds (x, y, z, time_offset float props)
    imu.csv                t, wx, wy, wz, ax, ay, az
    gnss.csv               t, lat, lon, alt, cxx, cyy, czz   (optional)
    calib.yaml             extrinsics and gravity
    config                 key-value pairs mirroring the main parameter names

All timestamps are re-based to double seconds relative to the first
measurement in the dataset, which keeps sub-microsecond resolution over any
realistic run length.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import yaml

from .geometry import Pose3, Rot3
from .ply import PlyError, read_ply


class IngestError(ValueError):
    """Malformed or inconsistent dataset content."""


class ConfigError(ValueError):
    """Missing or invalid configuration value."""


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    angular_velocity: np.ndarray
    linear_acceleration: np.ndarray


@dataclass(frozen=True)
class GnssFix:
    timestamp: float
    latitude: float
    longitude: float
    altitude: float
    covariance: np.ndarray

    def __post_init__(self) -> None:
        if not (abs(self.latitude) <= 90.0 and abs(self.longitude) <= 180.0):
            raise IngestError(
                f"gnss fix out of range: lat={self.latitude}, lon={self.longitude}"
            )
        cov = np.asarray(self.covariance, dtype=float).reshape(3, 3)
        if not np.allclose(cov, cov.T) or np.any(np.linalg.eigvalsh(cov) < -1e-12):
            raise IngestError("gnss covariance not symmetric PSD")
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class RawScan:
    start: float
    duration: float
    points: np.ndarray  # (N, 3) sensor frame
    offsets: np.ndarray  # (N,) seconds within [0, duration]

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        off = np.asarray(self.offsets, dtype=float).reshape(-1)
        if len(pts) == 0:
            raise IngestError("scan with zero points")
        if len(pts) != len(off):
            raise IngestError("point/offset length mismatch")
        if np.any(off < -1e-12) or np.any(off > self.duration + 1e-9):
            raise IngestError("point time offset outside [0, duration]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "offsets", off)

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True)
class CalibrationSet:
    T_base_lidar: Pose3 = field(default_factory=Pose3.identity)
    gnss_lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: float = 9.81

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "gnss_lever_arm", np.asarray(self.gnss_lever_arm, dtype=float).reshape(3)
        )
        if not 9.7 <= self.gravity <= 9.9:
            raise IngestError(f"gravity magnitude {self.gravity} outside [9.7, 9.9]")


# Core parameters that a dataset's config file (or a CLI flag) must provide,
# with the defaults quoted in error messages.
REQUIRED_KEYS: dict[str, float] = {
    "c_min": 0.5,
    "c_max": 100.0,
    "r_input": 0.1,
    "r_align": 0.2,
    "d_max": 0.3,
    "r_submap": 0.08,
    "ell": 5,
    "delta_trans": 2.0,
    "delta_rot": math.pi / 8.0,
    "v_local": 5,
}

OPTIONAL_DEFAULTS: dict[str, object] = {
    "method": "GICP",
    "v_lc": 5,
    "reset_period": 100,
    "window_size": 10,
    "gnss_cov_scale": 1e3,
    "lo_cov_scale": 1e3,
    "gyro_noise_density": 2e-3,  # rad/s/sqrt(Hz)
    "accel_noise_density": 2e-2,  # m/s^2/sqrt(Hz)
    "gyro_bias_walk": 1e-5,
    "accel_bias_walk": 1e-4,
    "lc_min_graph_distance": 10,
    "lc_fitness_gate": 0.0,  # 0 -> derived as 4 * r_submap^2
    "lc_drift_floor": 0.02,  # m of unmodeled drift per metre travelled
    "lc_enabled": 1,
}


@dataclass(frozen=True)
class Config:
    c_min: float
    c_max: float
    r_input: float
    r_align: float
    d_max: float
    r_submap: float
    ell: int
    delta_trans: float
    delta_rot: float
    v_local: int
    method: str = "GICP"
    v_lc: int = 5
    reset_period: int = 100
    window_size: int = 10
    gnss_cov_scale: float = 1e3
    # registration covariances assume independent correspondences; real pairs
    # share surfaces, so the scan matcher underestimates its own uncertainty
    # by orders of magnitude and this factor restores an honest weight
    lo_cov_scale: float = 1e3
    gyro_noise_density: float = 2e-3
    accel_noise_density: float = 2e-2
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4
    lc_min_graph_distance: int = 10
    lc_fitness_gate: float = 0.0
    # loop search trusts summed edge covariances plus this much systematic
    # drift per metre of path; pure summing treats drift as a random walk
    # and rules out exactly the revisits a loop closure should repair
    lc_drift_floor: float = 0.02
    lc_enabled: bool = True

    def __post_init__(self) -> None:
        for name in (
            "c_max", "r_input", "r_align", "d_max", "r_submap",
            "delta_trans", "delta_rot", "gnss_cov_scale", "lo_cov_scale",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"config {name} must be > 0")
        if self.c_min < 0 or self.c_min >= self.c_max:
            raise ConfigError("config requires 0 <= c_min < c_max")
        if self.ell < 1:
            raise ConfigError("config ell must be >= 1")
        if self.method not in ("GICP", "NDT"):
            raise ConfigError(f"config method must be GICP or NDT, got {self.method!r}")
        if self.lc_fitness_gate <= 0.0:
            object.__setattr__(self, "lc_fitness_gate", 4.0 * self.r_submap**2)


_INT_KEYS = {"ell", "v_local", "v_lc", "reset_period", "window_size", "lc_min_graph_distance"}
_STR_KEYS = {"method"}
_BOOL_KEYS = {"lc_enabled"}


def _coerce(key: str, value: object) -> object:
    if key in _STR_KEYS:
        return str(value).upper()
    if key in _BOOL_KEYS:
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if key in _INT_KEYS:
        return int(float(value))
    return float(value)


def resolve_config(
    file_values: dict[str, object] | None, overrides: dict[str, object] | None = None
) -> Config:
    """Build a Config with precedence: config file, then overrides, then defaults.

    The required keys must come from the file or the overrides; a missing one
    raises a ConfigError naming the key and its usual default.
    """
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    values: dict[str, object] = {}
    for key, default in REQUIRED_KEYS.items():
        if key in file_values:
            values[key] = _coerce(key, file_values[key])
        elif key in overrides:
            values[key] = _coerce(key, overrides[key])
        else:
            raise ConfigError(
                f"missing config key {key!r} (no value in config file or flags; "
                f"typical default {default})"
            )
    for key, default in OPTIONAL_DEFAULTS.items():
        if key in file_values:
            values[key] = _coerce(key, file_values[key])
        elif key in overrides:
            values[key] = _coerce(key, overrides[key])
        else:
            values[key] = _coerce(key, default)
    known = set(REQUIRED_KEYS) | set(OPTIONAL_DEFAULTS)
    for key in file_values:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    return Config(**values)  # type: ignore[arg-type]


def parse_config_file(path: Path) -> dict[str, str]:
    """Parse a plain key-value file: one `key value` (or `key = value`) per line."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            for sep in ("=", ":"):
                if sep in body:
                    key, _, val = body.partition(sep)
                    break
            else:
                parts = body.split(None, 1)
                if len(parts) != 2:
                    raise IngestError(f"{path}:{lineno}: malformed config line {line.strip()!r}")
                key, val = parts
            key, val = key.strip(), val.strip()
            if not key or not val:
                raise IngestError(f"{path}:{lineno}: malformed config line {line.strip()!r}")
            out[key] = val
    return out


def parse_calibration(path: Path) -> CalibrationSet:
    with open(path, "r", encoding="ascii") as f:
        doc = yaml.safe_load(f) or {}
    if not isinstance(doc, dict):
        raise IngestError(f"{path}: expected a key-value mapping")
    pose = Pose3.identity()
    if "T_base_lidar" in doc:
        entry = doc["T_base_lidar"]
        t = np.asarray(entry.get("translation", [0.0, 0.0, 0.0]), dtype=float)
        q = np.asarray(entry.get("quaternion_wxyz", [1.0, 0.0, 0.0, 0.0]), dtype=float)
        pose = Pose3(Rot3(q), t)
    lever = np.asarray(doc.get("T_base_gnss_antenna", [0.0, 0.0, 0.0]), dtype=float)
    gravity = float(doc.get("gravity", 9.81))
    return CalibrationSet(pose, lever, gravity)


@dataclass
class ScanSource:
    """Lazy, time-sorted access to the scan files of a dataset."""

    entries: list[tuple[float, Path]]  # (re-based start time, file)
    time_offset_ns: int  # dataset epoch in integer nanoseconds

    def __len__(self) -> int:
        return len(self.entries)

    def timestamps(self) -> list[float]:
        return [t for t, _ in self.entries]

    def load(self, index: int) -> RawScan:
        start, path = self.entries[index]
        return _read_scan(path, start)

    def __iter__(self) -> Iterator[RawScan]:
        for i in range(len(self.entries)):
            yield self.load(i)


def _read_scan(path: Path, start: float) -> RawScan:
    try:
        data = read_ply(path)
    except PlyError as exc:
        raise IngestError(str(exc)) from exc
    for prop in ("x", "y", "z", "time_offset"):
        if prop not in data.properties:
            raise IngestError(f"{path}: missing vertex property {prop!r}")
    pts = np.column_stack([data["x"], data["y"], data["z"]]).astype(float)
    off = data["time_offset"].astype(float)
    duration = 0.0
    for comment in data.comments:
        parts = comment.split()
        if len(parts) == 2 and parts[0] == "sweep_duration":
            duration = float(parts[1])
    if duration <= 0.0:
        duration = float(off.max()) if len(off) else 0.0
    return RawScan(start, duration, pts, off)


def _load_csv(path: Path, columns: int) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.replace(",", " ").split()
            if len(parts) != columns:
                raise IngestError(
                    f"{path}:{lineno}: expected {columns} fields, got {len(parts)}"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from exc
    return np.array(rows, dtype=float).reshape(-1, columns)


@dataclass(frozen=True)
class ImuData:
    """Columnar IMU stream: timestamps plus gyro/accel arrays."""

    times: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __len__(self) -> int:
        return len(self.times)

    def nominal_period(self) -> float:
        if len(self.times) < 2:
            raise IngestError("IMU stream too short to estimate rate")
        return float(np.median(np.diff(self.times)))

    def sample(self, i: int) -> ImuSample:
        return ImuSample(float(self.times[i]), self.gyro[i].copy(), self.accel[i].copy())

    def __iter__(self) -> Iterator[ImuSample]:
        for i in range(len(self.times)):
            yield self.sample(i)


@dataclass(frozen=True)
class ImuWindow:
    """IMU slice covering one scan, with boundary bookkeeping."""

    times: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    extrapolated: bool
    coverage_gap: bool

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class Dataset:
    scans: ScanSource
    imu: ImuData
    gnss: list[GnssFix]
    calibration: CalibrationSet
    config: Config
    path: Path


def load_dataset(path, overrides: dict[str, object] | None = None) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise IngestError(f"dataset directory not found: {root}")
    scan_dir = root / "scans"
    imu_path = root / "imu.csv"
    if not scan_dir.is_dir():
        raise IngestError(f"missing scans/ directory in {root}")
    if not imu_path.is_file():
        raise IngestError(f"missing imu.csv in {root}")

    scan_files = sorted(scan_dir.glob("*.ply"))
    if not scan_files:
        raise IngestError(f"no scan files under {scan_dir}")
    scan_ns = []
    for p in scan_files:
        try:
            scan_ns.append(int(p.stem))
        except ValueError as exc:
            raise IngestError(f"{p}: file name must be the start timestamp in ns") from exc

    imu_raw = _load_csv(imu_path, 7)
    if len(imu_raw) == 0:
        raise IngestError(f"{imu_path}: empty IMU stream (IMU is mandatory)")
    if np.any(np.diff(imu_raw[:, 0]) <= 0):
        raise IngestError(f"{imu_path}: timestamps not strictly increasing")

    gnss_path = root / "gnss.csv"
    gnss_raw = _load_csv(gnss_path, 7) if gnss_path.is_file() else np.empty((0, 7))
    if len(gnss_raw) > 1 and np.any(np.diff(gnss_raw[:, 0]) <= 0):
        raise IngestError(f"{gnss_path}: timestamps not strictly increasing")

    # Re-base every stream onto the dataset's first measurement.
    t0 = min(
        scan_ns[0] * 1e-9,
        float(imu_raw[0, 0]),
        float(gnss_raw[0, 0]) if len(gnss_raw) else np.inf,
    )
    entries = [((ns * 1e-9) - t0, p) for ns, p in zip(scan_ns, scan_files)]
    if any(b[0] <= a[0] for a, b in zip(entries, entries[1:])):
        raise IngestError(f"{scan_dir}: scan timestamps not strictly increasing")
    scans = ScanSource(entries, int(round(t0 * 1e9)))

    imu = ImuData(imu_raw[:, 0] - t0, imu_raw[:, 1:4].copy(), imu_raw[:, 4:7].copy())
    gnss = [
        GnssFix(float(r[0]) - t0, float(r[1]), float(r[2]), float(r[3]), np.diag(r[4:7]))
        for r in gnss_raw
    ]

    calib_path = root / "calib.yaml"
    calibration = parse_calibration(calib_path) if calib_path.is_file() else CalibrationSet()
    config_path = root / "config"
    file_values = parse_config_file(config_path) if config_path.is_file() else {}
    config = resolve_config(file_values, overrides)
    return Dataset(scans, imu, gnss, calibration, config, root)


def synchronize(scan: RawScan, imu: ImuData) -> ImuWindow:
    """IMU samples covering [scan start - eps, scan end + eps].

    eps is one nominal IMU period, so interpolation anchors exist at both
    ends whenever coverage allows. A window that fails to bracket the scan is
    flagged extrapolated; an interior gap wider than twice the nominal period
    is flagged as a coverage gap.
    """
    period = imu.nominal_period()
    if scan.end < imu.times[0]:
        raise IngestError(f"scan at t={scan.start:.6f} ends before the first IMU sample")
    if scan.start > imu.times[-1] + period:
        raise IngestError(f"scan at t={scan.start:.6f} starts after the last IMU sample")
    n = len(imu.times)
    lo = int(np.searchsorted(imu.times, scan.start - period, side="left"))
    hi = int(np.searchsorted(imu.times, scan.end + period, side="right"))
    # widen to include the bracketing samples when they exist
    while lo > 0 and (lo >= n or imu.times[lo] > scan.start):
        lo -= 1
    while hi < n and (hi == 0 or imu.times[hi - 1] < scan.end):
        hi += 1
    if hi <= lo:
        raise IngestError(
            f"no IMU coverage for scan at t={scan.start:.6f} (stream spans "
            f"[{imu.times[0]:.6f}, {imu.times[-1]:.6f}])"
        )
    times = imu.times[lo:hi]
    extrapolated = bool(times[0] > scan.start or times[-1] < scan.end)
    gaps = np.diff(times)
    coverage_gap = bool(len(gaps) and gaps.max() > 2.0 * period)
    return ImuWindow(
        times.copy(), imu.gyro[lo:hi].copy(), imu.accel[lo:hi].copy(), extrapolated, coverage_gap
    )


def merged_playback(dataset: Dataset):
    """Yield (timestamp, kind, payload) across all streams in time order.

    Scans are keyed by start time; payloads are the lazy scan index, the
    ImuSample, or the GnssFix.
    """
    scan_stream = ((t, "scan", i) for i, (t, _) in enumerate(dataset.scans.entries))
    imu_stream = ((float(t), "imu", i) for i, t in enumerate(dataset.imu.times))
    gnss_stream = ((g.timestamp, "gnss", g) for g in dataset.gnss)
    yield from heapq.merge(scan_stream, imu_stream, gnss_stream, key=lambda e: e[0])
