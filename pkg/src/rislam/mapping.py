"""Keyframe pose graph over persisted submaps.

Keyframes are spawned when the odometry has travelled or turned far enough,
each freezing the current submap into a directory-backed store. Consecutive
keyframes are tied by re-registering their submaps against each other (the
odometry only seeds the guess), GNSS fixes near a keyframe become position
priors, and loop-closure bundles arrive through a thread-safe queue. Local
optimization runs after every insertion, global optimization on demand, and
the map is exported by concatenating stored submaps at current poses.
"""

from __future__ import annotations

import struct
import threading
import zlib
from collections import OrderedDict, deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import CalibrationSet, Config
from .evaluation import Trajectory, write_trajectory
from .factor_graph import (
    EdgeKind,
    FactorGraph,
    OptimizeReport,
    OptimizerConfig,
    PositionMeasurement,
    RobustKernel,
    VertexKind,
)
from .geodesy import UtmCoordinate
from .geometry import Pose3, Rot3
from .lio import Submap
from .ply import write_ply
from .preprocess import LocalGnss, PointCloud, georeference, voxel_downsample
from .registration import DegenerateAlignment, RegistrationParams, register

SUBMAP_MAGIC = b"RSMP"
SUBMAP_VERSION = 1
_HEADER = struct.Struct("<4sIqd7dQ")  # magic, version, id, stamp, pose, count
_CRC = struct.Struct("<I")

# fallback inflation when submap-to-submap registration fails and the raw
# odometry relative pose has to stand in for it
FALLBACK_COVARIANCE_INFLATION = 100.0

GNSS_ATTACH_WINDOW = 0.5  # s, capped further by half the keyframe spacing


class SubmapStoreError(ValueError):
    """Missing, corrupt, or malformed submap file."""


class SubmapDb:
    """Directory-backed submap store with a bounded LRU cache.

    Files are self-contained little-endian blobs, checksummed so that a
    truncated or bit-flipped file is detected at load time. Loads are safe
    to call from multiple threads.
    """

    def __init__(self, directory: Path | str, capacity: int = 16):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.capacity = capacity
        self._cache: OrderedDict[int, Submap] = OrderedDict()
        self._lock = threading.Lock()
        self.stats = {"stores": 0, "hits": 0, "disk_loads": 0, "evictions": 0}

    def _path(self, submap_id: int) -> Path:
        return self.directory / f"submap_{submap_id:06d}.bin"

    def store(self, submap_id: int, submap: Submap) -> Path:
        pts = np.ascontiguousarray(submap.cloud.points, dtype=np.float32)
        payload = pts.tobytes()
        q = submap.origin.rotation.q
        t = submap.origin.translation
        head = _HEADER.pack(
            SUBMAP_MAGIC, SUBMAP_VERSION, submap_id, submap.cloud.timestamp,
            q[0], q[1], q[2], q[3], t[0], t[1], t[2], len(pts),
        )
        blob = head + _CRC.pack(zlib.crc32(head + payload)) + payload
        path = self._path(submap_id)
        path.write_bytes(blob)
        with self._lock:
            self._cache[submap_id] = Submap(
                submap_id,
                PointCloud(submap.cloud.timestamp, pts.astype(float)),
                (),
                submap.origin,
            )
            self._cache.move_to_end(submap_id)
            self._evict()
            self.stats["stores"] += 1
        return path

    def load(self, submap_id: int) -> Submap:
        with self._lock:
            cached = self._cache.get(submap_id)
            if cached is not None:
                self._cache.move_to_end(submap_id)
                self.stats["hits"] += 1
                return cached
        submap = self._read(submap_id)
        with self._lock:
            self._cache[submap_id] = submap
            self._cache.move_to_end(submap_id)
            self._evict()
            self.stats["disk_loads"] += 1
        return submap

    def _evict(self) -> None:
        while len(self._cache) > self.capacity:
            self._cache.popitem(last=False)
            self.stats["evictions"] += 1

    def cached_ids(self) -> tuple[int, ...]:
        with self._lock:
            return tuple(self._cache)

    def _read(self, submap_id: int) -> Submap:
        path = self._path(submap_id)
        if not path.exists():
            raise SubmapStoreError(f"no stored submap with id {submap_id}")
        blob = path.read_bytes()
        if len(blob) < _HEADER.size + _CRC.size:
            raise SubmapStoreError(f"submap {submap_id}: truncated file")
        head = blob[: _HEADER.size]
        magic, version, file_id, stamp, qw, qx, qy, qz, tx, ty, tz, count = (
            _HEADER.unpack(head)
        )
        if magic != SUBMAP_MAGIC or version != SUBMAP_VERSION:
            raise SubmapStoreError(f"submap {submap_id}: bad magic or version")
        if file_id != submap_id:
            raise SubmapStoreError(
                f"submap {submap_id}: file claims id {file_id}"
            )
        (crc,) = _CRC.unpack(blob[_HEADER.size : _HEADER.size + _CRC.size])
        payload = blob[_HEADER.size + _CRC.size :]
        if zlib.crc32(head + payload) != crc:
            raise SubmapStoreError(f"submap {submap_id}: checksum mismatch")
        if len(payload) != count * 12:
            raise SubmapStoreError(f"submap {submap_id}: point count mismatch")
        pts = np.frombuffer(payload, dtype="<f4").reshape(count, 3).astype(float)
        origin = Pose3(Rot3(np.array([qw, qx, qy, qz])), np.array([tx, ty, tz]))
        return Submap(submap_id, PointCloud(stamp, pts), (), origin)


@dataclass
class Keyframe:
    """One pose-graph vertex with its frozen submap.

    `pose` is the odometry estimate at creation time; it seeds registration
    guesses and spacing checks. The graph holds the evolving estimate.
    """

    vertex_id: int
    timestamp: float
    pose: Pose3
    submap_id: int
    gnss: LocalGnss | None = None


class MappingBackend:
    """Global pose graph: keyframe insertion, constraints, and map export."""

    def __init__(
        self,
        config: Config,
        store_dir: Path | str,
        calibration: CalibrationSet | None = None,
        cache_capacity: int = 16,
    ) -> None:
        self.config = config
        self.calibration = calibration or CalibrationSet()
        self.db = SubmapDb(store_dir, cache_capacity)
        self.graph = FactorGraph()
        self.keyframes: list[Keyframe] = []
        self.params = RegistrationParams(
            method=config.method, r_align=config.r_align, d_max=config.d_max
        )
        self.closures_applied = 0
        self.gnss_priors = 0
        self.fallback_edges = 0
        self._pending: deque = deque()
        self._lock = threading.Lock()
        self._optimizer = OptimizerConfig(max_iterations=25, increment_tolerance=1e-9)

    # --- keyframe lifecycle ------------------------------------------------------

    def maybe_create_keyframe(
        self, timestamp: float, pose: Pose3, submap: Submap
    ) -> Keyframe | None:
        """New keyframe when the odometry moved past either spacing threshold.

        The very first call always creates one. On creation the submap is
        frozen under the keyframe's id and a pose vertex is added (the first
        one fixed, pinning the gauge).
        """
        if self.keyframes:
            step = self.keyframes[-1].pose.inverse().compose(pose)
            if (
                np.linalg.norm(step.translation) <= self.config.delta_trans
                and step.rotation.angle() <= self.config.delta_rot
            ):
                return None
        kf_id = len(self.keyframes)
        vid = self.graph.add_vertex(VertexKind.POSE, pose, fixed=kf_id == 0)
        self.db.store(kf_id, submap)
        kf = Keyframe(vid, timestamp, pose, kf_id)
        self.keyframes.append(kf)
        return kf

    def _gnss_window(self) -> float:
        times = np.array([k.timestamp for k in self.keyframes])
        if len(times) < 2:
            return GNSS_ATTACH_WINDOW
        return min(GNSS_ATTACH_WINDOW, 0.5 * float(np.median(np.diff(times))))

    def add_keyframe_constraints(
        self,
        kf: Keyframe,
        prev_kf: Keyframe,
        odom_cov: np.ndarray | None = None,
        fixes: list[LocalGnss] | None = None,
    ) -> list[int]:
        """Connect `kf` to its predecessor and attach nearby GNSS fixes.

        The inter-keyframe constraint comes from re-registering the two
        stored submaps, seeded by the odometry-predicted relative pose; the
        odometry estimate itself only enters when that registration fails,
        inflated and flagged. Returns the ids of the edges added.
        """
        s_cur = self.db.load(kf.submap_id)
        s_prev = self.db.load(prev_kf.submap_id)
        guess = prev_kf.pose.inverse().compose(kf.pose)
        rel, cov = None, None
        try:
            result = register(s_cur.cloud, s_prev.model(self.params), guess, self.params)
            if result.converged:
                rel = result.T
                cov = result.covariance * self.config.lo_cov_scale
        except DegenerateAlignment:
            pass
        if rel is None:
            rel = guess
            base = odom_cov if odom_cov is not None else np.eye(6) * 1e-2
            cov = np.asarray(base, dtype=float) * FALLBACK_COVARIANCE_INFLATION
            self.fallback_edges += 1
        info = np.linalg.inv(cov)
        edges = [
            self.graph.add_edge(
                EdgeKind.RELATIVE_POSE,
                (prev_kf.vertex_id, kf.vertex_id),
                rel,
                0.5 * (info + info.T),
                RobustKernel.PSEUDO_HUBER,
            )
        ]
        window = self._gnss_window()
        for fix in fixes or ():
            if abs(fix.timestamp - kf.timestamp) > window:
                continue
            info3 = np.linalg.inv(fix.covariance * self.config.gnss_cov_scale)
            edges.append(
                self.graph.add_edge(
                    EdgeKind.POSITION_PRIOR,
                    kf.vertex_id,
                    PositionMeasurement(fix.position, self.calibration.gnss_lever_arm),
                    0.5 * (info3 + info3.T),
                )
            )
            self.gnss_priors += 1
            if kf.gnss is None or abs(fix.timestamp - kf.timestamp) < abs(
                kf.gnss.timestamp - kf.timestamp
            ):
                kf.gnss = fix
        return edges

    # --- optimization ------------------------------------------------------------

    def _noop_report(self) -> OptimizeReport:
        chi2 = self.graph.chi2()
        return OptimizeReport(chi2, chi2, 0, True, {})

    def optimize_local(self) -> OptimizeReport:
        """Settle the newest keyframe against its recent neighborhood.

        Only the last v_local + 1 vertices move; everything older acts as a
        rigid anchor, so cost stays flat as the graph grows.
        """
        scope = [k.vertex_id for k in self.keyframes[-(self.config.v_local + 1) :]]
        if all(self.graph.vertex(v).fixed for v in scope):
            return self._noop_report()
        return self.graph.optimize(scope=scope, config=self._optimizer)

    def optimize_global(self) -> OptimizeReport:
        """Relax every keyframe; a no-op unless something global arrived.

        Without loop closures or GNSS priors the chain is already at its
        local optimum, so the call reports current chi2 and leaves every
        pose untouched.
        """
        self.apply_pending_closures()
        if self.closures_applied == 0 and self.gnss_priors == 0:
            return self._noop_report()
        if len(self.keyframes) < 2:
            return self._noop_report()
        return self.graph.optimize(config=self._optimizer)

    # --- loop-closure hand-off ---------------------------------------------------

    def submit_closures(self, bundle) -> None:
        """Queue a validated closure bundle; safe from any thread."""
        items = tuple(bundle)
        if items:
            with self._lock:
                self._pending.append(items)

    def apply_pending_closures(self) -> int:
        """Drain queued bundles into the graph; returns edges added."""
        with self._lock:
            bundles = list(self._pending)
            self._pending.clear()
        added = 0
        for bundle in bundles:
            for cand in bundle:
                info = np.linalg.inv(np.asarray(cand.covariance, dtype=float))
                self.graph.add_edge(
                    EdgeKind.RELATIVE_POSE,
                    (
                        self.keyframes[cand.from_id].vertex_id,
                        self.keyframes[cand.to_id].vertex_id,
                    ),
                    cand.relative_pose,
                    0.5 * (info + info.T),
                    RobustKernel.PSEUDO_HUBER,
                )
                added += 1
        self.closures_applied += added
        return added

    # --- read-out ----------------------------------------------------------------

    def current_pose(self, kf: Keyframe) -> Pose3:
        return self.graph.get_estimate(kf.vertex_id)

    def export_trajectory(self) -> Trajectory:
        if not self.keyframes:
            raise ValueError("no keyframes to export")
        return Trajectory(
            np.array([k.timestamp for k in self.keyframes]),
            tuple(self.current_pose(k) for k in self.keyframes),
        )

    def export_map(self, resolution: float) -> PointCloud:
        """All stored submaps at current keyframe poses, voxel-downsampled."""
        if resolution <= 0:
            raise ValueError("resolution must be > 0")
        if not self.keyframes:
            raise ValueError("no keyframes to export")
        parts = []
        for kf in self.keyframes:
            submap = self.db.load(kf.submap_id)
            parts.append(self.current_pose(kf).transform(submap.cloud.points))
        merged = PointCloud(self.keyframes[-1].timestamp, np.vstack(parts))
        return voxel_downsample(merged, resolution)

    def utm_anchor(self) -> UtmCoordinate | None:
        for kf in self.keyframes:
            if kf.gnss is not None:
                return kf.gnss.utm_anchor
        return None


def write_map_ply(path: Path | str, cloud: PointCloud) -> None:
    """Binary PLY with float32 vertex positions."""
    pts = np.asarray(cloud.points, dtype=np.float32)
    write_ply(path, {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2]})


def write_georeferenced_trajectory(
    path: Path | str, trajectory: Trajectory, anchor: UtmCoordinate | None
) -> Path:
    """Trajectory shifted into UTM, plus a sidecar anchor file.

    The sidecar (same name with `.anchor` appended) records the UTM zone and
    the absolute coordinates of the local origin, which is all a consumer
    needs to place the relative file on the globe.
    """
    geo = georeference(list(trajectory.poses), anchor)
    write_trajectory(path, Trajectory(trajectory.times, tuple(geo)))
    sidecar = Path(str(path) + ".anchor")
    sidecar.write_text(
        "zone %d %s\neasting %.6f\nnorthing %.6f\naltitude %.6f\n"
        % (anchor.zone, anchor.hemisphere, anchor.easting, anchor.northing, anchor.altitude),
        encoding="ascii",
    )
    return sidecar
