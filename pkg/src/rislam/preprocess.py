"""Scan conditioning and GNSS anchoring.

Raw sweeps are range-clipped, motion-compensated with IMU data, and
voxel-downsampled. GNSS fixes are projected to UTM and re-expressed relative
to the first fix so the rest of the pipeline works in small local
coordinates (east-north-up axes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geodesy
from .dataset import CalibrationSet, GnssFix, ImuWindow, RawScan
from .geometry import Pose3, Rot3, skew
from .state import NavState


@dataclass(frozen=True)
class PointCloud:
    timestamp: float
    points: np.ndarray  # (N, 3)
    covariances: np.ndarray | None = None  # (N, 3, 3) when present
    deskewed: bool = True

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float).reshape(-1, 3))
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point coordinates")
        object.__setattr__(self, "points", pts)
        if self.covariances is not None:
            cov = np.asarray(self.covariances, dtype=float).reshape(-1, 3, 3)
            if len(cov) != len(pts):
                raise ValueError("covariance count mismatch")
            object.__setattr__(self, "covariances", cov)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, pose: Pose3) -> "PointCloud":
        """Cloud with points (and covariances) expressed through `pose`."""
        pts = pose.transform(self.points)
        cov = None
        if self.covariances is not None:
            R = pose.rotation.matrix()
            cov = np.einsum("ij,njk,lk->nil", R, self.covariances, R)
        return PointCloud(self.timestamp, pts, cov, self.deskewed)


@dataclass(frozen=True)
class LocalGnss:
    timestamp: float
    position: np.ndarray  # meters, ENU relative to anchor
    covariance: np.ndarray
    utm_anchor: geodesy.UtmCoordinate

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(
            self, "covariance", np.asarray(self.covariance, dtype=float).reshape(3, 3)
        )


def clip_range(scan: RawScan, c_min: float, c_max: float) -> RawScan | None:
    """Drop points outside [c_min, c_max] range; None when nothing survives."""
    if not 0.0 <= c_min < c_max:
        raise ValueError("requires 0 <= c_min < c_max")
    r = np.linalg.norm(scan.points, axis=1)
    keep = (r >= c_min) & (r <= c_max)
    if not np.any(keep):
        return None
    if np.all(keep):
        return scan
    return RawScan(scan.start, scan.duration, scan.points[keep], scan.offsets[keep])


def _integrate_window(
    scan: RawScan, window: ImuWindow, state: NavState, gravity: float
) -> tuple[np.ndarray, list[Pose3]]:
    """Body motion nodes over the sweep, relative to the pose at scan start.

    Forward Euler at IMU sample resolution with zero-order hold on the
    measurements; returns node times as offsets in [0, duration].
    """
    interior = window.times[(window.times > scan.start) & (window.times < scan.end)]
    node_times = np.concatenate([[scan.start], interior, [scan.end]])

    g = np.array([0.0, 0.0, -gravity])
    R = state.pose.rotation
    p = state.pose.translation.copy()
    v = state.velocity.copy()
    R0_inv = R.inverse()
    p0 = p.copy()

    rel: list[Pose3] = [Pose3.identity()]
    for k in range(len(node_times) - 1):
        t_k, t_next = node_times[k], node_times[k + 1]
        dt = t_next - t_k
        # zero-order hold: latest sample at or before the segment start
        idx = int(np.searchsorted(window.times, t_k, side="right")) - 1
        idx = min(max(idx, 0), len(window.times) - 1)
        w = window.gyro[idx] - state.gyro_bias
        f = window.accel[idx] - state.accel_bias
        a_world = R.rotate(f) + g
        p = p + v * dt + 0.5 * a_world * dt * dt
        v = v + a_world * dt
        R = R.compose(Rot3.exp(w * dt))
        rel.append(Pose3(R0_inv.compose(R), R0_inv.rotate(p - p0)))
    return node_times - scan.start, rel


def _apply_segmentwise(
    node_offsets: np.ndarray, rel: list[Pose3], points: np.ndarray, offsets: np.ndarray
) -> np.ndarray:
    """Transform each point by the interpolated relative motion at its offset.

    Within a segment the screw axis is fixed, so the per-point exponential
    reduces to scalar trig coefficients on precomputed axis products.
    """
    out = np.empty_like(points)
    seg = np.clip(np.searchsorted(node_offsets, offsets, side="right") - 1, 0, len(rel) - 2)
    for k in np.unique(seg):
        mask = seg == k
        a, b = rel[k], rel[k + 1]
        t0, t1 = node_offsets[k], node_offsets[k + 1]
        span = t1 - t0
        alpha = (offsets[mask] - t0) / span if span > 0 else np.zeros(int(mask.sum()))
        delta = a.inverse().compose(b).log()
        phi, rho = delta.rot, delta.trans
        angle = float(np.linalg.norm(phi))
        pts = points[mask]
        if angle < 1e-12:
            out[mask] = a.transform(pts + alpha[:, None] * rho[None, :])
            continue
        ax = phi / angle
        K = skew(ax)
        K2 = K @ K
        th = alpha * angle
        s, c = np.sin(th), np.cos(th)
        # Exp(alpha*phi) p = p + sin(th) K p + (1-cos(th)) K^2 p
        rot_pts = pts + s[:, None] * (pts @ K.T) + (1.0 - c)[:, None] * (pts @ K2.T)
        # V(alpha*phi) (alpha*rho) with per-point coefficients b, d
        th_safe = np.where(th > 1e-9, th, 1.0)
        bb = np.where(th > 1e-9, (1.0 - c) / th_safe, 0.5 * th)
        dd = np.where(th > 1e-9, (th - s) / th_safe, th * th / 6.0)
        Kr = K @ rho
        K2r = K2 @ rho
        trans = alpha[:, None] * (rho[None, :] + bb[:, None] * Kr[None, :] + dd[:, None] * K2r[None, :])
        out[mask] = a.transform(rot_pts + trans)
    return out


def deskew(
    scan: RawScan,
    window: ImuWindow | None,
    state: NavState,
    calib: CalibrationSet,
) -> PointCloud:
    """Pull every point back to the sensor frame at scan start.

    The sweep motion comes from integrating the IMU window; a missing window
    degrades to a pass-through cloud flagged as not de-skewed.
    """
    if window is None or len(window) == 0:
        return PointCloud(scan.start, scan.points, deskewed=False)
    node_offsets, rel_body = _integrate_window(scan, window, state, calib.gravity)
    # points live in {l}; conjugate the body motion into the sensor frame
    T_bl = calib.T_base_lidar
    T_lb = T_bl.inverse()
    rel_sensor = [T_lb.compose(r).compose(T_bl) for r in rel_body]
    pts = _apply_segmentwise(node_offsets, rel_sensor, scan.points, scan.offsets)
    return PointCloud(scan.start, pts, deskewed=True)


def voxel_downsample(cloud: PointCloud, r: float) -> PointCloud:
    """One centroid per occupied cubic voxel of side r (grid anchored at 0)."""
    if r <= 0:
        raise ValueError("voxel size must be > 0")
    if len(cloud) == 0:
        return cloud
    pts, _, _ = voxel_centroids(cloud.points, r)
    return PointCloud(cloud.timestamp, pts, deskewed=cloud.deskewed)


def voxel_centroids(points: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(centroids, counts, inverse voxel index per input point), voxel-sorted.

    Sorting is by voxel key, so output order is deterministic for any input
    permutation of the same point multiset.
    """
    keys = np.floor(points / r).astype(np.int64)
    # pack the 3 indices into one sortable key (21 bits per axis, offset binary)
    packed = (
        ((keys[:, 0] + (1 << 20)) << 42)
        | ((keys[:, 1] + (1 << 20)) << 21)
        | (keys[:, 2] + (1 << 20))
    )
    uniq, inverse, counts = np.unique(packed, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, points)
    return sums / counts[:, None], counts, inverse


def lla_to_utm(fix: GnssFix) -> tuple[int, float, float, float]:
    """(zone, easting, northing, altitude) of a fix, standard UTM grid."""
    c = geodesy.geodetic_to_utm(fix.latitude, fix.longitude, fix.altitude)
    return c.zone, c.easting, c.northing, c.altitude


def anchor_relative(fix: GnssFix, anchor: geodesy.UtmCoordinate) -> LocalGnss:
    """Fix as a metric ENU offset from the anchor (first-fix UTM).

    A fix that falls in a neighbouring UTM zone is re-projected onto the
    anchor's grid first, so positions stay continuous across the boundary.
    """
    c = geodesy.geodetic_to_utm(fix.latitude, fix.longitude, fix.altitude, zone=anchor.zone)
    position = np.array(
        [c.easting - anchor.easting, c.northing - anchor.northing, c.altitude - anchor.altitude]
    )
    return LocalGnss(fix.timestamp, position, fix.covariance, anchor)


def make_anchor(fix: GnssFix) -> geodesy.UtmCoordinate:
    return geodesy.geodetic_to_utm(fix.latitude, fix.longitude, fix.altitude)


def georeference(trajectory: list[Pose3], anchor: geodesy.UtmCoordinate | None) -> list[Pose3]:
    """Trajectory shifted into UTM coordinates; rotations untouched."""
    if anchor is None:
        raise ValueError("no GNSS anchor available; cannot georeference")
    offset = np.array([anchor.easting, anchor.northing, anchor.altitude])
    return [Pose3(p.rotation, p.translation + offset) for p in trajectory]
