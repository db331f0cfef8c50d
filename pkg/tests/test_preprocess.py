"""Clipping, de-skewing, voxel filtering, and GNSS anchoring."""

import math

import numpy as np
import pytest

from rislam import geodesy
from rislam.dataset import CalibrationSet, GnssFix, ImuData, RawScan, synchronize
from rislam.geometry import Pose3, Rot3
from rislam.preprocess import (
    PointCloud,
    anchor_relative,
    clip_range,
    deskew,
    georeference,
    lla_to_utm,
    make_anchor,
    voxel_downsample,
)
from rislam.state import NavState

from oracles import snyder_utm_forward


def scan_of(points, duration=0.1, offsets=None, start=0.0):
    points = np.asarray(points, dtype=float)
    if offsets is None:
        offsets = np.zeros(len(points))
    return RawScan(start, duration, points, np.asarray(offsets, dtype=float))


# --- clip_range --------------------------------------------------------------


def test_clip_removes_near_and_far():
    s = scan_of([[0.3, 0, 0], [50.0, 0, 0], [120.0, 0, 0]])
    out = clip_range(s, 0.5, 100.0)
    assert len(out.points) == 1
    np.testing.assert_allclose(out.points[0], [50.0, 0, 0])


def test_clip_preserves_order_and_offsets():
    pts = [[1, 0, 0], [0.2, 0, 0], [2, 0, 0], [3, 0, 0]]
    s = scan_of(pts, offsets=[0.0, 0.01, 0.02, 0.03])
    out = clip_range(s, 0.5, 100.0)
    np.testing.assert_allclose(out.points, [[1, 0, 0], [2, 0, 0], [3, 0, 0]])
    np.testing.assert_allclose(out.offsets, [0.0, 0.02, 0.03])


def test_clip_idempotent():
    rng = np.random.default_rng(1)
    s = scan_of(rng.uniform(-50, 50, (500, 3)))
    once = clip_range(s, 0.5, 40.0)
    twice = clip_range(once, 0.5, 40.0)
    np.testing.assert_array_equal(once.points, twice.points)


def test_clip_all_removed_returns_none():
    s = scan_of([[0.1, 0, 0]])
    assert clip_range(s, 0.5, 100.0) is None


def test_clip_validates_bounds():
    s = scan_of([[1, 0, 0]])
    with pytest.raises(ValueError):
        clip_range(s, -1.0, 10.0)
    with pytest.raises(ValueError):
        clip_range(s, 5.0, 5.0)


# --- deskew ------------------------------------------------------------------


def stationary_window(t0, t1, rate=200.0, gravity=9.81):
    t = np.arange(t0 - 0.01, t1 + 0.01, 1.0 / rate)
    imu = ImuData(t, np.zeros((len(t), 3)), np.tile([0, 0, gravity], (len(t), 1)))
    return imu


def test_deskew_stationary_is_identity():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-10, 10, (200, 3))
    s = scan_of(pts, offsets=rng.uniform(0, 0.099, 200))
    imu = stationary_window(0.0, 0.1)
    w = synchronize(s, imu)
    out = deskew(s, w, NavState(), CalibrationSet())
    assert out.deskewed
    np.testing.assert_allclose(out.points, pts, atol=1e-12)


def test_deskew_missing_window_passthrough():
    pts = np.ones((5, 3))
    s = scan_of(pts)
    out = deskew(s, None, NavState(), CalibrationSet())
    assert not out.deskewed
    np.testing.assert_array_equal(out.points, pts)


def test_deskew_pure_rotation_about_z():
    # body spins at 1 rad/s; accelerometer keeps cancelling gravity exactly
    rate = 200.0
    t = np.arange(-0.01, 0.12, 1.0 / rate)
    imu = ImuData(t, np.tile([0, 0, 1.0], (len(t), 1)), np.tile([0, 0, 9.81], (len(t), 1)))
    pts = np.array([[5.0, 0.0, 1.0]])
    offs = np.array([0.05])
    s = scan_of(pts, offsets=offs)
    w = synchronize(s, imu)
    out = deskew(s, w, NavState(), CalibrationSet())
    expected = Rot3.rz(0.05).rotate(pts[0])
    np.testing.assert_allclose(out.points[0], expected, atol=1e-9)
    # a zero-offset point never moves
    s2 = scan_of(pts, offsets=np.array([0.0]))
    out2 = deskew(s2, synchronize(s2, imu), NavState(), CalibrationSet())
    np.testing.assert_allclose(out2.points[0], pts[0], atol=1e-15)


def test_deskew_respects_lidar_extrinsic():
    # same spin, but the sensor sits 1 m ahead of the body origin: a fixed
    # world point must land where the start-of-sweep sensor frame sees it
    rate = 400.0
    t = np.arange(-0.01, 0.12, 1.0 / rate)
    imu = ImuData(t, np.tile([0, 0, 1.0], (len(t), 1)), np.tile([0, 0, 9.81], (len(t), 1)))
    calib = CalibrationSet(T_base_lidar=Pose3(Rot3.identity(), np.array([1.0, 0.0, 0.0])))
    world_pt = np.array([6.0, 2.0, 1.5])
    offset = 0.07
    T_wb = Pose3(Rot3.rz(offset * 1.0), np.zeros(3))  # body pose when captured
    measured = (T_wb @ calib.T_base_lidar).inverse().transform(world_pt)
    s = scan_of([measured], offsets=[offset])
    out = deskew(s, synchronize(s, imu), NavState(), calib)
    expected = calib.T_base_lidar.inverse().transform(world_pt)  # start pose is identity
    np.testing.assert_allclose(out.points[0], expected, atol=1e-6)


def test_deskew_translating_body():
    # constant world acceleration along x, starting from rest
    rate = 800.0
    accel = 2.0
    t = np.arange(-0.01, 0.12, 1.0 / rate)
    imu = ImuData(
        t, np.zeros((len(t), 3)), np.tile([accel, 0, 9.81], (len(t), 1))
    )
    offset = 0.08
    world_pt = np.array([10.0, -3.0, 2.0])
    p_body = 0.5 * accel * offset**2
    T_wb = Pose3(Rot3.identity(), np.array([p_body, 0.0, 0.0]))
    measured = T_wb.inverse().transform(world_pt)
    s = scan_of([measured], offsets=[offset])
    out = deskew(s, synchronize(s, imu), NavState(), CalibrationSet())
    np.testing.assert_allclose(out.points[0], world_pt, atol=1e-3)


# --- voxel_downsample --------------------------------------------------------


def test_voxel_collapses_cube_corners():
    corners = np.array(
        [[x, y, z] for x in (0.01, 0.02) for y in (0.01, 0.02) for z in (0.01, 0.02)]
    )
    out = voxel_downsample(PointCloud(0.0, corners), 0.1)
    assert len(out) == 1
    np.testing.assert_allclose(out.points[0], corners.mean(axis=0), atol=1e-12)


def test_voxel_keeps_distant_points():
    pts = np.array([[0.01, 0, 0], [1.01, 0, 0]])
    out = voxel_downsample(PointCloud(0.0, pts), 0.1)
    assert len(out) == 2
    single = voxel_downsample(PointCloud(0.0, pts[:1]), 0.1)
    np.testing.assert_allclose(single.points, pts[:1])


def test_voxel_output_inside_voxel_and_smaller():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-2, 2, (1000, 3))
    r = 0.25
    out = voxel_downsample(PointCloud(0.0, pts), r)
    assert len(out) <= len(pts)
    cells = np.floor(out.points / r)
    lo = cells * r
    assert np.all(out.points >= lo - 1e-12)
    assert np.all(out.points <= lo + r + 1e-12)


def test_voxel_deterministic_under_permutation():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-2, 2, (500, 3))
    perm = rng.permutation(500)
    a = voxel_downsample(PointCloud(0.0, pts), 0.3)
    b = voxel_downsample(PointCloud(0.0, pts[perm]), 0.3)
    np.testing.assert_allclose(a.points, b.points, atol=1e-12)


# --- GNSS anchoring ----------------------------------------------------------


def fix_at(lat, lon, alt=210.0, t=0.0):
    return GnssFix(t, lat, lon, alt, np.eye(3))


def test_lla_to_utm_matches_oracle():
    zone, e, n, alt = lla_to_utm(fix_at(41.6563, -0.8790))
    oe, on, ozone, _ = snyder_utm_forward(41.6563, -0.8790)
    assert zone == ozone
    assert abs(e - oe) < 1e-3
    assert abs(n - on) < 1e-3
    assert alt == 210.0


def test_anchor_first_fix_is_zero():
    f = fix_at(41.6563, -0.8790)
    anchor = make_anchor(f)
    local = anchor_relative(f, anchor)
    np.testing.assert_allclose(local.position, np.zeros(3), atol=1e-12)
    np.testing.assert_array_equal(local.covariance, f.covariance)


def test_anchor_ten_meters_north():
    f0 = fix_at(41.6563, -0.8790)
    anchor = make_anchor(f0)
    lat2, lon2 = geodesy.utm_to_geodetic(anchor.zone, anchor.easting, anchor.northing + 10.0)
    local = anchor_relative(fix_at(lat2, lon2), anchor)
    # tolerance covers forward+inverse series truncation (a few microns)
    np.testing.assert_allclose(local.position, [0.0, 10.0, 0.0], atol=1e-5)


def test_anchor_zone_crossing_is_continuous():
    # fixes walking east over the 0-degree meridian (zone 30 -> 31)
    lats = 41.0
    lons = np.linspace(-0.02, 0.02, 9)
    anchor = make_anchor(fix_at(lats, lons[0]))
    xs = [anchor_relative(fix_at(lats, lon), anchor).position[0] for lon in lons]
    steps = np.diff(xs)
    assert np.all(steps > 0)
    assert steps.max() - steps.min() < 0.01  # meters, uniform walk


def test_georeference():
    anchor = make_anchor(fix_at(41.6563, -0.8790))
    offset = np.array([anchor.easting, anchor.northing, anchor.altitude])
    out = georeference([Pose3.identity()] * 3, anchor)
    assert len(out) == 3
    for p in out:
        np.testing.assert_allclose(p.translation, offset)
    moved = georeference([Pose3(Rot3.rz(0.5), np.array([1.0, 2.0, 3.0]))], anchor)
    np.testing.assert_allclose(moved[0].translation, offset + [1, 2, 3])
    np.testing.assert_allclose(moved[0].rotation.q, Rot3.rz(0.5).q)
    with pytest.raises(ValueError):
        georeference([Pose3.identity()], None)
