"""Keyframe pose graph: submap store, spacing, constraints, exports."""

from collections import namedtuple

import numpy as np
import pytest

from rislam.dataset import Config
from rislam.evaluation import Trajectory, read_trajectory
from rislam.factor_graph import EdgeKind
from rislam.geodesy import UtmCoordinate
from rislam.geometry import Pose3, Rot3
from rislam.lio import Submap
from rislam.mapping import (
    MappingBackend,
    SubmapDb,
    SubmapStoreError,
    write_georeferenced_trajectory,
    write_map_ply,
)
from rislam.ply import read_ply
from rislam.preprocess import LocalGnss, PointCloud, voxel_downsample

from conftest import structured_room

Closure = namedtuple("Closure", "from_id to_id relative_pose covariance")

ANCHOR = UtmCoordinate(32, 443000.0, 5212000.0, 300.0, "N")


def make_config(**over):
    base = dict(
        c_min=0.5, c_max=100.0, r_input=0.1, r_align=0.2, d_max=1.0,
        r_submap=0.1, ell=3, delta_trans=1.0, delta_rot=np.pi / 8.0,
        v_local=5,
    )
    base.update(over)
    return Config(**base)


def make_submap(sid: int, points: np.ndarray, origin: Pose3 | None = None,
                stamp: float = 0.0) -> Submap:
    return Submap(sid, PointCloud(stamp, points), (), origin or Pose3.identity())


def blob(seed: int, center=(0.0, 0.0, 0.0), n=60) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.asarray(center) + rng.uniform(-1.0, 1.0, (n, 3))


# --- submap store --------------------------------------------------------------


def test_store_load_round_trip_bit_exact(tmp_path):
    db = SubmapDb(tmp_path, capacity=4)
    # float32 is the storage precision, so feed float32-representable points
    pts = blob(1).astype(np.float32).astype(float)
    origin = Pose3(Rot3.exp(np.array([0.1, -0.2, 0.3])), np.array([4.0, 5.0, 6.0]))
    db.store(3, make_submap(3, pts, origin, stamp=7.25))
    loaded = db.load(3)
    assert np.array_equal(loaded.cloud.points, pts)
    assert loaded.cloud.timestamp == 7.25
    assert loaded.submap_id == 3
    np.testing.assert_allclose(loaded.origin.translation, origin.translation)
    assert loaded.origin.rotation.angle_to(origin.rotation) < 1e-12


def test_store_survives_cache_eviction(tmp_path):
    db = SubmapDb(tmp_path, capacity=2)
    for i in range(3):
        db.store(i, make_submap(i, blob(i)))
    assert db.cached_ids() == (1, 2)  # 0 evicted, LRU order
    assert db.stats["evictions"] == 1
    reloaded = db.load(0)  # still on disk
    assert np.allclose(reloaded.cloud.points, blob(0), atol=1e-6)
    assert db.stats["disk_loads"] == 1


def test_cache_never_exceeds_capacity(tmp_path):
    db = SubmapDb(tmp_path, capacity=3)
    for i in range(10):
        db.store(i, make_submap(i, blob(i)))
        assert len(db.cached_ids()) <= 3
    assert db.stats["evictions"] == 7


def test_load_missing_id_names_it(tmp_path):
    db = SubmapDb(tmp_path, capacity=2)
    with pytest.raises(SubmapStoreError, match="id 42"):
        db.load(42)


def test_corrupt_payload_fails_checksum(tmp_path):
    db = SubmapDb(tmp_path, capacity=2)
    path = db.store(0, make_submap(0, blob(0)))
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    fresh = SubmapDb(tmp_path, capacity=2)
    with pytest.raises(SubmapStoreError, match="checksum"):
        fresh.load(0)


def test_truncated_file_rejected(tmp_path):
    db = SubmapDb(tmp_path, capacity=2)
    path = db.store(0, make_submap(0, blob(0)))
    path.write_bytes(path.read_bytes()[:20])
    fresh = SubmapDb(tmp_path, capacity=2)
    with pytest.raises(SubmapStoreError, match="truncated"):
        fresh.load(0)


# --- keyframe spacing ----------------------------------------------------------


def line_pose(x: float, yaw: float = 0.0) -> Pose3:
    return Pose3(Rot3.exp(np.array([0.0, 0.0, yaw])), np.array([x, 0.0, 0.0]))


def test_first_frame_is_always_a_keyframe(tmp_path):
    backend = MappingBackend(make_config(), tmp_path)
    kf = backend.maybe_create_keyframe(0.0, Pose3.identity(), make_submap(0, blob(0)))
    assert kf is not None and kf.submap_id == 0
    assert backend.graph.vertex(kf.vertex_id).fixed


def test_small_motion_spawns_no_keyframe(tmp_path):
    backend = MappingBackend(make_config(), tmp_path)
    backend.maybe_create_keyframe(0.0, Pose3.identity(), make_submap(0, blob(0)))
    kf = backend.maybe_create_keyframe(1.0, line_pose(0.5, yaw=0.1), make_submap(1, blob(1)))
    assert kf is None
    assert len(backend.keyframes) == 1


def test_rotation_alone_spawns_keyframe(tmp_path):
    backend = MappingBackend(make_config(), tmp_path)
    backend.maybe_create_keyframe(0.0, Pose3.identity(), make_submap(0, blob(0)))
    kf = backend.maybe_create_keyframe(1.0, line_pose(0.0, yaw=np.pi / 4), make_submap(1, blob(1)))
    assert kf is not None


def test_keyframe_spacing_invariant(tmp_path):
    backend = MappingBackend(make_config(), tmp_path)
    rng = np.random.default_rng(9)
    pose = Pose3.identity()
    t = 0.0
    for _ in range(60):
        step = Pose3(Rot3.exp(rng.normal(0, 0.05, 3)), rng.normal(0, 0.3, 3))
        pose = pose.compose(step)
        t += 0.1
        backend.maybe_create_keyframe(t, pose, make_submap(0, blob(0)))
    assert len(backend.keyframes) >= 2
    cfg = backend.config
    for a, b in zip(backend.keyframes, backend.keyframes[1:]):
        rel = a.pose.inverse().compose(b.pose)
        assert (
            np.linalg.norm(rel.translation) > cfg.delta_trans
            or rel.rotation.angle() > cfg.delta_rot
        )


# --- inter-keyframe constraints -------------------------------------------------


def room_backend(tmp_path, poses, estimates=None, **config_over):
    """Keyframes observing one fixed room: data from the true poses, vertex
    estimates from the (possibly drifted) odometry poses."""
    room = structured_room(np.random.default_rng(42))
    backend = MappingBackend(make_config(**config_over), tmp_path)
    for i, pose in enumerate(poses):
        local = pose.inverse().transform(room)
        est = pose if estimates is None else estimates[i]
        kf = backend.maybe_create_keyframe(float(i), est, make_submap(i, local, est))
        assert kf is not None
    return backend


def test_submap_edge_matches_true_relative_pose(tmp_path):
    truth = [line_pose(0.0), line_pose(2.0)]
    # odometry hands over a drifted pose; registration must shrug it off
    drift = Pose3(Rot3.exp(np.array([0.0, 0.0, 0.01])), np.array([0.05, -0.03, 0.02]))
    backend = room_backend(tmp_path, truth, [truth[0], truth[1].compose(drift)])
    edges = backend.add_keyframe_constraints(backend.keyframes[1], backend.keyframes[0])
    assert len(edges) == 1  # no GNSS anywhere
    measured = backend.graph.edge(edges[0]).measurement
    true_rel = truth[0].inverse().compose(truth[1])
    assert np.linalg.norm(measured.translation - true_rel.translation) < 0.01
    assert measured.rotation.angle_to(true_rel.rotation) < np.deg2rad(0.5)
    assert backend.fallback_edges == 0


def test_failed_registration_falls_back_to_odometry(tmp_path):
    backend = MappingBackend(make_config(), tmp_path)
    # disjoint worlds: no correspondences within d_max at any guess
    backend.maybe_create_keyframe(0.0, line_pose(0.0), make_submap(0, blob(1, (0, 0, 0))))
    backend.maybe_create_keyframe(1.0, line_pose(2.0), make_submap(1, blob(2, (500, 0, 0))))
    odom_cov = np.diag([1e-4] * 3 + [1e-3] * 3)
    edges = backend.add_keyframe_constraints(
        backend.keyframes[1], backend.keyframes[0], odom_cov=odom_cov
    )
    assert backend.fallback_edges == 1
    edge = backend.graph.edge(edges[0])
    guess = backend.keyframes[0].pose.inverse().compose(backend.keyframes[1].pose)
    np.testing.assert_allclose(edge.measurement.translation, guess.translation)
    # information reflects the 100x inflation of the odometry covariance
    expected_info = np.linalg.inv(odom_cov * 100.0)
    np.testing.assert_allclose(edge.information, expected_info, rtol=1e-9)


def local_fix(t: float, position, var: float = 1.0) -> LocalGnss:
    return LocalGnss(t, np.asarray(position, dtype=float), np.eye(3) * var, ANCHOR)


def test_gnss_fix_near_keyframe_attached(tmp_path):
    backend = room_backend(tmp_path, [line_pose(0.0), line_pose(2.0)])
    fixes = [local_fix(0.9, [2.0, 0.0, 0.0])]
    edges = backend.add_keyframe_constraints(
        backend.keyframes[1], backend.keyframes[0], fixes=fixes
    )
    kinds = [backend.graph.edge(e).kind for e in edges]
    assert kinds.count(EdgeKind.POSITION_PRIOR) == 1
    assert backend.keyframes[1].gnss is fixes[0]
    assert backend.utm_anchor() == ANCHOR


def test_distant_gnss_fix_not_attached(tmp_path):
    backend = room_backend(tmp_path, [line_pose(0.0), line_pose(2.0)])
    # keyframes 1 s apart -> attachment window is 0.5 s at most
    fixes = [local_fix(11.0, [2.0, 0.0, 0.0])]
    edges = backend.add_keyframe_constraints(
        backend.keyframes[1], backend.keyframes[0], fixes=fixes
    )
    assert len(edges) == 1
    assert backend.keyframes[1].gnss is None
    assert backend.utm_anchor() is None


# --- optimization scoping --------------------------------------------------------


def chain_backend(tmp_path, n, drift_per_step=0.05, v_local=5):
    """Straight chain with exact relative measurements but drifted estimates."""
    backend = MappingBackend(make_config(v_local=v_local), tmp_path)
    rng = np.random.default_rng(3)
    truth, noisy = [], []
    offset = np.zeros(3)
    for i in range(n):
        truth.append(line_pose(2.0 * i))
        if i > 0:
            offset = offset + rng.normal(0, drift_per_step, 3)
        noisy.append(Pose3(truth[i].rotation, truth[i].translation + offset))
        kf = backend.maybe_create_keyframe(float(i), noisy[i], make_submap(i, blob(i)))
        assert kf is not None
    info = np.eye(6) * 1e4
    for i in range(1, n):
        rel = truth[i - 1].inverse().compose(truth[i])
        backend.graph.add_edge(
            EdgeKind.RELATIVE_POSE,
            (backend.keyframes[i - 1].vertex_id, backend.keyframes[i].vertex_id),
            rel,
            info,
        )
    return backend, truth


def test_optimize_local_touches_only_recent_vertices(tmp_path):
    backend, _ = chain_backend(tmp_path, n=9, v_local=5)
    before = [backend.current_pose(k).translation.copy() for k in backend.keyframes]
    report = backend.optimize_local()
    assert report.final_chi2 <= report.initial_chi2 + 1e-12
    after = [backend.current_pose(k).translation.copy() for k in backend.keyframes]
    for i in range(3):  # 9 keyframes, last 6 free: 0, 1, 2 must not move
        np.testing.assert_array_equal(before[i], after[i])
    moved = [not np.array_equal(b, a) for b, a in zip(before[3:], after[3:])]
    assert any(moved)


def test_optimize_local_single_keyframe_is_noop(tmp_path):
    backend = MappingBackend(make_config(), tmp_path)
    backend.maybe_create_keyframe(0.0, Pose3.identity(), make_submap(0, blob(0)))
    report = backend.optimize_local()
    assert report.converged and report.iterations == 0


def test_optimize_local_two_keyframes(tmp_path):
    backend, truth = chain_backend(tmp_path, n=2)
    report = backend.optimize_local()
    assert report.converged
    np.testing.assert_allclose(
        backend.current_pose(backend.keyframes[1]).translation,
        truth[1].translation,
        atol=1e-6,
    )


def test_optimize_global_without_global_constraints_is_noop(tmp_path):
    backend, _ = chain_backend(tmp_path, n=5)
    before = [backend.current_pose(k).translation.copy() for k in backend.keyframes]
    report = backend.optimize_global()
    assert report.iterations == 0 and report.converged
    after = [backend.current_pose(k).translation.copy() for k in backend.keyframes]
    for b, a in zip(before, after):
        np.testing.assert_array_equal(b, a)


def test_perfect_closure_recovers_ground_truth(tmp_path):
    backend, truth = chain_backend(tmp_path, n=8, drift_per_step=0.08)
    closure_rel = truth[7].inverse().compose(truth[0])
    backend.submit_closures(
        [Closure(7, 0, closure_rel, np.eye(6) * 1e-4)]
    )
    assert backend.apply_pending_closures() == 1
    report = backend.optimize_global()
    assert report.converged
    # exact measurements throughout: the optimum is the truth, gauge pinned
    # by the fixed first vertex
    for kf, gt in zip(backend.keyframes, truth):
        err = np.linalg.norm(backend.current_pose(kf).translation - gt.translation)
        assert err < 1e-3


def test_contradictory_edge_dominates_chi2_report(tmp_path):
    backend, truth = chain_backend(tmp_path, n=6, drift_per_step=0.0)
    bogus_rel = Pose3(Rot3.identity(), np.array([7.0, -4.0, 2.0]))
    bad_edge = backend.graph.add_edge(
        EdgeKind.RELATIVE_POSE,
        (backend.keyframes[0].vertex_id, backend.keyframes[5].vertex_id),
        bogus_rel,
        np.eye(6),
    )
    backend.closures_applied += 1  # force the global pass to run
    report = backend.optimize_global()
    worst = max(report.edge_chi2, key=report.edge_chi2.get)
    assert worst == bad_edge


def test_submitted_bundles_drain_once(tmp_path):
    backend, truth = chain_backend(tmp_path, n=4)
    rel = truth[3].inverse().compose(truth[0])
    backend.submit_closures([Closure(3, 0, rel, np.eye(6) * 1e-4)])
    backend.submit_closures([])  # empty bundles are dropped at submit time
    assert backend.apply_pending_closures() == 1
    assert backend.apply_pending_closures() == 0


# --- exports ---------------------------------------------------------------------


def test_export_map_single_keyframe(tmp_path):
    pose = line_pose(3.0, yaw=0.4)
    pts = blob(4).astype(np.float32).astype(float)
    backend = MappingBackend(make_config(), tmp_path)
    backend.maybe_create_keyframe(0.0, pose, make_submap(0, pts, pose))
    out = backend.export_map(resolution=0.05)
    expected = voxel_downsample(PointCloud(0.0, pose.transform(pts)), 0.05)
    np.testing.assert_allclose(out.points, expected.points, atol=1e-9)


def test_export_map_disjoint_submaps_add_up(tmp_path):
    backend = MappingBackend(make_config(), tmp_path)
    backend.maybe_create_keyframe(0.0, line_pose(0.0), make_submap(0, blob(1, (0, 0, 0))))
    backend.maybe_create_keyframe(1.0, line_pose(2.0), make_submap(1, blob(2, (200, 0, 0))))
    out = backend.export_map(resolution=0.03)
    m0 = voxel_downsample(PointCloud(0.0, line_pose(0.0).transform(blob(1, (0, 0, 0)))), 0.03)
    m1 = voxel_downsample(PointCloud(0.0, line_pose(2.0).transform(blob(2, (200, 0, 0)))), 0.03)
    assert len(out.points) == len(m0.points) + len(m1.points)


def test_export_map_is_deterministic(tmp_path):
    backend, _ = chain_backend(tmp_path, n=3)
    a = backend.export_map(resolution=0.2)
    b = backend.export_map(resolution=0.2)
    np.testing.assert_array_equal(a.points, b.points)


def test_export_map_missing_file_names_id(tmp_path):
    backend = MappingBackend(make_config(), tmp_path / "db", cache_capacity=1)
    backend.maybe_create_keyframe(0.0, line_pose(0.0), make_submap(0, blob(0)))
    backend.maybe_create_keyframe(1.0, line_pose(2.0), make_submap(1, blob(1)))
    # capacity 1 evicted keyframe 0 from cache; removing its file breaks export
    backend.db._path(0).unlink()
    with pytest.raises(SubmapStoreError, match="id 0"):
        backend.export_map(resolution=0.1)


def test_export_map_requires_positive_resolution(tmp_path):
    backend, _ = chain_backend(tmp_path, n=2)
    with pytest.raises(ValueError, match="resolution"):
        backend.export_map(resolution=0.0)


def test_export_trajectory_follows_graph_updates(tmp_path):
    backend, truth = chain_backend(tmp_path, n=8, drift_per_step=0.08)
    rel = truth[7].inverse().compose(truth[0])
    backend.submit_closures([Closure(7, 0, rel, np.eye(6) * 1e-4)])
    backend.optimize_global()
    traj = backend.export_trajectory()
    assert np.all(np.diff(traj.times) > 0)
    np.testing.assert_allclose(traj.positions()[-1], truth[-1].translation, atol=1e-3)


def test_write_map_ply_round_trip(tmp_path):
    pts = blob(8).astype(np.float32)
    path = tmp_path / "map.ply"
    write_map_ply(path, PointCloud(0.0, pts.astype(float)))
    data = read_ply(path)
    np.testing.assert_array_equal(data.properties["x"], pts[:, 0])
    np.testing.assert_array_equal(data.properties["z"], pts[:, 2])


def test_georeferenced_trajectory_and_anchor_sidecar(tmp_path):
    times = np.array([0.0, 1.0])
    poses = (line_pose(0.0), line_pose(5.0))
    path = tmp_path / "traj_utm.txt"
    sidecar = write_georeferenced_trajectory(path, Trajectory(times, poses), ANCHOR)
    geo = read_trajectory(path)
    np.testing.assert_allclose(
        geo.positions()[0], [ANCHOR.easting, ANCHOR.northing, ANCHOR.altitude]
    )
    np.testing.assert_allclose(
        geo.positions()[1] - geo.positions()[0], [5.0, 0.0, 0.0], atol=1e-9
    )
    text = sidecar.read_text()
    assert "zone 32 N" in text and "easting 443000" in text
