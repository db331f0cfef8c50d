"""GICP and NDT registration: gradients, recovery, invariances."""

import numpy as np
import pytest

from rislam.geometry import Pose3, Rot3
from rislam.preprocess import PointCloud
from rislam.registration import (
    DegenerateAlignment,
    GicpTarget,
    NdtGrid,
    RegistrationParams,
    estimate_point_covariances,
    gicp_correspondences,
    gicp_cost_and_gradient,
    ndt_cost_and_gradient,
    prepare_target,
    register,
)

from conftest import structured_room

GICP = RegistrationParams(method="GICP", r_align=0.2, d_max=1.0)
NDT = RegistrationParams(method="NDT", r_align=1.0, d_max=1.0)


@pytest.fixture(scope="module")
def room():
    return structured_room(np.random.default_rng(42))


@pytest.fixture(scope="module")
def room_cloud(room):
    return PointCloud(0.0, room)


# --- point covariances -------------------------------------------------------


def test_plane_covariance_normal_direction():
    rng = np.random.default_rng(1)
    pts = np.column_stack(
        [rng.uniform(0, 4, 400), rng.uniform(0, 4, 400), np.zeros(400)]
    )
    out = estimate_point_covariances(PointCloud(0.0, pts), k=20)
    vals, vecs = np.linalg.eigh(out.covariances)
    # smallest direction is the z normal, ratio matches the clamp
    np.testing.assert_allclose(np.abs(vecs[:, 2, 0]), 1.0, atol=1e-9)
    np.testing.assert_allclose(vals[:, 0] / vals[:, 2], 1e-3, rtol=1e-9)


def test_covariances_require_enough_points():
    pts = np.random.default_rng(2).uniform(0, 1, (5, 3))
    with pytest.raises(ValueError, match="k=20"):
        estimate_point_covariances(PointCloud(0.0, pts), k=20)


def test_isotropic_blob_has_isotropic_raw_covariance():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, (800, 3))
    # brute-force raw k-NN covariance for a few points
    for i in (0, 100, 500):
        d = np.linalg.norm(pts - pts[i], axis=1)
        neigh = pts[np.argsort(d)[:20]]
        c = np.cov(neigh.T, bias=True)
        vals = np.linalg.eigvalsh(c)
        assert vals[0] / vals[2] > 0.1  # nowhere near plane-degenerate


# --- self-alignment and recovery ---------------------------------------------


@pytest.mark.parametrize("params", [GICP, NDT], ids=["gicp", "ndt"])
def test_self_alignment_identity(room_cloud, params):
    res = register(room_cloud, room_cloud, Pose3.identity(), params)
    assert res.converged
    assert np.linalg.norm(res.T.translation) < 1e-6
    assert res.T.rotation.angle() < 1e-6
    assert res.fitness < 1e-3
    assert res.inliers > 0.9 * len(room_cloud)


@pytest.mark.parametrize("params", [GICP, NDT], ids=["gicp", "ndt"])
def test_recovery_from_offset(room_cloud, params):
    rng = np.random.default_rng(7)
    target = prepare_target(room_cloud, params)
    for _ in range(5):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        true = Pose3(Rot3.exp(axis * np.radians(5.0)), rng.uniform(-0.3, 0.3, 3))
        source = PointCloud(0.0, true.inverse().transform(room_cloud.points))
        res = register(source, target, Pose3.identity(), params)
        assert res.converged
        assert np.linalg.norm(res.T.translation - true.translation) < 0.01
        assert res.T.rotation.angle_to(true.rotation) < np.radians(0.1)


def test_non_overlapping_clouds_degenerate(room_cloud):
    far = PointCloud(0.0, room_cloud.points + np.array([1000.0, 0, 0]))
    with pytest.raises(DegenerateAlignment):
        register(far, room_cloud, Pose3.identity(), GICP)
    with pytest.raises(DegenerateAlignment):
        register(far, room_cloud, Pose3.identity(), NDT)


def test_empty_source_degenerate(room_cloud):
    with pytest.raises(DegenerateAlignment):
        register(
            PointCloud(0.0, np.empty((0, 3))), room_cloud, Pose3.identity(), GICP
        )


# --- invariances --------------------------------------------------------------


def test_gicp_left_invariance(room_cloud):
    rng = np.random.default_rng(11)
    true = Pose3(Rot3.exp([0.0, 0.0, 0.05]), np.array([0.2, -0.1, 0.05]))
    source = PointCloud(0.0, true.inverse().transform(room_cloud.points))
    base = register(source, room_cloud, Pose3.identity(), GICP)
    for _ in range(3):
        G = Pose3(Rot3.exp(rng.uniform(-1, 1, 3)), rng.uniform(-5, 5, 3))
        src_g = PointCloud(0.0, G.transform(source.points))
        tgt_g = PointCloud(0.0, G.transform(room_cloud.points))
        guess = G.compose(Pose3.identity()).compose(G.inverse())
        res = register(src_g, tgt_g, guess, GICP)
        expected = G.compose(base.T).compose(G.inverse())
        assert np.linalg.norm(res.T.translation - expected.translation) < 1e-6
        assert res.T.rotation.angle_to(expected.rotation) < 1e-6


def test_ndt_invariance_under_grid_preserving_motion(room_cloud):
    # quarter-turn about z plus a whole-voxel shift keeps the voxel grid
    true = Pose3(Rot3.exp([0.0, 0.0, 0.04]), np.array([0.15, 0.1, 0.0]))
    source = PointCloud(0.0, true.inverse().transform(room_cloud.points))
    base = register(source, room_cloud, Pose3.identity(), NDT)
    G = Pose3(Rot3.rz(np.pi / 2), np.array([3.0, -2.0, 1.0]))  # multiples of r_align=1
    src_g = PointCloud(0.0, G.transform(source.points))
    tgt_g = PointCloud(0.0, G.transform(room_cloud.points))
    res = register(src_g, tgt_g, G.compose(Pose3.identity()).compose(G.inverse()), NDT)
    expected = G.compose(base.T).compose(G.inverse())
    assert np.linalg.norm(res.T.translation - expected.translation) < 1e-6
    assert res.T.rotation.angle_to(expected.rotation) < 1e-6


def test_shrinking_dmax_never_gains_correspondences(room_cloud):
    rng = np.random.default_rng(13)
    target = GicpTarget(room_cloud)
    moved = room_cloud.points + rng.standard_normal((len(room_cloud), 3)) * 0.05
    counts = [
        len(gicp_correspondences(moved, target, d)[0]) for d in (1.0, 0.5, 0.2, 0.1, 0.05)
    ]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_cost_non_increasing(room_cloud):
    rng = np.random.default_rng(17)
    true = Pose3(Rot3.exp([0.02, -0.03, 0.08]), np.array([0.3, 0.2, -0.1]))
    source = estimate_point_covariances(
        PointCloud(0.0, true.inverse().transform(room_cloud.points)), 20
    )
    target = GicpTarget(room_cloud)
    guess = Pose3.identity()
    res = register(source, target, guess, GICP)
    pairs0 = gicp_correspondences(guess.transform(source.points), target, GICP.d_max)
    c0, _ = gicp_cost_and_gradient(
        source.points, source.covariances, target, pairs0, guess
    )
    pairs1 = gicp_correspondences(res.T.transform(source.points), target, GICP.d_max)
    c1, _ = gicp_cost_and_gradient(
        source.points, source.covariances, target, pairs1, res.T
    )
    assert c1 <= c0


# --- analytic gradients vs finite differences ---------------------------------


def retract(pose, d):
    return Pose3(pose.rotation.compose(Rot3.exp(d[0:3])), pose.translation + d[3:6])


def test_gicp_gradient_matches_finite_differences(room_cloud):
    rng = np.random.default_rng(19)
    source = estimate_point_covariances(
        PointCloud(0.0, room_cloud.points[rng.choice(len(room_cloud), 400, replace=False)]),
        20,
    )
    target = GicpTarget(room_cloud)
    h = 1e-6
    for _ in range(20):
        pose = Pose3(Rot3.exp(rng.uniform(-0.1, 0.1, 3)), rng.uniform(-0.2, 0.2, 3))
        pairs = gicp_correspondences(pose.transform(source.points), target, 1.0)
        _, grad = gicp_cost_and_gradient(
            source.points, source.covariances, target, pairs, pose
        )
        fd = np.zeros(6)
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            cp, _ = gicp_cost_and_gradient(
                source.points, source.covariances, target, pairs, retract(pose, d)
            )
            cm, _ = gicp_cost_and_gradient(
                source.points, source.covariances, target, pairs, retract(pose, -d)
            )
            fd[k] = (cp - cm) / (2 * h)
        assert np.abs(fd - grad).max() / max(1.0, np.abs(grad).max()) < 1e-5


def test_ndt_gradient_matches_finite_differences(room_cloud):
    rng = np.random.default_rng(23)
    grid = NdtGrid(room_cloud, 1.0)
    src = room_cloud.points[rng.choice(len(room_cloud), 400, replace=False)]
    h = 1e-6
    for _ in range(20):
        pose = Pose3(Rot3.exp(rng.uniform(-0.1, 0.1, 3)), rng.uniform(-0.2, 0.2, 3))
        assignment = grid.lookup(pose.transform(src))
        _, grad = ndt_cost_and_gradient(src, grid, assignment, pose)
        fd = np.zeros(6)
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            cp, _ = ndt_cost_and_gradient(src, grid, assignment, retract(pose, d))
            cm, _ = ndt_cost_and_gradient(src, grid, assignment, retract(pose, -d))
            fd[k] = (cp - cm) / (2 * h)
        assert np.abs(fd - grad).max() / max(1.0, np.abs(grad).max()) < 1e-5


# --- result structure ----------------------------------------------------------


def test_result_covariance_symmetric_psd(room_cloud):
    true = Pose3(Rot3.exp([0, 0, 0.03]), np.array([0.1, 0.05, 0.0]))
    source = PointCloud(0.0, true.inverse().transform(room_cloud.points))
    for params in (GICP, NDT):
        res = register(source, room_cloud, Pose3.identity(), params)
        cov = res.covariance
        np.testing.assert_allclose(cov, cov.T, atol=1e-12)
        assert np.linalg.eigvalsh(cov).min() >= 0.99e-8
        assert res.fitness >= 0


def test_ndt_grid_skips_sparse_voxels():
    rng = np.random.default_rng(29)
    dense = rng.uniform(0, 0.9, (200, 3))  # one voxel, many points
    sparse = np.array([[5.5, 5.5, 5.5], [5.6, 5.5, 5.5]])  # two points only
    grid = NdtGrid(PointCloud(0.0, np.vstack([dense, sparse])), 1.0)
    assert grid.lookup(np.array([[0.5, 0.5, 0.5]]))[0] >= 0
    assert grid.lookup(np.array([[5.5, 5.5, 5.5]]))[0] == -1
