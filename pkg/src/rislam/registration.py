"""Point-cloud registration: generalized ICP and NDT.

Both methods minimize a sum of Mahalanobis-type point costs over SE(3) and
report the aligned pose, a covariance (fitness-scaled inverse Gauss-Newton
Hessian), and a fitness score (mean squared correspondence error). Targets
can be prepared once and reused across registrations; the prepared model
holds the k-d tree / voxel Gaussians and is immutable.

Tangent convention: increments are (rotation, translation); rotation applies
on the right of the current estimate, translation additively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose3, Rot3
from .preprocess import PointCloud

COVARIANCE_EPSILON = 1e-3  # plane-regularized smallest eigenvalue
MIN_CORRESPONDENCES = 10
RESULT_COVARIANCE_FLOOR = 1e-8
NDT_MIN_POINTS_PER_VOXEL = 6


class DegenerateAlignment(RuntimeError):
    """Too little overlap to constrain the alignment."""


@dataclass(frozen=True)
class RegistrationParams:
    method: str = "GICP"
    r_align: float = 0.2
    d_max: float = 0.3
    max_iterations: int = 64
    trans_eps: float = 1e-4
    rot_eps: float = 1e-4
    k_neighbors: int = 20

    def __post_init__(self) -> None:
        if self.r_align <= 0 or self.d_max <= 0:
            raise ValueError("r_align and d_max must be > 0")
        if self.method not in ("GICP", "NDT"):
            raise ValueError(f"unknown registration method {self.method!r}")


@dataclass(frozen=True)
class RegistrationResult:
    T: Pose3
    covariance: np.ndarray  # 6x6, (rotation, translation)
    fitness: float
    iterations: int
    converged: bool
    inliers: int

    def __post_init__(self) -> None:
        if self.fitness < 0:
            raise ValueError("fitness must be >= 0")


def _batch_skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def estimate_point_covariances(cloud: PointCloud, k: int = 20) -> PointCloud:
    """Attach plane-regularized k-NN covariances to every point.

    The sample covariance of each point's k nearest neighbors is
    eigen-decomposed and its spectrum replaced by (eps, 1, 1), keeping the
    smallest direction (the local surface normal) tight.
    """
    pts = cloud.points
    if len(pts) < k:
        raise ValueError(f"need at least k={k} points, have {len(pts)}")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k, workers=-1)
    neigh = pts[idx]  # (N, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = centered.swapaxes(1, 2) @ centered / k
    _, vecs = np.linalg.eigh(cov)  # ascending
    # clamped spectrum (eps, 1, 1) only needs the normal direction; the
    # tangent pair is a degenerate subspace, so skip the reconstruction
    normal = vecs[:, :, 0]
    outer = normal[:, :, None] * normal[:, None, :]
    reg = np.eye(3) - (1.0 - COVARIANCE_EPSILON) * outer
    return PointCloud(cloud.timestamp, pts, reg, cloud.deskewed)


# ---------------------------------------------------------------------------
# Prepared targets


class GicpTarget:
    """Immutable GICP model of a target cloud: k-d tree + point covariances."""

    def __init__(self, cloud: PointCloud, k_neighbors: int = 20):
        if cloud.covariances is None:
            cloud = estimate_point_covariances(cloud, k_neighbors)
        self.points = cloud.points
        self.covariances = cloud.covariances
        self.tree = cKDTree(self.points)


class NdtGrid:
    """Per-voxel Gaussians of a target cloud at a fixed resolution.

    Keeps a k-d tree of the raw points as well; the optimizer works on the
    voxel Gaussians, the tree serves the point-level fitness score.
    """

    def __init__(self, cloud: PointCloud, resolution: float):
        if resolution <= 0:
            raise ValueError("resolution must be > 0")
        self.resolution = resolution
        pts = cloud.points
        self.tree = cKDTree(pts)
        keys = np.floor(pts / resolution).astype(np.int64)
        packed = (
            ((keys[:, 0] + (1 << 20)) << 42)
            | ((keys[:, 1] + (1 << 20)) << 21)
            | (keys[:, 2] + (1 << 20))
        )
        uniq, inverse, counts = np.unique(packed, return_inverse=True, return_counts=True)
        sums = np.zeros((len(uniq), 3))
        np.add.at(sums, inverse, pts)
        means = sums / counts[:, None]
        sq = np.zeros((len(uniq), 3, 3))
        centered = pts - means[inverse]
        np.add.at(sq, inverse, centered[:, :, None] * centered[:, None, :])
        keep = counts >= NDT_MIN_POINTS_PER_VOXEL
        means = means[keep]
        cov = sq[keep] / counts[keep][:, None, None]
        # floor small eigenvalues at 1% of the largest to avoid singular cells
        vals, vecs = np.linalg.eigh(cov)
        vals = np.maximum(vals, 0.01 * vals[:, 2:3])
        cov = np.einsum("nij,nj,nkj->nik", vecs, vals, vecs)
        self.keys = uniq[keep]
        self.means = means
        self.informations = np.linalg.inv(cov)

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Per-point index into the grid arrays; -1 for points in empty cells."""
        if len(self.keys) == 0:
            return np.full(len(points), -1)
        keys = np.floor(points / self.resolution).astype(np.int64)
        packed = (
            ((keys[:, 0] + (1 << 20)) << 42)
            | ((keys[:, 1] + (1 << 20)) << 21)
            | (keys[:, 2] + (1 << 20))
        )
        pos = np.clip(np.searchsorted(self.keys, packed), 0, len(self.keys) - 1)
        return np.where(self.keys[pos] == packed, pos, -1)


# ---------------------------------------------------------------------------
# GICP cost, gradient, and normal equations


def gicp_correspondences(
    source_world: np.ndarray, target: GicpTarget, d_max: float
) -> tuple[np.ndarray, np.ndarray]:
    """(source indices, target indices) of pairs within d_max."""
    dist, idx = target.tree.query(source_world, k=1, workers=-1)
    mask = dist <= d_max
    return np.nonzero(mask)[0], idx[mask]


def gicp_cost_and_gradient(
    src_pts: np.ndarray,
    src_covs: np.ndarray,
    target: GicpTarget,
    pairs: tuple[np.ndarray, np.ndarray],
    pose: Pose3,
) -> tuple[float, np.ndarray]:
    """Exact cost and gradient for fixed correspondences.

    The gradient includes the term from rotating the source covariances, so
    it is the true derivative of the cost, not just the Gauss-Newton part.
    """
    si, ti = pairs
    R = pose.rotation.matrix()
    p = src_pts[si]
    q = target.points[ti]
    Cp = src_covs[si]
    x = p @ R.T + pose.translation
    r = q - x
    C = target.covariances[ti] + np.einsum("ij,njk,lk->nil", R, Cp, R)
    W = np.linalg.inv(C)
    u = np.einsum("nij,nj->ni", W, r)
    cost = float(np.einsum("ni,ni->", r, u))
    a = u @ R  # R^T u per pair
    Cpa = np.einsum("nij,nj->ni", Cp, a)
    grad_rot = -2.0 * np.cross(p, a).sum(axis=0) + 2.0 * np.cross(a, Cpa).sum(axis=0)
    grad_trans = -2.0 * u.sum(axis=0)
    return cost, np.concatenate([grad_rot, grad_trans])


def _gicp_normal_equations(
    src_pts: np.ndarray,
    src_covs: np.ndarray,
    target: GicpTarget,
    pairs: tuple[np.ndarray, np.ndarray],
    pose: Pose3,
) -> tuple[float, np.ndarray, np.ndarray]:
    """(cost, H, g): Gauss-Newton Hessian and exact gradient."""
    si, ti = pairs
    R = pose.rotation.matrix()
    p = src_pts[si]
    q = target.points[ti]
    Cp = src_covs[si]
    x = p @ R.T + pose.translation
    r = q - x
    C = target.covariances[ti] + np.einsum("ij,njk,lk->nil", R, Cp, R)
    W = np.linalg.inv(C)
    u = np.einsum("nij,nj->ni", W, r)
    cost = float(np.einsum("ni,ni->", r, u))

    J = np.zeros((len(si), 3, 6))
    J[:, :, 0:3] = np.einsum("ij,njk->nik", R, _batch_skew(p))
    J[:, 0, 3] = -1.0
    J[:, 1, 4] = -1.0
    J[:, 2, 5] = -1.0
    H = np.einsum("nia,nij,njb->ab", J, W, J)
    a = u @ R
    Cpa = np.einsum("nij,nj->ni", Cp, a)
    grad_rot = -2.0 * np.cross(p, a).sum(axis=0) + 2.0 * np.cross(a, Cpa).sum(axis=0)
    grad_trans = -2.0 * u.sum(axis=0)
    g = np.concatenate([grad_rot, grad_trans])
    return cost, H, g


# ---------------------------------------------------------------------------
# NDT cost, gradient, and normal equations


def ndt_cost_and_gradient(
    src_pts: np.ndarray,
    grid: NdtGrid,
    assignment: np.ndarray,
    pose: Pose3,
) -> tuple[float, np.ndarray]:
    """Cost and exact gradient for a fixed point-to-voxel assignment."""
    mask = assignment >= 0
    slot = assignment[mask]
    p = src_pts[mask]
    R = pose.rotation.matrix()
    x = p @ R.T + pose.translation
    r = x - grid.means[slot]
    W = grid.informations[slot]
    u = np.einsum("nij,nj->ni", W, r)
    cost = float(np.einsum("ni,ni->", r, u))
    a = u @ R
    grad_rot = 2.0 * np.cross(p, a).sum(axis=0)
    grad_trans = 2.0 * u.sum(axis=0)
    return cost, np.concatenate([grad_rot, grad_trans])


def _ndt_normal_equations(
    src_pts: np.ndarray, grid: NdtGrid, assignment: np.ndarray, pose: Pose3
) -> tuple[float, np.ndarray, np.ndarray]:
    mask = assignment >= 0
    slot = assignment[mask]
    p = src_pts[mask]
    R = pose.rotation.matrix()
    x = p @ R.T + pose.translation
    r = x - grid.means[slot]
    W = grid.informations[slot]
    u = np.einsum("nij,nj->ni", W, r)
    cost = float(np.einsum("ni,ni->", r, u))
    J = np.zeros((len(p), 3, 6))
    J[:, :, 0:3] = -np.einsum("ij,njk->nik", R, _batch_skew(p))
    J[:, 0, 3] = 1.0
    J[:, 1, 4] = 1.0
    J[:, 2, 5] = 1.0
    H = np.einsum("nia,nij,njb->ab", J, W, J)
    g = np.einsum("nia,ni->a", J, 2.0 * u)
    return cost, H, g


def _retract(pose: Pose3, delta: np.ndarray) -> Pose3:
    return Pose3(
        pose.rotation.compose(Rot3.exp(delta[0:3])), pose.translation + delta[3:6]
    )


MAX_ROTATION_STEP = 0.25  # rad per iteration


def _capped(delta: np.ndarray, max_translation: float) -> np.ndarray:
    """Scale a tangent step down so no single iteration jumps out of the
    neighborhood where the current correspondences are meaningful."""
    scale = min(
        1.0,
        max_translation / max(np.linalg.norm(delta[3:6]), 1e-300),
        MAX_ROTATION_STEP / max(np.linalg.norm(delta[0:3]), 1e-300),
    )
    return delta * scale


def _floored_covariance(H: np.ndarray, fitness: float) -> np.ndarray:
    cov = (fitness if fitness > 0 else 1.0) * np.linalg.inv(
        H + np.eye(6) * RESULT_COVARIANCE_FLOOR
    )
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vals = np.maximum(vals, RESULT_COVARIANCE_FLOOR)
    return vecs @ np.diag(vals) @ vecs.T


def _register_gicp(
    source: PointCloud, target: GicpTarget, guess: Pose3, params: RegistrationParams
) -> RegistrationResult:
    if source.covariances is None:
        if len(source.points) < params.k_neighbors:
            raise DegenerateAlignment(
                f"{len(source.points)} points cannot support "
                f"k={params.k_neighbors} surface models"
            )
        source = estimate_point_covariances(source, params.k_neighbors)
    src_pts = source.points
    src_covs = source.covariances

    pose = guess
    pairs = gicp_correspondences(pose.transform(src_pts), target, params.d_max)
    if len(pairs[0]) < MIN_CORRESPONDENCES:
        raise DegenerateAlignment(
            f"{len(pairs[0])} correspondences at the initial guess "
            f"(need {MIN_CORRESPONDENCES})"
        )
    converged = False
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        cost, H, g = _gicp_normal_equations(src_pts, src_covs, target, pairs, pose)
        if not np.isfinite(cost):
            raise RuntimeError("non-finite registration cost")
        delta = _capped(
            np.linalg.solve(H + np.eye(6) * 1e-12, -0.5 * g), 0.5 * params.d_max
        )
        # backtracking line search on the fixed-correspondence cost; pairs are
        # re-associated only after a step is accepted, so losing overlap can
        # never masquerade as a cost decrease
        step = 1.0
        accepted = False
        for _ in range(12):
            cand = _retract(pose, step * delta)
            cand_cost, _ = gicp_cost_and_gradient(
                src_pts, src_covs, target, pairs, cand
            )
            if cand_cost <= cost:
                accepted = True
                break
            step *= 0.5
        inc = step * delta
        small = (
            np.linalg.norm(inc[3:6]) < params.trans_eps
            and np.linalg.norm(inc[0:3]) < params.rot_eps
        )
        if not accepted:
            converged = small
            break
        pose = cand
        pairs = gicp_correspondences(pose.transform(src_pts), target, params.d_max)
        if len(pairs[0]) < MIN_CORRESPONDENCES:
            break
        if small:
            converged = True
            break

    si, ti = pairs
    if len(si) < MIN_CORRESPONDENCES:
        converged = False
        cov = np.eye(6) / RESULT_COVARIANCE_FLOOR  # essentially uninformative
        fitness = float(params.d_max**2)
    else:
        _, H, _ = _gicp_normal_equations(src_pts, src_covs, target, pairs, pose)
        resid = target.points[ti] - pose.transform(src_pts[si])
        fitness = float(np.mean(np.sum(resid**2, axis=1)))
        cov = _floored_covariance(H, fitness)
    return RegistrationResult(pose, cov, fitness, iterations, converged, len(si))


def _register_ndt(
    source: PointCloud, target: NdtGrid, guess: Pose3, params: RegistrationParams
) -> RegistrationResult:
    src_pts = source.points
    pose = guess
    assignment = target.lookup(pose.transform(src_pts))
    matched = int((assignment >= 0).sum())
    if matched < MIN_CORRESPONDENCES:
        raise DegenerateAlignment(
            f"{matched} points in populated voxels at the initial guess "
            f"(need {MIN_CORRESPONDENCES})"
        )
    converged = False
    iterations = 0
    degenerate = False
    while iterations < params.max_iterations and not degenerate:
        # solve the fixed-assignment subproblem to convergence with LM, then
        # reassign points to voxels; the alternation has the true pose as a
        # fixed point and each inner step minimizes one well-defined objective
        cycle_start = pose
        lam = 1e-4
        cost, H, g = _ndt_normal_equations(src_pts, target, assignment, pose)
        if not np.isfinite(cost):
            raise RuntimeError("non-finite registration cost")
        while iterations < params.max_iterations:
            iterations += 1
            accepted = False
            delta = np.zeros(6)
            while lam <= 1e8:
                damped = H + lam * np.diag(np.diag(H))
                delta = np.linalg.solve(damped + np.eye(6) * 1e-12, -0.5 * g)
                cand = _retract(pose, delta)
                cand_cost, _ = ndt_cost_and_gradient(src_pts, target, assignment, cand)
                if cand_cost <= cost:
                    accepted = True
                    lam = max(lam / 10.0, 1e-10)
                    break
                lam *= 10.0
            if not accepted:
                break
            pose = cand
            cost, H, g = _ndt_normal_equations(src_pts, target, assignment, pose)
            if (
                np.linalg.norm(delta[3:6]) < params.trans_eps
                and np.linalg.norm(delta[0:3]) < params.rot_eps
            ):
                break
        assignment = target.lookup(pose.transform(src_pts))
        if int((assignment >= 0).sum()) < MIN_CORRESPONDENCES:
            degenerate = True
            break
        moved = pose.inverse().compose(cycle_start)
        if (
            np.linalg.norm(moved.translation) < params.trans_eps
            and moved.rotation.angle() < params.rot_eps
        ):
            converged = True
            break

    # point-level fitness: squared distances to the nearest raw target points
    dist, _ = target.tree.query(pose.transform(src_pts), k=1, workers=-1)
    near = dist <= params.d_max
    inliers = int(near.sum())
    if inliers < MIN_CORRESPONDENCES:
        converged = False
        cov = np.eye(6) / RESULT_COVARIANCE_FLOOR
        fitness = float(params.d_max**2)
    else:
        fitness = float(np.mean(dist[near] ** 2))
        _, H, _ = _ndt_normal_equations(src_pts, target, assignment, pose)
        cov = _floored_covariance(H, fitness)
    return RegistrationResult(pose, cov, fitness, iterations, converged, inliers)


def prepare_target(cloud: PointCloud, params: RegistrationParams):
    """Build the reusable registration model for `cloud` under `params`."""
    if params.method == "GICP":
        return GicpTarget(cloud, params.k_neighbors)
    return NdtGrid(cloud, params.r_align)


def register(
    source: PointCloud,
    target,
    initial_guess: Pose3,
    params: RegistrationParams,
) -> RegistrationResult:
    """Align `source` onto `target` (PointCloud or prepared model).

    Returns the target<-source transform with covariance and fitness;
    raises DegenerateAlignment when the initial guess yields almost no
    correspondences.
    """
    if len(source) == 0:
        raise DegenerateAlignment("empty source cloud")
    if isinstance(target, PointCloud):
        if len(target) == 0:
            raise DegenerateAlignment("empty target cloud")
        target = prepare_target(target, params)
    if isinstance(target, GicpTarget):
        return _register_gicp(source, target, initial_guess, params)
    if isinstance(target, NdtGrid):
        return _register_ndt(source, target, initial_guess, params)
    raise TypeError(f"unsupported target type {type(target)!r}")
