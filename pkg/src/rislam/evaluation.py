"""Trajectory accuracy metrics.

Estimated and reference trajectories rarely share timestamps, and the
estimate lives in an arbitrary frame, so the absolute error metric is
computed in three steps: greedy nearest-timestamp association, closed-form
rigid alignment of the matched positions, then the RMSE of what remains.
Scale is fixed to one throughout; LiDAR trajectories are metric.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose3, Rot3

DEFAULT_ASSOCIATION_TOLERANCE = 0.02  # s, half a 10 Hz scan period


class EvaluationError(ValueError):
    """Raised when trajectories cannot be associated or aligned."""


@dataclass(frozen=True)
class Trajectory:
    """Time-sorted sequence of stamped poses."""

    times: np.ndarray
    poses: tuple[Pose3, ...]

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float).reshape(-1)
        if times.size != len(self.poses):
            raise ValueError("timestamp and pose counts differ")
        if times.size == 0:
            raise ValueError("empty trajectory")
        if not np.all(np.isfinite(times)):
            raise ValueError("non-finite timestamp")
        if np.any(np.diff(times) < 0):
            raise ValueError("timestamps not sorted")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def transformed(self, transform: Pose3) -> "Trajectory":
        return Trajectory(
            self.times, tuple(transform.compose(p) for p in self.poses)
        )


@dataclass(frozen=True)
class TrajectoryPair:
    """An estimate, the reference it is judged against, and the match window."""

    estimated: Trajectory
    reference: Trajectory
    tolerance: float = DEFAULT_ASSOCIATION_TOLERANCE

    def __post_init__(self) -> None:
        if self.tolerance <= 0.0:
            raise ValueError("tolerance must be positive")


def associate(
    est_times: np.ndarray, ref_times: np.ndarray, tolerance: float
) -> list[tuple[int, int]]:
    """Match timestamps greedily by increasing gap, each index used once.

    Returns (estimate index, reference index) pairs sorted by estimate
    index. Raises when no pair lies within the tolerance.
    """
    est_times = np.asarray(est_times, dtype=float).reshape(-1)
    ref_times = np.asarray(ref_times, dtype=float).reshape(-1)
    if est_times.size == 0 or ref_times.size == 0:
        raise EvaluationError("cannot associate an empty trajectory")

    # candidate pairs: for each estimate stamp, reference stamps within
    # the window around its insertion point
    order = []
    lo = np.searchsorted(ref_times, est_times - tolerance, side="left")
    hi = np.searchsorted(ref_times, est_times + tolerance, side="right")
    for i in range(est_times.size):
        for j in range(lo[i], hi[i]):
            order.append((abs(est_times[i] - ref_times[j]), i, j))
    order.sort()

    pairs = []
    est_used = np.zeros(est_times.size, dtype=bool)
    ref_used = np.zeros(ref_times.size, dtype=bool)
    for _, i, j in order:
        if est_used[i] or ref_used[j]:
            continue
        est_used[i] = True
        ref_used[j] = True
        pairs.append((i, j))
    if not pairs:
        raise EvaluationError(
            "no timestamp pairs within %.3f s" % tolerance
        )
    pairs.sort()
    return pairs


def umeyama_align(source: np.ndarray, target: np.ndarray) -> Pose3:
    """Closed-form rigid transform mapping source points onto target points.

    Minimizes the summed squared distances ||target_i - (R source_i + t)||^2
    via the SVD of the cross-covariance, with the determinant sign corrected
    so the result is a proper rotation. Needs at least three non-collinear
    pairs; anything less leaves a rotation axis unconstrained.
    """
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    dst = np.asarray(target, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise EvaluationError("point sets differ in size")
    n = src.shape[0]
    if n < 3:
        raise EvaluationError("need at least 3 point pairs, got %d" % n)

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    spread = np.linalg.svd(cs, compute_uv=False)
    if spread[1] <= 1e-9 * max(spread[0], 1.0):
        raise EvaluationError("degenerate point configuration (collinear)")

    cov = cd.T @ cs / n
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u @ vt) < 0.0:
        s[2, 2] = -1.0
    rot = Rot3.from_matrix(u @ s @ vt)
    return Pose3(rot, mu_d - rot.rotate(mu_s))


def ate_residuals(pair: TrajectoryPair) -> np.ndarray:
    """Per-pair translational errors after association and rigid alignment."""
    pairs = associate(pair.estimated.times, pair.reference.times, pair.tolerance)
    est = pair.estimated.positions()[[i for i, _ in pairs]]
    ref = pair.reference.positions()[[j for _, j in pairs]]
    transform = umeyama_align(est, ref)
    aligned = est @ transform.rotation.matrix().T + transform.translation
    return np.linalg.norm(ref - aligned, axis=1)


def ate_rmse(pair: TrajectoryPair) -> float:
    """Root mean squared absolute trajectory error, in meters."""
    r = ate_residuals(pair)
    return float(np.sqrt(np.mean(r**2)))


def ate_statistics(pair: TrajectoryPair) -> dict[str, float]:
    """RMSE, mean, median, and max of the aligned translational errors."""
    r = ate_residuals(pair)
    return {
        "rmse": float(np.sqrt(np.mean(r**2))),
        "mean": float(np.mean(r)),
        "median": float(np.median(r)),
        "max": float(np.max(r)),
        "pairs": float(r.size),
    }


def read_trajectory(path: Path | str) -> Trajectory:
    """Read a text trajectory: t tx ty tz qx qy qz qw per line, # comments."""
    times = []
    poses = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise EvaluationError(
                    "%s:%d: expected 8 fields, got %d"
                    % (path, lineno, len(fields))
                )
            vals = [float(f) for f in fields]
            times.append(vals[0])
            qx, qy, qz, qw = vals[4:8]
            poses.append(
                Pose3(Rot3(np.array([qw, qx, qy, qz])), np.array(vals[1:4]))
            )
    if not times:
        raise EvaluationError("%s: no trajectory rows" % path)
    return Trajectory(np.array(times), tuple(poses))


def write_trajectory(path: Path | str, trajectory: Trajectory) -> None:
    """Write the t tx ty tz qx qy qz qw text form read by read_trajectory."""
    with open(path, "w", encoding="utf-8") as handle:
        for t, pose in zip(trajectory.times, trajectory.poses):
            qw, qx, qy, qz = pose.rotation.q
            tx, ty, tz = pose.translation
            handle.write(
                "%.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n"
                % (t, tx, ty, tz, qx, qy, qz, qw)
            )
