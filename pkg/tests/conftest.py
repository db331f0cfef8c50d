"""Shared fixtures: a tiny hand-built dataset for ingest-level tests."""

import numpy as np
import pytest

from rislam.ply import write_ply


def write_scan(path, start_ns: int, points: np.ndarray, offsets: np.ndarray, duration: float):
    write_ply(
        path / f"{start_ns}.ply",
        {
            "x": points[:, 0],
            "y": points[:, 1],
            "z": points[:, 2],
            "time_offset": offsets,
        },
        comments=(f"sweep_duration {duration:.9f}",),
    )


CONFIG_TEXT = """\
# main parameters
c_min 0.5
c_max 100.0
r_input 0.1
r_align 0.2
d_max 0.3
r_submap 0.08
ell 4
delta_trans 1.0
delta_rot 0.392699
v_local 5
"""

CALIB_TEXT = """\
T_base_lidar:
  translation: [0.1, 0.0, 0.2]
  quaternion_wxyz: [1.0, 0.0, 0.0, 0.0]
T_base_gnss_antenna: [0.0, 0.0, 0.5]
gravity: 9.81
"""


def build_mini_dataset(root, n_scans=3, imu_rate=200.0, scan_period=0.1, with_gnss=True):
    """Stationary dataset: constant clouds, gravity-only IMU, fixed GNSS spot."""
    root.mkdir(parents=True, exist_ok=True)
    scans = root / "scans"
    scans.mkdir(exist_ok=True)
    rng = np.random.default_rng(0)
    base_ns = 1_700_000_000_000_000_000
    pts = rng.uniform(-5.0, 5.0, (64, 3)) + np.array([8.0, 0.0, 0.0])
    for i in range(n_scans):
        offs = np.linspace(0.0, scan_period * 0.99, len(pts))
        write_scan(scans, base_ns + int(i * scan_period * 1e9), pts, offs, scan_period)

    t_imu = np.arange(0.0, n_scans * scan_period + 0.05, 1.0 / imu_rate)
    with open(root / "imu.csv", "w") as f:
        for t in t_imu:
            f.write(f"{base_ns * 1e-9 + t:.9f}, 0, 0, 0, 0, 0, 9.81\n")

    if with_gnss:
        with open(root / "gnss.csv", "w") as f:
            for i in range(n_scans):
                t = base_ns * 1e-9 + i * scan_period
                f.write(f"{t:.9f}, 41.6563, -0.8790, 210.0, 1.0, 1.0, 4.0\n")

    (root / "calib.yaml").write_text(CALIB_TEXT)
    (root / "config").write_text(CONFIG_TEXT)
    return root


@pytest.fixture
def mini_dataset(tmp_path):
    return build_mini_dataset(tmp_path / "mini")


def structured_room(rng, n=2400, jitter=0.004):
    """Synthetic room: floor, two walls, and three boxes, lightly jittered.

    Rich in independent plane orientations, so rigid alignment is fully
    constrained. The whole room sits at a generic offset so that none of
    its planes coincides with a round-number voxel boundary.
    """
    per = n // 6
    pts = []
    # floor 10 x 8
    u = rng.uniform(0, 10, per)
    v = rng.uniform(0, 8, per)
    pts.append(np.column_stack([u, v, np.zeros(per)]))
    # wall x = 0
    u = rng.uniform(0, 8, per)
    v = rng.uniform(0, 2.5, per)
    pts.append(np.column_stack([np.zeros(per), u, v]))
    # wall y = 0
    u = rng.uniform(0, 10, per)
    v = rng.uniform(0, 2.5, per)
    pts.append(np.column_stack([u, np.zeros(per), v]))
    # boxes: axis-aligned, sampled on their vertical faces
    for cx, cy, s in ((3.0, 2.0, 0.8), (6.5, 5.0, 1.2), (8.5, 1.5, 0.6)):
        u = rng.uniform(-s / 2, s / 2, per)
        w = rng.uniform(0, 1.0, per)
        side = rng.integers(0, 4, per)
        x = np.where(side == 0, cx - s / 2, np.where(side == 1, cx + s / 2, cx + u))
        y = np.where(side < 2, cy + u, np.where(side == 2, cy - s / 2, cy + s / 2))
        pts.append(np.column_stack([x, y, w]))
    cloud = np.vstack(pts) + np.array([0.31, 0.47, 0.23])
    return cloud + rng.standard_normal(cloud.shape) * jitter
