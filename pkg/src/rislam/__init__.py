"""Range-inertial graph SLAM.

LiDAR/IMU/GNSS fusion built around two factor-graph stages: a sliding-window
lidar-inertial odometry frontend and a global pose-graph mapping backend with
voting-based loop-closure validation.
"""

from .geometry import Pose3, Rot3, Twist6, interpolate

__all__ = ["Pose3", "Rot3", "Twist6", "interpolate"]

__version__ = "0.1.0"
