"""Navigation state shared by de-skewing, preintegration, and odometry."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose3


@dataclass(frozen=True)
class NavState:
    """Pose of the body in the world, world-frame velocity, IMU biases."""

    pose: Pose3 = field(default_factory=Pose3.identity)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        for name in ("velocity", "gyro_bias", "accel_bias"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite {name}")
            object.__setattr__(self, name, v)
