from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import FOCAL, NUM_CAM, NUM_POSE, NUM_SHAPE, NUM_VERTS, perspective_project
from ..autodiff import Tensor, no_record


@dataclass
class HandParams:
    theta: np.ndarray   # (48,) axis-angle, radians; entries 0..2 are the global orientation
    beta: np.ndarray    # (10,) shape coefficients
    cam: np.ndarray     # (3,) camera translation, meters

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(NUM_POSE)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(NUM_SHAPE)
        self.cam = np.asarray(self.cam, dtype=np.float64).reshape(NUM_CAM)
        for name in ("theta", "beta", "cam"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"HandParams.{name} has non-finite values")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.beta, self.cam])


@dataclass
class HandPrediction:
    params: HandParams
    joints3d: np.ndarray   # (21, 3) meters, wrist-rooted
    joints2d: np.ndarray   # (21, 2) pixels, (row, col)
    vertices: np.ndarray   # (778, 3) meters

    def __post_init__(self):
        if self.vertices.shape != (NUM_VERTS, 3):
            raise ValueError(f"vertices must be ({NUM_VERTS}, 3), got {self.vertices.shape}")


def reproject(joints3d: np.ndarray, cam: np.ndarray) -> np.ndarray:
    with no_record():
        return perspective_project(Tensor(joints3d), FOCAL, Tensor(cam)).data
