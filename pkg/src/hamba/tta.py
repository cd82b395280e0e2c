"""Test-time augmentation over a fixed grid of in-plane rotations and scales."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor, no_record
from .hand.kinematics import FOCAL, PRINCIPAL, matrix_to_axis_angle, perspective_project, rodrigues, rotation_z
from .hand.params import HandParams, HandPrediction

TTA_ANGLES_DEG = tuple(range(-90, 91, 10))          # 19 rotations
TTA_SCALES = (0.7, 0.8, 0.9, 1.0, 1.1)               # 5 scales


def tta_grid():
    return [(float(a), s) for a in TTA_ANGLES_DEG for s in TTA_SCALES]


def warp_image(image: np.ndarray, angle_deg: float, scale: float) -> np.ndarray:
    """Rotate by ``angle_deg`` and zoom by ``scale`` about the principal point (bilinear, zero fill).

    A point at offset d from the principal point moves to s * R(angle) d, in
    (row, col) coordinates, matching a camera roll about the optical axis.
    """
    h, w = image.shape[:2]
    center = np.array(PRINCIPAL)
    rot = rotation_z(np.deg2rad(angle_deg))[:2, :2]
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    offsets = np.stack([rows - center[0], cols - center[1]], axis=-1)
    src = offsets @ rot / scale + center            # R^T d / s for each target pixel
    r, c = src[..., 0], src[..., 1]
    r0, c0 = np.floor(r).astype(int), np.floor(c).astype(int)
    fr, fc = r - r0, c - c0
    out = np.zeros_like(image, dtype=np.float64)
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                       (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        out[ok] += wt[ok, None] * image[rr[ok], cc[ok]]
    return out


def _field(out, name: str, ndim: int) -> np.ndarray:
    value = getattr(out, name)
    arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
    return arr[0] if arr.ndim == ndim + 1 else arr


def unwarp_prediction(out, angle_deg: float, scale: float) -> dict:
    """Map one augmented prediction back to the original crop's camera frame."""
    back = rotation_z(-np.deg2rad(angle_deg))
    theta = _field(out, "theta", 1).copy()
    cam = _field(out, "cam", 1)
    theta[:3] = matrix_to_axis_angle(back @ rodrigues(theta[:3]))
    cam = back @ cam
    cam = np.array([cam[0], cam[1], cam[2] * scale])
    return {
        "theta": theta,
        "beta": _field(out, "beta", 1),
        "cam": cam,
        "joints3d": _field(out, "joints3d", 2) @ back.T,
        "vertices": _field(out, "vertices", 2) @ back.T,
    }


def _mean_rotation(mats: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(mats.mean(axis=0))
    fix = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
    return u @ fix @ vt


def tta_predict(model: Callable, image, warp: Optional[Callable] = None, grid=None) -> HandPrediction:
    """Average ``model`` over all rotation/scale variants of ``image``.

    ``model(x)`` returns an object with ``theta``, ``beta``, ``cam``,
    ``joints3d`` and ``vertices`` (Tensors or arrays, optionally with a
    leading batch axis of 1).  ``warp(image, angle_deg, scale)`` builds each
    variant.  Geometry is averaged in the original frame and the 2-D joints
    are re-projected from the averaged joints and camera.
    """
    warp = warp or warp_image
    grid = grid or tta_grid()
    results = []
    with no_record():
        for angle, scale in grid:
            results.append(unwarp_prediction(model(warp(image, angle, scale)), angle, scale))
    theta = np.mean([r["theta"] for r in results], axis=0)
    theta[:3] = matrix_to_axis_angle(_mean_rotation(np.stack([rodrigues(r["theta"][:3]) for r in results])))
    beta = np.mean([r["beta"] for r in results], axis=0)
    cam = np.mean([r["cam"] for r in results], axis=0)
    joints3d = np.mean([r["joints3d"] for r in results], axis=0)
    vertices = np.mean([r["vertices"] for r in results], axis=0)
    with no_record():
        joints2d = perspective_project(Tensor(joints3d), FOCAL, Tensor(cam)).data
    return HandPrediction(HandParams(theta, beta, cam), joints3d, joints2d, vertices)
