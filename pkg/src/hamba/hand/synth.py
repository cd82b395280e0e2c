"""Synthetic hand crops with exact ground truth.

Poses are drawn from per-joint ranges biased toward flexion, the hand is
placed in front of the camera by rejection sampling, and the crop is rendered
as capsule silhouettes plus a colored Gaussian blob on every joint over a
smooth noise background.  Rendering favors learnability over realism.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from ..autodiff import no_record
from ..graph import NUM_JOINTS
from .kinematics import (FOCAL, IMAGE_SIZE, PRINCIPAL, forward_kinematics, load_template,
                         matrix_to_axis_angle, rodrigues)
from .params import HandParams, HandPrediction, reproject


class PlacementError(RuntimeError):
    """No valid camera placement was found."""


@dataclass(frozen=True)
class GenConfig:
    depth_range: tuple = (5.0, 9.0)        # camera translation z, meters
    center_jitter: tuple = (40.0, 30.0)    # max (row, col) offset of the joint centroid, px
    min_in_frame: float = 0.9
    max_attempts: int = 100
    blob_sigma: float = 3.0
    beta_clip: float = 3.0
    tilt: float = 0.5                       # max out-of-plane tilt of the palm, radians
    roll: float = 0.6                       # max in-plane rotation, radians


JOINT_COLORS = np.array([colorsys.hsv_to_rgb(j / NUM_JOINTS, 0.9, 1.0) for j in range(NUM_JOINTS)])
SKIN = np.array([0.85, 0.65, 0.55])


def _finger_axes(template) -> list[tuple[np.ndarray, np.ndarray]]:
    """(flexion axis, abduction axis) per finger in the rest frame."""
    normal = np.array([0.0, 0.0, 1.0])
    axes = []
    for base in (1, 5, 9, 13, 17):
        d = template.joints[base + 1] - template.joints[base]
        flex = np.cross(d, normal)
        axes.append((flex / np.linalg.norm(flex), normal))
    return axes


def sample_pose(rng: np.random.Generator, cfg: GenConfig = GenConfig()) -> np.ndarray:
    template = load_template()
    theta = np.zeros((16, 3))
    glob = (rodrigues(np.array([0.0, 0.0, rng.uniform(-cfg.roll, cfg.roll)]))
            @ rodrigues(np.array([rng.uniform(-cfg.tilt, cfg.tilt), 0.0, 0.0]))
            @ rodrigues(np.array([0.0, rng.uniform(-cfg.tilt, cfg.tilt), 0.0])))
    theta[0] = matrix_to_axis_angle(glob)
    for f, (flex_axis, abd_axis) in enumerate(_finger_axes(template)):
        thumb = f == 0
        mcp = -0.2 + 1.5 * rng.beta(2.0, 3.0) if not thumb else -0.1 + 0.9 * rng.beta(2.0, 2.0)
        abd = rng.uniform(-0.25, 0.25) if not thumb else rng.uniform(-0.4, 0.3)
        pip = 1.6 * rng.beta(1.5, 2.5) if not thumb else 1.0 * rng.beta(2.0, 2.0)
        dip = float(np.clip(0.65 * pip + rng.normal(0.0, 0.1), 0.0, 1.4))
        theta[1 + 3 * f] = mcp * flex_axis + abd * abd_axis
        theta[2 + 3 * f] = pip * flex_axis
        theta[3 + 3 * f] = dip * flex_axis
    return theta.reshape(-1)


def _segment_distance(pr, pc, a, b):
    """Pixel distances to 2-D segments a->b; a, b: (S, 2); returns (S, H, W)."""
    ab = b - a
    denom = np.maximum((ab ** 2).sum(-1), 1e-12)
    ar = pr[None] - a[:, 0, None, None]
    ac = pc[None] - a[:, 1, None, None]
    t = np.clip((ar * ab[:, 0, None, None] + ac * ab[:, 1, None, None]) / denom[:, None, None], 0, 1)
    dr = ar - t * ab[:, 0, None, None]
    dc = ac - t * ab[:, 1, None, None]
    return np.sqrt(dr * dr + dc * dc)


def _background(rng, h, w):
    pr, pc = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w, 3))
    for _ in range(4):
        fr, fc = rng.uniform(0.005, 0.04, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.2, size=3)
        img += amp * np.sin(fr * pr + fc * pc + phase)[..., None]
    return 0.35 + img + 0.03 * rng.standard_normal((h, w, 3))


def render(rng: np.random.Generator, joints2d: np.ndarray, cam_depth: float,
           cfg: GenConfig = GenConfig()) -> np.ndarray:
    template = load_template()
    h, w = IMAGE_SIZE
    img = _background(rng, h, w)
    pr, pc = np.mgrid[0:h, 0:w].astype(np.float64)
    child = np.arange(1, NUM_JOINTS)
    dist = _segment_distance(pr, pc, joints2d[template.parents[child]], joints2d[child])
    radius_px = FOCAL * template.bone_radius / cam_depth
    coverage = np.clip(radius_px[:, None, None] + 0.5 - dist, 0.0, 1.0).max(axis=0)
    img = img * (1 - coverage[..., None]) + coverage[..., None] * SKIN
    d2 = (pr[None] - joints2d[:, 0, None, None]) ** 2 + (pc[None] - joints2d[:, 1, None, None]) ** 2
    blobs = np.exp(-d2 / (2 * cfg.blob_sigma ** 2))
    img = img + np.einsum("jhw,jc->hwc", blobs, JOINT_COLORS)
    return img


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Per-channel zero mean, unit variance."""
    mu = img.mean(axis=(0, 1), keepdims=True)
    sd = img.std(axis=(0, 1), keepdims=True)
    return (img - mu) / np.maximum(sd, 1e-8)


def in_frame(joints2d: np.ndarray) -> np.ndarray:
    h, w = IMAGE_SIZE
    return ((joints2d[:, 0] >= 0) & (joints2d[:, 0] <= h - 1)
            & (joints2d[:, 1] >= 0) & (joints2d[:, 1] <= w - 1))


def synth_sample(rng: np.random.Generator, cfg: GenConfig = GenConfig()):
    """Draw one (normalized image, ground-truth HandPrediction) pair."""
    theta = sample_pose(rng, cfg)
    beta = np.clip(rng.standard_normal(10), -cfg.beta_clip, cfg.beta_clip)
    with no_record():
        j3, verts = forward_kinematics(theta, beta)
    joints3d, vertices = j3.data.copy(), verts.data.copy()
    centroid = joints3d.mean(axis=0)
    for _ in range(cfg.max_attempts):
        z = rng.uniform(*cfg.depth_range)
        target = np.array(PRINCIPAL) + rng.uniform(-1, 1, size=2) * np.array(cfg.center_jitter)
        xy = (target - np.array(PRINCIPAL)) * (z + centroid[2]) / FOCAL - centroid[:2]
        cam = np.array([xy[0], xy[1], z])
        if np.any(joints3d[:, 2] + z <= 0):
            continue
        joints2d = reproject(joints3d, cam)
        if in_frame(joints2d).mean() >= cfg.min_in_frame:
            break
    else:
        raise PlacementError(f"no valid placement after {cfg.max_attempts} attempts")
    image = normalize_image(render(rng, joints2d, z, cfg))
    gt = HandPrediction(HandParams(theta, beta, cam), joints3d, joints2d, vertices)
    return image, gt


def tight_bbox(joints2d: np.ndarray) -> np.ndarray:
    """(row_min, col_min, row_max, col_max) of the keypoints."""
    return np.concatenate([joints2d.min(axis=0), joints2d.max(axis=0)])
