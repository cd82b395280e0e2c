"""A simplified kinematic hand with MANO-compatible parameter and output sizes.

Pose is 16 axis-angle rotations (index 0 is the global orientation, then three
articulated joints per finger), shape is a 10-vector that rescales the 20 bones
through a fixed basis, and the surface is 778 vertices on per-bone capsules
rigidly attached to their bone frames.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ..autodiff import Tensor, ops
from ..graph import FINGER_BASES, NUM_JOINTS, hand_edges

NUM_POSE = 48
NUM_SHAPE = 10
NUM_CAM = 3
NUM_VERTS = 778
NUM_BONES = 20
FOCAL = 5000.0
IMAGE_SIZE = (256, 192)   # (rows, cols)
PRINCIPAL = (128.0, 96.0)
SHAPE_GAIN = 0.05
RING_SEGMENTS = 6


def _parse_matrices(text: str) -> dict:
    mats, name, rows, shape = {}, None, [], None
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("version"):
            continue
        if line.startswith("["):
            if name is not None:
                mats[name] = np.array(rows, dtype=np.float64).reshape(shape)
            parts = line.strip("[]").split()
            name, shape, rows = parts[0], (int(parts[1]), int(parts[2])), []
            continue
        rows.append([float(v) for v in line.split()])
    if name is not None:
        mats[name] = np.array(rows, dtype=np.float64).reshape(shape)
    return mats


@dataclass(frozen=True)
class HandTemplate:
    joints: np.ndarray          # (21, 3) rest pose
    parents: np.ndarray         # (21,)
    bone_radius: np.ndarray     # (20,)
    ring_count: np.ndarray      # (20,)
    shape_basis: np.ndarray     # (20, 10)
    # capsule surface, derived
    vertex_bone: np.ndarray     # (778,) bone index of each vertex
    vertex_axial: np.ndarray    # (778,) position along the bone, 0 at parent, 1 at child
    vertex_offset: np.ndarray   # (778, 3) fixed offset not scaled by bone length
    faces: np.ndarray           # (F, 3) triangle indices

    @property
    def bones(self) -> np.ndarray:
        """(20, 3) rest bone vectors, child minus parent."""
        child = np.arange(1, NUM_JOINTS)
        return self.joints[child] - self.joints[self.parents[child]]


def _perpendicular_frame(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(d @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u1 = np.cross(d, ref)
    u1 /= np.linalg.norm(u1)
    return u1, np.cross(d, u1)


def _build_capsules(joints, parents, radius, rings):
    bones_v, axial, offset, faces = [], [], [], []
    base = 0
    for k in range(NUM_BONES):
        child = k + 1
        vec = joints[child] - joints[parents[child]]
        d = vec / np.linalg.norm(vec)
        u1, u2 = _perpendicular_frame(vec)
        r, nr = radius[k], int(rings[k])
        # start pole, rings, end pole
        axial.append(0.0)
        offset.append(-r * d)
        for i in range(nr):
            t = i / (nr - 1)
            for s in range(RING_SEGMENTS):
                phi = 2 * np.pi * s / RING_SEGMENTS
                axial.append(t)
                offset.append(r * (np.cos(phi) * u1 + np.sin(phi) * u2))
        axial.append(1.0)
        offset.append(r * d)
        count = RING_SEGMENTS * nr + 2
        bones_v.extend([k] * count)

        def ring(i, s):
            return base + 1 + i * RING_SEGMENTS + (s % RING_SEGMENTS)

        for s in range(RING_SEGMENTS):
            faces.append((base, ring(0, s + 1), ring(0, s)))
        for i in range(nr - 1):
            for s in range(RING_SEGMENTS):
                a, b = ring(i, s), ring(i, s + 1)
                c, e = ring(i + 1, s), ring(i + 1, s + 1)
                faces.append((a, b, e))
                faces.append((a, e, c))
        end = base + count - 1
        for s in range(RING_SEGMENTS):
            faces.append((end, ring(nr - 1, s), ring(nr - 1, s + 1)))
        base += count
    return (np.array(bones_v), np.array(axial), np.array(offset), np.array(faces, dtype=np.int64))


def parse_template(text: str) -> HandTemplate:
    mats = _parse_matrices(text)
    joints = mats["joints"]
    par = np.full(NUM_JOINTS, -1)
    for p, c in hand_edges():
        par[c] = p
    radius = mats["bone_radius"].reshape(-1)
    rings = mats["ring_count"].reshape(-1).astype(int)
    vb, va, vo, faces = _build_capsules(joints, par, radius, rings)
    if vb.size != NUM_VERTS:
        raise ValueError(f"template yields {vb.size} vertices, expected {NUM_VERTS}")
    return HandTemplate(joints=joints, parents=par, bone_radius=radius, ring_count=rings,
                        shape_basis=mats["shape_basis"], vertex_bone=vb, vertex_axial=va,
                        vertex_offset=vo, faces=faces)


@functools.lru_cache(maxsize=1)
def load_template() -> HandTemplate:
    text = resources.files("hamba.hand").joinpath("data/hand_template_v1.txt").read_text()
    return parse_template(text)


def pose_index(joint: int) -> int:
    """Index (0..15) of the rotation applied at ``joint``, or -1 for fingertips."""
    if joint == 0:
        return 0
    finger, seg = divmod(joint - 1, 4)
    return -1 if seg == 3 else 1 + 3 * finger + seg


def bone_lengths_scale(beta: np.ndarray, template: HandTemplate = None) -> np.ndarray:
    template = template or load_template()
    return 1.0 + SHAPE_GAIN * np.asarray(beta) @ template.shape_basis.T


def _check_finite(*tensors):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise ValueError("forward_kinematics: non-finite inputs")


def forward_kinematics(theta: Tensor, beta: Tensor, template: HandTemplate = None,
                       with_vertices: bool = True):
    """Pose a (B, 48) / (B, 10) batch (or unbatched vectors).

    Returns joints (B, 21, 3) and vertices (B, 778, 3) in meters, wrist-rooted.
    """
    template = template or load_template()
    theta, beta = ops.as_tensor(theta), ops.as_tensor(beta)
    _check_finite(theta, beta)
    squeeze = theta.ndim == 1
    if squeeze:
        theta = ops.reshape(theta, (1, NUM_POSE))
        beta = ops.reshape(beta, (1, NUM_SHAPE))
    if theta.shape[1:] != (NUM_POSE,) or beta.shape[1:] != (NUM_SHAPE,) or theta.shape[0] != beta.shape[0]:
        raise ops.ShapeError("forward_kinematics", theta.shape, beta.shape)
    bsz = theta.shape[0]

    rot_local = ops.axis_angle_to_matrix(ops.reshape(theta, (bsz, 16, 3)))
    scale = ops.add(ops.linear(beta, Tensor(template.shape_basis.T * SHAPE_GAIN)), 1.0)
    bones = ops.einsum("bk,kd->bkd", scale, Tensor(template.bones))      # (B, 20, 3)

    frames = {0: rot_local[:, 0]}
    pos = {0: ops.broadcast_to(Tensor(template.joints[0]), (bsz, 3))}
    for child in range(1, NUM_JOINTS):
        parent = int(template.parents[child])
        step = ops.einsum("bij,bj->bi", frames[parent], bones[:, child - 1])
        pos[child] = ops.add(pos[parent], step)
        k = pose_index(child)
        if k >= 0:
            frames[child] = ops.einsum("bij,bjk->bik", frames[parent], rot_local[:, k])
    joints = ops.stack([pos[j] for j in range(NUM_JOINTS)], axis=1)
    if squeeze:
        joints_out = ops.reshape(joints, (NUM_JOINTS, 3))
    else:
        joints_out = joints
    if not with_vertices:
        return joints_out, None

    bone_parent = template.parents[1:]
    bone_frames = ops.stack([frames[int(p)] for p in bone_parent], axis=1)   # (B, 20, 3, 3)
    vb = template.vertex_bone
    local = ops.add(
        ops.mul(bones[:, vb], Tensor(np.broadcast_to(template.vertex_axial[None, :, None],
                                                     (bsz, NUM_VERTS, 3)))),
        Tensor(np.broadcast_to(template.vertex_offset, (bsz, NUM_VERTS, 3))))
    rotated = ops.einsum("bvij,bvj->bvi", bone_frames[:, vb], local)
    origin = joints[:, bone_parent[vb]]
    verts = ops.add(origin, rotated)
    if squeeze:
        verts = ops.reshape(verts, (NUM_VERTS, 3))
    return joints_out, verts


class BehindCameraError(ValueError):
    pass


def perspective_project(points: Tensor, focal: float, cam: Tensor) -> Tensor:
    """Pinhole projection of (..., N, 3) points translated by ``cam`` (..., 3).

    Output coordinates are (row, col) pixels around the principal point
    (128, 96) of the 256 x 192 crop.
    """
    points, cam = ops.as_tensor(points), ops.as_tensor(cam)
    if points.shape[-1] != 3 or cam.shape != points.shape[:-2] + (3,):
        raise ops.ShapeError("perspective_project", points.shape, cam.shape)
    cam_b = ops.broadcast_to(ops.reshape(cam, cam.shape[:-1] + (1, 3)), points.shape)
    p = ops.add(points, cam_b)
    depth = p.data[..., 2]
    if np.any(~np.isfinite(depth)) or np.any(depth <= 0):
        raise BehindCameraError("perspective_project: point at or behind the camera plane")
    z = ops.broadcast_to(p[..., 2:3], p.shape[:-1] + (2,))
    uv = ops.mul(ops.div(p[..., 0:2], z), focal)
    offset = np.broadcast_to(np.array(PRINCIPAL), uv.shape)
    return ops.add(uv, Tensor(offset))


# numpy helpers used outside the autodiff path

def rodrigues(v: np.ndarray) -> np.ndarray:
    return ops.axis_angle_to_matrix(Tensor(np.asarray(v, dtype=np.float64))).data


def matrix_to_axis_angle(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rodrigues` for (..., 3, 3) rotation matrices."""
    r = np.asarray(r, dtype=np.float64)
    cos = np.clip((np.trace(r, axis1=-2, axis2=-1) - 1) / 2, -1.0, 1.0)
    angle = np.arccos(cos)
    w = np.stack([r[..., 2, 1] - r[..., 1, 2], r[..., 0, 2] - r[..., 2, 0],
                  r[..., 1, 0] - r[..., 0, 1]], axis=-1)
    sin = np.sin(angle)
    out = np.empty(r.shape[:-2] + (3,))
    small = sin > 1e-6
    out[small] = (angle[small] / (2 * sin[small]))[..., None] * w[small]
    near_zero = (~small) & (cos > 0)
    out[near_zero] = 0.5 * w[near_zero]
    near_pi = (~small) & (cos <= 0)
    if np.any(near_pi):
        rp = r[near_pi]
        diag = np.diagonal(rp, axis1=-2, axis2=-1)
        axis = np.sqrt(np.clip((diag + 1) / 2, 0, None))
        k = np.argmax(axis, axis=-1)
        for i in range(rp.shape[0]):
            col = rp[i][:, k[i]] + np.eye(3)[k[i]]
            axis[i] = col / np.linalg.norm(col)
        out[near_pi] = axis * angle[near_pi][..., None]
    return out


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


__all__ = [
    "FINGER_BASES", "FOCAL", "IMAGE_SIZE", "NUM_CAM", "NUM_POSE", "NUM_SHAPE", "NUM_VERTS",
    "PRINCIPAL", "BehindCameraError", "HandTemplate", "forward_kinematics", "load_template",
    "matrix_to_axis_angle", "perspective_project", "rodrigues", "rotation_z",
]
