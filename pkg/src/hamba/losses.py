"""Training objective: keypoint, parameter and adversarial terms, plus pose discriminators."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .autodiff import ParamStore, Tensor, ops
from .hand.kinematics import IMAGE_SIZE, NUM_POSE, NUM_SHAPE
from .nn import uniform_fan_in

NUM_ROTATIONS = NUM_POSE // 3               # 16: global + 15 articulated
NUM_DISCRIMINATORS = NUM_ROTATIONS + 1      # + one over (theta, beta)


@dataclass(frozen=True)
class LossWeights:
    kp2d: float = 0.01
    kp3d: float = 0.05
    theta: float = 0.001
    beta: float = 0.0005
    adv: float = 0.0005

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class Annotations:
    """A batch of ground truth with per-sample availability masks.

    2-D joints are always present; 3-D joints and hand parameters may be
    missing for some samples (their mask entries are False).
    """

    joints2d: np.ndarray                  # (B, 21, 2) pixels
    joints3d: Optional[np.ndarray] = None  # (B, 21, 3) meters
    theta: Optional[np.ndarray] = None     # (B, 48)
    beta: Optional[np.ndarray] = None      # (B, 10)
    has_3d: Optional[np.ndarray] = None    # (B,) bool
    has_params: Optional[np.ndarray] = None

    def __post_init__(self):
        bsz = self.joints2d.shape[0]
        if self.has_3d is None:
            self.has_3d = np.full(bsz, self.joints3d is not None)
        if self.has_params is None:
            self.has_params = np.full(bsz, self.theta is not None and self.beta is not None)
        self.has_3d = np.asarray(self.has_3d, dtype=bool)
        self.has_params = np.asarray(self.has_params, dtype=bool)

    @property
    def batch_size(self) -> int:
        return self.joints2d.shape[0]


def _masked_batch_mean(per_sample: Tensor, mask: np.ndarray) -> Tensor:
    """Sum of masked per-sample values divided by the full batch size."""
    weights = mask.astype(np.float64) / len(mask)
    return ops.sum(ops.mul(per_sample, Tensor(weights)))


def _check_shape(name, pred: Tensor, target):
    if target is not None and tuple(pred.shape) != tuple(np.shape(target)):
        raise ops.ShapeError(f"total_loss.{name}", pred.shape, np.shape(target))


def keypoint_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray, scale: float = 1.0) -> Tensor:
    diff = ops.abs(ops.sub(pred, Tensor(np.asarray(target, dtype=np.float64))))
    per_sample = ops.sum(ops.reshape(diff, (diff.shape[0], -1)), axis=1)
    return ops.mul(_masked_batch_mean(per_sample, mask), scale)


def squared_l2(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    per_sample = ops.sum(ops.square(ops.sub(pred, Tensor(np.asarray(target, dtype=np.float64)))), axis=1)
    return _masked_batch_mean(per_sample, mask)


def total_loss(pred, gt: Annotations, weights: LossWeights = LossWeights(),
               disc: Optional["Discriminators"] = None):
    """Weighted sum of the 3-D/2-D keypoint, parameter and adversarial terms.

    ``pred`` carries batched Tensors ``theta``, ``beta``, ``joints3d`` and
    ``joints2d``.  2-D keypoints are compared in crop-normalized units
    (pixels / 256).  Returns (scalar Tensor, {term: float}).
    """
    for name in ("joints2d", "joints3d", "theta", "beta"):
        _check_shape(name, getattr(pred, name), getattr(gt, name))
    zero = Tensor(np.array(0.0))
    all_rows = np.ones(gt.batch_size, dtype=bool)
    terms = {
        "kp2d": keypoint_l1(pred.joints2d, gt.joints2d, all_rows, 1.0 / IMAGE_SIZE[0]),
        "kp3d": keypoint_l1(pred.joints3d, gt.joints3d, gt.has_3d) if gt.joints3d is not None else zero,
        "theta": squared_l2(pred.theta, gt.theta, gt.has_params) if gt.theta is not None else zero,
        "beta": squared_l2(pred.beta, gt.beta, gt.has_params) if gt.beta is not None else zero,
        "adv": generator_adv_loss(disc, pred.theta, pred.beta) if disc is not None else zero,
    }
    total = None
    for name, value in terms.items():
        weighted = ops.mul(value, getattr(weights, name))
        total = weighted if total is None else ops.add(total, weighted)
    return total, {name: float(v.data) for name, v in terms.items()} | {"total": float(total.data)}


# ---------------------------------------------------------------- discriminators

class Discriminators:
    """17 two-hidden-layer MLPs with sigmoid outputs.

    Heads 0..15 each see one joint's flattened 3x3 rotation matrix; head 16
    sees the 58-value (theta, beta) concatenation.  The per-joint heads are
    evaluated together with batched weights.
    """

    def __init__(self, rng: np.random.Generator, hidden: int = 32, store: Optional[ParamStore] = None):
        self.store = store if store is not None else ParamStore()
        k, h = NUM_ROTATIONS, hidden
        add = self.store.add
        self.j_w1 = add("joint.w1", uniform_fan_in(rng, (k, 9, h), 9))
        self.j_b1 = add("joint.b1", uniform_fan_in(rng, (k, h), 9))
        self.j_w2 = add("joint.w2", uniform_fan_in(rng, (k, h, h), h))
        self.j_b2 = add("joint.b2", uniform_fan_in(rng, (k, h), h))
        self.j_w3 = add("joint.w3", uniform_fan_in(rng, (k, h, 1), h))
        self.j_b3 = add("joint.b3", uniform_fan_in(rng, (k, 1), h))
        d_in = NUM_POSE + NUM_SHAPE
        self.p_w1 = add("pose.w1", uniform_fan_in(rng, (d_in, h), d_in))
        self.p_b1 = add("pose.b1", uniform_fan_in(rng, (h,), d_in))
        self.p_w2 = add("pose.w2", uniform_fan_in(rng, (h, h), h))
        self.p_b2 = add("pose.b2", uniform_fan_in(rng, (h,), h))
        self.p_w3 = add("pose.w3", uniform_fan_in(rng, (h, 1), h))
        self.p_b3 = add("pose.b3", uniform_fan_in(rng, (1,), h))

    @staticmethod
    def _batched_layer(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        y = ops.einsum("bki,kio->bko", x, w)
        return ops.add(y, ops.broadcast_to(b, y.shape))

    def __call__(self, theta: Tensor, beta: Tensor) -> Tensor:
        """(B, 48), (B, 10) -> (B, 17) probabilities."""
        theta, beta = ops.as_tensor(theta), ops.as_tensor(beta)
        bsz = theta.shape[0]
        rots = ops.axis_angle_to_matrix(ops.reshape(theta, (bsz, NUM_ROTATIONS, 3)))
        x = ops.reshape(rots, (bsz, NUM_ROTATIONS, 9))
        x = ops.relu(self._batched_layer(x, self.j_w1, self.j_b1))
        x = ops.relu(self._batched_layer(x, self.j_w2, self.j_b2))
        joint_logits = ops.reshape(self._batched_layer(x, self.j_w3, self.j_b3), (bsz, NUM_ROTATIONS))
        p = ops.concat([theta, beta], axis=1)
        p = ops.relu(ops.linear(p, self.p_w1, self.p_b1))
        p = ops.relu(ops.linear(p, self.p_w2, self.p_b2))
        pose_logit = ops.linear(p, self.p_w3, self.p_b3)
        return ops.sigmoid(ops.concat([joint_logits, pose_logit], axis=1))


def generator_adv_loss(disc: Discriminators, theta: Tensor, beta: Tensor) -> Tensor:
    """Batch mean of sum_k (D_k(theta, beta) - 1)^2."""
    scores = disc(theta, beta)
    return ops.mul(ops.sum(ops.square(ops.sub(scores, 1.0))), 1.0 / scores.shape[0])


def discriminator_loss(disc: Discriminators, real_theta, real_beta, fake_theta, fake_beta) -> Tensor:
    """Least-squares objective: real -> 1, fake -> 0, summed over heads, averaged over the batch.

    The fake batch is detached, so no gradient reaches the generator.
    """
    real_theta, fake_theta = np.asarray(getattr(real_theta, "data", real_theta)), np.asarray(
        getattr(fake_theta, "data", fake_theta))
    real_beta, fake_beta = np.asarray(getattr(real_beta, "data", real_beta)), np.asarray(
        getattr(fake_beta, "data", fake_beta))
    if len(real_theta) == 0 or len(fake_theta) == 0:
        raise ValueError("discriminator_loss: empty batch")
    real = disc(Tensor(real_theta), Tensor(real_beta))
    fake = disc(Tensor(fake_theta), Tensor(fake_beta))
    real_term = ops.mul(ops.sum(ops.square(ops.sub(real, 1.0))), 1.0 / real.shape[0])
    fake_term = ops.mul(ops.sum(ops.square(fake)), 1.0 / fake.shape[0])
    return ops.add(real_term, fake_term)
