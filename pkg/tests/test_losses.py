from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hamba.autodiff import ParamStore, Tape, Tensor, backward, ops
from hamba.hand.kinematics import forward_kinematics
from hamba.losses import Annotations, Discriminators, LossWeights, discriminator_loss, generator_adv_loss, \
    total_loss
from hamba.optim import OptimizerState, adamw_step


def _gt(bsz=2, seed=0):
    rng = np.random.default_rng(seed)
    theta = rng.normal(0, 0.3, (bsz, 48))
    beta = rng.normal(size=(bsz, 10))
    joints3d = forward_kinematics(theta, beta, with_vertices=False)[0].data
    joints2d = rng.uniform(20, 170, (bsz, 21, 2))
    return Annotations(joints2d=joints2d, joints3d=joints3d, theta=theta, beta=beta)


def _pred_from(gt: Annotations, **changes):
    fields = {k: Tensor(getattr(gt, k).copy()) for k in ("theta", "beta", "joints3d", "joints2d")}
    for k, v in changes.items():
        fields[k] = Tensor(v)
    return SimpleNamespace(**fields)


class ConstantDisc:
    def __init__(self, value):
        self.value = value

    def __call__(self, theta, beta):
        shape = (theta.shape[0], 17)
        zero = ops.broadcast_to(ops.mul(ops.sum(theta, axis=1, keepdims=True), 0.0), shape)
        return ops.add(zero, Tensor(np.full(shape, self.value)))


def test_exact_prediction_and_fooled_discriminators_give_zero():
    gt = _gt()
    loss, terms = total_loss(_pred_from(gt), gt, disc=ConstantDisc(1.0))
    assert float(loss.data) == 0.0
    assert all(v == 0.0 for v in terms.values())


def test_single_joint_off_by_one_meter():
    gt = _gt(bsz=1)
    j3d = gt.joints3d.copy()
    j3d[0, 5] += [1.0, 0.0, 0.0]
    loss, terms = total_loss(_pred_from(gt, joints3d=j3d), gt)
    assert float(loss.data) == pytest.approx(0.05, abs=1e-12)
    assert terms["kp3d"] == pytest.approx(1.0)


def test_zero_weights_give_zero():
    gt = _gt()
    rng = np.random.default_rng(3)
    pred = _pred_from(gt, theta=rng.normal(size=(2, 48)), joints2d=rng.normal(size=(2, 21, 2)))
    loss, _ = total_loss(pred, gt, LossWeights.zeros(), disc=ConstantDisc(0.3))
    assert float(loss.data) == 0.0


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(kp3d=-1.0)


def test_standard_weights_are_defaults():
    w = LossWeights()
    assert (w.kp3d, w.kp2d, w.theta, w.beta, w.adv) == (0.05, 0.01, 0.001, 0.0005, 0.0005)


def test_masking_changes_only_the_3d_term():
    gt = _gt(seed=1)
    rng = np.random.default_rng(4)
    pred = _pred_from(gt, joints3d=gt.joints3d + rng.normal(0, 0.01, gt.joints3d.shape),
                      joints2d=gt.joints2d + 3.0, theta=gt.theta + 0.1)
    _, on = total_loss(pred, gt)
    masked = Annotations(gt.joints2d, gt.joints3d, gt.theta, gt.beta, has_3d=np.array([True, False]))
    _, off = total_loss(pred, masked)
    assert off["kp3d"] < on["kp3d"]
    for term in ("kp2d", "theta", "beta", "adv"):
        assert off[term] == on[term]


def test_kp2d_in_crop_normalized_units():
    gt = _gt(bsz=1)
    _, terms = total_loss(_pred_from(gt, joints2d=gt.joints2d + np.array([256.0, 0.0])), gt)
    assert terms["kp2d"] == pytest.approx(21.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_every_term_is_non_negative(seed):
    gt = _gt(seed=seed % 50)
    rng = np.random.default_rng(seed)
    pred = _pred_from(gt, theta=rng.normal(size=(2, 48)), beta=rng.normal(size=(2, 10)),
                      joints3d=rng.normal(size=(2, 21, 3)), joints2d=rng.normal(100, 50, (2, 21, 2)))
    _, terms = total_loss(pred, gt, disc=Discriminators(rng, hidden=8))
    assert all(v >= 0.0 for v in terms.values())


def test_shape_mismatch_rejected():
    gt = _gt()
    with pytest.raises(ops.ShapeError):
        total_loss(_pred_from(gt, theta=np.zeros((2, 45))), gt)


# ---------------------------------------------------------------- discriminators

def test_discriminators_output_shape_and_range():
    disc = Discriminators(np.random.default_rng(0))
    scores = disc(Tensor(np.random.default_rng(1).normal(size=(3, 48))), Tensor(np.zeros((3, 10))))
    assert scores.shape == (3, 17)
    assert np.all((scores.data > 0) & (scores.data < 1))


def test_perfect_discriminator_gives_zero():
    class Perfect:
        def __call__(self, theta, beta):
            label = 1.0 if theta.data[0, 0] > 0 else 0.0
            return Tensor(np.full((theta.shape[0], 17), label))
    real = np.ones((2, 48))
    fake = -np.ones((2, 48))
    assert float(discriminator_loss(Perfect(), real, np.zeros((2, 10)), fake, np.zeros((2, 10))).data) == 0.0


def test_constant_half_discriminator_costs_8_5_per_sample():
    half = ConstantDisc(0.5)
    loss = discriminator_loss(half, np.zeros((4, 48)), np.zeros((4, 10)), np.zeros((4, 48)), np.zeros((4, 10)))
    assert float(loss.data) == pytest.approx(17 * (0.25 + 0.25))


def test_discriminator_loss_is_detached_from_generator():
    store = ParamStore()
    w = store.add("gen.w", np.random.default_rng(2).normal(size=(48,)))
    disc = Discriminators(np.random.default_rng(3), hidden=8)
    with Tape() as tape:
        fake_theta = ops.broadcast_to(w, (2, 48))
        loss = discriminator_loss(disc, np.zeros((2, 48)), np.zeros((2, 10)), fake_theta,
                                  Tensor(np.zeros((2, 10))))
    backward(loss, tape, store)
    assert np.all(w.grad == 0.0)
    assert any(np.any(p.grad != 0) for _, p in disc.store.items())


def test_generator_adversarial_gradient_is_nonzero():
    store = ParamStore()
    theta = store.add("theta", np.random.default_rng(4).normal(0, 0.3, (2, 48)))
    beta = store.add("beta", np.random.default_rng(5).normal(size=(2, 10)))
    disc = Discriminators(np.random.default_rng(6), hidden=8)
    with Tape() as tape:
        loss = generator_adv_loss(disc, theta, beta)
    backward(loss, tape, store)
    assert np.any(theta.grad != 0) and np.any(beta.grad != 0)


def test_empty_batch_rejected():
    disc = Discriminators(np.random.default_rng(0), hidden=4)
    with pytest.raises(ValueError):
        discriminator_loss(disc, np.zeros((0, 48)), np.zeros((0, 10)), np.zeros((2, 48)), np.zeros((2, 10)))


# ---------------------------------------------------------------- optimizer

def _scalar_store(value=0.0, grad=1.0):
    store = ParamStore()
    w = store.add("w", np.array([value]))
    w.grad[...] = grad
    return store, w


def test_first_step_is_minus_lr():
    store, w = _scalar_store()
    adamw_step(store, OptimizerState(lr=1e-5, weight_decay=1e-4))
    assert w.data[0] == pytest.approx(-1e-5, rel=1e-6)
    assert w.grad[0] == 0.0


def test_zero_grads_without_decay_leave_parameters_unchanged():
    store, w = _scalar_store(value=0.7, grad=0.0)
    for _ in range(3):
        adamw_step(store, OptimizerState(weight_decay=0.0))
    assert w.data[0] == 0.7


def test_zero_learning_rate_freezes_parameters():
    store, w = _scalar_store(value=0.3, grad=2.0)
    adamw_step(store, OptimizerState(lr=0.0))
    assert w.data[0] == 0.3


def test_without_decay_update_equals_adam():
    rng = np.random.default_rng(7)
    store = ParamStore()
    w = store.add("w", rng.normal(size=5))
    state = OptimizerState(lr=0.01, weight_decay=0.0)
    ref, m, v = w.data.copy(), np.zeros(5), np.zeros(5)
    for t in range(1, 6):
        g = rng.normal(size=5)
        w.grad[...] = g
        adamw_step(store, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(w.data, ref, rtol=1e-13)


def test_decay_is_decoupled():
    store, w = _scalar_store(value=2.0, grad=0.0)
    adamw_step(store, OptimizerState(lr=0.1, weight_decay=0.5))
    assert w.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_convex_quadratic_decreases():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(6, 6))
    q = a @ a.T + np.eye(6)
    store = ParamStore()
    x = store.add("x", rng.normal(size=6))
    state = OptimizerState(lr=0.05, weight_decay=0.0)
    losses = []
    for _ in range(100):
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, ops.linear(x, Tensor(q))))
        losses.append(float(loss.data))
        backward(loss, tape, store)
        adamw_step(store, state)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_missing_gradient_rejected():
    store, w = _scalar_store()
    w.grad = None
    with pytest.raises(ValueError):
        adamw_step(store, OptimizerState())
