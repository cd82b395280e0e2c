import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from hamba.hand.kinematics import forward_kinematics
from hamba.hand.params import HandParams, HandPrediction, reproject
from hamba.metrics import (SimilarityTransform, auc, evaluate, f_score, pa_mpjpe, pa_mpvpe, pck, pck_curve,
                           procrustes_align)

from oracles import five_mm_configuration, horn_similarity_residuals, procrustes_grid_oracle, riemann_auc


def _random_similarity(rng):
    return (rng.uniform(0.2, 5.0), Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(),
            rng.normal(0, 2, 3))


def test_identity_alignment():
    gt = np.random.default_rng(0).normal(size=(21, 3))
    aligned, tf = procrustes_align(gt, gt)
    np.testing.assert_allclose(aligned, gt, atol=1e-12)
    assert tf.scale == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(tf.translation, 0.0, atol=1e-12)


def test_exact_similarity_is_recovered():
    rng = np.random.default_rng(1)
    gt = rng.normal(size=(21, 3))
    r0 = Rotation.random(random_state=2).as_matrix()
    pred = 2.0 * gt @ r0.T + np.array([1.0, 2.0, 3.0])
    aligned, tf = procrustes_align(pred, gt)
    assert np.abs(aligned - gt).max() < 1e-9
    assert tf.scale == pytest.approx(0.5)


def test_reflection_is_not_used():
    gt = np.random.default_rng(3).normal(size=(10, 3))
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    _, tf = procrustes_align(mirrored, gt)
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0)


def test_four_point_example_matches_grid_search():
    gt = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]])
    r0 = Rotation.from_rotvec([0.3, -0.5, 0.9]).as_matrix()
    pred = 1.3 * gt @ r0.T + np.array([0.5, -1.0, 2.0])
    pred[2] += 0.6 * np.array([1.0, -1.0, 0.5])
    aligned, _ = procrustes_align(pred, gt)
    residual = ((aligned - gt) ** 2).sum()
    oracle = procrustes_grid_oracle(pred, gt, step_deg=2.0)
    assert residual <= oracle
    assert abs(residual - oracle) <= 0.02 * oracle


def test_alignment_beats_random_similarities():
    rng = np.random.default_rng(16)
    gt = rng.normal(0, 0.05, (21, 3))
    pred = 1.4 * (gt + rng.normal(0, 0.01, gt.shape)) @ Rotation.random(random_state=17).as_matrix().T + 0.3
    aligned, tf = procrustes_align(pred, gt)
    best = ((aligned - gt) ** 2).sum()
    for _ in range(1000):
        s, r, t = _random_similarity(rng)
        # perturb the optimum as well as sampling globally, so some candidates land close to it
        if rng.random() < 0.5:
            s = tf.scale * rng.uniform(0.9, 1.1)
            r = Rotation.from_rotvec(rng.normal(0, 0.05, 3)).as_matrix() @ tf.rotation
            t = tf.translation + rng.normal(0, 0.01, 3)
        assert best <= ((s * pred @ r.T + t - gt) ** 2).sum()


def test_degenerate_inputs_rejected():
    with pytest.raises(ValueError):
        procrustes_align(np.ones((5, 3)), np.random.default_rng(0).normal(size=(5, 3)))
    with pytest.raises(ValueError):
        procrustes_align(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        procrustes_align(np.zeros((4, 3)), np.zeros((5, 3)))


def test_similarity_transform_validation():
    with pytest.raises(ValueError):
        SimilarityTransform(1.0, np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        SimilarityTransform(0.0, np.eye(3), np.zeros(3))
    assert SimilarityTransform.identity().apply(np.ones((2, 3))).tolist() == np.ones((2, 3)).tolist()


def test_similarity_copy_has_zero_error():
    rng = np.random.default_rng(4)
    gt = rng.normal(0, 0.05, (21, 3))
    s, r, t = _random_similarity(rng)
    assert pa_mpjpe(s * gt @ r.T + t, gt) < 1e-9


def test_every_aligned_point_off_by_five_mm():
    aligned, gt = five_mm_configuration()
    rng = np.random.default_rng(5)
    s, r, t = _random_similarity(rng)
    pred = s * aligned @ r.T + t
    assert pa_mpjpe(pred, gt) == pytest.approx(5.0, abs=1e-9)


def test_random_perturbation_matches_independent_alignment():
    rng = np.random.default_rng(6)
    for _ in range(20):
        gt = rng.normal(0, 0.05, (21, 3))
        s, r, t = _random_similarity(rng)
        pred = s * (gt + rng.normal(0, 0.004, gt.shape)) @ r.T + t
        ref = 1000.0 * horn_similarity_residuals(pred, gt).mean()
        assert pa_mpjpe(pred, gt) == pytest.approx(ref, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_pa_mpjpe_invariant_to_similarity_of_prediction(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(0, 0.05, (21, 3))
    pred = gt + rng.normal(0, 0.01, gt.shape)
    s, r, t = _random_similarity(rng)
    assert pa_mpjpe(s * pred @ r.T + t, gt) == pytest.approx(pa_mpjpe(pred, gt), rel=1e-8, abs=1e-9)


def test_pa_mpvpe_on_mesh_vertices():
    rng = np.random.default_rng(7)
    _, verts = forward_kinematics(rng.normal(0, 0.3, 48), np.zeros(10))
    s, r, t = _random_similarity(rng)
    assert pa_mpvpe(s * verts.data @ r.T + t, verts.data) < 1e-9


# ---------------------------------------------------------------- F-score

def test_f_score_identical_clouds():
    v = np.random.default_rng(8).normal(0, 0.05, (778, 3))
    for tau in (0.1, 5.0, 15.0):
        assert f_score(v, v, tau) == 1.0


def test_f_score_far_clouds():
    v = np.random.default_rng(9).normal(0, 0.05, (50, 3))
    assert f_score(v + 10.0, v, 15.0) == 0.0


def test_f_score_half_matched():
    gt = np.arange(10, dtype=float)[:, None] * np.array([0.1, 0.0, 0.0])     # 10 cm spacing
    pred = gt.copy()
    pred[5:] += np.array([0.0, 1.0, 0.0])                                    # 1 m away from everything
    assert f_score(pred, gt, 15.0) == pytest.approx(0.5)


def test_f_score_uses_millimetre_threshold():
    gt = np.zeros((1, 3))
    pred = np.array([[0.004, 0.0, 0.0]])
    assert f_score(pred, gt, 5.0) == 1.0
    assert f_score(pred, gt, 3.0) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_f_score_symmetric_and_monotone(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 0.05, (60, 3))
    b = a + rng.normal(0, 0.01, a.shape)
    taus = [1.0, 3.0, 5.0, 10.0, 15.0, 30.0]
    scores = [f_score(a, b, t) for t in taus]
    assert scores == [f_score(b, a, t) for t in taus]
    assert all(x <= y for x, y in zip(scores, scores[1:]))


# ---------------------------------------------------------------- PCK

BOX = np.array([10.0, 20.0, 110.0, 70.0])     # 100 rows x 50 cols; normalizer 100 px


def test_pck_exact_predictions():
    gt = np.random.default_rng(10).uniform(0, 100, (21, 2))
    for tau in (0.01, 0.1, 0.5):
        assert pck(gt, gt, BOX, tau) == 1.0


def test_pck_straddles_threshold():
    gt = np.random.default_rng(11).uniform(0, 100, (21, 2))
    angles = np.random.default_rng(12).uniform(0, 2 * np.pi, 21)
    pred = gt + 20.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    assert pck(pred, gt, BOX, 0.15) == 0.0
    assert pck(pred, gt, BOX, 0.25) == 1.0


def test_pck_mixed_count():
    gt = np.zeros((21, 2))
    pred = np.zeros((21, 2))
    pred[7:, 0] = 30.0
    pred[:7, 1] = 4.0
    assert pck(pred, gt, BOX, 0.1) == pytest.approx(1 / 3)


def test_pck_visibility_mask_and_errors():
    gt = np.zeros((21, 2))
    pred = np.zeros((21, 2))
    pred[:10] = 50.0
    visible = np.arange(21) >= 10
    assert pck(pred, gt, BOX, 0.1, visible=visible) == 1.0
    with pytest.raises(ValueError):
        pck(pred, gt, [0, 0, 0, 10], 0.1)
    with pytest.raises(ValueError):
        pck(pred, gt, BOX, 0.0)


def test_pck_curve_monotone():
    errors = np.random.default_rng(13).uniform(0, 60, 100)
    curve = pck_curve(errors, np.linspace(0, 50, 101))
    assert np.all(np.diff(curve) >= 0)


def test_pck_monotone_in_threshold():
    rng = np.random.default_rng(18)
    gt = rng.uniform(0, 100, (21, 2))
    pred = gt + rng.normal(0, 10, gt.shape)
    values = [pck(pred, gt, BOX, t) for t in (0.01, 0.05, 0.1, 0.15, 0.3, 1.0)]
    assert all(x <= y for x, y in zip(values, values[1:]))


# ---------------------------------------------------------------- AUC

def test_auc_zero_error():
    pts = np.random.default_rng(14).normal(size=(21, 3))
    assert auc(pts, pts) == 1.0


def test_auc_constant_25mm():
    gt = np.zeros((21, 3))
    pred = gt + np.array([0.025, 0.0, 0.0])
    assert auc(pred, gt) == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_auc_matches_fine_riemann_sum(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(21, 3))
    pred = gt + rng.normal(0, 0.02, (21, 3))
    errors = 1000 * np.linalg.norm(pred - gt, axis=1)
    assert abs(auc(pred, gt) - riemann_auc(errors)) <= 0.005


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_auc_between_extreme_pck_values(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(21, 3))
    pred = gt + rng.normal(0, 0.03, (21, 3))
    errors = 1000 * np.linalg.norm(pred - gt, axis=1)
    curve = pck_curve(errors, np.linspace(0, 50, 101))
    assert curve.min() - 1e-12 <= auc(pred, gt) <= curve.max() + 1e-12


# ---------------------------------------------------------------- report

def _prediction(theta, beta, cam):
    j, v = forward_kinematics(theta, beta)
    return HandPrediction(HandParams(theta, beta, cam), j.data, reproject(j.data, cam), v.data)


def test_evaluate_perfect_predictions():
    rng = np.random.default_rng(15)
    preds = [_prediction(rng.normal(0, 0.3, 48), rng.normal(size=10), np.array([0, 0, 7.0])) for _ in range(3)]
    report = evaluate(preds, preds)
    assert report.pa_mpjpe < 1e-9 and report.pa_mpvpe < 1e-9
    assert report.f5 == report.f15 == 1.0
    assert report.auc_j == pytest.approx(1.0, abs=1e-12) and report.auc_v == pytest.approx(1.0, abs=1e-12)
    assert all(v == 1.0 for v in report.pck.values())
    data = json.loads(report.to_text())
    assert data["count"] == 3 and set(data["pck"]) == {"0.05", "0.1", "0.15"}


def test_evaluate_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        evaluate([], [])
