"""Evaluation metrics: similarity alignment, aligned position errors, F-score, PCK and AUC.

3-D inputs are in meters and reported errors in millimeters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))


def procrustes_align(pred: np.ndarray, gt: np.ndarray):
    """Least-squares similarity alignment of ``pred`` onto ``gt`` (both N x 3).

    Returns (aligned pred, SimilarityTransform).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"procrustes_align: shapes {pred.shape} and {gt.shape} must both be (N, 3)")
    if pred.shape[0] < 3:
        raise ValueError("procrustes_align: need at least 3 points")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p, g = pred - mu_p, gt - mu_g
    var_p = (p ** 2).sum()
    if var_p <= 1e-24 or (g ** 2).sum() <= 1e-24:
        raise ValueError("procrustes_align: degenerate point set (all points coincide)")
    u, sig, vt = np.linalg.svd(g.T @ p)
    fix = np.ones(3)
    fix[2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = (u * fix) @ vt
    scale = float((sig * fix).sum() / var_p)
    if scale <= 0:
        raise ValueError("procrustes_align: degenerate point set (non-positive scale)")
    tf = SimilarityTransform(scale, rot, mu_g - scale * rot @ mu_p)
    return tf.apply(pred), tf


def _per_point_error_mm(pred, gt) -> np.ndarray:
    aligned, _ = procrustes_align(pred, gt)
    return 1000.0 * np.linalg.norm(aligned - np.asarray(gt, dtype=np.float64), axis=-1)


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean joint distance after similarity alignment, mm."""
    return float(_per_point_error_mm(pred, gt).mean())


def pa_mpvpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean vertex distance after similarity alignment, mm."""
    return float(_per_point_error_mm(pred, gt).mean())


def _nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d2 = (src ** 2).sum(1)[:, None] - 2 * src @ dst.T + (dst ** 2).sum(1)[None]
    return np.sqrt(np.maximum(d2.min(axis=1), 0.0))


def f_score(pred_v: np.ndarray, gt_v: np.ndarray, tau_mm: float) -> float:
    """Harmonic mean of precision and recall at distance threshold ``tau_mm`` (inputs in meters)."""
    pred_v = np.asarray(pred_v, dtype=np.float64)
    gt_v = np.asarray(gt_v, dtype=np.float64)
    if len(pred_v) == 0 or len(gt_v) == 0:
        raise ValueError("f_score: empty point set")
    tau = tau_mm / 1000.0
    precision = float((_nearest_distances(pred_v, gt_v) <= tau).mean())
    recall = float((_nearest_distances(gt_v, pred_v) <= tau).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def pck(pred2d, gt2d, bbox, tau_frac: float, visible=None) -> float:
    """Fraction of keypoints within ``tau_frac * max(box width, height)`` of the truth.

    ``pred2d``/``gt2d`` are (J, 2) or (B, J, 2); ``bbox`` is (row_min, col_min,
    row_max, col_max) per sample; ``visible`` optionally selects joints.
    """
    if tau_frac <= 0:
        raise ValueError("pck: threshold must be positive")
    pred2d = np.asarray(pred2d, dtype=np.float64)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    if pred2d.shape != gt2d.shape:
        raise ValueError(f"pck: shapes {pred2d.shape} and {gt2d.shape} differ")
    if pred2d.ndim == 2:
        pred2d, gt2d = pred2d[None], gt2d[None]
    box = np.asarray(bbox, dtype=np.float64).reshape(-1, 4)
    extent = box[:, 2:] - box[:, :2]
    if np.any(extent <= 0):
        raise ValueError("pck: zero-area bounding box")
    norm = extent.max(axis=1)
    hit = np.linalg.norm(pred2d - gt2d, axis=-1) <= tau_frac * norm[:, None]
    mask = np.ones(hit.shape, dtype=bool) if visible is None else np.broadcast_to(
        np.asarray(visible, dtype=bool).reshape(-1, hit.shape[1]), hit.shape)
    if not mask.any():
        raise ValueError("pck: no keypoints selected")
    return float(hit[mask].mean())


def pck_curve(errors_mm: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    errors_mm = np.asarray(errors_mm).ravel()
    return (errors_mm[None, :] <= np.asarray(thresholds)[:, None]).mean(axis=1)


def auc(pred3d: np.ndarray, gt3d: np.ndarray, lo: float = 0.0, hi: float = 50.0) -> float:
    """Normalized area under the 3-D PCK curve on [lo, hi] mm.

    The PCK curve is a step function of the threshold, so the area is taken
    in closed form: each point contributes the fraction of the range lying
    above its error.
    """
    err = 1000.0 * np.linalg.norm(np.asarray(pred3d, dtype=np.float64) - np.asarray(gt3d, dtype=np.float64),
                                  axis=-1)
    return float(np.clip((hi - err) / (hi - lo), 0.0, 1.0).mean())


@dataclass
class MetricsReport:
    pa_mpjpe: float
    pa_mpvpe: float
    f5: float
    f15: float
    auc_j: float
    auc_v: float
    pck: dict = field(default_factory=dict)
    count: int = 0
    config: dict = field(default_factory=dict)

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


PCK_THRESHOLDS = (0.05, 0.1, 0.15)


def evaluate(preds, gts) -> MetricsReport:
    """Aggregate metrics over paired HandPrediction sequences."""
    preds, gts = list(preds), list(gts)
    if not preds or len(preds) != len(gts):
        raise ValueError("evaluate: need equally many predictions and ground truths")
    rows = {k: [] for k in ("pj", "pv", "f5", "f15", "aj", "av")}
    for p, g in zip(preds, gts):
        aj, _ = procrustes_align(p.joints3d, g.joints3d)
        av, _ = procrustes_align(p.vertices, g.vertices)
        rows["pj"].append(pa_mpjpe(p.joints3d, g.joints3d))
        rows["pv"].append(pa_mpvpe(p.vertices, g.vertices))
        rows["f5"].append(f_score(av, g.vertices, 5.0))
        rows["f15"].append(f_score(av, g.vertices, 15.0))
        rows["aj"].append(auc(aj, g.joints3d))
        rows["av"].append(auc(av, g.vertices))
    pred2d = np.stack([p.joints2d for p in preds])
    gt2d = np.stack([g.joints2d for g in gts])
    boxes = np.concatenate([gt2d.min(axis=1), gt2d.max(axis=1)], axis=1)
    mean = {k: float(np.mean(v)) for k, v in rows.items()}
    return MetricsReport(mean["pj"], mean["pv"], mean["f5"], mean["f15"], mean["aj"], mean["av"],
                         pck={str(t): pck(pred2d, gt2d, boxes, t) for t in PCK_THRESHOLDS},
                         count=len(preds))
