"""Segmentation losses on per-pixel class probabilities.

Every loss takes probabilities shaped ``N_cls x H x W`` and returns its value
together with the gradient w.r.t. those probabilities.  Labels are ``H x W``
uint16 with ``IGNORE`` marking unlabeled pixels.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .tensor_io import IGNORE

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DycrossConfig:
    tau_start: float = 0.7
    tau_end: float = 0.8
    alpha: float = 0.5
    kl_epsilon: float = 1e-8
    focal_gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.tau_start <= self.tau_end <= 1.0:
            raise ValueError("need 0 <= tau_start <= tau_end <= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def _labeled(pred, labels):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.ndim != 3 or labels.shape != pred.shape[1:]:
        raise ValueError(f"prediction {pred.shape} and labels {labels.shape} disagree")
    mask = labels != IGNORE
    if not mask.any():
        raise ValueError("no supervision: every pixel is IGNORE")
    if int(labels[mask].max()) >= pred.shape[0]:
        raise ValueError(f"label id {int(labels[mask].max())} >= N_cls={pred.shape[0]}")
    return pred, labels, mask


def focal_loss(pred, labels, gamma=2.0):
    """Mean of ``-(1 - p_t)^gamma * log p_t`` over labeled pixels."""
    pred, labels, mask = _labeled(pred, labels)
    rows, cols = np.nonzero(mask)
    cls = labels[rows, cols].astype(np.int64)
    p = np.maximum(pred[cls, rows, cols], PROB_FLOOR)
    n = len(p)
    q = 1.0 - p
    logp = np.log(p)
    loss = -(q ** gamma) * logp
    if gamma == 0:
        dp = -1.0 / p
    else:
        dp = gamma * q ** (gamma - 1) * logp - q ** gamma / p
    grad = np.zeros_like(pred)
    grad[cls, rows, cols] = dp / n
    return float(loss.sum() / n), grad


def lovasz_grad(fg_sorted):
    """Gradient of the Jaccard loss extension for errors sorted descending."""
    gts = fg_sorted.sum()
    inter = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jac = 1.0 - inter / union
    jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(pred, labels):
    """Lovász-softmax averaged over classes present among labeled pixels."""
    pred, labels, mask = _labeled(pred, labels)
    rows, cols = np.nonzero(mask)
    truth = labels[rows, cols].astype(np.int64)
    probs = pred[:, rows, cols].astype(np.float64)
    present = np.unique(truth)
    grad_flat = np.zeros_like(probs)
    total = 0.0
    idx = np.arange(len(truth))
    for c in present:
        fg = (truth == c).astype(np.float64)
        err = np.abs(fg - probs[c])
        # Descending error, ties by pixel index.
        perm = np.lexsort((idx, -err))
        g = lovasz_grad(fg[perm])
        total += float(err[perm] @ g)
        d_err = np.empty_like(err)
        d_err[perm] = g
        grad_flat[c] += d_err * np.where(fg > 0, -1.0, 1.0)
    k = len(present)
    grad = np.zeros_like(pred)
    grad[:, rows, cols] = grad_flat / k
    return total / k, grad


def confidence_map(pred):
    return np.asarray(pred).max(axis=0)


def dynamic_weight(c_sup, c_rec, tau):
    """``c_sup - c_rec`` where ``c_sup > max(c_rec, tau)``, else 0."""
    c_sup = np.asarray(c_sup)
    c_rec = np.asarray(c_rec)
    if c_sup.shape != c_rec.shape:
        raise ValueError("confidence maps disagree in shape")
    gate = c_sup > np.maximum(c_rec, tau)
    return np.where(gate, c_sup - c_rec, 0.0)


def kl_pixel(p, q, eps=1e-8):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(p * np.log((p + eps) / (q + eps))))


def kl_map(p, q, eps=1e-8):
    """Per-pixel KL(p || q) over axis 0."""
    return np.sum(p * np.log((p + eps) / (q + eps)), axis=0)


def _kl_grad_p(p, q, eps):
    return np.log((p + eps) / (q + eps)) + p / (p + eps)


def dycross_loss(y_lidar, y_cam, tau, eps=1e-8, ref_lidar=None, ref_cam=None):
    """Confidence-gated mutual KL between the two streams.

    Returns ``(l2c + c2l, grad_lidar, grad_cam, (l2c, c2l))``.  In each
    direction the supervising distribution and the weight map are treated as
    constants; ``ref_lidar``/``ref_cam`` override the values used for those
    constant parts (defaults: the inputs themselves).
    """
    y_lidar = np.asarray(y_lidar)
    y_cam = np.asarray(y_cam)
    if y_lidar.shape != y_cam.shape:
        raise ValueError(f"stream shapes differ: {y_lidar.shape} vs {y_cam.shape}")
    ref_lidar = y_lidar if ref_lidar is None else ref_lidar
    ref_cam = y_cam if ref_cam is None else ref_cam
    hw = y_lidar.shape[1] * y_lidar.shape[2]
    c_cam = confidence_map(ref_cam)
    c_lidar = confidence_map(ref_lidar)

    w_l2c = dynamic_weight(c_cam, c_lidar, tau)
    l2c = float(np.sum(w_l2c * kl_map(y_lidar, ref_cam, eps)) / hw)
    grad_lidar = w_l2c * _kl_grad_p(y_lidar, ref_cam, eps) / hw

    w_c2l = dynamic_weight(c_lidar, c_cam, tau)
    c2l = float(np.sum(w_c2l * kl_map(y_cam, ref_lidar, eps)) / hw)
    grad_cam = w_c2l * _kl_grad_p(y_cam, ref_lidar, eps) / hw
    return l2c + c2l, grad_lidar, grad_cam, (l2c, c2l)


def tau_schedule(progress, cfg=DycrossConfig()):
    if not 0.0 <= progress <= 1.0:
        warnings.warn(f"training progress {progress} outside [0, 1]; clamped", stacklevel=2)
        progress = min(max(progress, 0.0), 1.0)
    return cfg.tau_start + progress * (cfg.tau_end - cfg.tau_start)


@dataclass
class LossTerms:
    foc_lidar: float
    lov_lidar: float
    foc_cam: float
    lov_cam: float
    dycross: float
    total: float

    def as_row(self):
        return [self.foc_lidar, self.lov_lidar, self.foc_cam, self.lov_cam, self.dycross, self.total]


def total_loss(y_lidar, y_cam, labels, tau, alpha=0.5, gamma=2.0, eps=1e-8,
               use_dycross=True, ref_lidar=None, ref_cam=None):
    """Focal + Lovász on both streams plus ``alpha``-weighted dycross.

    The dycross value is always reported in the returned terms; it only
    enters the total (and the gradients) when ``use_dycross`` is set.
    Returns ``(terms, grad_lidar, grad_cam)``.
    """
    f_l, gf_l = focal_loss(y_lidar, labels, gamma)
    v_l, gv_l = lovasz_softmax(y_lidar, labels)
    f_c, gf_c = focal_loss(y_cam, labels, gamma)
    v_c, gv_c = lovasz_softmax(y_cam, labels)
    d, gd_l, gd_c, _ = dycross_loss(y_lidar, y_cam, tau, eps, ref_lidar, ref_cam)
    total = f_l + v_l + f_c + v_c
    grad_lidar = gf_l + gv_l
    grad_cam = gf_c + gv_c
    if use_dycross and alpha != 0:
        total += alpha * d
        grad_lidar = grad_lidar + alpha * gd_l
        grad_cam = grad_cam + alpha * gd_c
    if not math.isfinite(total):
        raise FloatingPointError("non-finite loss")
    return LossTerms(f_l, v_l, f_c, v_c, d, total), grad_lidar, grad_cam
