"""Confusion-matrix metrics for 2D maps and 3D point labels."""
from __future__ import annotations

import csv

import numpy as np

from .projection import UNPROJECTED
from .tensor_io import IGNORE


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions.

    Pairs with an ignored truth or an UNPROJECTED prediction are not scored;
    they are tallied in ``n_ignored`` and ``n_unprojected`` instead.
    """

    def __init__(self, n_cls):
        self.n_cls = n_cls
        self.counts = np.zeros((n_cls, n_cls), dtype=np.int64)
        self.n_ignored = 0
        self.n_unprojected = 0

    def update(self, pred_ids, true_ids, ignore=IGNORE):
        pred = np.asarray(pred_ids).ravel().astype(np.int64)
        true = np.asarray(true_ids).ravel().astype(np.int64)
        if pred.shape != true.shape:
            raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
        ignored = true == ignore
        unproj = (pred == UNPROJECTED) & ~ignored
        keep = ~ignored & ~unproj
        p, t = pred[keep], true[keep]
        for name, ids in (("prediction", p), ("label", t)):
            if ids.size and (ids.min() < 0 or ids.max() >= self.n_cls):
                bad = ids[(ids < 0) | (ids >= self.n_cls)][0]
                raise ValueError(f"{name} id {bad} out of range for {self.n_cls} classes")
        self.counts += np.bincount(t * self.n_cls + p, minlength=self.n_cls ** 2).reshape(
            self.n_cls, self.n_cls)
        self.n_ignored += int(ignored.sum())
        self.n_unprojected += int(unproj.sum())
        return self

    def __iadd__(self, other):
        self.counts += other.counts
        self.n_ignored += other.n_ignored
        self.n_unprojected += other.n_unprojected
        return self

    @property
    def total(self):
        return int(self.counts.sum())

    def coverage(self):
        """Fraction of non-ignored elements that received a prediction."""
        denom = self.total + self.n_unprojected
        return self.total / denom if denom else float("nan")


def confusion_update(cm, pred_ids, true_ids, ignore_sentinel=IGNORE):
    return cm.update(pred_ids, true_ids, ignore_sentinel)


def iou_from_counts(tp, fp, fn):
    """Per-class IoU and the mean over classes with ``tp + fp + fn > 0``."""
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    denom = tp + fp + fn
    scored = denom > 0
    if not scored.any():
        raise ValueError("no scorable class")
    iou = np.full(tp.shape, np.nan)
    iou[scored] = tp[scored] / denom[scored]
    return iou, float(iou[scored].mean())


def miou(cm):
    c = cm.counts
    tp = np.diag(c)
    return iou_from_counts(tp, c.sum(axis=0) - tp, c.sum(axis=1) - tp)


def empty_region_mask(lidar_map):
    return np.asarray(lidar_map)[0] == 0


def empty_region_miou(pred2d_ids, label2d, lidar_map, n_cls=None):
    """mIoU over pixels without a LiDAR return (d channel == 0)."""
    pred2d_ids = np.asarray(pred2d_ids)
    label2d = np.asarray(label2d)
    mask = empty_region_mask(lidar_map)
    if pred2d_ids.shape != label2d.shape or mask.shape != label2d.shape:
        raise ValueError("prediction, labels and LiDAR map must share H x W")
    if not mask.any():
        raise ValueError("no empty pixels: LiDAR map is fully dense")
    if n_cls is None:
        valid = label2d[label2d != IGNORE]
        n_cls = int(max(pred2d_ids.max(), valid.max() if valid.size else 0)) + 1
    cm = ConfusionMatrix(n_cls).update(pred2d_ids[mask], label2d[mask])
    return miou(cm)[1]


def write_results(path, rows):
    """``rows``: iterable of (metric, class, value); class may be ''."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "class", "value"])
        for metric, cls, value in rows:
            w.writerow([metric, cls, f"{value:.6f}" if isinstance(value, float) else value])
