"""Optimiser, training loop, inference and evaluation for the micro network."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import evalkit
from .losses import DycrossConfig, tau_schedule, total_loss
from .micronet import Toggles, micronet_backward, micronet_forward, micronet_init
from .projection import project_points, remap_to_points
from .tensor_io import make_rng
from .treefilter import GuideSource

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "lr", "tau", "l_foc_lidar", "l_lov_lidar",
               "l_foc_cam", "l_lov_cam", "l_dycross", "total"]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    warmup_fraction: float = 0.1
    epochs: int = 30
    batch_size: int = 1
    seed: int = 0
    momentum: float = 0.9
    use_filter: bool = True
    use_dycross: bool = True
    guide_source: GuideSource = GuideSource.CAM_LOW

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        object.__setattr__(self, "guide_source", GuideSource(self.guide_source))

    @property
    def toggles(self):
        return Toggles(self.use_filter, self.use_dycross, self.guide_source)


def learning_rate(step, total_steps, cfg):
    """Linear warmup to ``lr0`` then cosine decay reaching 0 at the last step."""
    warm = int(round(cfg.warmup_fraction * total_steps))
    if step < warm:
        return cfg.lr0 * (step + 1) / warm
    span = total_steps - 1 - warm
    t = 1.0 if span <= 0 else min((step - warm) / span, 1.0)
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class SGDState:
    velocity: dict = field(default_factory=dict)


def optimizer_step(params, grads, step, total_steps, cfg, state):
    """SGD with momentum, in place; returns the learning rate used."""
    lr = learning_rate(step, total_steps, cfg)
    for name in params.keys():
        v = state.velocity.get(name)
        g = grads[name]
        v = g.copy() if v is None else cfg.momentum * v + g
        state.velocity[name] = v
        params.arrays[name] = (params.arrays[name] - lr * v).astype(params.arrays[name].dtype)
    params.bump()
    return lr


def sample_step(params, sample, toggles, tau, dcfg):
    """Forward + loss + backward for one sample; returns (terms, grads)."""
    y_l, y_c, _, trace = micronet_forward(sample.lidar_map, sample.image, params, toggles)
    terms, g_l, g_c = total_loss(y_l, y_c, sample.label_p3d, tau, dcfg.alpha, dcfg.focal_gamma,
                                 dcfg.kl_epsilon, use_dycross=toggles.use_dycross)
    return terms, micronet_backward(trace, g_l.astype(y_l.dtype), g_c.astype(y_c.dtype), params)


def train(dataset, cfg, dcfg=DycrossConfig(), params=None, n_cls=5, log_path=None):
    """Train on ``dataset`` (list of samples); returns ``(params, log_rows)``.

    Samples are visited in a per-epoch permutation drawn from ``cfg.seed``;
    a batch's gradient is the mean of its per-sample gradients.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if params is None:
        params = micronet_init(make_rng(cfg.seed), n_cls)
    rng = make_rng(cfg.seed + 1)
    toggles = cfg.toggles
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    state = SGDState()
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        tau = tau_schedule(epoch / (cfg.epochs - 1) if cfg.epochs > 1 else 1.0, dcfg)
        order = rng.permutation(len(dataset))
        sums = np.zeros(6)
        lr = 0.0
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            acc = None
            for i in batch:
                try:
                    terms, grads = sample_step(params, dataset[i], toggles, tau, dcfg)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}") from exc
                sums += terms.as_row()
                if acc is None:
                    acc = {k: g.astype(np.float64) for k, g in grads.items()}
                else:
                    for k in acc:
                        acc[k] += grads[k]
            grads = {k: g / len(batch) for k, g in acc.items()}
            lr = optimizer_step(params, grads, step, total_steps, cfg, state)
            step += 1
        mean = sums / len(dataset)
        rows.append([epoch, step, lr, tau, *mean.tolist()])
        log.info("epoch %d total %.4f", epoch, mean[-1])
    if log_path is not None:
        write_log(log_path, rows)
    return params, rows


def write_log(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1]] + [f"{v:.8g}" for v in r[2:]])


def infer(params, cloud, cam_image, camera, toggles=Toggles()):
    """Project, run the network and remap; returns ``(y2d, classes3d, index)``."""
    lidar_map, index = project_points(cloud, camera)
    y_l, _, _, _ = micronet_forward(lidar_map, cam_image, params, toggles)
    return y_l, remap_to_points(y_l, index), index


@dataclass
class EvalResult:
    miou_2d: float
    miou_empty: float
    miou_3d: float
    coverage_3d: float
    iou_2d: np.ndarray
    iou_3d: np.ndarray

    def rows(self):
        out = [("miou_2d", "", self.miou_2d), ("miou_empty", "", self.miou_empty),
               ("miou_3d", "", self.miou_3d), ("coverage_3d", "", self.coverage_3d)]
        out += [("iou_2d", c, float(v)) for c, v in enumerate(self.iou_2d) if not np.isnan(v)]
        out += [("iou_3d", c, float(v)) for c, v in enumerate(self.iou_3d) if not np.isnan(v)]
        return out


def evaluate(params, dataset, toggles, n_cls=5):
    """Dense 2D, empty-region 2D and 3D mIoU accumulated over ``dataset``."""
    cm2d = evalkit.ConfusionMatrix(n_cls)
    cm_empty = evalkit.ConfusionMatrix(n_cls)
    cm3d = evalkit.ConfusionMatrix(n_cls)
    for s in dataset:
        y2d, cls3d, index = infer(params, s.cloud, s.image, s.camera, toggles)
        pred = np.argmax(y2d, axis=0)
        mask = evalkit.empty_region_mask(project_points(s.cloud, s.camera)[0])
        cm2d.update(pred, s.label2d)
        cm_empty.update(pred[mask], s.label2d[mask])
        cm3d.update(cls3d, s.labels3d)
    iou2, m2 = evalkit.miou(cm2d)
    _, me = evalkit.miou(cm_empty)
    iou3, m3 = evalkit.miou(cm3d)
    return EvalResult(m2, me, m3, cm3d.coverage(), iou2, iou3)
