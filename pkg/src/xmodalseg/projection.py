"""Perspective projection of LiDAR points and remapping of 2D predictions.

Camera frame convention: x right, y down, z along the optical axis.  A LiDAR
point ``p`` maps to ``R @ p + t`` in the camera frame and then to pixel
``(row, col) = (floor(fy*y/z + cy + 0.5), floor(fx*x/z + cx + 0.5))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNPROJECTED = 65535
MIN_DEPTH = 1e-3

_ROT_KEYS = [f"r{i}{j}" for i in range(3) for j in range(3)]
_T_KEYS = ["tx", "ty", "tz"]


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")

    def to_text(self):
        lines = [
            f"fx={self.fx!r}", f"fy={self.fy!r}", f"cx={self.cx!r}", f"cy={self.cy!r}",
            f"width={self.width}", f"height={self.height}",
        ]
        lines += [f"{k}={float(v)!r}" for k, v in zip(_ROT_KEYS, self.rotation.ravel())]
        lines += [f"{k}={float(v)!r}" for k, v in zip(_T_KEYS, self.translation)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        vals = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"line {n}: expected key=value")
            vals[key.strip()] = value.strip()
        required = ["fx", "fy", "cx", "cy", "width", "height", *_ROT_KEYS, *_T_KEYS]
        missing = [k for k in required if k not in vals]
        if missing:
            raise ValueError(f"camera file missing keys: {', '.join(missing)}")
        return cls(
            fx=float(vals["fx"]), fy=float(vals["fy"]),
            cx=float(vals["cx"]), cy=float(vals["cy"]),
            width=int(vals["width"]), height=int(vals["height"]),
            rotation=np.array([float(vals[k]) for k in _ROT_KEYS]),
            translation=np.array([float(vals[k]) for k in _T_KEYS]),
        )

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_text(f.read())


@dataclass(frozen=True)
class ProjectionIndex:
    """Point <-> pixel assignment produced by :func:`project_points`.

    ``in_view`` marks points in front of the camera that land inside the
    image; ``rows``/``cols`` are their pixel (-1 otherwise).  ``valid`` marks
    the subset that owns its pixel, i.e. won the nearest-range test.  Points
    that are in view but lost a collision are occluded, not valid.
    ``pixel_point`` holds the owning point per pixel, -1 where none landed.
    """

    valid: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    pixel_point: np.ndarray
    in_view: np.ndarray

    @property
    def height(self):
        return self.pixel_point.shape[0]

    @property
    def width(self):
        return self.pixel_point.shape[1]

    @property
    def retained(self):
        """Indices of the points that own a pixel."""
        pp = self.pixel_point.ravel()
        return pp[pp >= 0]


def _check_cloud(cloud):
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 4:
        raise ValueError(f"point cloud must be N x 4, got {cloud.shape}")
    if cloud.shape[0] == 0:
        raise ValueError("empty point cloud")
    bad = ~np.isfinite(cloud).all(axis=1)
    if bad.any():
        raise ValueError(f"non-finite coordinate at point {int(np.flatnonzero(bad)[0])}")
    return cloud


def pixel_coords(xyz, cam):
    """Continuous (u, v) and camera-frame depth for LiDAR-frame points."""
    pc = xyz @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
    return u, v, z


def project_points(cloud, cam):
    """Rasterise ``cloud`` (N x 4: x, y, z, r) into a 5 x H x W (d, x, y, z, r) map."""
    cloud = _check_cloud(cloud)
    n = cloud.shape[0]
    xyz = cloud[:, :3]
    d = np.sqrt((xyz ** 2).sum(axis=1))
    u, v, z = pixel_coords(xyz, cam)

    front = z > MIN_DEPTH
    cols = np.full(n, -1, dtype=np.int64)
    rows = np.full(n, -1, dtype=np.int64)
    cols[front] = np.floor(u[front] + 0.5).astype(np.int64)
    rows[front] = np.floor(v[front] + 0.5).astype(np.int64)
    in_view = front & (cols >= 0) & (cols < cam.width) & (rows >= 0) & (rows < cam.height)
    rows[~in_view] = -1
    cols[~in_view] = -1

    # Nearest point wins; exact range ties fall back to the point's values so
    # the result never depends on input order.
    idx = np.flatnonzero(in_view)
    pix = rows[idx] * cam.width + cols[idx]
    order = np.lexsort((cloud[idx, 3], xyz[idx, 2], xyz[idx, 1], xyz[idx, 0], d[idx], pix))
    idx, pix = idx[order], pix[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    keep, keep_pix = idx[first], pix[first]

    pixel_point = np.full(cam.height * cam.width, -1, dtype=np.int64)
    pixel_point[keep_pix] = keep
    lidar_map = np.zeros((5, cam.height * cam.width), dtype=np.float32)
    lidar_map[0, keep_pix] = d[keep]
    lidar_map[1:4, keep_pix] = xyz[keep].T
    lidar_map[4, keep_pix] = cloud[keep, 3]

    valid = np.zeros(n, dtype=bool)
    valid[keep] = True
    index = ProjectionIndex(valid, rows, cols, pixel_point.reshape(cam.height, cam.width), in_view)
    return lidar_map.reshape(5, cam.height, cam.width), index


def project_labels(labels, index, ignore=65535):
    """Sparse label map: each retained point's label at its pixel, ``ignore`` elsewhere."""
    labels = np.asarray(labels)
    out = np.full(index.pixel_point.shape, ignore, dtype=np.uint16)
    hit = index.pixel_point >= 0
    out[hit] = labels[index.pixel_point[hit]]
    return out


def remap_to_points(pred, index, include_occluded=False):
    """Per-point argmax of ``pred`` (N_cls x H x W) at each valid point's pixel.

    With ``include_occluded`` the in-view points that lost a pixel collision
    also read their pixel's class instead of getting UNPROJECTED.
    """
    pred = np.asarray(pred)
    if pred.ndim != 3 or pred.shape[1:] != index.pixel_point.shape:
        raise ValueError(
            f"prediction spatial dims {pred.shape[1:]} do not match index {index.pixel_point.shape}"
        )
    out = np.full(index.valid.shape[0], UNPROJECTED, dtype=np.uint16)
    v = index.in_view if include_occluded else index.valid
    # np.argmax returns the first maximum, i.e. the lowest class id on ties.
    out[v] = np.argmax(pred[:, index.rows[v], index.cols[v]], axis=0)
    return out
