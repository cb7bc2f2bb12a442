"""Synthetic camera + LiDAR street scenes with exact 2D and 3D labels.

World frame: x forward, y left, z up, ground plane z = 0.  The LiDAR sits at
``LIDAR_ORIGIN`` with axes aligned to the world, so LiDAR-frame coordinates
are world coordinates minus that origin.  The camera is mounted slightly
ahead, lower and rotated, so the two sensors see the scene with parallax.

Classes: 0 background/sky (camera only), 1 ground, 2 vehicle (box),
3 pole (vertical cylinder), 4 pedestrian (thin tall box).
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .projection import CameraModel, project_labels, project_points
from .tensor_io import child_rng, make_rng, read_tensor, write_tensor

N_CLASSES = 5
CLASS_NAMES = ("background", "ground", "vehicle", "pole", "pedestrian")
ALBEDO = np.array([
    [0.55, 0.70, 0.95],
    [0.35, 0.33, 0.30],
    [0.80, 0.15, 0.10],
    [0.70, 0.70, 0.25],
    [0.20, 0.35, 0.85],
])
LUMA = np.array([0.299, 0.587, 0.114])
SUN = np.array([-0.5, 0.3, 0.8]) / np.linalg.norm([-0.5, 0.3, 0.8])
AMBIENT = 0.35
NOISE_SIGMA = 0.02

LIDAR_ORIGIN = np.array([0.0, 0.0, 1.8])
CAMERA_ORIGIN = np.array([0.2, 0.0, 1.6])
T_EPS = 1e-6


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    cls: int
    albedo: tuple = None


@dataclass(frozen=True)
class Cylinder:
    cx: float
    cy: float
    radius: float
    z0: float
    z1: float
    cls: int = 3
    albedo: tuple = None


@dataclass(frozen=True)
class SceneConfig:
    n_vehicles: tuple = (1, 3)
    n_poles: tuple = (1, 3)
    n_pedestrians: tuple = (1, 3)
    ground: bool = True
    x_range: tuple = (6.0, 18.0)
    max_bearing_deg: float = 20.0
    max_tries: int = 200
    # Per-instance albedo spread around the class base colour, per class.
    albedo_jitter: tuple = (0.05, 0.08, 0.4, 0.15, 0.4)

    def __post_init__(self):
        for lo, hi in (self.n_vehicles, self.n_poles, self.n_pedestrians):
            if not 0 <= lo <= hi:
                raise ValueError("count ranges must satisfy 0 <= lo <= hi")
        if not 0 < self.x_range[0] < self.x_range[1]:
            raise ValueError("x_range must be positive and increasing")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    ground: bool
    boxes: tuple = ()
    cylinders: tuple = ()
    albedo: np.ndarray = field(default_factory=lambda: ALBEDO.copy())
    ground_albedo: tuple = None
    sky_albedo: tuple = None

    def classes(self):
        out = {1} if self.ground else set()
        out.update(b.cls for b in self.boxes)
        out.update(c.cls for c in self.cylinders)
        return out

    def __eq__(self, other):
        return (
            isinstance(other, SceneSpec)
            and (self.seed, self.ground, self.boxes, self.cylinders,
                 self.ground_albedo, self.sky_albedo)
            == (other.seed, other.ground, other.boxes, other.cylinders,
                other.ground_albedo, other.sky_albedo)
            and np.array_equal(self.albedo, other.albedo)
        )


@dataclass(frozen=True)
class LidarRig:
    elevations_deg: np.ndarray
    azimuths_deg: np.ndarray
    max_range: float = 14.0

    def directions(self):
        """Unit ray directions, shape (beams * azimuths, 3), beam-major."""
        e = np.deg2rad(self.elevations_deg)[:, None]
        a = np.deg2rad(self.azimuths_deg)[None, :]
        d = np.stack(np.broadcast_arrays(np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)), -1)
        return d.reshape(-1, 3)


def default_camera(width=96, height=64, focal=96.0, pitch_deg=2.0, yaw_deg=1.0):
    """Forward-looking pinhole camera; extrinsics map LiDAR frame -> camera frame."""
    # Columns: camera x (right), y (down), z (forward) expressed in world axes.
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    p, y = np.deg2rad(pitch_deg), np.deg2rad(yaw_deg)
    rot_y = np.array([[np.cos(p), 0, np.sin(p)], [0, 1, 0], [-np.sin(p), 0, np.cos(p)]])
    rot_z = np.array([[np.cos(y), -np.sin(y), 0], [np.sin(y), np.cos(y), 0], [0, 0, 1]])
    cam_to_world = rot_z @ rot_y @ base
    rotation = cam_to_world.T
    translation = rotation @ (LIDAR_ORIGIN - CAMERA_ORIGIN)
    return CameraModel(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height,
                       rotation, translation)


def default_rig(cam=None, beams=16, steps=128, max_range=14.0):
    cam = default_camera() if cam is None else cam
    half = np.rad2deg(np.arctan((cam.width / 2) / cam.fx))
    return LidarRig(np.linspace(-15.0, 5.0, beams), np.linspace(-half, half, steps), max_range)


def generate_scene(seed, cfg=SceneConfig()):
    """Random non-overlapping vehicles, poles and pedestrians in front of the rig."""
    rng = make_rng(seed)
    placed = []  # (x, y, footprint radius)

    def hidden(x, y, radius):
        # Bearing interval, seen from the camera, overlaps a nearer object.
        cx, cy = CAMERA_ORIGIN[:2]
        dist = np.hypot(x - cx, y - cy)
        bearing = np.arctan2(y - cy, x - cx)
        for px, py, pr in placed:
            pd = np.hypot(px - cx, py - cy)
            gap = abs(np.arctan2(py - cy, px - cx) - bearing)
            if pd < dist and gap < np.arcsin(min(radius / dist, 1)) + np.arcsin(min(pr / pd, 1)):
                return True
        return False

    def place(radius, visible=False):
        if visible:
            try:
                return place_once(radius, True)
            except RuntimeError:
                pass
        return place_once(radius, False)

    def place_once(radius, visible):
        for _ in range(cfg.max_tries):
            x = rng.uniform(*cfg.x_range)
            y = x * np.tan(np.deg2rad(rng.uniform(-cfg.max_bearing_deg, cfg.max_bearing_deg)))
            if all(np.hypot(x - px, y - py) > radius + pr + 0.3 for px, py, pr in placed) and not (
                    visible and hidden(x, y, radius)):
                placed.append((x, y, radius))
                return x, y
        raise RuntimeError(f"could not place primitive after {cfg.max_tries} tries (seed {seed})")

    def tint(cls):
        return tuple(np.clip(ALBEDO[cls] + rng.uniform(-1, 1, 3) * cfg.albedo_jitter[cls], 0.02, 0.98))

    boxes, cylinders = [], []
    for _ in range(rng.integers(cfg.n_vehicles[0], cfg.n_vehicles[1] + 1)):
        length, width, height = rng.uniform(3.5, 4.6), rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.9)
        x, y = place(np.hypot(length, width) / 2)
        boxes.append(Box((x - length / 2, y - width / 2, 0.0), (x + length / 2, y + width / 2, height),
                         2, tint(2)))
    for _ in range(rng.integers(cfg.n_poles[0], cfg.n_poles[1] + 1)):
        radius, height = rng.uniform(0.15, 0.3), rng.uniform(3.0, 6.0)
        x, y = place(radius)
        cylinders.append(Cylinder(x, y, radius, 0.0, height, 3, tint(3)))
    for k in range(rng.integers(cfg.n_pedestrians[0], cfg.n_pedestrians[1] + 1)):
        side, height = rng.uniform(0.4, 0.6), rng.uniform(1.6, 1.9)
        # The small, last-placed class: keep the first one in plain view when possible.
        x, y = place(side / np.sqrt(2), visible=k == 0)
        boxes.append(Box((x - side / 2, y - side / 2, 0.0), (x + side / 2, y + side / 2, height),
                         4, tint(4)))
    return SceneSpec(int(seed), cfg.ground, tuple(boxes), tuple(cylinders),
                     ground_albedo=tint(1), sky_albedo=tint(0))


# -- ray casting --------------------------------------------------------------

def _hit_plane(o, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[2] / d[:, 2]
    t = np.where((d[:, 2] < 0) & (t > T_EPS), t, np.inf)
    n = np.broadcast_to(np.array([0.0, 0.0, 1.0]), d.shape)
    return t, n


def _hit_box(o, d, box):
    lo, hi = np.array(box.lo), np.array(box.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin, tmax = np.minimum(t1, t2), np.maximum(t1, t2)
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    t = np.where((near <= far) & (near > T_EPS), near, np.inf)
    n = np.zeros_like(d)
    rows = np.arange(len(d))
    n[rows, axis] = -np.sign(d[rows, axis])
    return t, n


def _hit_cylinder(o, d, cyl):
    ex, ey = o[0] - cyl.cx, o[1] - cyl.cy
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (d[:, 0] * ex + d[:, 1] * ey)
    c = ex * ex + ey * ey - cyl.radius ** 2
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
    z = o[2] + t_side * d[:, 2]
    ok = (disc >= 0) & (a > 0) & (t_side > T_EPS) & (z >= cyl.z0) & (z <= cyl.z1)
    t_side = np.where(ok, t_side, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cap = (cyl.z1 - o[2]) / d[:, 2]
    px = o[0] + t_cap * d[:, 0] - cyl.cx
    py = o[1] + t_cap * d[:, 1] - cyl.cy
    ok = (d[:, 2] < 0) & (t_cap > T_EPS) & (px * px + py * py <= cyl.radius ** 2)
    t_cap = np.where(ok, t_cap, np.inf)
    side = t_side <= t_cap
    t = np.where(side, t_side, t_cap)
    hx = o[0] + t_side * d[:, 0] - cyl.cx
    hy = o[1] + t_side * d[:, 1] - cyl.cy
    with np.errstate(invalid="ignore"):
        n = np.where(side[:, None], np.stack([hx, hy, np.zeros_like(hx)], 1) / cyl.radius,
                     np.array([0.0, 0.0, 1.0]))
    return t, n


def primitives(scene):
    """(class, kind, primitive) for every object, ground first (prim id 0)."""
    out = []
    if scene.ground:
        out.append((1, "plane", None))
    out += [(b.cls, "box", b) for b in scene.boxes]
    out += [(c.cls, "cylinder", c) for c in scene.cylinders]
    return out


def primitive_albedo(scene):
    """RGB per primitive id, plus the sky colour as the last row (id -1)."""
    rows = []
    for cls, kind, obj in primitives(scene):
        own = scene.ground_albedo if kind == "plane" else obj.albedo
        rows.append(scene.albedo[cls] if own is None else own)
    rows.append(scene.albedo[0] if scene.sky_albedo is None else scene.sky_albedo)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def raycast(scene, origin, dirs):
    """Nearest hit per ray: ``(t, cls, normal, prim_id)``; misses get t=inf, cls 0, id -1."""
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    best_t = np.full(len(dirs), np.inf)
    cls = np.zeros(len(dirs), dtype=np.uint16)
    prim = np.full(len(dirs), -1, dtype=np.int64)
    normal = np.zeros_like(dirs)
    for pid, (c, kind, obj) in enumerate(primitives(scene)):
        if kind == "plane":
            t, n = _hit_plane(origin, dirs)
        elif kind == "box":
            t, n = _hit_box(origin, dirs, obj)
        else:
            t, n = _hit_cylinder(origin, dirs, obj)
        closer = t < best_t
        best_t[closer] = t[closer]
        cls[closer] = c
        prim[closer] = pid
        normal[closer] = n[closer]
    return best_t, cls, normal, prim


def camera_rays(cam):
    """World-frame origin and unit direction through every pixel centre (row-major)."""
    rows, cols = np.mgrid[0:cam.height, 0:cam.width]
    d_cam = np.stack([(cols - cam.cx) / cam.fx, (rows - cam.cy) / cam.fy,
                      np.ones(rows.shape)], -1).reshape(-1, 3)
    d = d_cam @ cam.rotation  # R^T applied to row vectors
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origin = LIDAR_ORIGIN - cam.rotation.T @ cam.translation
    return origin, d


def render_camera(scene, cam, rng):
    """Shaded RGB image (3 x H x W, float32) and dense label map."""
    origin, dirs = camera_rays(cam)
    t, cls, normal, prim = raycast(scene, origin, dirs)
    albedo = primitive_albedo(scene)[prim]
    shade = AMBIENT + (1 - AMBIENT) * np.clip(normal @ SUN, 0.0, None)
    shade = np.where(np.isfinite(t), shade, 1.0)
    color = albedo * shade[:, None] + rng.normal(0.0, NOISE_SIGMA, size=albedo.shape)
    color = np.clip(color, 0.0, 1.0)
    image = color.T.reshape(3, cam.height, cam.width).astype(np.float32)
    return image, cls.reshape(cam.height, cam.width)


def simulate_lidar(scene, rig, return_prims=False):
    """One return per beam that hits geometry within range (LiDAR frame, N x 4)."""
    dirs = rig.directions()
    t, cls, _, prim = raycast(scene, LIDAR_ORIGIN, dirs)
    hit = t <= rig.max_range
    if not hit.any():
        raise RuntimeError("degenerate scene: no LiDAR returns")
    xyz = dirs[hit] * t[hit, None]
    refl = primitive_albedo(scene)[prim[hit]] @ LUMA
    cloud = np.concatenate([xyz, refl[:, None]], axis=1)
    if return_prims:
        return cloud, cls[hit], prim[hit]
    return cloud, cls[hit]


# -- datasets -------------------------------------------------------------------

SAMPLE_FILES = ("image.mmtf", "cloud.mmtf", "labels3d.mmtf", "label2d.mmtf",
                "label_p3d.mmtf", "lidar_map.mmtf", "camera.txt")


@dataclass
class Sample:
    image: np.ndarray
    cloud: np.ndarray
    labels3d: np.ndarray
    label2d: np.ndarray
    label_p3d: np.ndarray
    lidar_map: np.ndarray
    camera: CameraModel
    index: object = None
    name: str = ""


def sample_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def make_sample(seed, index, cam=None, rig=None, cfg=SceneConfig()):
    cam = default_camera() if cam is None else cam
    rig = default_rig(cam) if rig is None else rig
    s = sample_seed(seed, index)
    scene = generate_scene(s, cfg)
    image, label2d = render_camera(scene, cam, child_rng(s, 1))
    cloud, labels3d = simulate_lidar(scene, rig)
    # Store and project the float32 cloud so reloading reproduces the maps.
    cloud = cloud.astype(np.float32)
    lidar_map, pidx = project_points(cloud, cam)
    label_p3d = project_labels(labels3d, pidx)
    return Sample(image, cloud, labels3d.astype(np.uint16), label2d.astype(np.uint16),
                  label_p3d, lidar_map, cam, pidx, f"sample_{index:04d}")


def content_hash(data):
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def make_dataset(n_scenes, seed, out_dir, cfg=SceneConfig(), cam=None, rig=None):
    """Write ``n_scenes`` samples plus ``manifest.txt``; returns the manifest entries."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n_scenes):
        s = make_sample(seed, i, cam, rig, cfg)
        d = os.path.join(out_dir, s.name)
        os.makedirs(d, exist_ok=True)
        write_tensor(s.image, os.path.join(d, "image.mmtf"))
        write_tensor(s.cloud, os.path.join(d, "cloud.mmtf"))
        write_tensor(s.labels3d, os.path.join(d, "labels3d.mmtf"))
        write_tensor(s.label2d, os.path.join(d, "label2d.mmtf"))
        write_tensor(s.label_p3d, os.path.join(d, "label_p3d.mmtf"))
        write_tensor(s.lidar_map, os.path.join(d, "lidar_map.mmtf"))
        s.camera.save(os.path.join(d, "camera.txt"))
        for fname in SAMPLE_FILES:
            rel = f"{s.name}/{fname}"
            with open(os.path.join(out_dir, rel), "rb") as f:
                entries.append((rel, content_hash(f.read())))
    write_manifest(out_dir, entries)
    return entries


def write_manifest(out_dir, entries):
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        for rel, h in sorted(entries):
            f.write(f"{rel}\t{h}\n")


def read_manifest(path):
    with open(path) as f:
        return [tuple(line.rstrip("\n").split("\t")) for line in f if line.strip()]


def load_sample(directory):
    cam = CameraModel.load(os.path.join(directory, "camera.txt"))
    cloud = read_tensor(os.path.join(directory, "cloud.mmtf"))
    lidar_map, pidx = project_points(cloud, cam)
    return Sample(
        image=read_tensor(os.path.join(directory, "image.mmtf")),
        cloud=cloud,
        labels3d=read_tensor(os.path.join(directory, "labels3d.mmtf")),
        label2d=read_tensor(os.path.join(directory, "label2d.mmtf")),
        label_p3d=read_tensor(os.path.join(directory, "label_p3d.mmtf")),
        lidar_map=lidar_map,
        camera=cam,
        index=pidx,
        name=os.path.basename(directory.rstrip("/")),
    )


def load_dataset(out_dir):
    entries = read_manifest(os.path.join(out_dir, "manifest.txt"))
    names = sorted({rel.split("/")[0] for rel, _ in entries if "/" in rel})
    if not names:
        raise ValueError(f"empty dataset at {out_dir}")
    return [load_sample(os.path.join(out_dir, n)) for n in names]
