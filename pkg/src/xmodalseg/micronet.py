"""Two-stream (LiDAR map / camera image) encoder-decoder with manual backprop.

Wiring, per stream::

    conv3x3 -> LeakyReLU                      (stage 1, full resolution)
    conv3x3/2 -> LeakyReLU                    (stage 2, half resolution)
    upsample x2 -> conv3x3 -> LeakyReLU -> conv1x1 -> softmax

After each LiDAR encoder stage the camera features of the same stage are
added through a 1x1 mapping conv.  The first camera activation, passed through
a 1x1 embedding conv + LeakyReLU, is the default guide for the tree filter
applied to the LiDAR probabilities.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import treefilter
from .tensor_io import read_tensor, softmax_channels, write_tensor
from .treefilter import GuideSource

LEAK = 0.01
# Fixed per-channel input scale for the (d, x, y, z, r) LiDAR map.
LIDAR_SCALE = np.array([1 / 20, 1 / 20, 1 / 10, 1 / 2, 1.0])
CAM_OFFSET = 0.5
# The guide embedding receives no gradient, so its initial scale fixes how
# sharply edge weights separate regions; it is drawn GUIDE_GAIN x wider.
GUIDE_GAIN = 3.0

# name -> (out, in, k)
LAYERS = {
    "lidar.conv1": (16, 5, 3),
    "lidar.conv2": (32, 16, 3),
    "cam.conv1": (16, 3, 3),
    "cam.conv2": (32, 16, 3),
    "fuse1": (16, 16, 1),
    "fuse2": (32, 32, 1),
    "guide": (16, 16, 1),
    "lidar.dec1": (16, 32, 3),
    "lidar.dec2": (None, 16, 1),
    "cam.dec1": (16, 32, 3),
    "cam.dec2": (None, 16, 1),
}


class StaleTraceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Toggles:
    use_filter: bool = True
    use_dycross: bool = True
    guide_source: GuideSource = GuideSource.CAM_LOW


class MicroNetParams:
    """Ordered ``name.w`` / ``name.b`` arrays plus a version counter.

    The version changes whenever the weights are updated in place, which lets
    backward refuse traces recorded against older weights.
    """

    def __init__(self, arrays, n_cls):
        self.arrays = dict(arrays)
        self.n_cls = n_cls
        self.version = 0

    def __getitem__(self, key):
        return self.arrays[key]

    def __setitem__(self, key, value):
        self.arrays[key] = value
        self.version += 1

    def keys(self):
        return self.arrays.keys()

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def copy(self):
        return MicroNetParams({k: v.copy() for k, v in self.arrays.items()}, self.n_cls)

    def astype(self, dtype):
        return MicroNetParams({k: v.astype(dtype) for k, v in self.arrays.items()}, self.n_cls)

    def bump(self):
        self.version += 1

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        lines = []
        for name, arr in self.arrays.items():
            write_tensor(arr, os.path.join(directory, f"{name}.mmtf"))
            lines.append(f"{name}\t{'x'.join(map(str, arr.shape))}\t{arr.dtype}")
        with open(os.path.join(directory, "manifest.txt"), "w") as f:
            f.write(f"n_cls\t{self.n_cls}\n")
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "manifest.txt")) as f:
            rows = [line.rstrip("\n").split("\t") for line in f if line.strip()]
        n_cls = int(rows[0][1])
        arrays = {}
        for name, shape, dtype in rows[1:]:
            arr = read_tensor(os.path.join(directory, f"{name}.mmtf"))
            if "x".join(map(str, arr.shape)) != shape or str(arr.dtype) != dtype:
                raise ValueError(f"checkpoint tensor {name} does not match manifest")
            arrays[name] = arr
        return cls(arrays, n_cls)


def micronet_init(rng, n_cls, guide_gain=GUIDE_GAIN):
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases, float32.

    The guide embedding bound is additionally scaled by ``guide_gain``.
    """
    if n_cls < 2:
        raise ValueError("need at least two classes")
    arrays = {}
    for name, (cout, cin, k) in LAYERS.items():
        cout = n_cls if cout is None else cout
        bound = np.sqrt(6.0 / (cin * k * k)) * (guide_gain if name == "guide" else 1.0)
        arrays[f"{name}.w"] = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        arrays[f"{name}.b"] = np.zeros(cout, dtype=np.float32)
    return MicroNetParams(arrays, n_cls)


# -- layer primitives -------------------------------------------------------

def _im2col(x, k, stride):
    pad = k // 2
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return cols, (ho, wo)


def conv_forward(x, w, b, stride=1):
    k = w.shape[-1]
    cols, (ho, wo) = _im2col(x, k, stride)
    out = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return out.reshape(w.shape[0], ho, wo), cols


def conv_backward(dout, cols, x_shape, w, stride=1, need_dx=True):
    cout, cin, k, _ = w.shape
    d2 = dout.reshape(cout, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (w.reshape(cout, -1).T @ d2).reshape(cin, k, k, *dout.shape[1:])
    if k == 1:
        return dcols[:, 0, 0], dw, db
    pad = k // 2
    _, h, wd = x_shape
    ho, wo = dout.shape[1:]
    dxp = np.zeros((cin, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    return dxp[:, pad:pad + h, pad:pad + wd], dw, db


def leaky(x):
    return np.where(x > 0, x, LEAK * x)


def leaky_backward(dout, pre):
    return np.where(pre > 0, dout, LEAK * dout)


def upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dout):
    c, h, w = dout.shape
    return dout.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


def softmax_backward(dy, y):
    return y * (dy - (dy * y).sum(axis=0, keepdims=True))


# -- network ----------------------------------------------------------------

@dataclass
class ForwardTrace:
    toggles: Toggles
    params_id: int
    params_version: int
    cache: dict = field(default_factory=dict)
    tree: treefilter.SpanningTree | None = None
    z: np.ndarray | None = None
    y_lidar_raw: np.ndarray | None = None


def _check_inputs(lidar_map, cam_image):
    if lidar_map.ndim != 3 or lidar_map.shape[0] != 5:
        raise ValueError(f"LiDAR map must be 5 x H x W, got {lidar_map.shape}")
    if cam_image.ndim != 3 or cam_image.shape[0] != 3:
        raise ValueError(f"camera image must be 3 x H x W, got {cam_image.shape}")
    if lidar_map.shape[1:] != cam_image.shape[1:]:
        raise ValueError("LiDAR map and camera image sizes differ")
    h, w = lidar_map.shape[1:]
    if h % 2 or w % 2:
        raise ValueError(f"H and W must be even, got {h}x{w}")


def _conv(params, cache, name, x, stride=1):
    out, cols = conv_forward(x, params[f"{name}.w"], params[f"{name}.b"], stride)
    cache[name] = (cols, x.shape)
    return out


def _decoder(params, cache, prefix, feat):
    up = upsample2(feat)
    pre = _conv(params, cache, f"{prefix}.dec1", up)
    cache[f"{prefix}.dec1.pre"] = pre
    logits = _conv(params, cache, f"{prefix}.dec2", leaky(pre))
    return softmax_channels(logits)


def micronet_forward(lidar_map, cam_image, params, toggles=Toggles(), tree=None):
    """Run both streams.

    Returns ``(y_lidar, y_cam, f_cam_low, trace)`` where ``y_lidar`` is the
    filtered LiDAR prediction when ``toggles.use_filter`` is set.  A prebuilt
    ``tree`` replaces the one derived from the guide (its affinities are
    constants either way).
    """
    dtype = params.dtype
    lidar_map = np.asarray(lidar_map)
    cam_image = np.asarray(cam_image)
    _check_inputs(lidar_map, cam_image)
    lid = (lidar_map * LIDAR_SCALE[:, None, None]).astype(dtype)
    cam = (cam_image - CAM_OFFSET).astype(dtype)

    trace = ForwardTrace(toggles, id(params), params.version)
    c = trace.cache

    pre1l = _conv(params, c, "lidar.conv1", lid)
    pre1c = _conv(params, c, "cam.conv1", cam)
    h1l, f_cam_low = leaky(pre1l), leaky(pre1c)
    f1 = h1l + _conv(params, c, "fuse1", f_cam_low)

    pre2l = _conv(params, c, "lidar.conv2", f1, 2)
    pre2c = _conv(params, c, "cam.conv2", f_cam_low, 2)
    h2c = leaky(pre2c)
    f2 = leaky(pre2l) + _conv(params, c, "fuse2", h2c)
    c.update(pre1l=pre1l, pre1c=pre1c, pre2l=pre2l, pre2c=pre2c)

    y_raw = _decoder(params, c, "lidar", f2)
    y_cam = _decoder(params, c, "cam", h2c)
    c["y_lidar_raw"] = y_raw
    c["y_cam"] = y_cam
    trace.y_lidar_raw = y_raw

    y_lidar = y_raw
    if toggles.use_filter:
        if tree is None:
            guide = select_guide(toggles.guide_source, params, cam, f_cam_low, h1l, h2c)
            tree = treefilter.build_tree(guide)
        trace.tree = tree
        trace.z = treefilter.normalizer(tree, dtype)
        num, _ = treefilter.aggregate(tree, y_raw)
        y_lidar = num / trace.z
    return y_lidar, y_cam, f_cam_low, trace


def select_guide(source, params, cam, f_cam_low, h1_lidar, h2_cam):
    source = GuideSource(source)
    if source is GuideSource.CAM_LOW:
        out, _ = conv_forward(f_cam_low, params["guide.w"], params["guide.b"])
        return leaky(out)
    if source is GuideSource.CAM_IMAGE:
        return cam
    if source is GuideSource.CAM_HIGH:
        return upsample2(h2_cam)
    return h1_lidar


def _decoder_backward(params, cache, prefix, dy, y, grads):
    dlogits = softmax_backward(dy, y)
    cols, shape = cache[f"{prefix}.dec2"]
    dx, grads[f"{prefix}.dec2.w"], grads[f"{prefix}.dec2.b"] = conv_backward(
        dlogits, cols, shape, params[f"{prefix}.dec2.w"])
    dpre = leaky_backward(dx, cache[f"{prefix}.dec1.pre"])
    cols, shape = cache[f"{prefix}.dec1"]
    dup, grads[f"{prefix}.dec1.w"], grads[f"{prefix}.dec1.b"] = conv_backward(
        dpre, cols, shape, params[f"{prefix}.dec1.w"])
    return upsample2_backward(dup)


def micronet_backward(trace, grad_lidar, grad_cam, params):
    """Exact reverse pass; ``grad_*`` are loss gradients w.r.t. the outputs."""
    if trace.params_id != id(params) or trace.params_version != params.version:
        raise StaleTraceError("trace was recorded with different or since-updated parameters")
    c = trace.cache
    grads = {}

    def back(name, dout, need_dx=True, stride=1):
        cols, shape = c[name]
        dx, grads[f"{name}.w"], grads[f"{name}.b"] = conv_backward(
            dout, cols, shape, params[f"{name}.w"], stride, need_dx)
        return dx

    g_raw = grad_lidar
    if trace.toggles.use_filter:
        g_raw = treefilter.filter_backward(trace.tree, grad_lidar, trace.z)

    g_f2 = _decoder_backward(params, c, "lidar", g_raw, c["y_lidar_raw"], grads)
    g_h2c = _decoder_backward(params, c, "cam", grad_cam, c["y_cam"], grads)
    g_h2c = g_h2c + back("fuse2", g_f2)
    g_f1 = back("lidar.conv2", leaky_backward(g_f2, c["pre2l"]), stride=2)
    g_h1c = back("cam.conv2", leaky_backward(g_h2c, c["pre2c"]), stride=2)
    g_h1c = g_h1c + back("fuse1", g_f1)
    back("lidar.conv1", leaky_backward(g_f1, c["pre1l"]), need_dx=False)
    back("cam.conv1", leaky_backward(g_h1c, c["pre1c"]), need_dx=False)
    # The guide embedding only shapes the (constant) affinities.
    grads["guide.w"] = np.zeros_like(params["guide.w"])
    grads["guide.b"] = np.zeros_like(params["guide.b"])
    return {k: grads[k] for k in params.keys()}
