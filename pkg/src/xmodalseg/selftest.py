"""Quick oracle suites run by ``xmodalseg selftest``."""
from __future__ import annotations

import io
import math

import numpy as np

from . import evalkit, losses, oracles, projection, synthdata, treefilter
from .micronet import Toggles
from .tensor_io import IGNORE, decode_tensor, encode_tensor, make_rng, softmax_channels


def _random_prediction(rng, n_cls, h, w):
    return softmax_channels(rng.normal(size=(n_cls, h, w)) * 2)


def suite_tensor_io(rng):
    for dtype in (np.float32, np.float64, np.uint16):
        t = (rng.random((3, 4, 2)) * 1000).astype(dtype)
        back = decode_tensor(encode_tensor(t))
        if back.dtype != t.dtype or back.tobytes() != t.tobytes():
            return False
    p = softmax_channels(rng.normal(size=(5, 3, 3)))
    return bool(np.allclose(p.sum(axis=0), 1, atol=1e-12))


def suite_projection(rng):
    for k in range(5):
        s = synthdata.make_sample(int(rng.integers(1 << 30)), k)
        onehot = np.eye(synthdata.N_CLASSES)[s.label_p3d.clip(0, 4)].transpose(2, 0, 1)
        back = projection.remap_to_points(onehot, s.index)
        v = s.index.valid
        if not np.array_equal(back[v], s.labels3d[v]):
            return False
    return True


def suite_mst(rng):
    for _ in range(20):
        h, w = rng.integers(2, 6, size=2)
        g = treefilter.build_grid_graph(rng.random((2, h, w)))
        t = treefilter.build_mst(g)
        kept = oracles.reverse_delete_mst(g.n_vertices, g.u, g.v, g.weight)
        if not math.isclose(g.weight[t.edge_ids].sum(), g.weight[kept].sum(), rel_tol=1e-12):
            return False
    return True


def suite_filter(rng):
    for _ in range(20):
        h, w = rng.integers(2, 10, size=2)
        g = treefilter.build_grid_graph(rng.random((3, h, w)))
        t = treefilter.build_mst(g)
        y = rng.random((3, h, w))
        a = treefilter.filter_linear(t, y)
        b = treefilter.filter_brute(t, g, y)
        if np.abs(a - b).max() > 1e-10 * np.abs(b).max():
            return False
    _, c16 = treefilter.filter_linear(treefilter.build_tree(rng.random((2, 16, 16))),
                                      rng.random((3, 16, 16)), return_count=True)
    _, c32 = treefilter.filter_linear(treefilter.build_tree(rng.random((2, 32, 32))),
                                      rng.random((3, 32, 32)), return_count=True)
    return c32 / c16 == 4.0 and c16 <= 8 * 3 * 16 * 16


def suite_filter_backward(rng):
    t = treefilter.build_tree(rng.random((2, 5, 5)))
    y = rng.random((2, 5, 5))
    g = rng.normal(size=y.shape)
    grad = treefilter.filter_backward(t, g)
    f = lambda: float((treefilter.filter_linear(t, y) * g).sum())  # noqa: E731
    for idx in [(0, 0, 0), (1, 2, 3), (0, 4, 4)]:
        if oracles.rel_err(grad[idx], oracles.central_difference(f, y, idx)) > 1e-4:
            return False
    return True


def suite_losses(rng):
    pred = _random_prediction(rng, 3, 4, 4)
    labels = rng.integers(0, 3, size=(4, 4)).astype(np.uint16)
    labels[0, 0] = IGNORE
    ok = math.isclose(losses.focal_loss(pred, labels, 2.0)[0],
                      oracles.focal_oracle(pred, labels, 2.0), rel_tol=1e-9)
    ok &= math.isclose(losses.lovasz_softmax(pred, labels)[0],
                       oracles.lovasz_softmax_oracle(pred, labels), rel_tol=1e-9)
    other = _random_prediction(rng, 3, 4, 4)
    ok &= math.isclose(losses.dycross_loss(pred, other, 0.3)[0],
                       oracles.dycross_oracle(pred, other, 0.3), rel_tol=1e-9, abs_tol=1e-15)
    for fn in (lambda p: losses.focal_loss(p, labels)[:2], lambda p: losses.lovasz_softmax(p, labels)):
        _, grad = fn(pred)
        for idx in [(0, 1, 1), (1, 2, 3), (2, 3, 0)]:
            num = oracles.central_difference(lambda: fn(pred)[0], pred, idx)
            ok &= oracles.rel_err(grad[idx], num, 1e-7) < 1e-4
    return bool(ok)


def suite_network(rng):
    seed = int(rng.integers(1 << 31))
    for use_filter in (False, True):
        for use_dycross in (False, True):
            errs = oracles.network_gradient_errors(Toggles(use_filter, use_dycross), seed, n_params=6)
            if max(e[-1] for e in errs) > 1e-3:
                return False
    return True


def suite_metrics(rng):
    iou, mean = evalkit.iou_from_counts([5, 3, 0], [1, 0, 4], [2, 0, 3])
    ok = np.allclose(iou, [0.625, 1.0, 0.0]) and math.isclose(mean, 1.625 / 3)
    pred = rng.integers(0, 4, 200)
    true = rng.integers(0, 4, 200)
    cm = evalkit.ConfusionMatrix(4).update(pred, true)
    return bool(ok and np.array_equal(cm.counts, oracles.confusion_tally(pred, true, 4)))


SUITES = {
    "tensor-io": suite_tensor_io,
    "projection round trip": suite_projection,
    "mst vs reverse-delete": suite_mst,
    "filter linear vs brute": suite_filter,
    "filter backward vs finite differences": suite_filter_backward,
    "losses vs oracles": suite_losses,
    "network gradients": suite_network,
    "metrics": suite_metrics,
}


def run(seed=0, out=None):
    out = out if out is not None else io.StringIO()
    failed = 0
    for name, fn in SUITES.items():
        try:
            ok = fn(make_rng(seed))
        except Exception as exc:  # report and continue with the other suites
            ok = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}", file=out)
    return failed == 0
