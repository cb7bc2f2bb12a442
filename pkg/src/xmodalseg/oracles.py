"""Slow, independent reference computations used by the tests and ``selftest``.

Nothing here shares code with the fast paths it checks.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np


def _connected(n, edges):
    adj = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = {0}
    todo = deque([0])
    while todo:
        x = todo.popleft()
        for y in adj[x]:
            if y not in seen:
                seen.add(y)
                todo.append(y)
    return len(seen) == n


def reverse_delete_mst(n, u, v, w):
    """MST by deleting the heaviest edge whose removal keeps the graph connected.

    Edges are visited by decreasing (weight, index).  Returns the kept edge
    indices.
    """
    keep = set(range(len(w)))
    for e in sorted(range(len(w)), key=lambda e: (w[e], e), reverse=True):
        trial = keep - {e}
        if _connected(n, [(u[i], v[i]) for i in trial]):
            keep = trial
    return sorted(keep)


def tree_path_distance(parent, parent_weight, i, j):
    """Path length between i and j by BFS over the undirected tree edges."""
    n = len(parent)
    adj = [[] for _ in range(n)]
    for c in range(n):
        p = int(parent[c])
        if p != c:
            adj[c].append((p, float(parent_weight[c])))
            adj[p].append((c, float(parent_weight[c])))
    dist = {i: 0.0}
    todo = deque([i])
    while todo:
        x = todo.popleft()
        for y, wt in adj[x]:
            if y not in dist:
                dist[y] = dist[x] + wt
                todo.append(y)
    return dist[j]


def jaccard_loss_of_set(mistakes, fg):
    """Jaccard loss when ``mistakes`` are mispredicted, ``fg`` the true set."""
    if not mistakes:
        return 0.0
    return len(mistakes) / len(fg | mistakes)


def lovasz_extension(errors, fg_mask):
    """Lovász extension of the Jaccard loss, evaluated prefix by prefix."""
    errors = [float(e) for e in errors]
    fg = {i for i, f in enumerate(fg_mask) if f}
    order = sorted(range(len(errors)), key=lambda i: (-errors[i], i))
    total, prev, prefix = 0.0, 0.0, set()
    for i in order:
        prefix.add(i)
        cur = jaccard_loss_of_set(prefix, fg)
        total += errors[i] * (cur - prev)
        prev = cur
    return total


def lovasz_softmax_oracle(pred, labels, ignore=65535):
    n_cls = pred.shape[0]
    pix = [(r, c) for r in range(labels.shape[0]) for c in range(labels.shape[1])
           if labels[r, c] != ignore]
    present = sorted({int(labels[r, c]) for r, c in pix})
    terms = []
    for k in present:
        fg = [labels[r, c] == k for r, c in pix]
        err = [abs((1.0 if f else 0.0) - pred[k, r, c]) for f, (r, c) in zip(fg, pix)]
        terms.append(lovasz_extension(err, fg))
    assert n_cls > max(present)
    return sum(terms) / len(terms)


def focal_oracle(pred, labels, gamma, ignore=65535):
    total, count = 0.0, 0
    for r in range(labels.shape[0]):
        for c in range(labels.shape[1]):
            if labels[r, c] == ignore:
                continue
            p = float(pred[labels[r, c], r, c])
            total += -((1 - p) ** gamma) * math.log(p)
            count += 1
    return total / count


def kl_oracle(p, q, eps):
    return sum(pi * math.log((pi + eps) / (qi + eps)) for pi, qi in zip(p, q))


def confidence_oracle(pred):
    out = np.empty(pred.shape[1:])
    for r in range(pred.shape[1]):
        for c in range(pred.shape[2]):
            out[r, c] = max(pred[:, r, c])
    return out


def dycross_oracle(y_lidar, y_cam, tau, eps=1e-8):
    """Scalar-loop evaluation of the gated two-way KL loss."""
    _, h, w = y_lidar.shape
    total = 0.0
    for r in range(h):
        for c in range(w):
            pl, pc = list(y_lidar[:, r, c]), list(y_cam[:, r, c])
            cl, cc = max(pl), max(pc)
            if cc > max(cl, tau):
                total += (cc - cl) * kl_oracle(pl, pc, eps)
            if cl > max(cc, tau):
                total += (cl - cc) * kl_oracle(pc, pl, eps)
    return total / (h * w)


def central_difference(f, x, index, h=1e-6):
    """d f / d x[index] by central differences; ``x`` is modified and restored."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def confusion_tally(pred, true, n_cls, ignore=65535, unprojected=65535):
    cm = np.zeros((n_cls, n_cls), dtype=np.int64)
    for p, t in zip(np.ravel(pred), np.ravel(true)):
        if t == ignore or p == unprojected:
            continue
        cm[int(t), int(p)] += 1
    return cm


def network_gradient_errors(toggles, seed=0, n_params=20, n_cls=4, size=8, tau=0.3):
    """Relative errors of the network's analytic gradient at sampled parameters.

    Float64 parameters, random ``size x size`` inputs and labels.  The tree and
    the pseudo-supervision references stay fixed at their unperturbed values,
    matching the constants of the analytic backward pass.  Returns a list of
    ``(name, index, analytic, numeric, rel_err)``.
    """
    from .losses import total_loss
    from .micronet import micronet_backward, micronet_forward, micronet_init

    rng = np.random.default_rng(seed)
    params = micronet_init(rng, n_cls).astype(np.float64)
    lmap = rng.random((5, size, size)) * np.array([20, 20, 10, 2, 1.0])[:, None, None]
    lmap[:, rng.random((size, size)) < 0.5] = 0
    img = rng.random((3, size, size))
    labels = rng.integers(0, n_cls, (size, size)).astype(np.uint16)
    labels[rng.random((size, size)) < 0.3] = 65535

    y_l, y_c, _, trace = micronet_forward(lmap, img, params, toggles)
    _, g_l, g_c = total_loss(y_l, y_c, labels, tau, use_dycross=toggles.use_dycross)
    grads = micronet_backward(trace, g_l, g_c, params)

    def f():
        a, b, _, _ = micronet_forward(lmap, img, params, toggles, tree=trace.tree)
        terms, _, _ = total_loss(a, b, labels, tau, use_dycross=toggles.use_dycross,
                                 ref_lidar=y_l, ref_cam=y_c)
        return terms.total

    names = [k for k in params.keys() if not k.startswith("guide.")]
    out = []
    for _ in range(n_params):
        name = names[int(rng.integers(len(names)))]
        idx = tuple(int(rng.integers(s)) for s in params[name].shape)
        num = central_difference(f, params.arrays[name], idx)
        ana = float(grads[name][idx])
        out.append((name, idx, ana, num, rel_err(ana, num)))
    return out
