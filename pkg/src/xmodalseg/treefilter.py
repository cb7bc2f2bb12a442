"""Guided tree filtering over a minimum spanning tree of a feature map.

The guide (``C x H x W``) defines a 4-connected grid graph whose edge weights
are L2 feature distances.  Its MST induces tree distances ``D`` and affinities
``A = exp(-D)``; filtering replaces every pixel by the ``A``-weighted mean of
all pixels.  :func:`filter_linear` does this in two tree sweeps,
:func:`filter_brute` materialises the full ``HW x HW`` affinity matrix.

Vertices are pixels in row-major order.  Edges are kept in canonical
``(u, v)`` lexicographic order with ``u < v``; that index breaks weight ties
in the MST.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numba
import numpy as np
from scipy.sparse.csgraph import csgraph_from_dense, shortest_path


class GuideSource(enum.Enum):
    CAM_LOW = "cam-low"
    CAM_IMAGE = "cam-image"
    CAM_HIGH = "cam-high"
    LIDAR_LOW = "lidar-low"


@dataclass(frozen=True)
class GridGraph:
    height: int
    width: int
    u: np.ndarray
    v: np.ndarray
    weight: np.ndarray

    @property
    def n_vertices(self):
        return self.height * self.width

    @property
    def n_edges(self):
        return len(self.weight)


@dataclass(frozen=True)
class SpanningTree:
    """Rooted spanning tree; ``order`` lists parents before children."""

    height: int
    width: int
    root: int
    parent: np.ndarray
    parent_weight: np.ndarray
    order: np.ndarray
    depth: np.ndarray
    edge_ids: np.ndarray

    @property
    def n_vertices(self):
        return self.height * self.width

    def edges(self):
        """Tree edges as (child, parent, weight) triples, root excluded."""
        kids = np.flatnonzero(self.parent != np.arange(self.n_vertices))
        return kids, self.parent[kids], self.parent_weight[kids]

    def parent_affinity(self, dtype=np.float64):
        """``exp(-w)`` to the parent; the root gets 0 so sweeps need no branch."""
        a = np.exp(-self.parent_weight.astype(np.float64))
        a[self.root] = 0.0
        return a.astype(dtype)


def _grid_edges(height, width):
    idx = np.arange(height * width).reshape(height, width)
    right = np.full((height, width), -1)
    right[:, :-1] = idx[:, 1:]
    down = np.full((height, width), -1)
    down[:-1, :] = idx[1:, :]
    # Interleave so each vertex lists (u, u+1) before (u, u+W): lexicographic.
    pairs = np.stack([right.ravel(), down.ravel()], axis=1)
    u = np.repeat(idx.ravel(), 2)
    v = pairs.ravel()
    keep = v >= 0
    return u[keep], v[keep]


def build_grid_graph(guide):
    """4-connected grid graph with weights ``||F(m) - F(n)||_2``."""
    guide = np.asarray(guide)
    if guide.ndim != 3:
        raise ValueError(f"guide must be C x H x W, got shape {guide.shape}")
    c, h, w = guide.shape
    if c < 1 or h * w < 2:
        raise ValueError(f"degenerate guide dims {guide.shape}")
    u, v = _grid_edges(h, w)
    flat = guide.reshape(c, h * w).astype(np.float64)
    diff = flat[:, u] - flat[:, v]
    weight = np.sqrt((diff * diff).sum(axis=0))
    return GridGraph(h, w, u, v, weight)


@numba.njit(cache=True)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@numba.njit(cache=True)
def _kruskal(n, u, v, sorted_edges):
    uf = np.arange(n)
    rank = np.zeros(n, dtype=np.int64)
    chosen = np.empty(n - 1, dtype=np.int64)
    k = 0
    for e in sorted_edges:
        a = _find(uf, u[e])
        b = _find(uf, v[e])
        if a == b:
            continue
        if rank[a] < rank[b]:
            a, b = b, a
        uf[b] = a
        if rank[a] == rank[b]:
            rank[a] += 1
        chosen[k] = e
        k += 1
        if k == n - 1:
            break
    return chosen[:k]


@numba.njit(cache=True)
def _bfs(n, root, tu, tv, tw):
    deg = np.zeros(n + 1, dtype=np.int64)
    for i in range(len(tu)):
        deg[tu[i] + 1] += 1
        deg[tv[i] + 1] += 1
    start = np.cumsum(deg)
    fill = start[:-1].copy()
    nbr = np.empty(2 * len(tu), dtype=np.int64)
    nw = np.empty(2 * len(tu), dtype=np.float64)
    for i in range(len(tu)):
        nbr[fill[tu[i]]] = tv[i]
        nw[fill[tu[i]]] = tw[i]
        fill[tu[i]] += 1
        nbr[fill[tv[i]]] = tu[i]
        nw[fill[tv[i]]] = tw[i]
        fill[tv[i]] += 1
    parent = np.full(n, -1, dtype=np.int64)
    pw = np.zeros(n, dtype=np.float64)
    depth = np.zeros(n, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    parent[root] = root
    order[0] = root
    head, tail = 0, 1
    while head < tail:
        x = order[head]
        head += 1
        for k in range(start[x], start[x + 1]):
            y = nbr[k]
            if parent[y] < 0:
                parent[y] = x
                pw[y] = nw[k]
                depth[y] = depth[x] + 1
                order[tail] = y
                tail += 1
    return parent, pw, depth, order[:tail]


def build_mst(g, root=0):
    """Kruskal MST; ties broken by canonical edge index; BFS order from ``root``."""
    n = g.n_vertices
    if not 0 <= root < n:
        raise ValueError(f"root {root} out of range")
    sorted_edges = np.argsort(g.weight, kind="stable")
    chosen = np.sort(_kruskal(n, g.u, g.v, sorted_edges))
    if len(chosen) != n - 1:
        raise ValueError("grid graph is disconnected")
    parent, pw, depth, order = _bfs(n, root, g.u[chosen], g.v[chosen], g.weight[chosen])
    return SpanningTree(g.height, g.width, root, parent, pw, order, depth, chosen)


def tree_distance(t, g, i, j):
    """Sum of edge weights on the tree path between vertices ``i`` and ``j``."""
    n = t.n_vertices
    for x in (i, j):
        if not 0 <= x < n:
            raise ValueError(f"vertex {x} out of range [0, {n})")
    total = 0.0
    while t.depth[i] > t.depth[j]:
        total += t.parent_weight[i]
        i = t.parent[i]
    while t.depth[j] > t.depth[i]:
        total += t.parent_weight[j]
        j = t.parent[j]
    while i != j:
        total += t.parent_weight[i] + t.parent_weight[j]
        i, j = t.parent[i], t.parent[j]
    return float(total)


def affinity(d):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("tree distance must be non-negative")
    out = np.exp(-d)
    return float(out) if out.ndim == 0 else out


def tree_distance_matrix(t):
    """All-pairs tree distances via shortest paths on the tree's edges."""
    n = t.n_vertices
    dense = np.full((n, n), np.inf)
    kids, parents, w = t.edges()
    dense[kids, parents] = w
    dense[parents, kids] = w
    d = shortest_path(csgraph_from_dense(dense, null_value=np.inf), directed=False)
    # Path sums accumulate in traversal order; both directions are the same path.
    return np.minimum(d, d.T)


def _check_signal(t, y):
    y = np.asarray(y)
    if y.ndim != 3 or y.shape[1:] != (t.height, t.width):
        raise ValueError(f"signal shape {y.shape} does not match tree {t.height}x{t.width}")
    return y


def filter_brute(t, g, y):
    """Reference filter: explicit ``HW x HW`` affinity matrix, O((HW)^2)."""
    y = _check_signal(t, y)
    if (g.height, g.width) != (t.height, t.width):
        raise ValueError("graph and tree dims differ")
    c = y.shape[0]
    a = np.exp(-tree_distance_matrix(t))
    flat = y.reshape(c, -1).astype(np.float64)
    out = (flat @ a.T) / a.sum(axis=1)
    return out.reshape(y.shape).astype(y.dtype)


@numba.njit(cache=True)
def _aggregate(order, parent, aff, x):
    """Unnormalised ``sum_j A_ij x_j`` for every vertex; returns (out, mads)."""
    c = x.shape[0]
    up = x.copy()
    mads = 0
    for k in range(len(order) - 1, -1, -1):
        v = order[k]
        p = parent[v]
        a = aff[v]
        for ch in range(c):
            up[ch, p] += a * up[ch, v]
        mads += c
    out = np.zeros_like(x)
    for k in range(len(order)):
        v = order[k]
        p = parent[v]
        a = aff[v]
        for ch in range(c):
            out[ch, v] = up[ch, v] + a * (out[ch, p] - a * up[ch, v])
        mads += 2 * c
    return out, mads


def aggregate(t, x):
    """Tree-weighted sums ``sum_j exp(-D_ij) x_j`` in two sweeps; x is C x H x W."""
    x = _check_signal(t, x)
    flat = np.ascontiguousarray(x.reshape(x.shape[0], -1))
    out, mads = _aggregate(t.order, t.parent, t.parent_affinity(flat.dtype), flat)
    return out.reshape(x.shape), mads


def normalizer(t, dtype=np.float64):
    """Row sums ``z_i = sum_j A_ij`` as an ``H x W`` map."""
    z, _ = aggregate(t, np.ones((1, t.height, t.width), dtype=dtype))
    return z[0]


def filter_linear(t, y, return_count=False):
    """Normalised tree filter in O(C*H*W).

    With ``return_count`` also returns the number of multiply-adds performed
    by the sweeps (signal plus normaliser).
    """
    y = _check_signal(t, y)
    if not np.issubdtype(y.dtype, np.floating):
        y = y.astype(np.float64)
    num, mads = aggregate(t, y)
    z, zmads = aggregate(t, np.ones((1, t.height, t.width), dtype=y.dtype))
    out = num / z
    if return_count:
        return out, mads + zmads
    return out


def filter_backward(t, grad_out, z=None):
    """Gradient of :func:`filter_linear` w.r.t. its input, affinities held fixed.

    ``A`` is symmetric, so ``dL/dy_j = sum_i A_ij g_i / z_i`` is the same
    aggregation applied to ``g / z``.
    """
    grad_out = _check_signal(t, grad_out)
    if z is None:
        z = normalizer(t, grad_out.dtype)
    grad_in, _ = aggregate(t, grad_out / z)
    return grad_in


def build_tree(guide, root=0):
    return build_mst(build_grid_graph(guide), root=root)


def guided_filter(y, guide, source=GuideSource.CAM_LOW, tree=None):
    """Filter ``y`` with affinities from an MST over ``guide``.

    ``source`` only records which feature the caller chose as guide.  Pass a
    prebuilt ``tree`` to skip graph construction.
    """
    GuideSource(source)
    y = np.asarray(y)
    guide = np.asarray(guide)
    if guide.shape[1:] != y.shape[1:]:
        raise ValueError(f"guide dims {guide.shape[1:]} differ from signal dims {y.shape[1:]}")
    if tree is None:
        tree = build_tree(guide)
    return filter_linear(tree, y)
