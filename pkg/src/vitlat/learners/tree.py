"""Weighted least-squares CART regression trees (numba kernels).

Trees are stored as flat arrays; node 0 is the root and leaves have
``feature == -1``. A sample goes left when ``x[feature] <= threshold``.
Among equal-gain splits the lowest feature index wins, then the lowest
threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

LEAF = -1
_UNLIMITED = 1 << 30


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    # weighted SSE decrease of each split, 0 at leaves
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
            np.asarray(d["gain"], dtype=np.float64),
        )


@numba.njit(cache=True)
def _presort(Xs):
    m, n_feat = Xs.shape
    order = np.empty((n_feat, m), np.int64)
    for f in range(n_feat):
        order[f] = np.argsort(Xs[:, f], kind="mergesort")
    return order


@numba.njit(cache=True)
def _build(Xs, ys, ws, order, max_depth, min_leaf, n_sub, seed):
    """Grow a tree over slots 0..m-1 of the gathered arrays.

    ``order[f]`` lists slots sorted by feature ``f``; every node owns the same
    contiguous range ``[start, end)`` in each row of ``order``.
    """
    m, n_feat = Xs.shape
    cap = 2 * m + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    gain = np.zeros(cap)
    leaf_of = np.zeros(m, np.int64)
    goes_left = np.zeros(m, np.bool_)
    buf = np.empty(m, np.int64)
    np.random.seed(seed)

    # stack of (node, start, end, depth)
    stack = np.zeros((cap, 4), np.int64)
    stack[0, 2] = m
    sp = 1
    n_nodes = 1
    feats = np.arange(n_feat)
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        start = stack[sp, 1]
        end = stack[sp, 2]
        depth = stack[sp, 3]
        n = end - start

        sw = 0.0
        swy = 0.0
        for k in range(start, end):
            i = order[0, k]
            sw += ws[i]
            swy += ws[i] * ys[i]
        mean = swy / sw
        sse = 0.0
        for k in range(start, end):
            i = order[0, k]
            d = ys[i] - mean
            sse += ws[i] * d * d
        value[node] = mean

        best_gain = 0.0
        best_f = -1
        best_pos = -1
        best_thr = 0.0
        if depth < max_depth and n >= 2 * min_leaf and sse > 1e-24 * sw * (abs(mean) + 1e-150) ** 2:
            if n_sub < n_feat:
                # partial Fisher-Yates draws the candidate features
                for a in range(n_sub):
                    b = a + np.random.randint(n_feat - a)
                    t = feats[a]
                    feats[a] = feats[b]
                    feats[b] = t
                cand = np.sort(feats[:n_sub].copy())
            else:
                cand = np.arange(n_feat)
            min_gain = sse * 1e-12
            for f in cand:
                # sums of node-centred targets limit cancellation
                lw = 0.0
                lwy = 0.0
                lwyy = 0.0
                for k in range(start, end - 1):
                    i = order[f, k]
                    yc = ys[i] - mean
                    lw += ws[i]
                    lwy += ws[i] * yc
                    lwyy += ws[i] * yc * yc
                    nl = k - start + 1
                    if nl < min_leaf or n - nl < min_leaf:
                        continue
                    x0 = Xs[i, f]
                    x1 = Xs[order[f, k + 1], f]
                    if x0 == x1:
                        continue
                    rw = sw - lw
                    rwy = -lwy
                    # right sums follow from the centred totals (sum yc = 0)
                    rwyy = sse - lwyy
                    g = sse - (lwyy - lwy * lwy / lw) - (rwyy - rwy * rwy / rw)
                    if g > best_gain and g > min_gain:
                        best_gain = g
                        best_f = f
                        best_pos = k
                        thr = 0.5 * (x0 + x1)
                        if thr >= x1:
                            thr = x0
                        best_thr = thr
        if best_f < 0:
            for k in range(start, end):
                leaf_of[order[0, k]] = node
            continue

        for k in range(start, end):
            goes_left[order[best_f, k]] = k <= best_pos
        mid = best_pos + 1
        for f in range(n_feat):
            a = start
            b = mid
            for k in range(start, end):
                i = order[f, k]
                if goes_left[i]:
                    buf[a] = i
                    a += 1
                else:
                    buf[b] = i
                    b += 1
            for k in range(start, end):
                order[f, k] = buf[k]

        feature[node] = best_f
        threshold[node] = best_thr
        gain[node] = best_gain
        left[node] = n_nodes
        right[node] = n_nodes + 1
        n_nodes += 2
        # right pushed first so the left subtree is expanded first
        stack[sp, 0] = right[node]
        stack[sp, 1] = mid
        stack[sp, 2] = end
        stack[sp, 3] = depth + 1
        sp += 1
        stack[sp, 0] = left[node]
        stack[sp, 1] = start
        stack[sp, 2] = mid
        stack[sp, 3] = depth + 1
        sp += 1

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], gain[:n_nodes], leaf_of)


class TreeGrower:
    """Grows trees on a fixed design matrix, sorting each column once."""

    def __init__(self, X):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self._order = None

    def grow(self, y, w=None, idx=None, max_depth=None, min_leaf=1, n_sub=None, seed=0):
        """Grow one tree on rows ``idx`` (duplicates allowed, default all rows).

        Returns ``(tree, leaves)`` with ``leaves[k]`` the leaf reached by the
        k-th training row.
        """
        y = np.asarray(y, dtype=np.float64)
        w = np.ones(len(y)) if w is None else np.asarray(w, dtype=np.float64)
        if idx is None:
            Xs, ys, ws = self.X, np.ascontiguousarray(y), np.ascontiguousarray(w)
            if self._order is None:
                self._order = _presort(Xs)
            order = self._order.copy()
        else:
            idx = np.asarray(idx, dtype=np.int64)
            Xs, ys, ws = self.X[idx], y[idx], w[idx]
            order = _presort(Xs)
        depth = _UNLIMITED if max_depth is None or max_depth < 0 else int(max_depth)
        n_feat = self.X.shape[1]
        n_sub = n_feat if n_sub is None else max(1, min(int(n_sub), n_feat))
        f, t, l, r, v, g, leaves = _build(Xs, ys, ws, order, depth, max(1, int(min_leaf)), n_sub,
                                          int(seed) % (2**32))
        return Tree(f, t, l, r, v, g), leaves


def fit_tree(X, y, w=None, idx=None, max_depth=None, min_leaf=1, n_sub=None, seed=0):
    return TreeGrower(X).grow(y, w, idx, max_depth, min_leaf, n_sub, seed)


@numba.njit(cache=True)
def _predict_forest(X, feature, threshold, left, right, value, offsets, weights, base):
    n = X.shape[0]
    out = np.full(n, base)
    for t in range(offsets.shape[0] - 1):
        o = offsets[t]
        wt = weights[t]
        for i in range(n):
            node = 0
            while feature[o + node] >= 0:
                if X[i, feature[o + node]] <= threshold[o + node]:
                    node = left[o + node]
                else:
                    node = right[o + node]
            out[i] += wt * value[o + node]
    return out


class PackedForest:
    """Trees concatenated into flat arrays for fast batch prediction."""

    def __init__(self, trees, weights, base=0.0):
        self.offsets = np.zeros(len(trees) + 1, dtype=np.int64)
        for i, t in enumerate(trees):
            self.offsets[i + 1] = self.offsets[i] + t.n_nodes
        cat = lambda name, dt: (np.concatenate([getattr(t, name) for t in trees]).astype(dt)
                                if trees else np.zeros(0, dt))
        self.feature = cat("feature", np.int64)
        self.threshold = cat("threshold", np.float64)
        self.left = cat("left", np.int64)
        self.right = cat("right", np.int64)
        self.value = cat("value", np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.base = float(base)

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _predict_forest(X, self.feature, self.threshold, self.left, self.right,
                               self.value, self.offsets, self.weights, self.base)


def predict_tree(tree: Tree, X) -> np.ndarray:
    return PackedForest([tree], [1.0]).predict(np.atleast_2d(X))
