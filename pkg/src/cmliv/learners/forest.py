"""Bagged CART regression trees (random forest) compiled with numba.

Each tree draws a bootstrap sample of the training rows, then grows a
variance-reduction tree in which every node considers a random subset of
``mtry`` features. Feature orderings are computed once per forest and
restricted to the in-bag rows of each tree, so split search at a node is a
linear scan.

Tree randomness comes from numba's internal generator reseeded at the start
of every tree with a per-tree seed, which keeps a forest a pure function of
its seed.
"""

from __future__ import annotations

import numba as nb
import numpy as np

LEAF = -1


@nb.njit(cache=True)
def _grow_tree(X, y, w, order, counts, min_leaf, max_depth, mtry,
               feat, thr, left, right, value):
    n, k = X.shape
    # in-bag rows, sorted by each feature
    m = 0
    for i in range(n):
        if counts[i] > 0:
            m += 1
    idx = np.empty((k, m), dtype=np.int64)
    for f in range(k):
        j = 0
        for t in range(n):
            r = order[f, t]
            if counts[r] > 0:
                idx[f, j] = r
                j += 1

    buf = np.empty(m, dtype=np.int64)
    goes_left = np.zeros(n, dtype=np.bool_)
    perm = np.arange(k)

    stack_node = np.empty(m + 1, dtype=np.int64)
    stack_start = np.empty(m + 1, dtype=np.int64)
    stack_end = np.empty(m + 1, dtype=np.int64)
    stack_depth = np.empty(m + 1, dtype=np.int64)
    top = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = m
    stack_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        s = stack_start[top]
        e = stack_end[top]
        depth = stack_depth[top]

        W = 0.0
        S = 0.0
        C = 0
        ymin = np.inf
        ymax = -np.inf
        for t in range(s, e):
            r = idx[0, t]
            wc = w[r] * counts[r]
            W += wc
            S += wc * y[r]
            C += counts[r]
            if y[r] < ymin:
                ymin = y[r]
            if y[r] > ymax:
                ymax = y[r]
        if ymin == ymax:
            val = ymin
        elif W > 0:
            val = S / W
        else:
            cs = 0.0
            for t in range(s, e):
                r = idx[0, t]
                cs += counts[r] * y[r]
            val = cs / C
        value[node] = val
        feat[node] = LEAF
        left[node] = LEAF
        right[node] = LEAF

        if ymin == ymax or C < 2 * min_leaf or W <= 0:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue

        # partial Fisher-Yates: first mtry entries of perm are the candidates
        for a in range(mtry):
            b = a + np.random.randint(0, k - a)
            tmp = perm[a]
            perm[a] = perm[b]
            perm[b] = tmp

        parent = S * S / W
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        for a in range(mtry):
            f = perm[a]
            wl = 0.0
            sl = 0.0
            cl = 0
            for t in range(s, e - 1):
                r = idx[f, t]
                wc = w[r] * counts[r]
                wl += wc
                sl += wc * y[r]
                cl += counts[r]
                xa = X[r, f]
                xb = X[idx[f, t + 1], f]
                if xb <= xa:
                    continue
                if cl < min_leaf or C - cl < min_leaf:
                    continue
                wr = W - wl
                if wl <= 0 or wr <= 0:
                    continue
                sr = S - sl
                gain = sl * sl / wl + sr * sr / wr - parent
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_thr = xa + (xb - xa) * 0.5
                    if best_thr >= xb:
                        best_thr = xa

        if best_f < 0 or best_gain <= 1e-12 * (abs(parent) + 1e-300):
            continue

        for t in range(s, e):
            r = idx[0, t]
            goes_left[r] = X[r, best_f] <= best_thr
        n_left = 0
        for f in range(k):
            lo = 0
            for t in range(s, e):
                r = idx[f, t]
                if goes_left[r]:
                    buf[lo] = r
                    lo += 1
            n_left = lo
            for t in range(s, e):
                r = idx[f, t]
                if not goes_left[r]:
                    buf[lo] = r
                    lo += 1
            for t in range(e - s):
                idx[f, s + t] = buf[t]

        feat[node] = best_f
        thr[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc

        stack_node[top] = rc
        stack_start[top] = s + n_left
        stack_end[top] = e
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lc
        stack_start[top] = s
        stack_end[top] = s + n_left
        stack_depth[top] = depth + 1
        top += 1

    return n_nodes


@nb.njit(cache=True)
def _grow_forest(X, y, w, seeds, min_leaf, max_depth, mtry, max_nodes, bootstrap):
    n, k = X.shape
    n_trees = seeds.shape[0]
    order = np.empty((k, n), dtype=np.int64)
    for f in range(k):
        order[f] = np.argsort(X[:, f], kind="mergesort")
    feat = np.full((n_trees, max_nodes), LEAF, dtype=np.int64)
    thr = np.zeros((n_trees, max_nodes))
    left = np.full((n_trees, max_nodes), LEAF, dtype=np.int64)
    right = np.full((n_trees, max_nodes), LEAF, dtype=np.int64)
    value = np.zeros((n_trees, max_nodes))
    n_nodes = np.zeros(n_trees, dtype=np.int64)
    counts = np.empty(n, dtype=np.int64)
    for t in range(n_trees):
        np.random.seed(seeds[t])
        if bootstrap:
            counts[:] = 0
            for _ in range(n):
                counts[np.random.randint(0, n)] += 1
        else:
            counts[:] = 1
        n_nodes[t] = _grow_tree(X, y, w, order, counts, min_leaf, max_depth, mtry,
                                feat[t], thr[t], left[t], right[t], value[t])
    return feat, thr, left, right, value, n_nodes


@nb.njit(cache=True)
def _predict_forest(X, feat, thr, left, right, value):
    n = X.shape[0]
    n_trees = feat.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for t in range(n_trees):
            node = 0
            while left[t, node] != LEAF:
                if X[i, feat[t, node]] <= thr[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            acc += value[t, node]
        out[i] = acc / n_trees
    return out


class ForestModel:
    """Fitted forest: node arrays of shape ``(n_trees, n_nodes)``."""

    def __init__(self, feat, thr, left, right, value, n_features):
        self.feat = np.ascontiguousarray(feat)
        self.thr = np.ascontiguousarray(thr)
        self.left = np.ascontiguousarray(left)
        self.right = np.ascontiguousarray(right)
        self.value = np.ascontiguousarray(value)
        self.n_features = n_features

    @property
    def n_trees(self) -> int:
        return self.feat.shape[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _predict_forest(X, self.feat, self.thr, self.left, self.right, self.value)


def fit_forest(X, y, w, *, n_trees: int, min_leaf: int, max_depth: int | None,
               mtry: int, seed: int, bootstrap: bool = True) -> ForestModel:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    n, k = X.shape
    seeds = np.random.SeedSequence(seed).generate_state(n_trees, dtype=np.uint32)
    seeds = (seeds & np.uint32(0x7FFFFFFF)).astype(np.int64)
    max_nodes = 2 * (n // max(min_leaf, 1)) + 1
    feat, thr, left, right, value, n_nodes = _grow_forest(
        X, y, w, seeds, int(min_leaf), -1 if max_depth is None else int(max_depth),
        int(mtry), int(max_nodes), bool(bootstrap),
    )
    width = int(n_nodes.max())
    return ForestModel(feat[:, :width], thr[:, :width], left[:, :width],
                       right[:, :width], value[:, :width], k)
