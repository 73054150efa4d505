"""Compiled kernels: exact greedy regression trees on Newton statistics.

Trees are stored flat. Node ``i`` of a forest is a leaf when ``feature[i] < 0``;
otherwise rows with ``x[feature] <= threshold`` (or NaN) go to ``left[i]``.
Child indices are absolute positions in the flat arrays.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _grow(arr, size, new_size):
    out = np.empty(new_size, dtype=arr.dtype)
    out[:size] = arr[:size]
    return out


@njit(cache=True, nogil=True)
def presort(X):
    """Row order per feature, ascending, NaN last."""
    n, f = X.shape
    order = np.empty((f, n), dtype=np.int64)
    for j in range(f):
        order[j] = np.argsort(X[:, j], kind="mergesort")
    return order


@njit(cache=True, nogil=True)
def build_tree(X, order, svals, g, h, in_sample, cols, max_depth, min_rows, eps,
               feat, thr, left, right, value, count):
    """Grow one tree level by level into the scratch arrays. Returns node count.

    Each selected column keeps its rows in presorted order, compacted after
    every level to the rows whose node can still split.
    """
    n = X.shape[0]
    cap = feat.shape[0]
    kc = cols.shape[0]
    node_of = np.full(n, -1, dtype=np.int64)
    G = np.zeros(cap)
    H = np.zeros(cap)
    depth = np.zeros(cap, dtype=np.int64)
    n_nodes = 1
    feat[0] = -1
    count[0] = 0
    for r in range(n):
        if in_sample[r]:
            node_of[r] = 0
            G[0] += g[r]
            H[0] += h[r]
            count[0] += 1

    rows = np.empty((kc, count[0]), dtype=np.int64)
    vals = np.empty((kc, count[0]))
    gs = np.empty((kc, count[0]))
    hs = np.empty((kc, count[0]))
    nds = np.zeros((kc, count[0]), dtype=np.int64)
    length = 0
    for ci in range(kc):
        j = cols[ci]
        m = 0
        for k in range(n):
            r = order[j, k]
            if in_sample[r]:
                rows[ci, m] = r
                vals[ci, m] = svals[j, k]
                gs[ci, m] = g[r]
                hs[ci, m] = h[r]
                m += 1
        length = m

    level_lo, level_hi = 0, 1
    best_gain = np.zeros(cap)
    best_feat = np.full(cap, -1, dtype=np.int64)
    best_thr = np.zeros(cap)
    GL = np.zeros(cap)
    HL = np.zeros(cap)
    nL = np.zeros(cap, dtype=np.int64)
    last = np.zeros(cap)
    seen = np.zeros(cap, dtype=np.int64)
    active = np.zeros(cap, dtype=np.bool_)

    while level_lo < level_hi and length > 0:
        any_active = False
        for nd in range(level_lo, level_hi):
            ok = depth[nd] < max_depth and count[nd] >= 2 * min_rows
            active[nd] = ok
            best_gain[nd] = 0.0
            best_feat[nd] = -1
            if ok:
                any_active = True
        if not any_active:
            break
        for ci in range(kc):
            j = cols[ci]
            for nd in range(level_lo, level_hi):
                GL[nd] = 0.0
                HL[nd] = 0.0
                nL[nd] = 0
                seen[nd] = 0
            # missing values always go left
            for k in range(length - 1, -1, -1):
                if not np.isnan(vals[ci, k]):
                    break
                nd = nds[ci, k]
                if active[nd]:
                    GL[nd] += gs[ci, k]
                    HL[nd] += hs[ci, k]
                    nL[nd] += 1
            for k in range(length):
                v = vals[ci, k]
                if np.isnan(v):
                    break
                nd = nds[ci, k]
                if not active[nd]:
                    continue
                if seen[nd] > 0 and v > last[nd]:
                    nl = nL[nd]
                    nr = count[nd] - nl
                    if nl >= min_rows and nr >= min_rows:
                        gr = G[nd] - GL[nd]
                        hr = H[nd] - HL[nd]
                        parent = G[nd] * G[nd] / (H[nd] + eps)
                        gain = GL[nd] * GL[nd] / (HL[nd] + eps) + gr * gr / (hr + eps) - parent
                        if gain > best_gain[nd] and gain > 1e-12 * (abs(parent) + 1.0):
                            best_gain[nd] = gain
                            best_feat[nd] = j
                            t = 0.5 * (last[nd] + v)
                            if not t < v:
                                t = last[nd]
                            best_thr[nd] = t
                GL[nd] += gs[ci, k]
                HL[nd] += hs[ci, k]
                nL[nd] += 1
                seen[nd] += 1
                last[nd] = v
        new_lo = n_nodes
        for nd in range(level_lo, level_hi):
            if best_feat[nd] >= 0:
                if n_nodes + 2 > cap:
                    best_feat[nd] = -1
                    continue
                feat[nd] = best_feat[nd]
                thr[nd] = best_thr[nd]
                left[nd] = n_nodes
                right[nd] = n_nodes + 1
                for c in (n_nodes, n_nodes + 1):
                    feat[c] = -1
                    G[c] = 0.0
                    H[c] = 0.0
                    count[c] = 0
                    depth[c] = depth[nd] + 1
                    active[c] = False
                n_nodes += 2
        if n_nodes == new_lo:
            break
        # route rows of split nodes; every row still listed sits in this level
        for k in range(length):
            r = rows[0, k]
            nd = node_of[r]
            if best_feat[nd] < 0 or feat[nd] < 0:
                node_of[r] = -1 - nd
                continue
            v = X[r, feat[nd]]
            c = left[nd] if (np.isnan(v) or v <= thr[nd]) else right[nd]
            node_of[r] = c
            G[c] += g[r]
            H[c] += h[r]
            count[c] += 1
        for c in range(new_lo, n_nodes):
            active[c] = depth[c] < max_depth and count[c] >= 2 * min_rows
        new_len = 0
        for ci in range(kc):
            m = 0
            for k in range(length):
                r = rows[ci, k]
                nd = node_of[r]
                if nd >= 0 and active[nd]:
                    rows[ci, m] = r
                    vals[ci, m] = vals[ci, k]
                    gs[ci, m] = gs[ci, k]
                    hs[ci, m] = hs[ci, k]
                    nds[ci, m] = nd
                    m += 1
            new_len = m
        length = new_len
        level_lo, level_hi = new_lo, n_nodes

    for nd in range(n_nodes):
        if feat[nd] < 0:
            value[nd] = -G[nd] / (H[nd] + eps)
            left[nd] = -1
            right[nd] = -1
        else:
            value[nd] = 0.0
    return n_nodes


@njit(cache=True, nogil=True)
def tree_output(X, root, feat, thr, left, right, value, out):
    for r in range(X.shape[0]):
        nd = root
        while feat[nd] >= 0:
            v = X[r, feat[nd]]
            nd = left[nd] if (np.isnan(v) or v <= thr[nd]) else right[nd]
        out[r] = value[nd]


@njit(cache=True, nogil=True)
def _mean_loss(margin, y, w):
    tot = 0.0
    wsum = 0.0
    for i in range(margin.shape[0]):
        m = margin[i]
        tot += w[i] * (np.log1p(np.exp(-abs(m))) + max(m, 0.0) - y[i] * m)
        wsum += w[i]
    return tot / wsum


@njit(cache=True, nogil=True)
def boost(X, y, w, base, n_trees, lr, max_depth, min_rows, eps,
          row_u, sample_rate, col_sel):
    """Boost ``n_trees`` trees on the logistic loss.

    ``row_u`` holds per-tree uniforms for Bernoulli row sampling (ignored when
    ``sample_rate >= 1``); ``col_sel`` holds the per-tree column subsets.
    A tree whose Newton step would raise the training loss is shrunk by
    halving until it does not (or zeroed).
    Returns flat node arrays, per-tree root offsets and the loss trace.
    """
    n, f = X.shape
    order = presort(X)
    svals = np.empty((f, n))
    for j in range(f):
        for k in range(n):
            svals[j, k] = X[order[j, k], j]
    margin = np.full(n, base)
    cap_tree = min(2 ** (max_depth + 1) - 1, 2 * (n // max(min_rows, 1)) + 3)
    s_feat = np.empty(cap_tree, dtype=np.int64)
    s_thr = np.empty(cap_tree)
    s_left = np.empty(cap_tree, dtype=np.int64)
    s_right = np.empty(cap_tree, dtype=np.int64)
    s_value = np.empty(cap_tree)
    s_count = np.empty(cap_tree, dtype=np.int64)

    size = 0
    cap = max(16, n_trees * 3)
    feat = np.empty(cap, dtype=np.int64)
    thr = np.empty(cap)
    left = np.empty(cap, dtype=np.int64)
    right = np.empty(cap, dtype=np.int64)
    value = np.empty(cap)
    count = np.empty(cap, dtype=np.int64)
    roots = np.empty(n_trees, dtype=np.int64)
    losses = np.empty(n_trees + 1)
    losses[0] = _mean_loss(margin, y, w)

    g = np.empty(n)
    h = np.empty(n)
    in_sample = np.ones(n, dtype=np.bool_)
    delta = np.empty(n)
    trial = np.empty(n)
    for t in range(n_trees):
        for i in range(n):
            p = 1.0 / (1.0 + np.exp(-margin[i]))
            g[i] = w[i] * (p - y[i])
            h[i] = w[i] * p * (1.0 - p)
        if sample_rate < 1.0:
            for i in range(n):
                in_sample[i] = row_u[t, i] < sample_rate
        k = build_tree(X, order, svals, g, h, in_sample, col_sel[t], max_depth, min_rows, eps,
                       s_feat, s_thr, s_left, s_right, s_value, s_count)
        tree_output(X, 0, s_feat, s_thr, s_left, s_right, s_value, delta)
        scale = 1.0
        prev = losses[t]
        cur = prev
        for _ in range(8):
            for i in range(n):
                trial[i] = margin[i] + lr * (scale * delta[i])
            cur = _mean_loss(trial, y, w)
            if cur <= prev:
                break
            scale *= 0.5
        if cur > prev:
            cur = prev
            for nd in range(k):
                s_value[nd] = 0.0
            for i in range(n):
                trial[i] = margin[i]
        elif scale != 1.0:
            for nd in range(k):
                s_value[nd] = scale * s_value[nd]
            for i in range(n):
                trial[i] = margin[i] + lr * s_value_at(X, i, s_feat, s_thr, s_left, s_right, s_value)
            cur = _mean_loss(trial, y, w)
        for i in range(n):
            margin[i] = trial[i]
        losses[t + 1] = cur

        if size + k > cap:
            new_cap = max(2 * cap, size + k)
            feat = _grow(feat, size, new_cap)
            thr = _grow(thr, size, new_cap)
            left = _grow(left, size, new_cap)
            right = _grow(right, size, new_cap)
            value = _grow(value, size, new_cap)
            count = _grow(count, size, new_cap)
            cap = new_cap
        roots[t] = size
        for nd in range(k):
            feat[size + nd] = s_feat[nd]
            thr[size + nd] = s_thr[nd] if s_feat[nd] >= 0 else 0.0
            left[size + nd] = s_left[nd] + size if s_feat[nd] >= 0 else -1
            right[size + nd] = s_right[nd] + size if s_feat[nd] >= 0 else -1
            value[size + nd] = s_value[nd]
            count[size + nd] = s_count[nd]
        size += k
    return (feat[:size].copy(), thr[:size].copy(), left[:size].copy(), right[:size].copy(),
            value[:size].copy(), count[:size].copy(), roots, losses)


@njit(cache=True, nogil=True)
def s_value_at(X, i, feat, thr, left, right, value):
    nd = 0
    while feat[nd] >= 0:
        v = X[i, feat[nd]]
        nd = left[nd] if (np.isnan(v) or v <= thr[nd]) else right[nd]
    return value[nd]


@njit(cache=True, nogil=True)
def forest_margin(X, base, lr, roots, feat, thr, left, right, value):
    n = X.shape[0]
    out = np.full(n, base)
    for i in range(n):
        m = base
        for t in range(roots.shape[0]):
            nd = roots[t]
            while feat[nd] >= 0:
                v = X[i, feat[nd]]
                nd = left[nd] if (np.isnan(v) or v <= thr[nd]) else right[nd]
            m = m + lr * value[nd]
        out[i] = m
    return out
