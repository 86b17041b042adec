"""Hot inner loops: im2col/col2im for convolutions, Dinic max-flow, bilinear sampling.

Each kernel has a numba-compiled loop version and a vectorised numpy version.
The public names (``im2col``, ``col2im``, ``bilinear_sample``) dispatch to the
numba loops when numba is enabled, otherwise to numpy. ``dinic`` has no
vectorised form; without numba its loop runs as plain Python.
"""

import numpy as np

from ._accel import HAS_NUMBA, njit


def conv_out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


# --------------------------------------------------------------------------
# im2col / col2im
#
# cols layout: rows = (c, ki, kj), columns = (b, i, j). Padding is zero.


def im2col_numpy(x, k, s, p):
    b, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((c, k, k, b, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s]
            cols[:, ki, kj] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, b * ho * wo)


def col2im_numpy(cols, shape, k, s, p):
    b, c, h, w = shape
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    cols = cols.reshape(c, k, k, b, ho, wo)
    xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += cols[:, ki, kj].transpose(1, 0, 2, 3)
    return xp[:, :, p:p + h, p:p + w]


@njit
def _im2col_loop(x, k, s, p, ho, wo, cols):
    b, c, h, w = x.shape
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for bi in range(b):
                    base = bi * ho * wo
                    for i in range(ho):
                        y = i * s + ki - p
                        if y < 0 or y >= h:
                            for j in range(wo):
                                cols[row, base + i * wo + j] = 0.0
                            continue
                        for j in range(wo):
                            xx = j * s + kj - p
                            if xx < 0 or xx >= w:
                                cols[row, base + i * wo + j] = 0.0
                            else:
                                cols[row, base + i * wo + j] = x[bi, ci, y, xx]


@njit
def _col2im_loop(cols, k, s, p, ho, wo, out):
    b, c, h, w = out.shape
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for bi in range(b):
                    base = bi * ho * wo
                    for i in range(ho):
                        y = i * s + ki - p
                        if y < 0 or y >= h:
                            continue
                        for j in range(wo):
                            xx = j * s + kj - p
                            if xx >= 0 and xx < w:
                                out[bi, ci, y, xx] += cols[row, base + i * wo + j]


def im2col_numba(x, k, s, p):
    b, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    cols = np.empty((c * k * k, b * ho * wo), dtype=x.dtype)
    _im2col_loop(np.ascontiguousarray(x), k, s, p, ho, wo, cols)
    return cols


def col2im_numba(cols, shape, k, s, p):
    b, c, h, w = shape
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    out = np.zeros(shape, dtype=cols.dtype)
    _col2im_loop(np.ascontiguousarray(cols), k, s, p, ho, wo, out)
    return out


# --------------------------------------------------------------------------
# Bilinear sampling with edge clamping. img is (H, W, C); xs, ys are float
# pixel-index coordinates (pixel centres at integers) of any common shape.


def bilinear_sample_numpy(img, xs, ys):
    h, w = img.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 2) if w > 1 else np.zeros(xs.shape, np.int64)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 2) if h > 1 else np.zeros(ys.shape, np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


@njit
def _bilinear_loop(img, xs, ys, out):
    h, w, c = img.shape
    n = xs.shape[0]
    for idx in range(n):
        x = min(max(xs[idx], 0.0), w - 1.0)
        y = min(max(ys[idx], 0.0), h - 1.0)
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        if x0 > w - 2:
            x0 = max(w - 2, 0)
        if y0 > h - 2:
            y0 = max(h - 2, 0)
        x1 = min(x0 + 1, w - 1)
        y1 = min(y0 + 1, h - 1)
        fx = x - x0
        fy = y - y0
        for ch in range(c):
            top = img[y0, x0, ch] * (1 - fx) + img[y0, x1, ch] * fx
            bot = img[y1, x0, ch] * (1 - fx) + img[y1, x1, ch] * fx
            out[idx, ch] = top * (1 - fy) + bot * fy


def bilinear_sample_numba(img, xs, ys):
    shape = np.broadcast(xs, ys).shape
    xs = np.ascontiguousarray(np.broadcast_to(xs, shape), dtype=np.float64).ravel()
    ys = np.ascontiguousarray(np.broadcast_to(ys, shape), dtype=np.float64).ravel()
    img = np.ascontiguousarray(img, dtype=np.float64)
    out = np.empty((xs.shape[0], img.shape[2]), dtype=np.float64)
    _bilinear_loop(img, xs, ys, out)
    return out.reshape(shape + (img.shape[2],))


# --------------------------------------------------------------------------
# Dinic max-flow on a residual graph in CSR form.
#
# Arcs come in pairs: arc 2e is edge e forward, arc 2e+1 its reverse.
# ``res`` holds residual capacities and is updated in place.


@njit
def dinic(n, first, adj, head, res, s, t, eps):
    level = np.empty(n, dtype=np.int64)
    cur = np.empty(n, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    flow = 0.0
    while True:
        for i in range(n):
            level[i] = -1
        level[s] = 0
        qh = 0
        qt = 1
        queue[0] = s
        while qh < qt:
            u = queue[qh]
            qh += 1
            for q in range(first[u], first[u + 1]):
                a = adj[q]
                v = head[a]
                if level[v] < 0 and res[a] > eps:
                    level[v] = level[u] + 1
                    queue[qt] = v
                    qt += 1
        if level[t] < 0:
            break
        for i in range(n):
            cur[i] = first[i]
        depth = 0
        u = s
        while True:
            if u == t:
                bott = res[stack[0]]
                for i in range(1, depth):
                    if res[stack[i]] < bott:
                        bott = res[stack[i]]
                for i in range(depth):
                    a = stack[i]
                    res[a] -= bott
                    res[a ^ 1] += bott
                flow += bott
                depth = 0
                u = s
                continue
            advanced = False
            while cur[u] < first[u + 1]:
                a = adj[cur[u]]
                v = head[a]
                if res[a] > eps and level[v] == level[u] + 1:
                    stack[depth] = a
                    depth += 1
                    u = v
                    advanced = True
                    break
                cur[u] += 1
            if not advanced:
                if u == s:
                    break
                level[u] = -1
                depth -= 1
                a = stack[depth]
                u = head[a ^ 1]
                cur[u] += 1
    return flow


@njit
def residual_reachable(n, first, adj, head, res, s, eps):
    seen = np.zeros(n, dtype=np.bool_)
    queue = np.empty(n, dtype=np.int64)
    seen[s] = True
    queue[0] = s
    qh = 0
    qt = 1
    while qh < qt:
        u = queue[qh]
        qh += 1
        for q in range(first[u], first[u + 1]):
            a = adj[q]
            v = head[a]
            if not seen[v] and res[a] > eps:
                seen[v] = True
                queue[qt] = v
                qt += 1
    return seen


if HAS_NUMBA:
    im2col, col2im, bilinear_sample = im2col_numba, col2im_numba, bilinear_sample_numba
else:
    im2col, col2im, bilinear_sample = im2col_numpy, col2im_numpy, bilinear_sample_numpy
