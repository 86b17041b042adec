"""Background removal: GrabCut on a user box, mask clean-up, rotated crop.

Pixel coordinates put x along columns and y along rows. Rectangle corners
and crop geometry use pixel-edge coordinates, so pixel (i, j) covers
``[j, j+1] x [i, i+1]`` and its centre sits at ``(j + 0.5, i + 0.5)``.
"""

import logging
import math
import warnings
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .kernels import bilinear_sample, dinic, residual_reachable

log = logging.getLogger(__name__)

GAMMA = 50.0
GMM_COMPONENTS = 5
COV_EPS = 1e-6
ITERATIONS = 5
RETRY_FRACTION = 0.01
MORPH_KERNEL = 3


class SegmentationError(ValueError):
    pass


class NoForegroundError(SegmentationError):
    pass


class SegmentationWarning(UserWarning):
    pass


class Trimap(IntEnum):
    BG = 0  # sure background
    FG = 1  # sure foreground
    PR_BG = 2
    PR_FG = 3


def foreground(mask):
    m = np.asarray(mask)
    return (m == Trimap.FG) | (m == Trimap.PR_FG)


# ---- histogram equalisation -------------------------------------------------------


def histogram_equalize(img):
    """Per-channel CDF remap over 256 levels: a pixel at level k becomes P(level <= k)."""
    a = np.asarray(img, dtype=np.float64)
    if a.size == 0:
        raise SegmentationError("empty image")
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] not in (1, 3)):
        raise SegmentationError(f"expected (H, W) or (H, W, 1|3), got {a.shape}")
    if a.min() < 0 or a.max() > 1:
        raise SegmentationError("pixel values must lie in [0, 1]")
    levels = np.rint(a * 255).astype(np.int64)
    out = np.empty_like(a)
    chans = [(Ellipsis,)] if a.ndim == 2 else [(Ellipsis, c) for c in range(a.shape[2])]
    for idx in chans:
        lv = levels[idx]
        cdf = np.cumsum(np.bincount(lv.ravel(), minlength=256)) / lv.size
        out[idx] = cdf[lv]
    return out.astype(np.float32)


# ---- morphology -------------------------------------------------------------------


def _binary(mask):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise SegmentationError(f"mask must be 2-D, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise SegmentationError("mask must be binary (0/1)")
    return m.astype(bool)


def morphology(mask, op, kernel=MORPH_KERNEL):
    """Binary erode / dilate / open / close with a square kernel.

    Everything outside the image counts as background, as if the mask sat on
    an infinite background plane. Closing therefore does not eat into objects
    touching the border.
    """
    m = _binary(mask)
    if kernel < 1 or kernel % 2 == 0:
        raise SegmentationError(f"kernel size must be odd and >= 1, got {kernel}")
    se = np.ones((kernel, kernel), dtype=bool)
    pad = kernel
    p = np.pad(m, pad)
    erode = lambda a: ndimage.binary_erosion(a, se, border_value=0)  # noqa: E731
    dilate = lambda a: ndimage.binary_dilation(a, se, border_value=0)  # noqa: E731
    ops = {
        "erode": erode,
        "dilate": dilate,
        "open": lambda a: dilate(erode(a)),
        "close": lambda a: erode(dilate(a)),
    }
    if op not in ops:
        raise SegmentationError(f"unknown morphology op {op!r}")
    return ops[op](p)[pad:-pad, pad:-pad].astype(np.uint8)


# ---- max-flow / min-cut -------------------------------------------------------------


class FlowGraph:
    """Directed graph with non-negative real capacities.

    Edges are added in batches; each edge may carry a reverse capacity so an
    undirected link costs a single entry.
    """

    def __init__(self, n, source, sink):
        if not (0 <= source < n and 0 <= sink < n):
            raise SegmentationError("terminal ids out of range")
        if source == sink:
            raise SegmentationError("source and sink must differ")
        self.n, self.source, self.sink = int(n), int(source), int(sink)
        self._tails, self._heads, self._caps, self._revs = [], [], [], []

    def add_edges(self, tails, heads, caps, rev_caps=None):
        tails = np.atleast_1d(np.asarray(tails, dtype=np.int64))
        heads = np.atleast_1d(np.asarray(heads, dtype=np.int64))
        caps = np.broadcast_to(np.asarray(caps, dtype=np.float64), tails.shape)
        revs = np.zeros(tails.shape) if rev_caps is None else np.broadcast_to(
            np.asarray(rev_caps, dtype=np.float64), tails.shape)
        if tails.shape != heads.shape:
            raise SegmentationError("tails and heads differ in length")
        for a in (tails, heads):
            if a.size and (a.min() < 0 or a.max() >= self.n):
                raise SegmentationError("edge endpoint out of range")
        for c in (caps, revs):
            if not np.all(np.isfinite(c)) or (c.size and c.min() < 0):
                raise SegmentationError("capacities must be finite and non-negative")
        self._tails.append(tails)
        self._heads.append(heads)
        self._caps.append(caps.copy())
        self._revs.append(revs.copy())

    def add_edge(self, u, v, cap, rev_cap=0.0):
        self.add_edges([u], [v], [cap], [rev_cap])

    def edges(self):
        """``(tails, heads, caps, rev_caps)`` as flat arrays."""
        if not self._tails:
            z = np.zeros(0, dtype=np.int64)
            return z, z, np.zeros(0), np.zeros(0)
        return tuple(np.concatenate(x) for x in (self._tails, self._heads, self._caps, self._revs))

    def residual(self):
        """CSR arc arrays ``(first, adj, head, res)``; arc 2e is edge e, arc 2e+1 its reverse."""
        tails, heads, caps, revs = self.edges()
        m = len(tails)
        head = np.empty(2 * m, dtype=np.int64)
        head[0::2], head[1::2] = heads, tails
        res = np.empty(2 * m)
        res[0::2], res[1::2] = caps, revs
        arc_tail = np.empty(2 * m, dtype=np.int64)
        arc_tail[0::2], arc_tail[1::2] = tails, heads
        adj = np.argsort(arc_tail, kind="stable").astype(np.int64)
        first = np.searchsorted(arc_tail[adj], np.arange(self.n + 1)).astype(np.int64)
        return first, adj, head, res


class MinCut(NamedTuple):
    flow: float
    source_side: np.ndarray  # bool per node


def max_flow_min_cut(g: FlowGraph) -> MinCut:
    """Maximum s-t flow (Dinic) and the source side of a minimum cut."""
    first, adj, head, res = g.residual()
    eps = 1e-12 * max(float(res.max()) if res.size else 0.0, 1.0)
    flow = dinic(g.n, first, adj, head, res, g.source, g.sink, eps)
    side = residual_reachable(g.n, first, adj, head, res, g.source, eps)
    return MinCut(float(flow), np.asarray(side, dtype=bool))


def cut_capacity(g: FlowGraph, source_side):
    """Total capacity of edges leaving ``source_side``."""
    tails, heads, caps, revs = g.edges()
    s = np.asarray(source_side, dtype=bool)
    return float(caps[s[tails] & ~s[heads]].sum() + revs[s[heads] & ~s[tails]].sum())


# ---- Gaussian mixtures --------------------------------------------------------------


@dataclass
class GaussianMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, 3)
    covs: np.ndarray  # (K, 3, 3)

    @property
    def k(self):
        return len(self.weights)

    def component_log_density(self, x):
        """``log pi_k + log N(x | mu_k, Sigma_k)`` for every pixel and component, shape (N, K)."""
        x = np.asarray(x, dtype=np.float64)
        d = x.shape[1]
        out = np.empty((len(x), self.k))
        for j in range(self.k):
            chol = np.linalg.cholesky(self.covs[j])
            diff = np.linalg.solve(chol, (x - self.means[j]).T)
            maha = np.sum(diff * diff, axis=0)
            logdet = 2 * np.sum(np.log(np.diag(chol)))
            out[:, j] = math.log(self.weights[j]) - 0.5 * (maha + logdet + d * math.log(2 * math.pi))
        return out

    def log_likelihood(self, x):
        c = self.component_log_density(x)
        top = c.max(axis=1, keepdims=True)
        return (top + np.log(np.exp(c - top).sum(axis=1, keepdims=True)))[:, 0]

    def assign(self, x):
        return np.argmax(self.component_log_density(x), axis=1)


def _spd(cov, eps):
    cov = (cov + cov.T) / 2 + eps * np.eye(len(cov))
    w, v = np.linalg.eigh(cov)
    return (v * np.maximum(w, eps)) @ v.T


def initial_components(x, k):
    """Split pixels into ``k`` equal-count groups along their principal colour axis."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    c = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    proj = c @ vt[0]
    rank = np.empty(len(x), dtype=np.int64)
    rank[np.argsort(proj, kind="stable")] = np.arange(len(x))
    return rank * k // len(x)


def fit_gmm(x, labels, eps=COV_EPS) -> GaussianMixture:
    """One M-step from hard component labels. Empty components are dropped."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise SegmentationError("cannot fit a colour model to zero pixels")
    labels = np.asarray(labels)
    ws, ms, cs = [], [], []
    for j in np.unique(labels):
        pts = x[labels == j]
        mu = pts.mean(axis=0)
        d = pts - mu
        cov = d.T @ d / len(pts)
        ws.append(len(pts) / len(x))
        ms.append(mu)
        cs.append(_spd(cov, eps))
    w = np.array(ws)
    return GaussianMixture(w / w.sum(), np.array(ms), np.array(cs))


def _components_for(n, k):
    """Fewer pixels than components: one component per pixel."""
    return max(1, min(k, n))


# ---- GrabCut ----------------------------------------------------------------------------

# right, down, down-right, down-left
_NEIGHBOURS = ((0, 1), (1, 0), (1, 1), (1, -1))


def _pairs(h, w):
    """Index pairs ``(p, q)`` for every 8-neighbour link, each link once."""
    idx = np.arange(h * w).reshape(h, w)
    ps, qs = [], []
    for dy, dx in _NEIGHBOURS:
        y0, y1 = 0, h - dy
        x0, x1 = max(0, -dx), w - max(0, dx)
        ps.append(idx[y0:y1, x0:x1].ravel())
        qs.append(idx[y0 + dy:y1 + dy, x0 + dx:x1 + dx].ravel())
    return np.concatenate(ps), np.concatenate(qs)


def smoothness_weights(img, gamma=GAMMA):
    """``(p, q, w)`` with ``w = gamma * exp(-beta * |c_p - c_q|^2)`` over 8-neighbour links.

    ``beta = 1 / (2 * mean |c_p - c_q|^2)``; a flat image gets ``beta = 0``.
    """
    h, w = img.shape[:2]
    flat = img.reshape(h * w, -1).astype(np.float64)
    p, q = _pairs(h, w)
    d2 = np.sum((flat[p] - flat[q]) ** 2, axis=1)
    mean = d2.mean() if d2.size else 0.0
    beta = 1.0 / (2.0 * mean) if mean > 0 else 0.0
    return p, q, gamma * np.exp(-beta * d2)


class GrabCutResult(NamedTuple):
    mask: np.ndarray  # Trimap labels, uint8
    status: str  # "ok", "degenerate" (rect interior returned whole), or "empty"
    iterations: int


def _check_rect(rect, h, w):
    x, y, rw, rh = (int(v) for v in rect)
    if rw <= 0 or rh <= 0:
        raise SegmentationError(f"rect {rect} has no area")
    if x < 0 or y < 0 or x + rw > w or y + rh > h:
        raise SegmentationError(f"rect {rect} outside a {w}x{h} image")
    return x, y, rw, rh


def grabcut(img, rect, iterations=ITERATIONS, gamma=GAMMA, k=GMM_COMPONENTS):
    """Segment the object inside ``rect = (x, y, w, h)`` with no user strokes.

    Pixels outside the box are sure background and stay so. Every iteration
    assigns pixels to their most likely mixture component, refits both
    mixtures, and relabels the box interior by a minimum cut. Stops early
    once no pixel changes side.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise SegmentationError(f"grabcut needs an RGB image, got shape {img.shape}")
    if iterations < 1:
        raise SegmentationError("iterations must be >= 1")
    h, w = img.shape[:2]
    x, y, rw, rh = _check_rect(rect, h, w)
    mask = np.full((h, w), Trimap.BG, dtype=np.uint8)
    mask[y:y + rh, x:x + rw] = Trimap.PR_FG
    flat = img.reshape(-1, 3)
    if (mask == Trimap.PR_FG).all():
        # no pixel outside the box, so no background colours to contrast against
        warnings.warn("grabcut: degenerate box, keeping its interior as foreground", SegmentationWarning,
                      stacklevel=2)
        return GrabCutResult(mask, "degenerate", 0)

    p, q, wpq = smoothness_weights(img, gamma)
    n = h * w
    src, snk = n, n + 1
    sure = 1.0 + 8.0 * gamma  # exceeds any pixel's total link weight
    prev = None
    done = 0
    for it in range(iterations):
        m = mask.ravel()
        fg = foreground(m)
        models = []
        for j, side in enumerate((fg, ~fg)):
            pts = flat[side]
            if len(pts) == 0:
                break
            if prev is None:
                lab = initial_components(pts, _components_for(len(pts), k))
            else:
                lab = prev[j].assign(pts)
            models.append(fit_gmm(pts, lab))
        if len(models) < 2:
            break
        prev = models
        d_fg = -models[0].log_likelihood(flat)
        d_bg = -models[1].log_likelihood(flat)
        shift = np.minimum(d_fg, d_bg)
        cap_src = d_bg - shift  # paid when the pixel ends on the background side
        cap_snk = d_fg - shift
        cap_src[m == Trimap.BG], cap_snk[m == Trimap.BG] = 0.0, sure
        cap_src[m == Trimap.FG], cap_snk[m == Trimap.FG] = sure, 0.0
        g = FlowGraph(n + 2, src, snk)
        pix = np.arange(n)
        g.add_edges(np.full(n, src), pix, cap_src)
        g.add_edges(pix, np.full(n, snk), cap_snk)
        g.add_edges(p, q, wpq, wpq)
        side = max_flow_min_cut(g).source_side[:n]
        prob = (m == Trimap.PR_FG) | (m == Trimap.PR_BG)
        new = m.copy()
        new[prob & side] = Trimap.PR_FG
        new[prob & ~side] = Trimap.PR_BG
        changed = int((new != m).sum())
        mask = new.reshape(h, w)
        done = it + 1
        if changed == 0:
            break
    status = "ok" if foreground(mask).any() else "empty"
    return GrabCutResult(mask, status, done)


# ---- rotated rectangles -------------------------------------------------------------------


class RotatedRect(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float
    angle: float  # degrees, direction of the w side, in [-90, 90)

    @property
    def area(self):
        return self.w * self.h

    def corners(self):
        """Four corners in order: (-w,-h), (+w,-h), (+w,+h), (-w,+h) half-extents."""
        a = math.radians(self.angle)
        u = np.array([math.cos(a), math.sin(a)]) * self.w / 2
        v = np.array([-math.sin(a), math.cos(a)]) * self.h / 2
        c = np.array([self.cx, self.cy])
        return np.array([c - u - v, c + u - v, c + u + v, c - u + v])


def canonical_rect(cx, cy, w, h, angle):
    """Longer side first, angle wrapped into [-90, 90)."""
    if h > w:
        w, h, angle = h, w, angle + 90.0
    angle = (angle + 90.0) % 180.0 - 90.0
    if angle >= 90.0:
        angle -= 180.0
    return RotatedRect(float(cx), float(cy), float(w), float(h), float(angle))


def mask_points(mask):
    """Pixel-corner points of every foreground pixel of a binary or trimap mask."""
    ys, xs = np.nonzero(foreground(mask))
    pts = np.concatenate([np.stack([xs + dx, ys + dy], axis=1) for dx in (0, 1) for dy in (0, 1)])
    return np.unique(pts, axis=0).astype(np.float64)


def mask_rect(mask):
    """Smallest rotated rectangle covering every foreground pixel entirely."""
    return min_area_rect(mask_points(mask))


def min_area_rect(points):
    """Smallest enclosing rotated rectangle, one caliper per convex-hull edge.

    ``points`` is an (N, 2) array of (x, y); see ``mask_rect`` for masks.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise SegmentationError(f"points must have shape (N, 2), got {pts.shape}")
    if len(pts) < 3:
        raise SegmentationError("need at least 3 points")
    try:
        hull = pts[ConvexHull(pts).vertices]
    except QhullError:
        raise SegmentationError("points are collinear") from None
    best = None
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        length = math.hypot(*e)
        if length == 0:
            continue
        u = e / length
        v = np.array([-u[1], u[0]])
        a, b = hull @ u, hull @ v
        area = (a.max() - a.min()) * (b.max() - b.min())
        if best is None or area < best[0] - 1e-12:
            best = (area, u, v, a, b)
    _, u, v, a, b = best
    ca, cb = (a.max() + a.min()) / 2, (b.max() + b.min()) / 2
    c = ca * u + cb * v
    return canonical_rect(c[0], c[1], a.max() - a.min(), b.max() - b.min(), math.degrees(math.atan2(u[1], u[0])))


# ---- perspective crop ------------------------------------------------------------------------


def homography(src, dst):
    """3x3 matrix taking the four ``src`` points onto ``dst`` (direct linear transform, h33 = 1)."""
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = (x, y, 1, 0, 0, 0, -u * x, -u * y)
        a[2 * i + 1] = (0, 0, 0, x, y, 1, -v * x, -v * y)
        rhs[2 * i], rhs[2 * i + 1] = u, v
    try:
        hvec = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        raise SegmentationError("degenerate corner configuration") from None
    return np.append(hvec, 1.0).reshape(3, 3)


def perspective_crop(img, rect: RotatedRect, out_size=(128, 128)):
    """Warp the rotated rectangle onto an ``out_size = (height, width)`` image, bilinear.

    The rectangle's w side runs along output columns. Corners outside the
    image are clamped to its border with a warning.
    """
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    if rect.w <= 0 or rect.h <= 0:
        raise SegmentationError("zero-area rect")
    oh, ow = out_size
    h, w = img.shape[:2]
    corners = rect.corners()
    clamped = np.clip(corners, [0, 0], [w, h])
    if not np.allclose(clamped, corners, atol=1e-9):
        warnings.warn("perspective_crop: rect corners clamped to the image", SegmentationWarning, stacklevel=2)
        corners = clamped
    dst = np.array([[0, 0], [ow, 0], [ow, oh], [0, oh]], dtype=np.float64)
    hm = homography(dst, corners)
    jj, ii = np.meshgrid(np.arange(ow) + 0.5, np.arange(oh) + 0.5)
    pts = np.stack([jj.ravel(), ii.ravel(), np.ones(jj.size)])
    mapped = hm @ pts
    xs = (mapped[0] / mapped[2] - 0.5).reshape(oh, ow)
    ys = (mapped[1] / mapped[2] - 0.5).reshape(oh, ow)
    out = bilinear_sample(img, xs, ys).astype(np.float32)
    return out[..., 0] if squeeze else out


# ---- full pipeline ----------------------------------------------------------------------------


class PipelineResult(NamedTuple):
    image: np.ndarray  # (out_h, out_w, 3), background zeroed
    mask: np.ndarray  # cleaned binary foreground mask at input size
    rect: RotatedRect
    retried: bool
    status: str


def preprocess_pipeline(img, rect, out_size=(128, 128), iterations=ITERATIONS, kernel=MORPH_KERNEL,
                        retry_fraction=RETRY_FRACTION):
    """GrabCut, equalise-and-retry when the foreground is nearly empty, open/close, rotated crop.

    The retry only changes what GrabCut sees; colours in the output come
    from the original image.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    x, y, rw, rh = _check_rect(rect, h, w)
    floor = retry_fraction * rw * rh
    res = grabcut(img, rect, iterations)
    retried = False
    if foreground(res.mask).sum() < floor:
        log.info("foreground below %.0f pixels, retrying on an equalised image", floor)
        retried = True
        res = grabcut(histogram_equalize(img), rect, iterations)
    fg = foreground(res.mask).astype(np.uint8)
    if fg.sum() < floor:
        raise NoForegroundError("no foreground")
    fg = morphology(morphology(fg, "open", kernel), "close", kernel)
    if fg.sum() == 0:
        raise NoForegroundError("no foreground")
    try:
        box = mask_rect(fg)
    except SegmentationError:
        raise NoForegroundError("no foreground") from None
    clean = img * fg[..., None]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SegmentationWarning)  # a box hugging the border is routine here
        out = perspective_crop(clean, box, out_size)
    return PipelineResult(out, fg, box, retried, res.status)
