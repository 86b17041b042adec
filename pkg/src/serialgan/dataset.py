"""Datasets: synthetic peppers, D4 augmentation, standardisation, directory layout.

Directory layout::

    root/train/normal/*.png|*.ppm
    root/test/normal/*.png|*.ppm
    root/test/diseased/*.png|*.ppm
    root/manifest.csv              id,path,label
"""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .images import quantize, read_image, write_image

IMAGE_SUFFIXES = (".png", ".ppm")
_SPLIT_CODES = {"train": 0, "test-normal": 1, "test-diseased": 2, "scene": 3}


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    label: int
    id: str


@dataclass(frozen=True)
class SynthConfig:
    side: int = 64
    train_count: int = 512
    test_normal: int = 128
    test_diseased: int = 128
    lesion_count: Tuple[int, int] = (1, 5)
    lesion_radius: Tuple[float, float] = (0.035, 0.075)  # fraction of side
    lesion_color: Tuple[float, float, float] = (0.30, 0.17, 0.06)
    augment: bool = True
    seed: int = 0

    def validate(self):
        if min(self.train_count, self.test_normal, self.test_diseased) <= 0:
            raise DatasetError("sample counts must be positive")
        if self.side < 8:
            raise DatasetError("side must be >= 8")
        lo, hi = self.lesion_count
        if not 1 <= lo <= hi:
            raise DatasetError("lesion_count must satisfy 1 <= lo <= hi")
        return self


@dataclass
class Pepper:
    """A rendered normal pepper and its geometry (ellipse frame in pixels)."""

    image: np.ndarray
    alpha: np.ndarray
    center: Tuple[float, float]
    axes: Tuple[float, float]
    theta: float
    shade: np.ndarray = field(repr=False)


def _rng(seed, split, index):
    return np.random.default_rng([seed, _SPLIT_CODES[split], index])


def _ellipse_coords(h, w, center, axes, theta):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx + 0.5 - center[0], yy + 0.5 - center[1]
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / axes[0]
    v = (-dx * s + dy * c) / axes[1]
    return u, v


def render_pepper(rng, side, height=None, scale=1.0, center=None, cropped=True):
    """Elongated ellipse with low-frequency green-to-red shading on black.

    ``cropped`` mimics the output of the segmentation crop: the fruit nearly
    fills the frame with its long axis roughly horizontal. Otherwise it is a
    smaller fruit at any angle, as in a raw photo.
    """
    h, w = (height or side), side
    ref = min(h, w) * scale
    if center is None:
        jitter = 0.03 if cropped else 0.06
        center = (w / 2 + rng.uniform(-jitter, jitter) * ref, h / 2 + rng.uniform(-jitter, jitter) * ref)
    if cropped:
        axes = (rng.uniform(0.40, 0.46) * ref, rng.uniform(0.28, 0.40) * ref)
        theta = rng.uniform(-0.08, 0.08)
    else:
        axes = (rng.uniform(0.30, 0.40) * ref, rng.uniform(0.12, 0.17) * ref)
        theta = rng.uniform(0, math.pi)
    u, v = _ellipse_coords(h, w, center, axes, theta)
    r = np.sqrt(u * u + v * v)
    alpha = np.clip((1 - r) * axes[1] + 0.5, 0, 1)

    ripeness = rng.uniform(0, 1)
    green = np.array([0.20, 0.55, 0.12])
    red = np.array([0.78, 0.13, 0.08])
    base = (1 - ripeness) * green + ripeness * red
    # ripening front along the long axis
    front = rng.uniform(-0.4, 0.4)
    mix = np.clip(0.5 + 0.5 * rng.uniform(-1, 1) * (u - front), 0, 1)[..., None]
    tint = rng.uniform(0.85, 1.1, size=3)
    color = base * tint * (0.85 + 0.3 * mix)
    shade = (0.6 + 0.4 * np.sqrt(np.clip(1 - v * v, 0, 1)))[..., None]
    hu, hv = rng.uniform(-0.4, 0.4), rng.uniform(-0.55, -0.25)
    gloss = 0.3 * np.exp(-((u - hu) ** 2 / 0.06 + (v - hv) ** 2 / 0.02))[..., None]
    img = np.clip(color * shade + gloss, 0, 1) * alpha[..., None]
    return Pepper(img, alpha, center, axes, theta, shade)


def add_lesions(rng, pepper: Pepper, cfg: SynthConfig, max_tries=100):
    """Blotches inside the pepper; returns ``(image, lesion_mask, disks)``.

    Resamples until the lesion area is 0.5%-15% of the ellipse area.
    """
    h, w = pepper.alpha.shape
    inside = pepper.alpha > 0
    area = inside.sum()
    ref = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    c, s = math.cos(pepper.theta), math.sin(pepper.theta)
    for _ in range(max_tries):
        n = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
        la = np.zeros((h, w))
        disks = []
        for _ in range(n):
            rr = math.sqrt(rng.uniform(0, 0.6 ** 2))
            phi = rng.uniform(0, 2 * math.pi)
            eu, ev = rr * math.cos(phi) * pepper.axes[0], rr * math.sin(phi) * pepper.axes[1]
            cx = pepper.center[0] + eu * c - ev * s
            cy = pepper.center[1] + eu * s + ev * c
            rad = rng.uniform(*cfg.lesion_radius) * ref
            d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
            la = np.maximum(la, np.clip(rad - d + 0.5, 0, 1))
            disks.append((cx, cy, rad))
        la *= pepper.alpha
        frac = ((la > 0) & inside).sum() / area
        if 0.005 <= frac <= 0.15:
            break
    else:
        raise DatasetError("could not place lesions within the area bounds")
    tone = rng.uniform(0.6, 1.0)
    lesion = np.asarray(cfg.lesion_color) * tone * pepper.shade
    la3 = la[..., None]
    img = pepper.image * (1 - la3) + la3 * lesion
    return img, la > 0, disks


def generate_synthetic(cfg: SynthConfig) -> Tuple[List[Sample], List[Sample]]:
    """Deterministic train (normal only) and test (normal + diseased) sets.

    Every sample draws from its own RNG stream keyed by ``(seed, split, index)``.
    With ``augment`` the train set is ``ceil(N / 7)`` base peppers expanded by
    :func:`augment` and cut to ``N``.
    """
    cfg.validate()
    side = cfg.side
    n_base = math.ceil(cfg.train_count / 7) if cfg.augment else cfg.train_count
    train = [Sample(quantize(render_pepper(_rng(cfg.seed, "train", i), side).image), 0, f"train-{i:05d}")
             for i in range(n_base)]
    if cfg.augment:
        train = augment(train)[:cfg.train_count]
    test = [Sample(quantize(render_pepper(_rng(cfg.seed, "test-normal", i), side).image), 0, f"normal-{i:05d}")
            for i in range(cfg.test_normal)]
    for i in range(cfg.test_diseased):
        img, _, _ = diseased_sample(cfg, i)
        test.append(Sample(img, 1, f"diseased-{i:05d}"))
    return train, test


def diseased_sample(cfg: SynthConfig, index):
    """Diseased test image ``index`` plus its normal base and lesion mask."""
    rng = _rng(cfg.seed, "test-diseased", index)
    pepper = render_pepper(rng, cfg.side)
    img, mask, _ = add_lesions(rng, pepper, cfg)
    return quantize(img), quantize(pepper.image), mask


def render_scene(rng, side=96, textured=True):
    """Pepper on a cluttered background, for segmentation.

    Returns ``(image, true_mask, rect)`` with ``rect = (x, y, w, h)`` a box
    around the pepper padded by a few pixels.
    """
    pepper = render_pepper(rng, side, scale=0.8, cropped=False)
    yy, xx = np.mgrid[0:side, 0:side] / side
    bg = np.empty((side, side, 3))
    soil = np.array([0.45, 0.38, 0.30]) * rng.uniform(0.8, 1.15, 3)
    for ch in range(3):
        fx, fy, ph = rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(0, 2 * math.pi)
        bg[..., ch] = soil[ch] * (1 + 0.12 * np.sin(2 * math.pi * (fx * xx + fy * yy) + ph))
    if textured:
        bg += rng.normal(0, 0.02, bg.shape)
    a = pepper.alpha[..., None]
    img = np.clip(pepper.image + (1 - a) * bg, 0, 1)
    mask = pepper.alpha >= 0.5
    ys, xs = np.nonzero(mask)
    pad = 4
    x0, y0 = max(xs.min() - pad, 0), max(ys.min() - pad, 0)
    x1, y1 = min(xs.max() + pad + 1, side), min(ys.max() + pad + 1, side)
    return quantize(img), mask, (int(x0), int(y0), int(x1 - x0), int(y1 - y0))


# ---- augmentation -------------------------------------------------------------

_D4 = (
    ("", lambda a: a),
    ("rot90", lambda a: np.rot90(a, 1)),
    ("rot180", lambda a: np.rot90(a, 2)),
    ("rot270", lambda a: np.rot90(a, 3)),
    ("fliph", lambda a: a[:, ::-1]),
    ("flipv", lambda a: a[::-1]),
    ("fliph-rot90", lambda a: np.rot90(a[:, ::-1], 1)),
)


def augment(samples):
    """Seven outputs per input: identity, three rotations, two flips, flip+rot90."""
    out = []
    for s in samples:
        if s.image.shape[0] != s.image.shape[1]:
            raise DatasetError(f"augment needs square images, {s.id} is {s.image.shape[:2]}")
        for tag, op in _D4:
            out.append(Sample(np.ascontiguousarray(op(s.image)), s.label, f"{s.id}-{tag}" if tag else s.id))
    return out


# ---- standardisation ------------------------------------------------------------

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class StandardizationStats:
    mean: float
    std: float
    clamped: bool = False


def _stack(samples):
    if not samples:
        raise DatasetError("empty sample set")
    return np.stack([np.asarray(s.image) for s in samples])


def fit_standardization(train) -> StandardizationStats:
    """Global scalar mean and std over every training pixel and channel."""
    x = _stack(train).astype(np.float64)
    mean = float(x.mean())
    std = float(x.std())
    if std < STD_FLOOR:
        return StandardizationStats(mean, STD_FLOOR, True)
    return StandardizationStats(mean, std)


def standardize(stats, x):
    return ((np.asarray(x, dtype=np.float64) - stats.mean) / stats.std).astype(np.float32)


def destandardize(stats, x):
    return (np.asarray(x, dtype=np.float64) * stats.std + stats.mean).astype(np.float32)


def apply_standardization(stats, samples):
    return [replace(s, image=standardize(stats, s.image)) for s in samples]


@dataclass(frozen=True)
class ModelRange:
    """Affine map of standardised values onto [-1, 1] using train min/max."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, standardized_train):
        x = _stack(standardized_train)
        lo, hi = float(x.min()), float(x.max())
        if hi - lo < STD_FLOOR:
            hi = lo + 1.0
        return cls(lo, hi)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0).astype(np.float32)

    def inverse(self, y):
        y = np.asarray(y, dtype=np.float64)
        return ((y + 1.0) * 0.5 * (self.hi - self.lo) + self.lo).astype(np.float32)


@dataclass(frozen=True)
class Preprocessor:
    """Pixel [0,1] <-> model input: standardise with train stats, then rescale to [-1, 1]."""

    stats: StandardizationStats
    range: ModelRange

    @classmethod
    def fit(cls, train):
        stats = fit_standardization(train)
        return cls(stats, ModelRange.fit(apply_standardization(stats, train)))

    def to_model(self, images):
        return self.range.forward(standardize(self.stats, images))

    def to_pixels(self, model_images):
        return destandardize(self.stats, self.range.inverse(model_images))

    def batch(self, samples):
        return self.to_model(_stack(samples))

    def to_meta(self):
        return {"std_mean": float(self.stats.mean), "std_std": float(self.stats.std),
                "range_lo": float(self.range.lo), "range_hi": float(self.range.hi)}

    @classmethod
    def from_meta(cls, meta):
        try:
            return cls(StandardizationStats(float(meta["std_mean"]), float(meta["std_std"])),
                       ModelRange(float(meta["range_lo"]), float(meta["range_hi"])))
        except KeyError as e:
            raise DatasetError(f"checkpoint lacks preprocessing statistic {e}") from None


# ---- directory layout ------------------------------------------------------------

_SUBTREES = {"train": [("train/normal", 0)], "test": [("test/normal", 0), ("test/diseased", 1)]}


def _list_images(d):
    files = (p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    return sorted(files, key=lambda p: (p.stem, p.name))


def load_directory(path, splits=("train", "test")):
    """Load the dataset layout; returns ``(train, test)`` (a split not requested is ``None``)."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    if "train" in splits and (root / "train" / "diseased").exists():
        raise DatasetError(f"{root / 'train' / 'diseased'}: training data must contain normal images only")
    out = {}
    for split in ("train", "test"):
        if split not in splits:
            out[split] = None
            continue
        samples = []
        for sub, label in _SUBTREES[split]:
            d = root / sub
            if not d.is_dir():
                raise DatasetError(f"missing subtree {d}")
            files = _list_images(d)
            if not files:
                raise DatasetError(f"subtree {d} contains no images")
            for f in files:
                samples.append(Sample(read_image(f), label, f.stem))
        out[split] = samples
    return out["train"], out["test"]


def write_directory(path, train, test, fmt="png"):
    root = Path(path)
    rows = []
    for samples, split in ((train, "train"), (test, "test")):
        for s in samples:
            if split == "train" and s.label != 0:
                raise DatasetError(f"training sample {s.id} is not normal")
            sub = f"{split}/{'diseased' if s.label else 'normal'}"
            (root / sub).mkdir(parents=True, exist_ok=True)
            rel = f"{sub}/{s.id}.{fmt}"
            write_image(root / rel, s.image)
            rows.append((s.id, rel, s.label))
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "path", "label"))
        w.writerows(rows)
    return root
