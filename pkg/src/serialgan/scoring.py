"""Anomaly scores: six error variants, min-max normalisation, Youden threshold."""

import csv
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np


class ScoringError(ValueError):
    pass


class ScoreVariant(Enum):
    ZZ1 = "zz1"
    ZZ2 = "zz2"
    Z1Z2 = "z1z2"
    XG1 = "xg1"
    XG2 = "xg2"
    G1G2 = "g1g2"

    @property
    def label(self):
        return _LABELS[self]

    @property
    def proposed(self):
        return self is ScoreVariant.G1G2

    @classmethod
    def parse(cls, name):
        key = str(name).strip().lower()
        for v in cls:
            if key in (v.value, v.name.lower(), v.label.lower()):
                return v
        raise ScoringError(f"unknown score variant {name!r}; choose from {[v.value for v in cls]}")


_LABELS = {
    ScoreVariant.ZZ1: "S(z,z')",
    ScoreVariant.ZZ2: "S(z,z'')",
    ScoreVariant.Z1Z2: "S(z',z'')",
    ScoreVariant.XG1: "S(x,G1(x))",
    ScoreVariant.XG2: "S(x,G2(x'))",
    ScoreVariant.G1G2: "S(G1(x),G2(x'))",
}

# (operand a, operand b) in GeneratorOutput terms; "x" is the input itself.
_OPERANDS = {
    ScoreVariant.ZZ1: ("z", "z1"),
    ScoreVariant.ZZ2: ("z", "z2"),
    ScoreVariant.Z1Z2: ("z1", "z2"),
    ScoreVariant.XG1: ("x", "x1"),
    ScoreVariant.XG2: ("x", "x2"),
    ScoreVariant.G1G2: ("x1", "x2"),
}


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ScoringError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def image_error(a, b):
    """Mean squared difference over all pixels and channels."""
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def latent_error(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def batch_errors(a, b):
    """Per-sample mean squared difference along every axis but the first."""
    a, b = _pair(a, b)
    return ((a - b) ** 2).reshape(len(a), -1).mean(axis=1)


def _check_model(model, allow_untrained):
    params = getattr(model, "params", None)
    if params is None:
        return
    if not all(np.all(np.isfinite(p)) for p in params.values()):
        raise ScoringError("model has non-finite parameters")
    if not allow_untrained and getattr(model, "step", 1) == 0:
        raise ScoringError("model is untrained (step 0)")


def all_raw_errors(model, images, variants=tuple(ScoreVariant), batch_size=64, allow_untrained=False):
    """Raw errors for several variants from one generator pass per batch.

    ``model`` is anything with ``generator_forward(images)`` returning
    ``(x1, x2, z, z1, z2)`` fields; images are model-range (batch, H, W, C).
    """
    _check_model(model, allow_untrained)
    variants = [ScoreVariant.parse(v) if not isinstance(v, ScoreVariant) else v for v in variants]
    images = np.asarray(images)
    out = {v: [] for v in variants}
    for i in range(0, len(images), batch_size):
        x = images[i:i + batch_size]
        g = model.generator_forward(x)
        fields = {"x": x, "x1": g.x1, "x2": g.x2, "z": g.z, "z1": g.z1, "z2": g.z2}
        for v in variants:
            a, b = _OPERANDS[v]
            out[v].append(batch_errors(fields[a], fields[b]))
    return {v: (np.concatenate(e) if e else np.zeros(0)) for v, e in out.items()}


def raw_errors(model, images, variant=ScoreVariant.G1G2, batch_size=64, allow_untrained=False):
    variant = ScoreVariant.parse(variant) if not isinstance(variant, ScoreVariant) else variant
    return all_raw_errors(model, images, (variant,), batch_size, allow_untrained)[variant]


class Normalized(NamedTuple):
    scores: np.ndarray
    degenerate: bool
    lo: float
    hi: float


@dataclass(frozen=True)
class Calibration:
    """Min/max of an evaluation run, reused to score single images later."""

    lo: float
    hi: float

    def apply(self, errors):
        e = np.asarray(errors, dtype=np.float64)
        if self.hi <= self.lo:
            return np.zeros_like(e)
        return np.clip((e - self.lo) / (self.hi - self.lo), 0.0, 1.0)


def normalize_scores(errors) -> Normalized:
    """``(e - min) / (max - min)``; a constant list maps to zeros with ``degenerate`` set."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ScoringError("cannot normalise an empty error list")
    lo, hi = float(e.min()), float(e.max())
    if hi == lo:
        return Normalized(np.zeros_like(e), True, lo, hi)
    s = (e - lo) / (hi - lo)
    return Normalized(np.clip(s, 0.0, 1.0), False, lo, hi)


def _check_labels(labels, n):
    y = np.asarray(labels).astype(np.int64)
    if y.shape != (n,):
        raise ScoringError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ScoringError("labels must be 0 or 1")
    if y.min() == y.max():
        raise ScoringError("both classes (normal and diseased) must be present")
    return y


def youden_sweep(scores, labels):
    """TPR - FPR at every observed score used as threshold (score >= t is positive).

    Returns ``(thresholds ascending, J values)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _check_labels(labels, len(s))
    thr = np.unique(s)
    order = np.sort(s[y == 1])
    neg = np.sort(s[y == 0])
    tpr = 1.0 - np.searchsorted(order, thr, side="left") / len(order)
    fpr = 1.0 - np.searchsorted(neg, thr, side="left") / len(neg)
    return thr, tpr - fpr


def select_threshold(scores, labels):
    """Threshold maximising TPR - FPR; ties go to the smallest threshold."""
    thr, j = youden_sweep(scores, labels)
    return float(thr[int(np.argmax(j))])


def youden_j(scores, labels, tau):
    s = np.asarray(scores, dtype=np.float64)
    y = _check_labels(labels, len(s))
    pred = s >= tau
    return float(pred[y == 1].mean() - pred[y == 0].mean())


def classify(score, tau):
    """0 (normal) when score < tau, else 1 (diseased)."""
    return (np.asarray(score) >= tau).astype(np.int64) if np.ndim(score) else int(score >= tau)


@dataclass
class ScoreRecord:
    id: str
    raw: float
    score: float
    label: int
    predicted: int


def build_records(ids, errors, labels, tau=None):
    norm = normalize_scores(errors)
    if tau is None:
        tau = select_threshold(norm.scores, labels)
    preds = classify(norm.scores, tau)
    recs = [ScoreRecord(str(i), float(e), float(s), int(l), int(p))
            for i, e, s, l, p in zip(ids, errors, norm.scores, labels, preds)]
    return recs, tau, norm


SCORE_FIELDS = ("id", "variant", "raw_e", "score", "label", "predicted")


def write_scores(path, records, variant):
    variant = ScoreVariant.parse(variant) if not isinstance(variant, ScoreVariant) else variant
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for r in records:
            w.writerow((r.id, variant.value, repr(r.raw), repr(r.score), r.label, r.predicted))


def read_scores(path):
    with open(path, newline="") as fh:
        return [ScoreRecord(r["id"], float(r["raw_e"]), float(r["score"]), int(r["label"]), int(r["predicted"]))
                for r in csv.DictReader(fh)]
