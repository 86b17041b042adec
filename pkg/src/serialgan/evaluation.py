"""Classification metrics, ROC/EER/AP, score histogram, difference images, ablation table.

The diseased class is the positive class throughout.
"""

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .scoring import (ScoreVariant, ScoringError, all_raw_errors, classify, normalize_scores,
                      select_threshold, youden_j)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion(labels, preds) -> ConfusionCounts:
    y, p = np.asarray(labels), np.asarray(preds)
    if y.shape != p.shape:
        raise EvaluationError("labels and predictions differ in length")
    if y.size == 0:
        raise EvaluationError("no samples")
    if not (np.isin(y, (0, 1)).all() and np.isin(p, (0, 1)).all()):
        raise EvaluationError("labels and predictions must be 0 or 1")
    y, p = y.astype(bool), p.astype(bool)
    return ConfusionCounts(int((y & p).sum()), int((~y & p).sum()), int((~y & ~p).sum()), int((y & ~p).sum()))


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    degenerate: bool  # some ratio was 0/0 and was set to 0


def _ratio(a, b):
    return (a / b, False) if b else (0.0, True)


def prf1_from(precision, recall):
    f1, _ = _ratio(2 * precision * recall, precision + recall)
    return f1


def prf1(counts: ConfusionCounts, positive_class=1) -> PRF:
    if positive_class == 1:
        tp, fp, fn = counts.tp, counts.fp, counts.fn
    elif positive_class == 0:
        tp, fp, fn = counts.tn, counts.fn, counts.fp
    else:
        raise EvaluationError("positive_class must be 0 or 1")
    p, dp = _ratio(tp, tp + fp)
    r, dr = _ratio(tp, tp + fn)
    f, df = _ratio(2 * p * r, p + r)
    return PRF(p, r, f, dp or dr or df)


def macro_f1(f1_normal, f1_diseased):
    return (f1_normal + f1_diseased) / 2


class RocCurve(NamedTuple):
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # first entry is +inf, the (0, 0) corner


def _labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise EvaluationError("scores and labels must be equal-length vectors")
    if not np.isin(y, (0, 1)).all():
        raise EvaluationError("labels must be 0 or 1")
    if y.min() == y.max():
        raise EvaluationError("both classes must be present")
    return s, y


def _descending_counts(s, y):
    """Cumulative (tp, fp) after admitting each distinct score, highest first."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(1 - y)[last]
    return s[last], tp, fp


def roc_curve(scores, labels) -> RocCurve:
    s, y = _labels(scores, labels)
    thr, tp, fp = _descending_counts(s, y)
    npos, nneg = y.sum(), len(y) - y.sum()
    return RocCurve(np.r_[0.0, fp / nneg], np.r_[0.0, tp / npos], np.r_[np.inf, thr])


def roc_auc(scores, labels):
    """ROC over distinct thresholds (ties grouped) and its trapezoidal area."""
    curve = roc_curve(scores, labels)
    return curve, float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1])) / 2)


def eer(curve: RocCurve):
    """Rate where FPR equals FNR, linearly interpolated on the ROC polyline."""
    fpr, tpr = np.asarray(curve.fpr, dtype=np.float64), np.asarray(curve.tpr, dtype=np.float64)
    g = fpr + tpr - 1.0  # FPR - FNR, non-decreasing along the curve
    k = int(np.argmax(g >= 0))
    if g[k] == 0 or k == 0:
        return float(fpr[k])
    a = -g[k - 1] / (g[k] - g[k - 1])
    return float(fpr[k - 1] + a * (fpr[k] - fpr[k - 1]))


def average_precision(scores, labels):
    """Step-wise area under precision-recall: sum of (R_k - R_{k-1}) * P_k."""
    s, y = _labels(scores, labels)
    _, tp, fp = _descending_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def score_histogram(scores, labels, bins=200, range_=(0.0, 1.0)):
    """Per-class counts over equal bins; the last bin includes its right edge.

    Returns ``(edges, normal_counts, diseased_counts)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.size and (s.min() < range_[0] or s.max() > range_[1]):
        raise EvaluationError(f"scores outside {range_}")
    edges = np.linspace(range_[0], range_[1], bins + 1)
    normal, _ = np.histogram(s[y == 0], bins=edges)
    diseased, _ = np.histogram(s[y == 1], bins=edges)
    return edges, normal, diseased


def difference_image(a, b, alpha=20.0):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.clip(alpha * np.abs(a - b), 0.0, 1.0).astype(np.float32)


# ---- whole-run evaluation ------------------------------------------------------


@dataclass
class VariantResult:
    variant: ScoreVariant
    raw: np.ndarray
    scores: np.ndarray
    degenerate: bool
    tau: float
    j: float
    preds: np.ndarray
    counts: ConfusionCounts
    normal: PRF
    diseased: PRF
    auc: float
    eer: float
    ap: float
    curve: RocCurve
    lo: float
    hi: float

    @property
    def macro_f1(self):
        return macro_f1(self.normal.f1, self.diseased.f1)


def evaluate_errors(variant, errors, labels) -> VariantResult:
    y = np.asarray(labels).astype(np.int64)
    if len(y) == 0 or y.min() == y.max():
        raise EvaluationError("evaluation needs both normal and diseased samples")
    norm = normalize_scores(errors)
    tau = select_threshold(norm.scores, y)
    preds = classify(norm.scores, tau)
    counts = confusion(y, preds)
    curve, auc = roc_auc(norm.scores, y)
    return VariantResult(variant, np.asarray(errors, dtype=np.float64), norm.scores, norm.degenerate, tau,
                         youden_j(norm.scores, y, tau), preds, counts, prf1(counts, 0), prf1(counts, 1), auc,
                         eer(curve), average_precision(norm.scores, y), curve, norm.lo, norm.hi)


def evaluate_model(model, images, labels, variants=tuple(ScoreVariant), batch_size=64):
    errs = all_raw_errors(model, images, variants, batch_size)
    return {v: evaluate_errors(v, e, labels) for v, e in errs.items()}


ABLATION_ORDER = (ScoreVariant.ZZ1, ScoreVariant.ZZ2, ScoreVariant.Z1Z2, ScoreVariant.XG1, ScoreVariant.XG2,
                  ScoreVariant.G1G2)
ABLATION_METRICS = ("AUC", "EER", "AP", "MacroF1")


def ablation_rows(results):
    rows = []
    for v in ABLATION_ORDER:
        r = results[v]
        rows.append({"variant": v.value, "label": v.label, "AUC": r.auc, "EER": r.eer, "AP": r.ap,
                     "MacroF1": r.macro_f1, "tau": r.tau, "proposed": v.proposed})
    return rows


def ablation_report(model, images, labels, batch_size=64):
    """Six variants x {AUC, EER, AP, Macro F1}, each at its own Youden threshold."""
    try:
        return ablation_rows(evaluate_model(model, images, labels, ABLATION_ORDER, batch_size))
    except ScoringError as e:
        raise EvaluationError(str(e)) from None


def write_ablation(rows, csv_path, txt_path=None):
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "label") + ABLATION_METRICS + ("tau", "proposed"))
        for r in rows:
            w.writerow([r["variant"], r["label"]] + [f"{r[m]:.6f}" for m in ABLATION_METRICS + ("tau",)]
                       + [int(r["proposed"])])
    if txt_path is not None:
        with open(txt_path, "w") as fh:
            fh.write(format_ablation(rows) + "\n")


def format_ablation(rows):
    head = f"{'Method':<18}" + "".join(f"{m:>9}" for m in ABLATION_METRICS)
    lines = [head, "-" * len(head)]
    for r in rows:
        mark = "  <- proposed" if r["proposed"] else ""
        lines.append(f"{r['label']:<18}" + "".join(f"{r[m]:>9.3f}" for m in ABLATION_METRICS) + mark)
    return "\n".join(lines)


def metrics_table(res: VariantResult):
    return [
        ("variant", res.variant.value),
        ("tau", res.tau),
        ("youden_j", res.j),
        ("normal_precision", res.normal.precision),
        ("normal_recall", res.normal.recall),
        ("normal_f1", res.normal.f1),
        ("diseased_precision", res.diseased.precision),
        ("diseased_recall", res.diseased.recall),
        ("diseased_f1", res.diseased.f1),
        ("macro_f1", res.macro_f1),
        ("auc", res.auc),
        ("eer", res.eer),
        ("ap", res.ap),
        ("tp", res.counts.tp),
        ("fp", res.counts.fp),
        ("tn", res.counts.tn),
        ("fn", res.counts.fn),
        ("raw_min", res.lo),
        ("raw_max", res.hi),
    ]


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_metrics(res: VariantResult, csv_path, txt_path=None):
    rows = metrics_table(res)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "value"))
        w.writerows((k, _fmt(v)) for k, v in rows)
    if txt_path is not None:
        width = max(len(k) for k, _ in rows)
        with open(txt_path, "w") as fh:
            for k, v in rows:
                fh.write(f"{k:<{width}}  {_fmt(v)}\n")


def write_histogram(path, edges, normal, diseased):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin_low", "normal_count", "diseased_count"))
        for lo, n, d in zip(edges[:-1], normal, diseased):
            w.writerow((f"{lo:.6f}", int(n), int(d)))


def write_roc(path, curve: RocCurve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr", "threshold"))
        for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            w.writerow((repr(float(f)), repr(float(t)), "inf" if np.isinf(th) else repr(float(th))))
