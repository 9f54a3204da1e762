"""Evaluation diagnostics: error rates, P/R/F1, AUC, calibration, SSL health."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .objective import AblationMode, BranchDecisions, utilization

DEFAULT_BINS = 10


def topk_error(probs, labels, k: int = 1) -> float:
    """Percentage of samples whose label is not among the k highest scores."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if not 1 <= k <= probs.shape[1]:
        raise ValueError(f"k must be in [1, {probs.shape[1]}], got {k}")
    if len(labels) == 0:
        return 0.0
    top = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    hit = (top == labels[:, None]).any(axis=1)
    return 100.0 * float((~hit).sum()) / len(labels)


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    return np.bincount(labels * num_classes + preds,
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def class_accuracy(confusion: np.ndarray) -> np.ndarray:
    rows = confusion.sum(axis=1)
    return np.divide(np.diag(confusion), rows, out=np.zeros(len(rows)), where=rows > 0)


def macro_prf(confusion) -> tuple[float, float, float]:
    """Unweighted class means of precision, recall and F1 (empty ratios count 0)."""
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.shape[0] < 2:
        raise ValueError("macro averages need at least two classes")
    tp = np.diag(cm)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    p = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    r = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    f = np.divide(2 * p * r, p + r, out=np.zeros_like(tp), where=(p + r) > 0)
    return float(p.mean()), float(r.mean()), float(f.mean())


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass(frozen=True)
class AucResult:
    macro: float
    per_class: dict[int, float]
    skipped: tuple[int, ...]


def ovr_auc(scores, labels) -> AucResult:
    """One-vs-rest AUC per class, macro-averaged over classes present in ``labels``."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    per_class, skipped = {}, []
    for c in range(scores.shape[1]):
        pos = labels == c
        if not pos.any() or pos.all():
            skipped.append(c)
            continue
        per_class[c] = binary_auc(scores[:, c], pos)
    macro = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return AucResult(macro, per_class, tuple(skipped))


@dataclass(frozen=True)
class CalibrationBins:
    """Equal-width confidence bins on (0, 1]; bin m covers ((m-1)/M, m/M]."""

    edges: np.ndarray
    count: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def weight(self) -> np.ndarray:
        total = self.count.sum()
        return self.count / total if total else np.zeros(len(self.count))

    def ece(self) -> float:
        occupied = self.count > 0
        # gaps on the x100 scale: |100 - 80| is exact where 100 * |1 - 0.8| is not
        gaps = np.abs(100.0 * self.accuracy[occupied] - 100.0 * self.mean_confidence[occupied])
        return float(np.sum(self.weight[occupied] * gaps))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "lower", "upper", "count", "weight", "mean_confidence", "accuracy"])
        for m in range(len(self.count)):
            w.writerow([m, repr(float(self.edges[m])), repr(float(self.edges[m + 1])), int(self.count[m]),
                        repr(float(self.weight[m])), repr(float(self.mean_confidence[m])),
                        repr(float(self.accuracy[m]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CalibrationBins":
        rows = list(csv.DictReader(io.StringIO(text)))
        edges = np.array([float(rows[0]["lower"])] + [float(r["upper"]) for r in rows])
        return cls(edges, np.array([int(r["count"]) for r in rows]),
                   np.array([float(r["mean_confidence"]) for r in rows]),
                   np.array([float(r["accuracy"]) for r in rows]))


def bin_index(confidences, n_bins: int) -> np.ndarray:
    c = np.asarray(confidences, dtype=np.float64)
    return np.clip(np.ceil(c * n_bins).astype(np.int64) - 1, 0, n_bins - 1)


def calibration_bins(confidences, correct, n_bins: int = DEFAULT_BINS) -> CalibrationBins:
    c = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    if c.size and (c.min() < 0 or c.max() > 1):
        raise ValueError("confidences must lie in [0, 1]")
    idx = bin_index(c, n_bins)
    count = np.bincount(idx, minlength=n_bins)
    conf_sum = np.array([np.sum(c[idx == m]) for m in range(n_bins)])
    acc_sum = np.array([np.sum(ok[idx == m]) for m in range(n_bins)])
    mean_conf = np.divide(conf_sum, count, out=np.zeros(n_bins), where=count > 0)
    acc = np.divide(acc_sum, count, out=np.zeros(n_bins), where=count > 0)
    return CalibrationBins(np.linspace(0.0, 1.0, n_bins + 1), count, mean_conf, acc)


def ece(confidences, correct, n_bins: int = DEFAULT_BINS) -> tuple[float, CalibrationBins]:
    """Expected calibration error on the x100 scale, with its bins."""
    bins = calibration_bins(confidences, correct, n_bins)
    return bins.ece(), bins


def confidence_histogram(bins: CalibrationBins) -> list[tuple[float, float, int]]:
    return [(float(bins.edges[m]), float(bins.edges[m + 1]), int(bins.count[m]))
            for m in range(len(bins.count))]


# SSL-specific diagnostics

def pseudo_label_accuracy(decisions: BranchDecisions, truth) -> float | None:
    """Fraction of HARD samples whose pseudo-label is right; None if none are HARD."""
    truth = np.asarray(truth)
    hard = decisions.hard
    if not hard.any():
        return None
    return float((decisions.pseudo_label[hard] == truth[hard]).mean())


def mask_and_utilization(decisions: BranchDecisions, mode: AblationMode,
                         scope: str = "below") -> tuple[float, float]:
    if len(decisions) == 0:
        raise ValueError("empty decision list")
    return decisions.mask_ratio, utilization(decisions, mode, scope)


# mergeable accumulator

@dataclass
class MetricAccumulator:
    """Collects (probabilities, labels) chunks; merge is concatenation.

    :meth:`result` sorts the pooled rows into a canonical order first, so the
    outcome does not depend on how the stream was sharded or merged.
    """

    num_classes: int
    n_bins: int = DEFAULT_BINS
    _probs: list = field(default_factory=list, repr=False)
    _labels: list = field(default_factory=list, repr=False)

    def update(self, probs, labels) -> "MetricAccumulator":
        probs = np.asarray(probs, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if probs.shape != (len(labels), self.num_classes):
            raise ValueError(f"probs shape {probs.shape} does not match {len(labels)} labels x {self.num_classes}")
        self._probs.append(probs)
        self._labels.append(labels)
        return self

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        if (other.num_classes, other.n_bins) != (self.num_classes, self.n_bins):
            raise ValueError("cannot merge accumulators with different settings")
        out = MetricAccumulator(self.num_classes, self.n_bins)
        out._probs = self._probs + other._probs
        out._labels = self._labels + other._labels
        return out

    def __len__(self):
        return sum(len(x) for x in self._labels)

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._labels:
            return np.zeros((0, self.num_classes)), np.zeros(0, dtype=np.int64)
        probs = np.concatenate(self._probs)
        labels = np.concatenate(self._labels)
        order = np.lexsort(tuple(probs.T[::-1]) + (labels,))
        return probs[order], labels[order]

    def result(self) -> "MetricBundle":
        probs, labels = self.pooled()
        return evaluate_predictions(probs, labels, self.num_classes, self.n_bins)


@dataclass(frozen=True)
class MetricBundle:
    n: int
    top1_error: float
    top5_error: float
    precision: float
    recall: float
    f1: float
    auc: float
    auc_skipped: tuple[int, ...]
    ece: float
    confusion: np.ndarray
    class_accuracy: np.ndarray
    bins: CalibrationBins

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "top1_error": self.top1_error,
            "top5_error": self.top5_error,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc": self.auc,
            "auc_skipped_classes": list(self.auc_skipped),
            "ece": self.ece,
            "ece_bins": int(len(self.bins.count)),
            "confusion": self.confusion.tolist(),
            "class_accuracy": self.class_accuracy.tolist(),
        }


def evaluate_predictions(probs, labels, num_classes: int, n_bins: int = DEFAULT_BINS) -> MetricBundle:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    preds = probs.argmax(axis=1) if len(probs) else np.zeros(0, dtype=np.int64)
    cm = confusion_matrix(labels, preds, num_classes)
    p, r, f = macro_prf(cm)
    auc = ovr_auc(probs, labels) if len(probs) else AucResult(float("nan"), {}, tuple(range(num_classes)))
    ece_value, bins = ece(probs.max(axis=1) if len(probs) else np.zeros(0), preds == labels, n_bins)
    return MetricBundle(
        n=len(labels),
        top1_error=topk_error(probs, labels, 1),
        top5_error=topk_error(probs, labels, min(5, num_classes)),
        precision=p, recall=r, f1=f,
        auc=auc.macro, auc_skipped=auc.skipped,
        ece=ece_value, confusion=cm, class_accuracy=class_accuracy(cm), bins=bins,
    )
