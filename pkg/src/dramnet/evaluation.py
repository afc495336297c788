"""Confusion-matrix metrics, one-vs-rest ROC curves, and thresholded authentication."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError, ParameterError, ShapeError
from .imaging import block_mean

DEFAULT_THRESHOLD = 0.9


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, cols: predicted class

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, k: int) -> tuple[int, int, int, int]:
        """(TP, FP, FN, TN) for class ``k``."""
        c = self.counts
        tp = int(c[k, k])
        fp = int(c[:, k].sum()) - tp
        fn = int(c[k, :].sum()) - tp
        return tp, fp, fn, self.total - tp - fp - fn


def confusion_matrix(predictions, labels, n_classes: int | None = None) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ShapeError("predictions and labels must be 1D and equally long")
    if n_classes is None:
        n_classes = int(max(predictions.max(initial=-1), labels.max(initial=-1))) + 1
    for name, a in (("label", labels), ("prediction", predictions)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise ParameterError(f"{name} outside [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class MetricsReport:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    counts: list[list[int]]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "confusion_matrix": self.counts,
        }


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus one-vs-rest precision/recall/F1 per class and their unweighted means.

    A ratio whose denominator is zero is reported as 0.
    """
    if cm.n_classes == 0 or cm.total == 0:
        raise DegenerateInputError("confusion matrix is empty")
    precision, recall, f1 = [], [], []
    for k in range(cm.n_classes):
        tp, fp, fn, _ = cm.one_vs_rest(k)
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        precision.append(p)
        recall.append(r)
        f1.append(_ratio(2 * p * r, p + r))
    return MetricsReport(
        accuracy=int(np.trace(cm.counts)) / cm.total,
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        counts=cm.counts.tolist(),
    )


@dataclass(frozen=True, eq=False)
class RocCurve:
    class_id: int
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # first entry is +inf, the (0, 0) point
    auc: float


def auc(curve_or_fpr, tpr=None) -> float:
    """Trapezoidal area under an ROC curve."""
    fpr = curve_or_fpr.fpr if tpr is None else np.asarray(curve_or_fpr, dtype=float)
    tpr = curve_or_fpr.tpr if tpr is None else np.asarray(tpr, dtype=float)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def roc_curve(scores, positives, class_id: int = 0) -> RocCurve:
    """Sweep a threshold down through the distinct scores; tied scores share one point."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape:
        raise ShapeError("scores and labels must be equally long")
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = positives[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp_pts = np.r_[0, tp[last_of_group]]
    fp_pts = np.r_[0, fp[last_of_group]]
    thresholds = np.r_[np.inf, s[last_of_group]]
    # trapezoids in integer counts, one rounding at the end
    area2 = int(np.sum(np.diff(fp_pts) * (tp_pts[1:] + tp_pts[:-1])))
    return RocCurve(class_id, fp_pts / n_neg, tp_pts / n_pos, thresholds, area2 / (2 * n_pos * n_neg))


# --- model evaluation ------------------------------------------------------------------


@dataclass
class Evaluation:
    report: MetricsReport
    curves: list[RocCurve]
    probabilities: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray


def evaluate(model, test_set) -> Evaluation:
    if len(test_set) == 0:
        raise DegenerateInputError("empty test set")
    probs = model.predict_proba(test_set.inputs(model.dtype))
    preds = np.argmax(probs, axis=1)
    n = model.arch.n_classes
    cm = confusion_matrix(preds, test_set.labels, n)
    curves = []
    for k in range(n):
        pos = test_set.labels == k
        if pos.all() or not pos.any():
            continue
        curves.append(roc_curve(probs[:, k], pos, k))
    return Evaluation(metrics(cm), curves, probs, preds, np.asarray(test_set.labels))


def metrics_json(ev: Evaluation) -> str:
    doc = ev.report.to_dict()
    doc["auc"] = {str(c.class_id): c.auc for c in ev.curves}
    doc["n_samples"] = int(len(ev.labels))
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def roc_csv(curves) -> str:
    buf = io.StringIO()
    buf.write("class,threshold,fpr,tpr\n")
    for c in curves:
        for th, f, t in zip(c.thresholds, c.fpr, c.tpr):
            buf.write(f"{c.class_id},{'inf' if np.isinf(th) else repr(float(th))},{float(f)!r},{float(t)!r}\n")
    return buf.getvalue()


def confusion_csv(counts) -> str:
    counts = np.asarray(counts)
    n = counts.shape[0]
    lines = ["true\\pred," + ",".join(str(j) for j in range(n))]
    lines += [f"{i}," + ",".join(str(int(v)) for v in counts[i]) for i in range(n)]
    return "\n".join(lines) + "\n"


# --- authentication ---------------------------------------------------------------------


@dataclass
class AuthDecision:
    accepted: bool
    device_id: int | None
    probabilities: list[float]
    threshold: float

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "device_id": self.device_id,
            "probabilities": self.probabilities,
            "threshold": self.threshold,
        }


def decide(probabilities, threshold: float = DEFAULT_THRESHOLD) -> AuthDecision:
    """Accept the most probable device when its probability reaches ``threshold``."""
    probs = np.asarray(probabilities, dtype=float)
    k = int(np.argmax(probs))
    accepted = bool(probs[k] >= threshold)
    return AuthDecision(accepted, k if accepted else None, probs.tolist(), float(threshold))


def authenticate(model, measurement, threshold: float = DEFAULT_THRESHOLD) -> AuthDecision:
    """Classify one capture (a Measurement or a raw bit matrix) and apply the threshold."""
    bits = np.asarray(getattr(measurement, "bits", measurement), dtype=np.uint8)
    h, w, _ = model.arch.input_shape
    if bits.ndim != 2 or bits.shape[0] % h or bits.shape[1] % w:
        raise DimensionError(f"capture of shape {bits.shape} cannot be reduced to the model input {h}x{w}")
    pixels = block_mean(bits * np.uint8(255), h, w)
    x = (pixels / np.float64(255.0)).astype(model.dtype)[None, :, :, None]
    return decide(model.forward(x)[0], threshold)
