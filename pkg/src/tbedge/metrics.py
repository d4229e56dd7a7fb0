"""Confusion matrix, scalar metrics, ROC/AUC and report emitters.

The positive class is Tuberculosis (label 1) throughout.  Per-class rows
are reported for both classes.  A metric whose denominator is zero is
reported as 0 and named in that class's ``undefined_flags``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

POSITIVE = "Tuberculosis"
NEGATIVE = "Normal"
CLASS_ORDER = (NEGATIVE, POSITIVE)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for k in ("tp", "fp", "tn", "fn"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ValueError(f"{k} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, k, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def _binary(values, name: str) -> np.ndarray:
    a = np.asarray(values)
    if a.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if a.size and not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must contain only 0 (Normal) and 1 (Tuberculosis)")
    return a.astype(np.int64)


def confusion(predictions: Sequence[int], truths: Sequence[int]) -> ConfusionMatrix:
    """Count TP/FP/TN/FN with Tuberculosis (1) as the positive class."""
    p = _binary(predictions, "predictions")
    t = _binary(truths, "truths")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (t == 1))),
        fp=int(np.sum((p == 1) & (t == 0))),
        tn=int(np.sum((p == 0) & (t == 0))),
        fn=int(np.sum((p == 0) & (t == 1))),
    )


def hard_labels(probabilities) -> np.ndarray:
    """Argmax class of ``(N, 2)`` probabilities; exact ties go to Normal."""
    p = np.asarray(probabilities)
    return np.argmax(p, axis=1).astype(np.int64)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    undefined_flags: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "support": self.support, "undefined_flags": list(self.undefined_flags)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassMetrics":
        return cls(float(d["precision"]), float(d["recall"]), float(d["f1"]),
                   int(d["support"]), list(d["undefined_flags"]))


def _ratio(num: int, den: int, flag: str, flags: List[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def f1_score(precision: float, recall: float) -> Tuple[float, bool]:
    """Harmonic mean of precision and recall; ``(0.0, False)`` when both are 0."""
    if precision + recall == 0:
        return 0.0, False
    return 2 * precision * recall / (precision + recall), True


def _class_metrics(hit: int, false_alarm: int, miss: int) -> ClassMetrics:
    flags: List[str] = []
    precision = _ratio(hit, hit + false_alarm, "precision", flags)
    recall = _ratio(hit, hit + miss, "recall", flags)
    f1, ok = f1_score(precision, recall)
    if not ok:
        flags.append("f1")
    return ClassMetrics(precision, recall, f1, hit + miss, flags)


@dataclass
class ScalarMetrics:
    accuracy: float
    classes: Dict[str, ClassMetrics]

    # positive-class view
    @property
    def precision(self) -> float:
        return self.classes[POSITIVE].precision

    @property
    def recall(self) -> float:
        return self.classes[POSITIVE].recall

    @property
    def f1(self) -> float:
        return self.classes[POSITIVE].f1


def scalar_metrics(cm: ConfusionMatrix) -> ScalarMetrics:
    """Accuracy plus per-class precision, recall and F1."""
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    classes = {
        NEGATIVE: _class_metrics(cm.tn, cm.fn, cm.fp),
        POSITIVE: _class_metrics(cm.tp, cm.fp, cm.fn),
    }
    return ScalarMetrics((cm.tp + cm.tn) / cm.total, classes)


@dataclass
class RocCurve:
    """ROC points from ``(+inf, 0, 0)`` to ``(-inf, 1, 1)`` with trapezoidal AUC."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def points(self) -> List[Tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def trapezoid_area(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1])) / 2.0)


def roc_auc(scores, truths) -> RocCurve:
    """Sweep every distinct score as a threshold (predict positive if score >= t).

    Tied positive/negative scores share one threshold step, so the trapezoid
    over that step credits each tied pair with one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = _binary(truths, "truths")
    if s.shape != t.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {t.size} truths")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(t.sum())
    n_neg = int(t.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative truth")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    t_sorted = t[order]
    tps = np.cumsum(t_sorted)
    fps = np.cumsum(1 - t_sorted)
    # last position of each distinct-score run
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    thresholds = np.r_[np.inf, s_sorted[last], -np.inf]
    tpr = np.r_[0.0, tps[last] / n_pos, 1.0]
    fpr = np.r_[0.0, fps[last] / n_neg, 1.0]
    return RocCurve(thresholds, fpr, tpr, trapezoid_area(fpr, tpr))


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    auc: Optional[float]
    confusion: ConfusionMatrix
    classes: Dict[str, ClassMetrics]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "confusion": self.confusion.to_dict(),
            "classes": {name: self.classes[name].to_dict() for name in CLASS_ORDER},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        auc = d.get("auc")
        return cls(
            accuracy=float(d["accuracy"]),
            auc=None if auc is None else float(auc),
            confusion=ConfusionMatrix(**{k: int(d["confusion"][k]) for k in ("tp", "fp", "tn", "fn")}),
            classes={name: ClassMetrics.from_dict(d["classes"][name]) for name in CLASS_ORDER},
        )

    @classmethod
    def from_json(cls, s: str) -> "EvalReport":
        return cls.from_dict(json.loads(s))

    def summary(self) -> str:
        """Human-readable table, values rounded to 4 decimals."""
        lines = [f"accuracy {self.accuracy:.4f}"
                 + ("" if self.auc is None else f"  auc {self.auc:.4f}"),
                 f"{'class':<14}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}"]
        for name in CLASS_ORDER:
            c = self.classes[name]
            lines.append(f"{name:<14}{c.precision:>10.4f}{c.recall:>10.4f}{c.f1:>10.4f}{c.support:>9d}")
        return "\n".join(lines)


def classification_report(cm: ConfusionMatrix, roc: Optional[RocCurve] = None) -> EvalReport:
    m = scalar_metrics(cm)
    return EvalReport(m.accuracy, None if roc is None else roc.auc, cm, m.classes)


def evaluate(probabilities, truths) -> Tuple[EvalReport, Optional[RocCurve]]:
    """Report from ``(N, 2)`` probabilities; ROC is ``None`` for single-class truths."""
    p = np.asarray(probabilities)
    t = _binary(truths, "truths")
    cm = confusion(hard_labels(p), t)
    roc = roc_auc(p[:, 1], t) if 0 < t.sum() < t.size else None
    return classification_report(cm, roc), roc


# --------------------------------------------------------------------------
# emitters
# --------------------------------------------------------------------------

_RAMP = ((247, 251, 255), (8, 48, 107))  # fixed light-to-dark blue ramp over [0, 1]


def ramp_color(value: float) -> str:
    v = min(1.0, max(0.0, float(value)))
    lo, hi = _RAMP
    rgb = tuple(int(round(a + (b - a) * v)) for a, b in zip(lo, hi))
    return "#%02x%02x%02x" % rgb


def _text_color(value: float) -> str:
    return "#ffffff" if value > 0.5 else "#000000"


def _svg(width: int, height: int, body: List[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif">')
    return "\n".join([head, f"<title>{escape(title)}</title>",
                      f'<rect width="{width}" height="{height}" fill="#ffffff"/>', *body, "</svg>"]) + "\n"


def confusion_svg(cm: ConfusionMatrix) -> str:
    """2 x 2 grid, rows = true class, columns = predicted class."""
    cells = {(0, 0): ("TN", cm.tn), (0, 1): ("FP", cm.fp), (1, 0): ("FN", cm.fn), (1, 1): ("TP", cm.tp)}
    row_tot = {0: cm.tn + cm.fp, 1: cm.fn + cm.tp}
    x0, y0, size = 130, 60, 140
    body = [f'<text x="{x0 + size}" y="30" text-anchor="middle" font-size="16">Predicted</text>',
            f'<text x="30" y="{y0 + size}" text-anchor="middle" font-size="16" '
            f'transform="rotate(-90 30 {y0 + size})">True</text>']
    for j, name in enumerate(CLASS_ORDER):
        body.append(f'<text x="{x0 + j * size + size // 2}" y="{y0 - 8}" text-anchor="middle" '
                    f'font-size="13">{name}</text>')
        body.append(f'<text x="{x0 - 8}" y="{y0 + j * size + size // 2}" text-anchor="end" '
                    f'font-size="13">{name}</text>')
    for (i, j), (tag, count) in sorted(cells.items()):
        frac = count / row_tot[i] if row_tot[i] else 0.0
        x, y = x0 + j * size, y0 + i * size
        body.append(f'<rect x="{x}" y="{y}" width="{size}" height="{size}" fill="{ramp_color(frac)}" '
                    f'stroke="#333333"/>')
        body.append(f'<text x="{x + size // 2}" y="{y + size // 2 - 6}" text-anchor="middle" '
                    f'font-size="22" fill="{_text_color(frac)}">{count}</text>')
        body.append(f'<text x="{x + size // 2}" y="{y + size // 2 + 18}" text-anchor="middle" '
                    f'font-size="13" fill="{_text_color(frac)}">{tag} ({frac:.4f})</text>')
    return _svg(x0 + 2 * size + 20, y0 + 2 * size + 20, body, "Confusion matrix")


def roc_svg(roc: RocCurve) -> str:
    """ROC polyline on the unit square with the chance diagonal and AUC label."""
    x0, y0, size = 60, 20, 360

    def px(fpr, tpr):
        return f"{x0 + fpr * size:.2f},{y0 + (1 - tpr) * size:.2f}"

    pts = " ".join(px(f, t) for f, t in zip(roc.fpr.tolist(), roc.tpr.tolist()))
    body = [f'<rect x="{x0}" y="{y0}" width="{size}" height="{size}" fill="none" stroke="#333333"/>',
            f'<line x1="{x0}" y1="{y0 + size}" x2="{x0 + size}" y2="{y0}" stroke="#999999" '
            f'stroke-dasharray="6,4"/>',
            f'<polyline points="{pts}" fill="none" stroke="#08306b" stroke-width="2"/>',
            f'<text x="{x0 + size - 10}" y="{y0 + size - 14}" text-anchor="end" font-size="16">'
            f'AUC = {roc.auc:.4f}</text>',
            f'<text x="{x0 + size / 2}" y="{y0 + size + 36}" text-anchor="middle" font-size="14">'
            f'False positive rate</text>',
            f'<text x="18" y="{y0 + size / 2}" text-anchor="middle" font-size="14" '
            f'transform="rotate(-90 18 {y0 + size / 2})">True positive rate</text>']
    for v in (0.0, 0.5, 1.0):
        body.append(f'<text x="{x0 + v * size}" y="{y0 + size + 16}" text-anchor="middle" '
                    f'font-size="11">{v:.1f}</text>')
        body.append(f'<text x="{x0 - 6}" y="{y0 + (1 - v) * size + 4}" text-anchor="end" '
                    f'font-size="11">{v:.1f}</text>')
    return _svg(x0 + size + 20, y0 + size + 50, body, "ROC curve")


def heatmap_svg(report: EvalReport) -> str:
    """Per-class precision / recall / F1 heatmap on the fixed colour ramp."""
    cols = ("precision", "recall", "f1")
    x0, y0, cw, ch = 130, 40, 110, 60
    body = []
    for j, col in enumerate(cols):
        body.append(f'<text x="{x0 + j * cw + cw // 2}" y="{y0 - 10}" text-anchor="middle" '
                    f'font-size="14">{col}</text>')
    for i, name in enumerate(CLASS_ORDER):
        c = report.classes[name]
        body.append(f'<text x="{x0 - 8}" y="{y0 + i * ch + ch // 2 + 5}" text-anchor="end" '
                    f'font-size="14">{name}</text>')
        for j, col in enumerate(cols):
            v = getattr(c, col)
            x, y = x0 + j * cw, y0 + i * ch
            body.append(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{ramp_color(v)}" '
                        f'stroke="#ffffff"/>')
            body.append(f'<text x="{x + cw // 2}" y="{y + ch // 2 + 6}" text-anchor="middle" '
                        f'font-size="16" fill="{_text_color(v)}">{v:.4f}</text>')
    foot = f"accuracy {report.accuracy:.4f}" + ("" if report.auc is None else f"   AUC {report.auc:.4f}")
    body.append(f'<text x="{x0}" y="{y0 + 2 * ch + 30}" font-size="14">{foot}</text>')
    return _svg(x0 + 3 * cw + 20, y0 + 2 * ch + 50, body, "Classification report")


def roc_csv(roc: RocCurve) -> str:
    lines = ["threshold,fpr,tpr"]
    for thr, f, t in roc.points():
        lines.append(f"{thr!r},{f!r},{t!r}")
    return "\n".join(lines) + "\n"


def _render(obj, fmt: str) -> str:
    if isinstance(obj, EvalReport):
        if fmt == "json":
            return obj.to_json()
        if fmt == "svg":
            return heatmap_svg(obj)
        if fmt == "csv":
            rows = ["class,precision,recall,f1,support"]
            rows += [f"{n},{obj.classes[n].precision!r},{obj.classes[n].recall!r},"
                     f"{obj.classes[n].f1!r},{obj.classes[n].support}" for n in CLASS_ORDER]
            return "\n".join(rows) + "\n"
    elif isinstance(obj, RocCurve):
        if fmt == "csv":
            return roc_csv(obj)
        if fmt == "svg":
            return roc_svg(obj)
        if fmt == "json":
            pts = [{"threshold": (None if not np.isfinite(t) else t), "fpr": f, "tpr": r}
                   for t, f, r in obj.points()]
            return json.dumps({"auc": obj.auc, "points": pts}, indent=2, sort_keys=True) + "\n"
    elif isinstance(obj, ConfusionMatrix):
        if fmt == "svg":
            return confusion_svg(obj)
        if fmt == "json":
            return json.dumps(obj.to_dict(), indent=2, sort_keys=True) + "\n"
        if fmt == "csv":
            return (f"truth,pred_{NEGATIVE},pred_{POSITIVE}\n{NEGATIVE},{obj.tn},{obj.fp}\n"
                    f"{POSITIVE},{obj.fn},{obj.tp}\n")
    else:
        raise TypeError(f"cannot emit object of type {type(obj).__name__}")
    raise ValueError(f"format {fmt!r} is not supported for {type(obj).__name__}")


def emit(obj, fmt: str, path) -> None:
    """Write a report, ROC curve or confusion matrix as ``json``, ``csv`` or ``svg``."""
    if path is None or str(path) == "":
        raise ValueError("output path must be a non-empty string")
    text = _render(obj, fmt)
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {str(path)!r}: {exc.strerror or exc}") from exc
