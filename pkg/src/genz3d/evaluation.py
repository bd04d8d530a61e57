"""Confusion-matrix metrics and report rendering.

Per-class IoU = TP / (TP + FP + FN) from a confusion matrix with ground truth
in rows and predictions in columns. Mean metrics over a class subset exclude
classes whose metric is undefined (zero denominator) unless the caller opts
into the zero convention. The harmonic mean pairs the seen-subset and
unseen-subset means.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .validation import EvaluationError, as_labels

CSV_HEADER = ("metric", "class", "subset", "value")


def harmonic_mean(s, u):
    """2su/(s+u), defined as 0 when s + u == 0."""
    if s < 0 or u < 0:
        raise ValueError("harmonic_mean takes nonnegative operands")
    if s + u == 0:
        return 0.0
    return 2.0 * s * u / (s + u)


class ConfusionMatrix:
    """Square count matrix over a fixed class registry (names in id order)."""

    def __init__(self, classes):
        self.classes = tuple(classes)
        if len(self.classes) != len(set(self.classes)):
            raise ValueError("duplicate class names in the registry")
        if not self.classes:
            raise ValueError("need at least one class")
        n = len(self.classes)
        self.counts = np.zeros((n, n), dtype=np.int64)

    def _index(self, name):
        try:
            return self.classes.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None

    def accumulate(self, gt, pred):
        """Add (ground truth, prediction) id pairs to the counts."""
        n = len(self.classes)
        gt = as_labels(gt, name="gt")
        pred = as_labels(pred, n=gt.shape[0], name="pred")
        if gt.size and (gt.min() < 0 or gt.max() >= n):
            raise ValueError("gt ids out of range for the class registry")
        if pred.size and (pred.min() < 0 or pred.max() >= n):
            raise ValueError("pred ids out of range for the class registry")
        self.counts += np.bincount(
            n * gt + pred, minlength=n * n
        ).reshape(n, n)
        return self

    def merge(self, other):
        """Add another matrix over the identical registry."""
        if other.classes != self.classes:
            raise ValueError("cannot merge confusion matrices over different registries")
        self.counts += other.counts
        return self

    def iou(self, name, undefined_as_zero=False):
        """Intersection over union for one class; None when undefined."""
        i = self._index(name)
        tp = self.counts[i, i]
        denom = self.counts[i, :].sum() + self.counts[:, i].sum() - tp
        if denom == 0:
            return 0.0 if undefined_as_zero else None
        return float(tp / denom)

    def class_accuracy(self, name):
        """Per-class recall; None when the class has no ground-truth support."""
        i = self._index(name)
        support = self.counts[i, :].sum()
        if support == 0:
            return None
        return float(self.counts[i, i] / support)

    def _subset_mean(self, names, values, what):
        defined = [v for v in values if v is not None]
        if not defined:
            raise EvaluationError(
                f"{what} undefined for every class in subset {list(names)!r}"
            )
        return float(np.mean(defined))

    def miou(self, names, undefined_as_zero=False):
        """Mean IoU over a class-name subset, skipping undefined classes."""
        names = list(names)
        values = [self.iou(n, undefined_as_zero) for n in names]
        return self._subset_mean(names, values, "IoU")

    def mean_class_accuracy(self, names):
        names = list(names)
        values = [self.class_accuracy(n) for n in names]
        return self._subset_mean(names, values, "accuracy")

    def global_accuracy(self):
        total = self.counts.sum()
        if total == 0:
            raise EvaluationError("empty confusion matrix")
        return float(np.trace(self.counts) / total)


@dataclass
class MetricsReport:
    """All evaluation numbers for one run, plus run metadata."""

    task: str
    classes: tuple
    seen: tuple
    unseen: tuple
    per_class_iou: dict
    per_class_acc: dict
    miou_seen: float
    miou_unseen: float
    miou_all: float
    acc_seen: float
    acc_unseen: float
    acc_all: float
    hm_iou: float
    hm_acc: float
    global_acc: float
    metadata: dict = field(default_factory=dict)


def build_report(cm, seen, unseen, task="segmentation", metadata=None,
                 undefined_as_zero=False):
    """Compute a MetricsReport from an accumulated confusion matrix.

    ``seen``/``unseen`` are disjoint class-name tuples; the "all" subset is
    their union in registry order.
    """
    seen = tuple(seen)
    unseen = tuple(unseen)
    if set(seen) & set(unseen):
        raise ValueError("seen and unseen subsets overlap")
    everything = [c for c in cm.classes if c in set(seen) | set(unseen)]
    miou_seen = cm.miou(seen, undefined_as_zero)
    miou_unseen = cm.miou(unseen, undefined_as_zero)
    acc_seen = cm.mean_class_accuracy(seen)
    acc_unseen = cm.mean_class_accuracy(unseen)
    return MetricsReport(
        task=task,
        classes=tuple(everything),
        seen=seen,
        unseen=unseen,
        per_class_iou={c: cm.iou(c, undefined_as_zero) for c in everything},
        per_class_acc={c: cm.class_accuracy(c) for c in everything},
        miou_seen=miou_seen,
        miou_unseen=miou_unseen,
        miou_all=cm.miou(everything, undefined_as_zero),
        acc_seen=acc_seen,
        acc_unseen=acc_unseen,
        acc_all=cm.mean_class_accuracy(everything),
        hm_iou=harmonic_mean(miou_seen, miou_unseen),
        hm_acc=harmonic_mean(acc_seen, acc_unseen),
        global_acc=cm.global_accuracy(),
        metadata=dict(metadata or {}),
    )


def _pct(value):
    return "   -" if value is None else f"{100.0 * value:.1f}"


def render_report_text(report):
    """Human-readable tables: per-class block, then S/U/All/HM summary."""
    out = []
    n_s, n_u = len(report.seen), len(report.unseen)
    out.append(f"task: {report.task}   classes: {len(report.classes)} "
               f"({n_s} seen, {n_u} unseen)")
    if report.metadata:
        out.append("   ".join(f"{k}={report.metadata[k]}"
                              for k in sorted(report.metadata)))
    out.append("")
    out.append(f"{'class':<16} {'subset':<8} {'IoU%':>7} {'Acc%':>7}")
    unseen_set = set(report.unseen)
    for c in report.classes:
        subset = "unseen" if c in unseen_set else "seen"
        out.append(f"{c:<16} {subset:<8} {_pct(report.per_class_iou[c]):>7} "
                   f"{_pct(report.per_class_acc[c]):>7}")
    out.append("")
    out.append(f"{'':<8} {'S':>7} {'U':>7} {'All':>7} {'HM':>7}")
    out.append(f"{'mIoU%':<8} {_pct(report.miou_seen):>7} {_pct(report.miou_unseen):>7} "
               f"{_pct(report.miou_all):>7} {_pct(report.hm_iou):>7}")
    out.append(f"{'mAcc%':<8} {_pct(report.acc_seen):>7} {_pct(report.acc_unseen):>7} "
               f"{_pct(report.acc_all):>7} {_pct(report.hm_acc):>7}")
    out.append(f"global Acc%: {100.0 * report.global_acc:.1f}")
    return "\n".join(out) + "\n"


def _fmt6(value):
    return f"{value:.6g}"


def render_report_csv(report):
    """CSV rows metric,class,subset,value; fractions at 6 significant digits.

    Undefined per-class values are omitted rather than written as text.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    unseen_set = set(report.unseen)
    for c in report.classes:
        subset = "unseen" if c in unseen_set else "seen"
        if report.per_class_iou[c] is not None:
            writer.writerow(["iou", c, subset, _fmt6(report.per_class_iou[c])])
        if report.per_class_acc[c] is not None:
            writer.writerow(["acc", c, subset, _fmt6(report.per_class_acc[c])])
    for subset, value in (("seen", report.miou_seen),
                          ("unseen", report.miou_unseen),
                          ("all", report.miou_all)):
        writer.writerow(["miou", "", subset, _fmt6(value)])
    for subset, value in (("seen", report.acc_seen),
                          ("unseen", report.acc_unseen),
                          ("all", report.acc_all)):
        writer.writerow(["macc", "", subset, _fmt6(value)])
    writer.writerow(["hm_iou", "", "", _fmt6(report.hm_iou)])
    writer.writerow(["hm_acc", "", "", _fmt6(report.hm_acc)])
    writer.writerow(["global_acc", "", "", _fmt6(report.global_acc)])
    for key in sorted(report.metadata):
        writer.writerow(["meta", key, "", str(report.metadata[key])])
    return buf.getvalue()


def parse_report_csv(text):
    """Parse render_report_csv output into {(metric, class, subset): value}.

    Metric values come back as floats, meta rows as strings.
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_HEADER:
        raise EvaluationError("not a metrics CSV: bad header")
    rows = {}
    for line in reader:
        if len(line) != 4:
            raise EvaluationError(f"malformed metrics CSV row: {line!r}")
        metric, cls, subset, value = line
        key = (metric, cls, subset)
        rows[key] = value if metric == "meta" else float(value)
    return rows


def render_report(report, fmt="text"):
    if fmt == "text":
        return render_report_text(report)
    if fmt == "csv":
        return render_report_csv(report)
    raise ValueError(f"unknown report format {fmt!r}")
