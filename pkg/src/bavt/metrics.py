"""Pixel classification metrics: Sen, Spe, F1, Acc, AUC, IoU.

Zero-denominator convention: a ratio whose denominator is 0 is reported as
1.0, since the quantity it measures is vacuously perfect (no positives to
find gives Sen = 1, no negatives gives Spe = 1, an empty prediction on an
empty mask gives F1 = IoU = 1).
"""
from dataclasses import asdict, dataclass

import numpy as np

METRIC_NAMES = ("sensitivity", "specificity", "f1", "accuracy", "auc", "iou")
TABLE_HEADERS = ("Sen.", "Spe.", "F1", "Acc.", "AUC", "IoU")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricsReport:
    sensitivity: float
    specificity: float
    f1: float
    accuracy: float
    auc: float
    iou: float
    threshold: float
    counts: ConfusionCounts

    def values(self):
        return tuple(getattr(self, k) for k in METRIC_NAMES)

    def as_row(self):
        row = {k: getattr(self, k) for k in METRIC_NAMES}
        row["threshold"] = self.threshold
        row.update(asdict(self.counts))
        return row


def _ratio(num, den):
    return 1.0 if den == 0 else num / den


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and mask {gt.shape} differ in shape")
    return pred, gt.astype(bool)


def confusion(pred_soft, gt, threshold=0.5):
    """Counts after binarizing ``pred_soft >= threshold``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    pred, gt = _check(pred_soft, gt)
    hard = pred >= threshold
    tp = int(np.count_nonzero(hard & gt))
    fp = int(np.count_nonzero(hard & ~gt))
    fn = int(np.count_nonzero(~hard & gt))
    tn = int(gt.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def classification_metrics(counts):
    """Closed forms from confusion counts; AUC is not derivable here."""
    c = counts
    return {
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
        "specificity": _ratio(c.tn, c.tn + c.fp),
        "accuracy": _ratio(c.tp + c.tn, c.total),
        "f1": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn),
    }


def roc_curve(pred_soft, gt):
    """ROC polyline over all distinct scores: (thresholds, fpr, tpr), starting at (0, 0)."""
    pred, gt = _check(pred_soft, gt)
    scores = pred.ravel()
    labels = gt.ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes in the ground truth")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(ends, len(s) - 1)
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    thresholds = np.concatenate([[np.inf], s[ends]])
    return thresholds, fpr, tpr


def roc_auc(pred_soft, gt):
    """Trapezoidal area under the ROC curve (ties contribute half)."""
    _, fpr, tpr = roc_curve(pred_soft, gt)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def evaluate(pred_soft, gt, threshold=0.5):
    counts = confusion(pred_soft, gt, threshold)
    m = classification_metrics(counts)
    return MetricsReport(m["sensitivity"], m["specificity"], m["f1"], m["accuracy"],
                         roc_auc(pred_soft, gt), m["iou"], threshold, counts)


def macro_average(reports):
    """Per-image mean of each metric; counts are pooled."""
    vals = np.array([r.values() for r in reports])
    mean = vals.mean(axis=0)
    counts = reports[0].counts
    for r in reports[1:]:
        counts = counts + r.counts
    return MetricsReport(*mean, threshold=reports[0].threshold, counts=counts)


def micro_average(preds, gts, threshold=0.5):
    """Metrics from counts pooled over all images; AUC from pooled scores."""
    preds = [np.asarray(p, dtype=np.float64).ravel() for p in preds]
    gts = [np.asarray(g).ravel() for g in gts]
    return evaluate(np.concatenate(preds), np.concatenate(gts), threshold)


def format_table(rows, digits=4):
    """Plain-text table with the six metric columns: ``rows`` is [(label, report-or-values)]."""
    width = max(len("Methods"), *(len(label) for label, _ in rows))
    lines = ["Methods".ljust(width) + "  " + "  ".join(h.rjust(digits + 2) for h in TABLE_HEADERS)]
    for label, rep in rows:
        vals = rep.values() if isinstance(rep, MetricsReport) else rep
        lines.append(label.ljust(width) + "  " + "  ".join(f"{v:.{digits}f}" for v in vals))
    return "\n".join(lines)


REPORT_COLUMNS = ("image",) + METRIC_NAMES + ("threshold", "tp", "fp", "tn", "fn")


def write_report_csv(path, rows, threshold):
    """``rows`` is [(label, MetricsReport)]; header comment records the threshold."""
    with open(path, "w") as fh:
        fh.write(f"# threshold={threshold!r}\n")
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for label, rep in rows:
            r = rep.as_row()
            fh.write(",".join([str(label)] + [repr(float(r[k])) for k in METRIC_NAMES]
                              + [repr(float(r["threshold"]))]
                              + [str(r[k]) for k in ("tp", "fp", "tn", "fn")]) + "\n")


def write_roc_csv(path, curves):
    """``curves`` is [(label, (thresholds, fpr, tpr))] -> rows of label,threshold,fpr,tpr."""
    with open(path, "w") as fh:
        fh.write("image,threshold,fpr,tpr\n")
        for label, (thr, fpr, tpr) in curves:
            for t, f, p in zip(thr, fpr, tpr):
                fh.write(f"{label},{t!r},{f!r},{p!r}\n")
