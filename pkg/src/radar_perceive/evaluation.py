"""Classification accuracy/confusion and IoU-matched detection AP with
range and density strata."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .detection import DetectionBox
from .errors import InvalidInputError

NA = "N/A"
RANGE_BINS = (("Short", 0.0, 3.5), ("Mid", 3.5, 7.0), ("Long", 7.0, float("inf")))
DENSITY_BINS = (("#Objects<4", 0, 4), ("#Objects 4-6", 4, 7), ("#Objects>=7", 7, 10**9))


# -- classification ---------------------------------------------------------

def accuracy_confusion(preds, truths, num_classes: int):
    """Accuracy and the row-normalised confusion matrix (rows = truth)."""
    preds = np.asarray(preds, dtype=int).ravel()
    truths = np.asarray(truths, dtype=int).ravel()
    if len(preds) != len(truths):
        raise InvalidInputError(f"{len(preds)} predictions for {len(truths)} truths")
    if len(truths) == 0:
        raise InvalidInputError("no samples to score")
    if num_classes < 1 or min(preds.min(), truths.min()) < 0 or max(preds.max(), truths.max()) >= num_classes:
        raise InvalidInputError(f"class ids outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    rows = counts.sum(axis=1, keepdims=True)
    matrix = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    return float(np.mean(preds == truths)), matrix


def format_confusion(matrix: np.ndarray, names=None, accuracy: float | None = None) -> str:
    """Text table with one row per true class, values to two decimals."""
    n = matrix.shape[0]
    names = list(names) if names is not None else [str(i) for i in range(n)]
    width = max(8, max(len(s) for s in names) + 1)
    lines = []
    if accuracy is not None:
        lines.append(f"Acc: {accuracy:.3f}")
    lines.append(" " * width + "".join(f"{s:>{width}}" for s in names))
    for name, row in zip(names, matrix):
        lines.append(f"{name:<{width}}" + "".join(f"{v:>{width}.2f}" for v in row))
    return "\n".join(lines)


# -- boxes ------------------------------------------------------------------

def iou(a: DetectionBox, b: DetectionBox, shape: tuple[int, int] | None = None) -> float:
    """Intersection over union of two boxes, optionally clipped to an image."""
    ar0, ac0, ar1, ac1 = a.bounds(shape)
    br0, bc0, br1, bc1 = b.bounds(shape)
    area_a = max(ar1 - ar0, 0.0) * max(ac1 - ac0, 0.0)
    area_b = max(br1 - br0, 0.0) * max(bc1 - bc0, 0.0)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = max(min(ar1, br1) - max(ar0, br0), 0.0) * max(min(ac1, bc1) - max(ac0, bc0), 0.0)
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


@dataclass
class MatchResult:
    order: list[int]  # detection indices by descending confidence
    is_tp: list[bool]  # aligned with ``order``
    matched_truth: list[int | None]  # aligned with ``order``
    truth_matched: list[bool] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return int(sum(self.is_tp))

    @property
    def fp(self) -> int:
        return len(self.is_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.truth_matched) - int(sum(self.truth_matched))


def confidence_order(dets) -> list[int]:
    """Indices by descending confidence; ties keep input order."""
    return sorted(range(len(dets)), key=lambda i: -(dets[i].confidence or 0.0))


def match_detections(dets, truths, iou_threshold: float = 0.5, shape=None) -> MatchResult:
    """Greedy matching in confidence order.

    A detection is a true positive when its IoU exceeds ``iou_threshold``
    (strictly) with a still unmatched truth of the same class and scene; it
    takes the best-overlapping such truth.
    """
    dets, truths = list(dets), list(truths)
    order = confidence_order(dets)
    used = [False] * len(truths)
    is_tp, matched = [], []
    for i in order:
        d = dets[i]
        best, best_iou = None, iou_threshold
        for j, t in enumerate(truths):
            if used[j] or t.label != d.label or t.scene_id != d.scene_id:
                continue
            v = iou(d, t, shape)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None:
            used[best] = True
        is_tp.append(best is not None)
        matched.append(best)
    return MatchResult(order, is_tp, matched, used)


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    """``TP / (TP + FP)`` and ``TP / (TP + FN)``; an empty ratio gives
    precision 1 and recall 0."""
    if min(tp, fp, fn) < 0:
        raise InvalidInputError("counts must be >= 0")
    precision = tp / (tp + fp) if tp + fp > 0 else 1.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return float(precision), float(recall)


@dataclass
class PrCurve:
    thresholds: list[float]
    precision: list[float]
    recall: list[float]


def pr_curve(dets, truths, iou_threshold: float = 0.5, shape=None) -> PrCurve:
    """Precision/recall at every distinct confidence (highest first)."""
    dets = list(dets)
    m = match_detections(dets, truths, iou_threshold, shape)
    n_truth = len(list(truths))
    conf = [dets[i].confidence or 0.0 for i in m.order]
    thresholds, precision, recall = [], [], []
    tp = fp = 0
    for k, flag in enumerate(m.is_tp):
        tp += flag
        fp += not flag
        if k + 1 < len(conf) and conf[k + 1] == conf[k]:
            continue
        p, r = precision_recall(tp, fp, n_truth - tp)
        thresholds.append(conf[k])
        precision.append(p)
        recall.append(r)
    return PrCurve(thresholds, precision, recall)


def average_precision(dets, truths, iou_threshold: float = 0.5, shape=None) -> float | None:
    """All-points interpolated AP for one class; ``None`` without truths.

    ``AP = sum_i (r_i - r_{i-1}) * max_{r >= r_i} p(r)`` over the curve
    points in threshold order, starting from recall 0.
    """
    truths = list(truths)
    if not truths:
        return None
    curve = pr_curve(dets, truths, iou_threshold, shape)
    if not curve.recall:
        return 0.0
    prec = np.array(curve.precision)
    rec = np.array(curve.recall)
    interp = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], rec]))
    return float(np.sum(steps * interp))


# -- strata -----------------------------------------------------------------

def scene_densities(truths) -> dict[str, int]:
    return dict(Counter(t.scene_id for t in truths))


def _in_range(box, lo, hi) -> bool:
    return lo <= box.range_m < hi


@dataclass
class StrataTable:
    columns: list[str]
    rows: list[tuple[str, list[float | None]]]

    def cell(self, row: str, column: str):
        col = self.columns.index(column)
        for name, values in self.rows:
            if name == row:
                return values[col - 1]
        raise KeyError(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for name, values in self.rows:
            writer.writerow([name] + [NA if v is None else f"{100.0 * v:.2f}" for v in values])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def strata_columns() -> list[str]:
    cols = ["class", "Overall"]
    for dname, _, _ in DENSITY_BINS:
        cols.append(f"{dname} Overall")
        cols.extend(f"{dname} {rname}" for rname, _, _ in RANGE_BINS)
    cols.extend(rname for rname, _, _ in RANGE_BINS)
    return cols


def map_stratified(dets, truths, class_names, iou_threshold: float = 0.5, shape=None) -> StrataTable:
    """AP per class over all data, per density bin (overall and by range),
    and per range bin, plus a final mAP row.

    A box belongs to a range bin by its own ``range_m`` and to a density
    bin by the number of truths in its scene.  Every cell is computed by
    filtering detections and truths, then calling :func:`average_precision`.
    Undefined cells (no truths) are ``None`` and skipped by the mAP mean.
    """
    dets, truths = list(dets), list(truths)
    density = scene_densities(truths)

    def dens_ok(box, lo, hi):
        return lo <= density.get(box.scene_id, 0) < hi

    filters = [lambda b: True]
    for _, dlo, dhi in DENSITY_BINS:
        filters.append(lambda b, dlo=dlo, dhi=dhi: dens_ok(b, dlo, dhi))
        for _, rlo, rhi in RANGE_BINS:
            filters.append(lambda b, dlo=dlo, dhi=dhi, rlo=rlo, rhi=rhi: dens_ok(b, dlo, dhi) and _in_range(b, rlo, rhi))
    for _, rlo, rhi in RANGE_BINS:
        filters.append(lambda b, rlo=rlo, rhi=rhi: _in_range(b, rlo, rhi))

    rows = []
    for cls, name in enumerate(class_names):
        cd = [d for d in dets if d.label == cls]
        ct = [t for t in truths if t.label == cls]
        rows.append((name, [average_precision([d for d in cd if f(d)], [t for t in ct if f(t)],
                                              iou_threshold, shape) for f in filters]))
    means = []
    for k in range(len(filters)):
        vals = [r[1][k] for r in rows if r[1][k] is not None]
        means.append(float(np.mean(vals)) if vals else None)
    rows.append(("mAP", means))
    return StrataTable(strata_columns(), rows)
