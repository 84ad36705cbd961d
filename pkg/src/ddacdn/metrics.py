"""Detection evaluation: greedy matching, counts, P/R/F1/Acc, PR curves, IoU sweep."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import BBox, iou
from .detector import Detection
from .imgproc import atomic_write

SWEEP_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))
METRICS_HEADER = "mode,class,tp,fp,fn,tn,precision,recall,f1,acc"
PR_HEADER = "class,threshold,precision,recall"


@dataclass
class EvalCounts:
    mode: str  # "box" or "image"
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, mode: str, num_classes: int) -> EvalCounts:
        return cls(mode, *(np.zeros(num_classes, dtype=np.int64) for _ in range(4)))

    def __iadd__(self, other: EvalCounts) -> EvalCounts:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.tn += other.tn
        return self

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def row(self, c: int) -> tuple[int, int, int, int]:
        return int(self.tp[c]), int(self.fp[c]), int(self.fn[c]), int(self.tn[c])

    def total(self) -> tuple[int, int, int, int]:
        return int(self.tp.sum()), int(self.fp.sum()), int(self.fn.sum()), int(self.tn.sum())


def _sorted_dets(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.conf)  # stable for equal confidences


def match_detections(dets: Sequence[Detection], gts, iou_thresh: float = 0.5,
                     num_classes: int = 4) -> EvalCounts:
    """Greedy one-to-one matching per class, highest confidence first.

    Each detection takes the unmatched same-class ground truth of highest
    IoU (ties: lower ground-truth index) if that IoU reaches ``iou_thresh``.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    counts = EvalCounts.zeros("box", num_classes)
    gts = [(int(c), BBox(*b)) for c, b in gts]
    used = [False] * len(gts)
    for d in _sorted_dets(dets):
        best, best_iou = -1, -1.0
        for j, (c, b) in enumerate(gts):
            if used[j] or c != d.cls:
                continue
            v = iou(d.box, b)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            used[best] = True
            counts.tp[d.cls] += 1
        else:
            counts.fp[d.cls] += 1
    for j, (c, _) in enumerate(gts):
        if not used[j]:
            counts.fn[c] += 1
    return counts


def image_level_counts(dets: Sequence[Detection], gts, num_classes: int = 4) -> EvalCounts:
    """Per-class presence contingency for one image."""
    counts = EvalCounts.zeros("image", num_classes)
    pred = {d.cls for d in dets}
    true = {int(c) for c, _ in gts}
    for c in range(num_classes):
        p, t = c in pred, c in true
        if p and t:
            counts.tp[c] += 1
        elif p:
            counts.fp[c] += 1
        elif t:
            counts.fn[c] += 1
        else:
            counts.tn[c] += 1
    return counts


def metrics(tp: int, fp: int, fn: int, tn: int = 0) -> tuple[float, float, float, float]:
    """(precision, recall, F1, accuracy) with 0/0 read as 0."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    n = tp + fp + fn + tn
    acc = (tp + tn) / n if n else 0.0
    return p, r, f1, acc


# --- dataset level ----------------------------------------------------------------

@dataclass
class EvalResult:
    box: EvalCounts
    image: EvalCounts
    iou_thresh: float

    def per_class(self, mode: str = "box") -> list[tuple[float, float, float, float]]:
        counts = self.box if mode == "box" else self.image
        return [metrics(*counts.row(c)) for c in range(counts.num_classes)]

    def macro_f1(self) -> float:
        return float(np.mean([m[2] for m in self.per_class("box")]))

    def image_accuracy(self) -> float:
        return metrics(*self.image.total())[3]

    def to_csv(self) -> str:
        lines = [METRICS_HEADER]
        for counts in (self.box, self.image):
            per = [metrics(*counts.row(c)) for c in range(counts.num_classes)]
            for c, m in enumerate(per):
                lines.append(_metrics_row(counts.mode, str(c), counts.row(c), m))
            macro = tuple(float(np.mean([m[k] for m in per])) for k in range(4))
            lines.append(_metrics_row(counts.mode, "macro", counts.total(), macro))
        return "\n".join(lines) + "\n"


def _metrics_row(mode, cls, cnt, m) -> str:
    return f"{mode},{cls},{cnt[0]},{cnt[1]},{cnt[2]},{cnt[3]}," + ",".join(f"{v:.6f}" for v in m)


def evaluate(dets_per_image: Sequence[Sequence[Detection]], gts_per_image,
             iou_thresh: float = 0.5, num_classes: int = 4) -> EvalResult:
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("need one detection list per ground-truth list")
    box = EvalCounts.zeros("box", num_classes)
    image = EvalCounts.zeros("image", num_classes)
    for dets, gts in zip(dets_per_image, gts_per_image):
        box += match_detections(dets, gts, iou_thresh, num_classes)
        image += image_level_counts(dets, gts, num_classes)
    return EvalResult(box, image, iou_thresh)


def pr_curve(dets_per_image, gts_per_image, iou_thresh: float = 0.5, n_points: int = 101,
             num_classes: int = 4) -> dict:
    """Per-class (threshold, P, R) points; key ``"all"`` pools every class.

    A detection is kept at threshold t when its confidence is >= t.
    """
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    curves = {c: [] for c in range(num_classes)}
    curves["all"] = []
    for t in np.linspace(0.0, 1.0, n_points):
        kept = [[d for d in dets if d.conf >= t] for dets in dets_per_image]
        res = evaluate(kept, gts_per_image, iou_thresh, num_classes)
        for c in range(num_classes):
            p, r, _, _ = metrics(*res.box.row(c))
            curves[c].append((float(t), p, r))
        p, r, _, _ = metrics(*res.box.total())
        curves["all"].append((float(t), p, r))
    return curves


def pr_csv(curves: dict) -> str:
    lines = [PR_HEADER]
    for cls, pts in curves.items():
        lines.extend(f"{cls},{t:.6f},{p:.6f},{r:.6f}" for t, p, r in pts)
    return "\n".join(lines) + "\n"


@dataclass
class SweepTable:
    rows: list[tuple[float, float, float, float, float]] = field(default_factory=list)

    @property
    def best_threshold(self) -> float:
        """First threshold attaining the maximal F1."""
        f1 = [r[3] for r in self.rows]
        return self.rows[int(np.argmax(f1))][0]


def iou_sweep(dets_per_image, gts_per_image, thresholds: Sequence[float] = SWEEP_THRESHOLDS,
              num_classes: int = 4) -> SweepTable:
    """Pooled box-mode (threshold, P, R, F1, Acc) per IoU threshold."""
    table = SweepTable()
    for t in thresholds:
        res = evaluate(dets_per_image, gts_per_image, t, num_classes)
        table.rows.append((float(t), *metrics(*res.box.total())))
    return table


def write_csv(text: str, path) -> None:
    atomic_write(path, text.encode("ascii"))


def evaluate_model(ckpt, samples, iou_thresh: float = 0.5, conf_thresh: float = 0.25,
                   nms_iou: float = 0.45) -> EvalResult:
    """Run a checkpoint on labeled samples, enhancing inputs if it asks for APAGE."""
    from .detector import detect
    from .imgproc import apage

    images = [s.image for s in samples]
    if ckpt.apage is not None:
        images = [apage(im, ckpt.apage) for im in images]
    dets = detect(ckpt.params, np.stack(images), ckpt.geometry, conf_thresh, nms_iou)
    return evaluate(dets, [s.labels for s in samples], iou_thresh, ckpt.geometry.num_classes)
