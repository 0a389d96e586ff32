"""Detection and classification metrics.

Detection inputs are per-image mappings: ``{image_id: [Detection, ...]}`` for
predictions and ``{image_id: [Box, ...]}`` for ground truth. Images may appear
in only one of the two mappings.

AP uses COCO-style 101-point interpolation. Detections sharing a score form a
single point on the precision-recall curve, so AP depends only on the score
ordering, never on the order images or detections are supplied in.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .coco import Dataset, ParseError
from .geometry import Box, Detection, pairwise_iou

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = 101

DetMap = Mapping[Hashable, Sequence[Detection]]
GtMap = Mapping[Hashable, Sequence[Box]]


class UndefinedMetricError(ValueError):
    """The metric has no meaning for the input (e.g. AP without ground truth)."""


@dataclass(frozen=True)
class MatchResult:
    """Greedy matching of one image; per-detection fields follow input order."""

    is_tp: tuple[bool, ...]
    matched_gt: tuple[int | None, ...]
    iou: tuple[float, ...]
    gt_matched: tuple[bool, ...]

    @property
    def tp(self) -> int:
        return sum(self.is_tp)

    @property
    def fp(self) -> int:
        return len(self.is_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


def _score_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(
    dets: Sequence[Detection], gts: Sequence[Box], iou_threshold: float
) -> MatchResult:
    """Match detections to ground truth in descending score order.

    Each detection takes the still-unmatched gt with the highest IoU, provided
    it is ``>= iou_threshold``; IoU ties go to the lower gt index.
    """
    n_det, n_gt = len(dets), len(gts)
    is_tp = [False] * n_det
    matched_gt: list[int | None] = [None] * n_det
    achieved = [0.0] * n_det
    gt_used = np.zeros(n_gt, dtype=bool)
    if n_det and n_gt:
        ious = pairwise_iou([d.box for d in dets], list(gts))
        for i in _score_order(dets):
            cand = np.where(gt_used, -1.0, ious[i])
            j = int(np.argmax(cand))
            if cand[j] >= iou_threshold:
                gt_used[j] = True
                is_tp[i] = True
                matched_gt[i] = j
                achieved[i] = float(cand[j])
    return MatchResult(tuple(is_tp), tuple(matched_gt), tuple(achieved), tuple(bool(g) for g in gt_used))


@dataclass(frozen=True)
class PRCurve:
    """One point per distinct score cutoff, highest cutoff first."""

    scores: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_gt: int

    @property
    def recall(self) -> np.ndarray:
        return self.tp / self.n_gt

    @property
    def precision(self) -> np.ndarray:
        return self.tp / np.maximum(self.tp + self.fp, 1)

    def interpolated_ap(self, n_points: int = RECALL_POINTS) -> float:
        """Mean over ``r = k/(n_points-1)`` of the best precision at recall >= r."""
        if len(self.tp) == 0:
            return 0.0
        precision = self.precision
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        steps = n_points - 1
        # recall >= k/steps  <=>  tp * steps >= k * n_gt, exact in integers
        need = np.arange(n_points, dtype=np.int64) * self.n_gt
        first = np.searchsorted(self.tp.astype(np.int64) * steps, need, side="left")
        values = np.where(first < len(envelope), envelope[np.minimum(first, len(envelope) - 1)], 0.0)
        return float(values.sum() / n_points)


def _count_gts(gts: GtMap) -> int:
    return sum(len(g) for g in gts.values())


def pr_curve(dets: DetMap, gts: GtMap, iou_threshold: float) -> PRCurve:
    n_gt = _count_gts(gts)
    if n_gt == 0:
        raise UndefinedMetricError("precision/recall undefined without ground-truth boxes")
    scores, flags = [], []
    for image_id, image_dets in dets.items():
        m = match_detections(image_dets, gts.get(image_id, ()), iou_threshold)
        scores.extend(d.score for d in image_dets)
        flags.extend(m.is_tp)
    if not scores:
        empty = np.zeros(0)
        return PRCurve(empty, empty.astype(np.int64), empty.astype(np.int64), n_gt)
    scores_arr = np.asarray(scores, dtype=np.float64)
    flags_arr = np.asarray(flags, dtype=np.int64)
    order = np.argsort(-scores_arr, kind="stable")
    s = scores_arr[order]
    tp = np.cumsum(flags_arr[order])
    fp = np.cumsum(1 - flags_arr[order])
    # keep the last index of each run of equal scores
    last = np.append(s[1:] != s[:-1], True)
    return PRCurve(s[last], tp[last], fp[last], n_gt)


def average_precision(dets: DetMap, gts: GtMap, iou_threshold: float = 0.5) -> float:
    """101-point interpolated AP over detections pooled across images.

    Raises:
        UndefinedMetricError: no ground-truth boxes at all.
    """
    return pr_curve(dets, gts, iou_threshold).interpolated_ap()


def mean_ap(dets: DetMap, gts: GtMap, thresholds: Sequence[float] = COCO_IOU_THRESHOLDS) -> float:
    aps = [average_precision(dets, gts, t) for t in thresholds]
    # rounding can put the mean of equal values one ulp above them
    return float(min(max(np.mean(aps), min(aps)), max(aps)))


def _top_k(image_dets: Sequence[Detection], k: int) -> list[Detection]:
    return [image_dets[i] for i in _score_order(image_dets)[:k]]


def average_recall(
    dets: DetMap,
    gts: GtMap,
    max_dets: int = 100,
    thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> float:
    """Recall with the top ``max_dets`` detections per image, averaged over IoU thresholds."""
    n_gt = _count_gts(gts)
    if n_gt == 0:
        raise UndefinedMetricError("recall undefined without ground-truth boxes")
    capped = {k: _top_k(v, max_dets) for k, v in dets.items()}
    recalls = []
    for t in thresholds:
        tp = sum(match_detections(v, gts.get(k, ()), t).tp for k, v in capped.items())
        recalls.append(tp / n_gt)
    return float(np.mean(recalls))


def operating_point(
    dets: DetMap, gts: GtMap, conf_threshold: float = 0.3, iou_threshold: float = 0.5
) -> tuple[float, float]:
    """Precision and recall keeping detections with ``score >= conf_threshold``.

    Precision is 1.0 when nothing survives; recall is 1.0 when there is no
    ground truth to find.
    """
    tp = fp = 0
    for image_id in set(dets) | set(gts):
        kept = [d for d in dets.get(image_id, ()) if d.score >= conf_threshold]
        m = match_detections(kept, gts.get(image_id, ()), iou_threshold)
        tp += m.tp
        fp += m.fp
    n_gt = _count_gts(gts)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / n_gt if n_gt else 1.0
    return precision, recall


@dataclass(frozen=True)
class DetEvalSummary:
    ap50: float
    ap75: float
    map: float
    ar100: float
    precision_at_conf: float
    recall_at_conf: float
    conf_threshold: float = 0.3
    iou_threshold: float = 0.5

    def to_dict(self) -> dict:
        return {
            "ap50": self.ap50,
            "ap75": self.ap75,
            "map": self.map,
            "ar100": self.ar100,
            "precision": self.precision_at_conf,
            "recall": self.recall_at_conf,
            "conf_threshold": self.conf_threshold,
            "iou_threshold": self.iou_threshold,
        }


def _by_category(dets: DetMap, gts_by_cat: Mapping[int, GtMap]):
    cats = defaultdict(lambda: defaultdict(list))
    for image_id, image_dets in dets.items():
        for d in image_dets:
            cats[d.category_id][image_id].append(d)
    return {c: (dict(cats.get(c, {})), g) for c, g in gts_by_cat.items()}


def evaluate_detections(
    dets: DetMap,
    gts: GtMap | Mapping[int, GtMap],
    conf_threshold: float = 0.3,
    iou_threshold: float = 0.5,
    per_category: bool = False,
) -> DetEvalSummary:
    """AP@50, AP@75, mAP, AR@100 and the operating-point precision/recall.

    With ``per_category=True``, ``gts`` is ``{category_id: {image_id: boxes}}``
    and every metric is the mean over categories that have ground truth.
    """
    if per_category:
        groups = [(d, g) for d, g in _by_category(dets, gts).values() if _count_gts(g)]
        if not groups:
            raise UndefinedMetricError("no category has ground-truth boxes")
    else:
        groups = [(dets, gts)]

    def avg(fn):
        return float(np.mean([fn(d, g) for d, g in groups]))

    ops = [operating_point(d, g, conf_threshold, iou_threshold) for d, g in groups]
    return DetEvalSummary(
        ap50=avg(lambda d, g: average_precision(d, g, 0.5)),
        ap75=avg(lambda d, g: average_precision(d, g, 0.75)),
        map=avg(mean_ap),
        ar100=avg(average_recall),
        precision_at_conf=float(np.mean([p for p, _ in ops])),
        recall_at_conf=float(np.mean([r for _, r in ops])),
        conf_threshold=conf_threshold,
        iou_threshold=iou_threshold,
    )


def ground_truth_boxes(d: Dataset, per_category: bool = False):
    """``{image_id: [Box]}`` (or keyed by category first) from a dataset."""
    if per_category:
        out: dict = {c.id: {im.id: [] for im in d.images} for c in d.categories}
        for a in d.annotations:
            out[a.category_id][a.image_id].append(a.bbox)
        return out
    flat: dict = {im.id: [] for im in d.images}
    for a in d.annotations:
        flat[a.image_id].append(a.bbox)
    return flat


# --------------------------------------------------------------------------- results format

def parse_results(document: str | bytes) -> dict[int, list[Detection]]:
    """Parse a COCO results array ``[{image_id, category_id, bbox, score}, ...]``."""
    try:
        raw = json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"malformed results document: {exc}") from None
    if not isinstance(raw, list):
        raise ParseError("results document must be a JSON array")
    out: dict[int, list[Detection]] = defaultdict(list)
    for k, entry in enumerate(raw):
        try:
            det = Detection(
                Box.from_xywh(entry["bbox"]),
                float(entry["score"]),
                int(entry.get("category_id", 1)),
            )
            out[entry["image_id"]].append(det)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"results entry {k} is invalid: {exc}") from None
    return dict(out)


def serialize_results(dets: DetMap) -> str:
    rows = [
        {"image_id": image_id, "category_id": d.category_id, "bbox": d.box.as_list(), "score": d.score}
        for image_id in sorted(dets, key=str)
        for d in dets[image_id]
    ]
    return json.dumps(rows, indent=1) + "\n"


# --------------------------------------------------------------------------- classification

@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassReport:
    per_class: dict[str, ClassMetrics]
    accuracy: float
    confusion: np.ndarray = field(repr=False, compare=False)

    @property
    def macro(self) -> ClassMetrics:
        vals = list(self.per_class.values())
        if not vals:
            return ClassMetrics(0.0, 0.0, 0.0, 0)
        return ClassMetrics(
            float(np.mean([v.precision for v in vals])),
            float(np.mean([v.recall for v in vals])),
            float(np.mean([v.f1 for v in vals])),
            sum(v.support for v in vals),
        )

    def to_dict(self) -> dict:
        return {
            "classes": {k: asdict(v) for k, v in self.per_class.items()},
            "accuracy": self.accuracy,
            "macro_avg": asdict(self.macro),
        }

    def format(self) -> str:
        width = max([len("Overall Accuracy"), *map(len, self.per_class)])
        lines = [f"{'Class':<{width}}  {'Precision':>9}  {'Recall':>9}  {'F1-score':>9}  {'Support':>7}"]
        for name, m in self.per_class.items():
            lines.append(
                f"{name:<{width}}  {m.precision:>9.4f}  {m.recall:>9.4f}  {m.f1:>9.4f}  {m.support:>7}"
            )
        lines.append(f"{'Overall Accuracy':<{width}}  {self.accuracy:>9.4f}")
        return "\n".join(lines)


def classification_report(
    true_labels: Sequence[str], predicted_labels: Sequence[str], classes: Sequence[str]
) -> ClassReport:
    """One-vs-rest precision / recall / F1 per class, 0 where a denominator is 0."""
    if len(true_labels) != len(predicted_labels):
        raise ValueError("true and predicted label collections differ in length")
    index = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        if t not in index:
            raise ValueError(f"unknown label {t!r}")
        if p not in index:
            raise ValueError(f"unknown label {p!r}")
        confusion[index[t], index[p]] += 1
    per_class = {}
    for c, i in index.items():
        tp = int(confusion[i, i])
        predicted = int(confusion[:, i].sum())
        support = int(confusion[i, :].sum())
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[c] = ClassMetrics(precision, recall, f1, support)
    n = len(true_labels)
    accuracy = float(np.trace(confusion)) / n if n else 0.0
    return ClassReport(per_class, accuracy, confusion)


# --------------------------------------------------------------------------- image level

@dataclass(frozen=True)
class ImageLevelSummary:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    zero_support: bool = False

    @property
    def n_fracture(self) -> int:
        return self.tp + self.fn

    @property
    def n_normal(self) -> int:
        return self.tn + self.fp

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "n_fracture": self.n_fracture,
            "n_normal": self.n_normal,
            "zero_support": self.zero_support,
        }


def image_level_eval(
    labels: Mapping[Hashable, str], surviving: Mapping[Hashable, int | bool]
) -> ImageLevelSummary:
    """Fracture-vs-normal scoring: an image is positive iff any box survived.

    Args:
        labels: ``{image_id: "fracture" | "normal"}``.
        surviving: ``{image_id: count (or bool) of surviving boxes}``.
    """
    tp = fp = tn = fn = 0
    for image_id, label in labels.items():
        if label not in ("fracture", "normal"):
            raise ValueError(f"image {image_id!r} has label {label!r}, expected fracture|normal")
        if image_id not in surviving:
            raise ValueError(f"no pipeline output for image {image_id!r}")
        positive = bool(surviving[image_id])
        if label == "fracture":
            tp += positive
            fn += not positive
        else:
            fp += positive
            tn += not positive
    n = tp + fp + tn + fn
    return ImageLevelSummary(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=(tp + tn) / n if n else 1.0,
        precision=tp / (tp + fp) if tp + fp else 1.0,
        recall=tp / (tp + fn) if tp + fn else 1.0,
        zero_support=(tp + fn) == 0,
    )


# --------------------------------------------------------------------------- summary documents

TABLE7_COLUMNS = ("Accuracy (%)", "Precision (%)", "Recall (%)")


def summary_document(
    det: DetEvalSummary | None = None,
    image: ImageLevelSummary | None = None,
    classes: ClassReport | None = None,
    **extra,
) -> dict:
    doc: dict = {}
    if det is not None:
        doc["detection"] = det.to_dict()
    if image is not None:
        doc["image_level"] = image.to_dict()
    if classes is not None:
        doc["classification"] = classes.to_dict()
    doc.update(extra)
    return doc


def table7_csv(rows: Iterable[tuple[str, ImageLevelSummary]]) -> str:
    """Spreadsheet rows in the ``Checkpoint, Accuracy (%), Precision (%), Recall (%)`` layout."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("Checkpoint", *TABLE7_COLUMNS))
    for name, s in rows:
        writer.writerow((name, f"{100 * s.accuracy:.1f}", f"{100 * s.precision:.1f}", f"{100 * s.recall:.1f}"))
    return buf.getvalue()


def detection_csv(rows: Iterable[tuple[str, DetEvalSummary]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("Checkpoint", "AP@50", "Prec@50", "Rec@50", "AP@75", "AR@100", "mAP"))
    for name, s in rows:
        writer.writerow((name, *(f"{v:.4f}" for v in
                                 (s.ap50, s.precision_at_conf, s.recall_at_conf, s.ap75, s.ar100, s.map))))
    return buf.getvalue()
