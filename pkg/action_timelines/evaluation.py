import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import AR_IOU_GRID, THUMOS_THRESHOLDS
from .exceptions import InvalidValueError, UnsortedInputError
from .interval import segment_iou

__all__ = [
    "Prediction",
    "GroundTruth",
    "ThresholdMap",
    "EvalReport",
    "match_detections",
    "average_precision",
    "map_over_thresholds",
    "ar_at_an",
    "evaluate",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prediction:
    """One detection record, boundaries in seconds"""

    video_id: str
    start: float
    end: float
    label: int
    score: float


@dataclass(frozen=True)
class GroundTruth:
    video_id: str
    start: float
    end: float
    label: int


def _ranking_key(p: Prediction) -> tuple:
    return (-p.score, p.video_id, p.start, p.end, p.label)


def match_detections(preds: Sequence[Prediction], gts: Sequence[GroundTruth], iou_threshold: float) -> list[bool]:
    """Greedily flag every prediction as true or false positive

    A prediction is a true positive when an unmatched ground truth of the same
    video and class overlaps it with IoU >= ``iou_threshold``; the highest-IoU
    such ground truth is taken (ties: the earlier one) and cannot match again.

    Args:
        preds (Sequence[Prediction]): Predictions ordered by descending score
        gts (Sequence[GroundTruth]): Ground-truth instances
        iou_threshold (float): Minimum IoU of a match

    Raises:
        UnsortedInputError: If the scores are not in descending order

    Returns:
        list[bool]: One flag per prediction, True for a true positive
    """
    for previous, current in zip(preds, preds[1:]):
        if current.score > previous.score:
            raise UnsortedInputError("predictions must be sorted by descending score")

    by_key: dict[tuple, list[int]] = {}
    for index, gt in enumerate(gts):
        by_key.setdefault((gt.video_id, gt.label), []).append(index)

    matched = [False] * len(gts)
    flags = []
    for pred in preds:
        best, best_iou = -1, -1.0
        for index in by_key.get((pred.video_id, pred.label), []):
            if matched[index]:
                continue
            overlap = segment_iou(pred.start, pred.end, gts[index].start, gts[index].end)
            if overlap > best_iou:
                best, best_iou = index, overlap
        if best >= 0 and best_iou >= iou_threshold:
            matched[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: Sequence[bool], num_gt: int) -> float:
    """Area under the interpolated precision-recall curve

    Precision at every recall point is replaced by the highest precision at
    equal or greater recall before integrating.

    Args:
        flags (Sequence[bool]): True/false positive flags in ranking order
        num_gt (int): Number of ground-truth instances

    Returns:
        float: AP in [0, 1]; 0 when there is no ground truth
    """
    if num_gt < 0:
        raise InvalidValueError("num_gt must be non-negative, got {}".format(num_gt))
    if num_gt == 0 or len(flags) == 0:
        return 0.0
    hits = np.asarray(flags, dtype=np.float64)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / num_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


@dataclass
class ThresholdMap:
    """Class-mean AP per IoU threshold and their average"""

    per_threshold: dict
    per_class: dict
    average: float


def _class_labels(preds: Iterable[Prediction], gts: Iterable[GroundTruth]) -> list[int]:
    return sorted({p.label for p in preds} | {g.label for g in gts})


def map_over_thresholds(
    preds: Sequence[Prediction], gts: Sequence[GroundTruth], thresholds: Sequence[float] = THUMOS_THRESHOLDS
) -> ThresholdMap:
    """mAP at each IoU threshold of a grid

    Classes with neither predictions nor ground truth are left out of the
    class mean; classes with only one of the two contribute AP 0.
    """
    if len(thresholds) == 0:
        raise InvalidValueError("thresholds must not be empty")
    ranked = sorted(preds, key=_ranking_key)
    labels = _class_labels(ranked, gts)

    per_threshold = {}
    per_class = {}
    for threshold in thresholds:
        aps = {}
        for label in labels:
            class_preds = [p for p in ranked if p.label == label]
            class_gts = [g for g in gts if g.label == label]
            flags = match_detections(class_preds, class_gts, threshold)
            aps[label] = average_precision(flags, len(class_gts))
        per_class[threshold] = aps
        per_threshold[threshold] = float(np.mean(list(aps.values()))) if aps else 0.0
    average = float(np.mean(list(per_threshold.values())))
    return ThresholdMap(per_threshold, per_class, average)


def ar_at_an(
    preds: Sequence[Prediction],
    gts: Sequence[GroundTruth],
    budgets: Sequence[int] = (50, 100, 500),
    iou_grid: Sequence[float] = AR_IOU_GRID,
) -> dict[int, float]:
    """Average recall at a per-video proposal budget

    For a budget n the top-n predictions of every video (class agnostic) are
    kept; a ground truth is recalled at threshold θ when any kept prediction
    overlaps it with IoU >= θ. Recall is averaged over ``iou_grid``.

    Returns:
        dict[int, float]: budget -> AR
    """
    if any(b < 1 for b in budgets):
        raise InvalidValueError("proposal budgets must be positive")
    by_video: dict[str, list[Prediction]] = {}
    for pred in sorted(preds, key=_ranking_key):
        by_video.setdefault(pred.video_id, []).append(pred)

    recalls = {}
    for budget in budgets:
        if not gts:
            recalls[budget] = 0.0
            continue
        best = np.zeros(len(gts))
        for index, gt in enumerate(gts):
            for pred in by_video.get(gt.video_id, [])[:budget]:
                best[index] = max(best[index], segment_iou(pred.start, pred.end, gt.start, gt.end))
        recalls[budget] = float(np.mean([np.mean(best >= threshold) for threshold in iou_grid]))
    return recalls


@dataclass
class EvalReport:
    maps: ThresholdMap
    ar: dict = field(default_factory=dict)
    num_videos: int = 0
    num_instances: int = 0
    num_predictions: int = 0

    @property
    def average_map(self) -> float:
        return self.maps.average

    def metrics(self) -> dict[str, float]:
        """Flat metric name -> value mapping"""
        values = {"average_map": self.average_map}
        for threshold, value in self.maps.per_threshold.items():
            values["map@{:.2f}".format(threshold)] = value
        for budget, value in self.ar.items():
            values["ar@{}".format(budget)] = value
        values["num_videos"] = self.num_videos
        values["num_instances"] = self.num_instances
        values["num_predictions"] = self.num_predictions
        return values

    def to_metrics_text(self) -> str:
        """Machine-readable ``key = value`` lines"""
        return "".join("{} = {}\n".format(k, v) for k, v in self.metrics().items())

    def to_text(self) -> str:
        lines = [
            "videos: {}  instances: {}  predictions: {}".format(
                self.num_videos, self.num_instances, self.num_predictions
            ),
            "",
            "IoU    mAP",
        ]
        for threshold, value in self.maps.per_threshold.items():
            lines.append("{:.2f}   {:.4f}".format(threshold, value))
        lines.append("avg    {:.4f}".format(self.average_map))
        lines.append("")
        lines.append("class  " + "  ".join("{:.2f}".format(t) for t in self.maps.per_class))
        labels = sorted({label for aps in self.maps.per_class.values() for label in aps})
        for label in labels:
            row = ["{:.4f}".format(aps.get(label, 0.0)) for aps in self.maps.per_class.values()]
            lines.append("{:<5}  ".format(label) + "  ".join(row))
        if self.ar:
            lines.append("")
            for budget, value in self.ar.items():
                lines.append("AR@{:<4} {:.4f}".format(budget, value))
        return "\n".join(lines) + "\n"

    def __str__(self) -> str:
        return self.to_text()


def evaluate(
    preds: Sequence[Prediction],
    gts: Sequence[GroundTruth],
    thresholds: Sequence[float] = THUMOS_THRESHOLDS,
    budgets: Sequence[int] = (50, 100, 500),
    iou_grid: Sequence[float] = AR_IOU_GRID,
) -> EvalReport:
    """Full detection report: mAP grid, average mAP, per-class AP and AR@AN"""
    maps = map_over_thresholds(preds, gts, thresholds)
    report = EvalReport(
        maps=maps,
        ar=ar_at_an(preds, gts, budgets, iou_grid),
        num_videos=len({g.video_id for g in gts} | {p.video_id for p in preds}),
        num_instances=len(gts),
        num_predictions=len(preds),
    )
    logger.info("average mAP %.4f over %d thresholds", report.average_map, len(thresholds))
    return report
