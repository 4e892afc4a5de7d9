"""Instance detection and segmentation metrics for tree instance segmentation."""

__all__ = [
    "MatchResult",
    "DetectionMetrics",
    "SegmentationMetrics",
    "MatchedPair",
    "EVALUATION_VOXEL_SIZE",
    "overlap_counts",
    "match_instances",
    "detection_metrics",
    "segmentation_metrics",
    "aggregate",
    "downsample_for_evaluation",
    "evaluate_labels",
    "write_metrics_report",
    "format_metrics_table",
]

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.sparse import coo_matrix

from .pointcloud import BoolArray, FloatArray, LongArray, PointCloud, voxel_downsample

EVALUATION_VOXEL_SIZE = 0.01
NON_TREE = -1


@dataclass(frozen=True)
class MatchedPair:
    reference_id: int
    predicted_id: int
    iou: float
    precision: float
    recall: float


@dataclass(frozen=True)
class MatchResult:
    pairs: Tuple[MatchedPair, ...]
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class DetectionMetrics:
    """Precision, recall and F1-score; :code:`None` marks a metric with a zero denominator."""

    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass(frozen=True)
class SegmentationMetrics:
    """Mean IoU, precision and recall over the reference instances and their best-matching predictions; :code:`None`
    if there are no reference instances."""

    miou: Optional[float]
    mprecision: Optional[float]
    mrecall: Optional[float]
    pairs: Tuple[MatchedPair, ...] = ()

    @property
    def ious(self) -> Tuple[float, ...]:
        return tuple(pair.iou for pair in self.pairs)


def _instance_ids(labels: LongArray, invalid: int) -> LongArray:
    ids = np.unique(labels)
    return ids[ids != invalid]


def overlap_counts(
    reference: npt.ArrayLike, predicted: npt.ArrayLike, invalid: int = NON_TREE
) -> Tuple[LongArray, LongArray, npt.NDArray[np.int64], LongArray, LongArray]:
    """
    Intersection sizes between every reference and every predicted instance.

    Returns:
        Tuple of reference IDs, predicted IDs, the :math:`(R, P)` intersection matrix and the sizes of the reference and
        predicted instances.
    """
    reference = np.asarray(reference, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if reference.shape != predicted.shape:
        raise ValueError(
            f"Reference and prediction must label the same points ({len(reference)} vs. {len(predicted)})."
        )
    ref_ids = _instance_ids(reference, invalid)
    pred_ids = _instance_ids(predicted, invalid)
    ref_index = np.searchsorted(ref_ids, reference)
    pred_index = np.searchsorted(pred_ids, predicted)
    both = (reference != invalid) & (predicted != invalid)
    intersections = coo_matrix(
        (np.ones(int(both.sum()), dtype=np.int64), (ref_index[both], pred_index[both])),
        shape=(len(ref_ids), len(pred_ids)),
    ).toarray()
    ref_sizes = np.bincount(ref_index[reference != invalid], minlength=len(ref_ids))
    pred_sizes = np.bincount(pred_index[predicted != invalid], minlength=len(pred_ids))
    return ref_ids, pred_ids, intersections, ref_sizes, pred_sizes


def _iou_matrix(intersections: np.ndarray, ref_sizes: np.ndarray, pred_sizes: np.ndarray) -> FloatArray:
    unions = ref_sizes[:, None] + pred_sizes[None, :] - intersections
    return np.divide(intersections, unions, out=np.zeros(intersections.shape), where=unions > 0)


def match_instances(
    reference: npt.ArrayLike,
    predicted: npt.ArrayLike,
    labeled_mask: Optional[npt.ArrayLike] = None,
    invalid: int = NON_TREE,
) -> MatchResult:
    """
    Matches reference and predicted instances whose IoU is strictly greater than 0.5 (such matches are unique).
    Unmatched predicted instances are false positives only if more than 50 % of their points are labeled; unmatched
    reference instances are false negatives.

    Args:
        reference: Reference instance ID of each point.
        predicted: Predicted instance ID of each point.
        labeled_mask: Whether each point carries a reference label. Defaults to all points whose reference ID is not
            :code:`invalid`.
        invalid: ID of points that belong to no instance.

    Raises:
        ValueError: If the label arrays (or the mask) have different lengths.
    """
    reference = np.asarray(reference, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    ref_ids, pred_ids, intersections, ref_sizes, pred_sizes = overlap_counts(reference, predicted, invalid)
    if labeled_mask is None:
        labeled = reference != invalid
    else:
        labeled = np.asarray(labeled_mask, dtype=bool)
        if labeled.shape != reference.shape:
            raise ValueError("labeled_mask must have one entry per point.")

    ious = _iou_matrix(intersections, ref_sizes, pred_sizes)
    ref_match, pred_match = np.nonzero(ious > 0.5)
    if len(np.unique(ref_match)) != len(ref_match) or len(np.unique(pred_match)) != len(pred_match):
        raise AssertionError("An instance takes part in more than one match with IoU > 0.5.")
    pairs = tuple(
        MatchedPair(
            int(ref_ids[r]),
            int(pred_ids[p]),
            float(ious[r, p]),
            float(intersections[r, p] / pred_sizes[p]),
            float(intersections[r, p] / ref_sizes[r]),
        )
        for r, p in zip(ref_match, pred_match)
    )

    unmatched_pred = np.ones(len(pred_ids), dtype=bool)
    unmatched_pred[pred_match] = False
    pred_index = np.searchsorted(pred_ids, predicted)
    in_pred = predicted != invalid
    labeled_counts = np.bincount(pred_index[in_pred & labeled], minlength=len(pred_ids))
    counts_as_fp = unmatched_pred & (labeled_counts > 0.5 * pred_sizes)

    tp = len(pairs)
    return MatchResult(pairs, tp, int(counts_as_fp.sum()), len(ref_ids) - tp)


def _ratio(numerator: float, denominator: float) -> Optional[float]:
    return numerator / denominator if denominator > 0 else None


def detection_metrics(match: Union[MatchResult, Tuple[int, int, int]]) -> DetectionMetrics:
    """Precision :math:`TP/(TP+FP)`, recall :math:`TP/(TP+FN)` and F1-score :math:`2TP/(2TP+FP+FN)`."""
    tp, fp, fn = (match.tp, match.fp, match.fn) if isinstance(match, MatchResult) else match
    return DetectionMetrics(
        _ratio(tp, tp + fp), _ratio(tp, tp + fn), _ratio(2 * tp, 2 * tp + fp + fn), int(tp), int(fp), int(fn)
    )


def segmentation_metrics(
    reference: npt.ArrayLike, predicted: npt.ArrayLike, invalid: int = NON_TREE
) -> SegmentationMetrics:
    """
    For each reference instance, the predicted instance with the highest IoU is selected (the first in ID order on
    ties, a missing prediction counts as IoU 0); the IoU, precision and recall of these pairs are averaged over all
    reference instances.
    """
    ref_ids, pred_ids, intersections, ref_sizes, pred_sizes = overlap_counts(reference, predicted, invalid)
    if len(ref_ids) == 0:
        return SegmentationMetrics(None, None, None, ())
    if len(pred_ids) == 0:
        pairs = tuple(MatchedPair(int(r), NON_TREE, 0.0, 0.0, 0.0) for r in ref_ids)
        return SegmentationMetrics(0.0, 0.0, 0.0, pairs)
    ious = _iou_matrix(intersections, ref_sizes, pred_sizes)
    best = np.argmax(ious, axis=1)
    rows = np.arange(len(ref_ids))
    best_intersection = intersections[rows, best]
    pairs = tuple(
        MatchedPair(
            int(ref_ids[r]),
            int(pred_ids[p]) if best_intersection[r] > 0 else NON_TREE,
            float(ious[r, p]),
            float(best_intersection[r] / pred_sizes[p]) if best_intersection[r] > 0 else 0.0,
            float(best_intersection[r] / ref_sizes[r]),
        )
        for r, p in zip(rows, best)
    )
    return _mean_segmentation(pairs)


def _mean_segmentation(pairs: Sequence[MatchedPair]) -> SegmentationMetrics:
    if not pairs:
        return SegmentationMetrics(None, None, None, ())
    count = len(pairs)
    return SegmentationMetrics(
        math.fsum(p.iou for p in pairs) / count,
        math.fsum(p.precision for p in pairs) / count,
        math.fsum(p.recall for p in pairs) / count,
        tuple(pairs),
    )


def aggregate(
    files: Sequence[Tuple[MatchResult, SegmentationMetrics]],
) -> Tuple[DetectionMetrics, SegmentationMetrics]:
    """
    Dataset-level metrics: detection metrics from the TP, FP and FN counts summed over all files, segmentation metrics
    as means over the reference/prediction pairs pooled from all files, so that every file is weighted by its number of
    trees.
    """
    tp = sum(match.tp for match, _ in files)
    fp = sum(match.fp for match, _ in files)
    fn = sum(match.fn for match, _ in files)
    pairs = [pair for _, segmentation in files for pair in segmentation.pairs]
    return detection_metrics((tp, fp, fn)), _mean_segmentation(pairs)


def downsample_for_evaluation(
    xyz: npt.ArrayLike, *label_arrays: npt.ArrayLike, voxel_size: float = EVALUATION_VOXEL_SIZE
) -> List[np.ndarray]:
    """Reduces labels to one point per 1 cm voxel (the labels of the voxel representatives)."""
    _, voxel_map = voxel_downsample(PointCloud(np.asarray(xyz, dtype=np.float64)), voxel_size)
    return [np.asarray(labels)[voxel_map.representative_of_voxel] for labels in label_arrays]


def evaluate_labels(
    xyz: npt.ArrayLike,
    reference: npt.ArrayLike,
    predicted: npt.ArrayLike,
    labeled_mask: Optional[npt.ArrayLike] = None,
    invalid: int = NON_TREE,
    voxel_size: Optional[float] = EVALUATION_VOXEL_SIZE,
) -> Tuple[MatchResult, DetectionMetrics, SegmentationMetrics]:
    """Downsamples the point cloud (unless :code:`voxel_size` is :code:`None`) and computes all metrics of one file."""
    reference = np.asarray(reference, dtype=np.int64)
    if labeled_mask is None:
        labeled_mask = reference != invalid
    if voxel_size is not None:
        reference, predicted, labeled_mask = downsample_for_evaluation(
            xyz, reference, predicted, labeled_mask, voxel_size=voxel_size
        )
    match = match_instances(reference, predicted, labeled_mask, invalid)
    return match, detection_metrics(match), segmentation_metrics(reference, predicted, invalid)


_REPORT_COLUMNS = ["file", "tp", "fp", "fn", "precision", "recall", "f1", "miou", "mprecision", "mrecall"]


def _report_row(name: str, detection: DetectionMetrics, segmentation: SegmentationMetrics) -> Dict[str, object]:
    return {
        "file": name,
        "tp": detection.tp,
        "fp": detection.fp,
        "fn": detection.fn,
        "precision": detection.precision,
        "recall": detection.recall,
        "f1": detection.f1,
        "miou": segmentation.miou,
        "mprecision": segmentation.mprecision,
        "mrecall": segmentation.mrecall,
    }


def _format_value(value: object) -> str:
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_metrics_report(
    rows: Sequence[Tuple[str, DetectionMetrics, SegmentationMetrics]], path: Union[str, Path]
) -> None:
    """Writes per-file and aggregate metric rows as CSV; undefined metrics are written as :code:`undefined`."""
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.DictWriter(file, fieldnames=_REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for name, detection, segmentation in rows:
            row = _report_row(name, detection, segmentation)
            writer.writerow({key: _format_value(value) for key, value in row.items()})


def format_metrics_table(rows: Sequence[Tuple[str, DetectionMetrics, SegmentationMetrics]]) -> str:
    table = [_REPORT_COLUMNS] + [
        [_format_value(v) for v in _report_row(name, det, seg).values()] for name, det, seg in rows
    ]
    widths = [max(len(row[i]) for row in table) for i in range(len(_REPORT_COLUMNS))]
    lines = ["  ".join(cell.rjust(width) for cell, width in zip(row, widths)) for row in table]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)
