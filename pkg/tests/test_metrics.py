import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import match_oracle, segmentation_oracle
from treex import (
    MatchedPair,
    MatchResult,
    SegmentationMetrics,
    aggregate,
    detection_metrics,
    downsample_for_evaluation,
    evaluate_labels,
    match_instances,
    segmentation_metrics,
    write_metrics_report,
)


def random_labeling(rng, n=60, max_ref=5, max_pred=6):
    reference = rng.integers(-1, int(rng.integers(1, max_ref + 1)), n)
    predicted = reference.copy()
    # perturb a random fraction of the points
    changed = rng.uniform(size=n) < rng.uniform(0, 0.8)
    predicted[changed] = rng.integers(-1, int(rng.integers(1, max_pred + 1)), changed.sum())
    labeled = rng.uniform(size=n) < 0.8
    return reference, predicted, labeled


class TestMatching:
    def test_identical(self):
        labels = np.array([0, 0, 1, 1, 2, -1])
        match = match_instances(labels, labels)
        assert (match.tp, match.fp, match.fn) == (3, 0, 0)
        assert all(pair.iou == 1.0 for pair in match.pairs)

    def test_iou_exactly_half_is_unmatched(self):
        reference = np.array([0, 0, -1, -1])
        predicted = np.array([0, -1, -1, -1])
        # IoU = 1 / 2; the predicted instance lies entirely on labeled points
        match = match_instances(reference, predicted)
        assert match.pairs == ()
        assert (match.tp, match.fp, match.fn) == (0, 1, 1)

    def test_iou_just_above_half(self):
        reference = np.array([0, 0, 0, -1])
        predicted = np.array([0, 0, -1, -1])
        assert match_instances(reference, predicted).tp == 1

    def test_three_instance_scene(self):
        reference = np.array([0] * 10 + [1] * 10 + [2] * 10 + [-1] * 10)
        predicted = np.array([5] * 8 + [6] * 2 + [6] * 10 + [7] * 4 + [-1] * 6 + [8] * 10)
        match = match_instances(reference, predicted)
        pairs, tp, fp, fn = match_oracle(reference, predicted)
        assert (match.tp, match.fp, match.fn) == (tp, fp, fn) == (2, 1, 1)
        assert [(p.reference_id, p.predicted_id) for p in match.pairs] == [(r, p) for r, p, *_ in pairs]

    def test_unlabeled_false_positive_suppressed(self):
        reference = np.array([0, 0, 0, 0, -1, -1, -1, -1])
        predicted = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        labeled = np.array([1, 1, 1, 1, 1, 0, 0, 0], dtype=bool)
        assert match_instances(reference, predicted, labeled).fp == 0
        labeled[5] = True
        assert match_instances(reference, predicted, labeled).fp == 0
        labeled[6] = True
        assert match_instances(reference, predicted, labeled).fp == 1

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="same points"):
            match_instances(np.zeros(3), np.zeros(4))

    def test_random_labelings_match_oracle(self, rng):
        for _ in range(100):
            reference, predicted, labeled = random_labeling(rng)
            match = match_instances(reference, predicted, labeled)
            pairs, tp, fp, fn = match_oracle(reference, predicted, labeled)
            assert (match.tp, match.fp, match.fn) == (tp, fp, fn)
            for pair, expected in zip(match.pairs, pairs):
                assert (pair.reference_id, pair.predicted_id) == expected[:2]
                assert (pair.iou, pair.precision, pair.recall) == pytest.approx(expected[2:], abs=1e-12)


class TestDetectionMetrics:
    def test_arithmetic(self):
        metrics = detection_metrics((2, 1, 1))
        assert (metrics.precision, metrics.recall, metrics.f1) == pytest.approx((2 / 3, 2 / 3, 2 / 3))

    def test_undefined_precision(self):
        metrics = detection_metrics((0, 0, 5))
        assert metrics.precision is None and metrics.recall == 0.0 and metrics.f1 == 0.0

    def test_all_undefined(self):
        metrics = detection_metrics((0, 0, 0))
        assert (metrics.precision, metrics.recall, metrics.f1) == (None, None, None)


class TestSegmentationMetrics:
    def test_identical(self):
        labels = np.array([0, 0, 1, 1, -1])
        metrics = segmentation_metrics(labels, labels)
        assert (metrics.miou, metrics.mprecision, metrics.mrecall) == (1.0, 1.0, 1.0)

    def test_split_instance(self):
        reference = np.array([0, 0, 0, 0])
        predicted = np.array([1, 1, 2, 2])
        metrics = segmentation_metrics(reference, predicted)
        assert (metrics.miou, metrics.mprecision, metrics.mrecall) == (0.5, 1.0, 0.5)
        assert metrics.pairs[0].predicted_id == 1

    def test_no_reference_instances(self):
        metrics = segmentation_metrics(np.full(3, -1), np.array([0, 0, 1]))
        assert metrics.miou is None

    def test_no_predictions(self):
        metrics = segmentation_metrics(np.array([0, 1]), np.full(2, -1))
        assert (metrics.miou, metrics.mprecision, metrics.mrecall) == (0.0, 0.0, 0.0)

    def test_random_labelings_match_oracle(self, rng):
        for _ in range(100):
            reference, predicted, _ = random_labeling(rng)
            metrics = segmentation_metrics(reference, predicted)
            expected, rows = segmentation_oracle(reference, predicted)
            if expected is None:
                assert metrics.miou is None
                continue
            assert (metrics.miou, metrics.mprecision, metrics.mrecall) == pytest.approx(expected, abs=1e-12)
            assert [(p.iou, p.precision, p.recall) for p in metrics.pairs] == pytest.approx(rows, abs=1e-12)


class TestAggregate:
    def test_single_file(self, rng):
        reference, predicted, labeled = random_labeling(rng)
        match = match_instances(reference, predicted, labeled)
        segmentation = segmentation_metrics(reference, predicted)
        detection, pooled = aggregate([(match, segmentation)])
        assert detection == detection_metrics(match)
        assert pooled.miou == pytest.approx(segmentation.miou, abs=1e-15)

    def test_summed_counts(self):
        files = [(MatchResult((), 1, 0, 1), SegmentationMetrics(None, None, None)),
                 (MatchResult((), 3, 1, 0), SegmentationMetrics(None, None, None))]
        detection, _ = aggregate(files)
        assert (detection.precision, detection.recall, detection.f1) == pytest.approx((0.8, 0.8, 0.8))

    def test_pooled_pairs(self):
        first = SegmentationMetrics(1.0, 1.0, 1.0, (MatchedPair(0, 0, 1.0, 1.0, 1.0),))
        second = SegmentationMetrics(0.6, 0.6, 0.6, (MatchedPair(0, 0, 0.6, 0.6, 0.6),))
        _, pooled = aggregate([(MatchResult((), 1, 0, 0), first), (MatchResult((), 1, 0, 0), second)])
        assert pooled.miou == pytest.approx(0.8)

    def test_random_files_match_pooled_oracle(self, rng):
        for _ in range(100):
            files, tps, fps, fns, rows = [], 0, 0, 0, []
            for _ in range(int(rng.integers(1, 4))):
                reference, predicted, labeled = random_labeling(rng)
                files.append((match_instances(reference, predicted, labeled), segmentation_metrics(reference, predicted)))
                _, tp, fp, fn = match_oracle(reference, predicted, labeled)
                tps, fps, fns = tps + tp, fps + fp, fns + fn
                rows += segmentation_oracle(reference, predicted)[1]
            detection, pooled = aggregate(files)
            assert (detection.tp, detection.fp, detection.fn) == (tps, fps, fns)
            if tps + fns > 0:
                assert detection.recall == pytest.approx(tps / (tps + fns), abs=1e-12)
            if rows:
                assert pooled.miou == pytest.approx(sum(r[0] for r in rows) / len(rows), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_symmetry_and_range(seed):
    rng = np.random.default_rng(seed)
    reference, predicted, _ = random_labeling(rng)
    # with every point labeled, false positives and false negatives swap roles exactly
    everything = np.ones(len(reference), dtype=bool)
    forward = match_instances(reference, predicted, everything)
    backward = match_instances(predicted, reference, everything)
    assert {(p.reference_id, p.predicted_id) for p in forward.pairs} == {
        (p.predicted_id, p.reference_id) for p in backward.pairs
    }
    assert (forward.fp, forward.fn) == (backward.fn, backward.fp)
    a, b = detection_metrics(forward), detection_metrics(backward)
    assert (a.precision, a.recall, a.f1) == (b.recall, b.precision, b.f1)
    for value in (a.precision, a.recall, a.f1):
        assert value is None or 0.0 <= value <= 1.0
    for pair in forward.pairs:
        match = [p for p in backward.pairs if p.reference_id == pair.predicted_id][0]
        assert (pair.precision, pair.recall) == pytest.approx((match.recall, match.precision))


def test_evaluation_downsamples_to_one_centimeter():
    xyz = np.array([[0.0, 0, 0], [0.001, 0, 0], [0.002, 0, 0], [0.5, 0, 0]])
    reference = np.array([0, 0, 0, 1])
    predicted = np.array([0, 0, 0, 1])
    (down_reference,) = downsample_for_evaluation(xyz, reference)
    assert len(down_reference) == 2
    match, detection, segmentation = evaluate_labels(xyz, reference, predicted)
    assert detection.f1 == 1.0 and segmentation.miou == 1.0


def test_report_writes_undefined(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_report([("a", detection_metrics((0, 0, 0)), SegmentationMetrics(None, None, None))], path)
    rows = list(csv.DictReader(path.open()))
    assert rows[0]["precision"] == "undefined" and rows[0]["tp"] == "0"
