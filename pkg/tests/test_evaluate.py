"""Tests for detection, classification and text metrics."""

import json

import numpy as np
import pytest

from errors import DomainError
from evaluate import (
    DetectionMetrics,
    classification_accuracy,
    confusion_table,
    detection_metrics,
    format_metrics_table,
    roc_points,
    rouge,
    tokenize,
    write_metrics_json,
    write_roc_csv,
)


def brute_force_roc(scores, truth):
    points = {(0.0, 0.0)}
    for threshold in sorted(set(scores)):
        pred = np.asarray(scores) >= threshold
        tp = np.sum(pred & truth)
        fp = np.sum(pred & ~truth)
        points.add((fp / np.sum(~truth), tp / np.sum(truth)))
    return sorted(points)


class TestDetectionMetrics:
    """Accuracy, recall, FNR and FPR"""

    def test_all_positive_predictions(self):
        m = detection_metrics([1, 1, 1, 1], [1, 1, 0, 0])
        assert (m.accuracy, m.recall, m.fnr, m.fpr) == (50.0, 100.0, 0.0, 100.0)

    def test_perfect(self):
        m = detection_metrics([0, 1, 0], [0, 1, 0])
        assert (m.accuracy, m.recall, m.fpr) == (100.0, 100.0, 0.0)

    def test_recall_plus_fnr(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            truth = rng.integers(0, 2, 30)
            truth[0] = 1
            m = detection_metrics(rng.integers(0, 2, 30), truth)
            assert m.recall + m.fnr == pytest.approx(100.0, abs=1e-9)
            assert 0 <= m.accuracy <= 100

    def test_no_positives(self):
        m = detection_metrics([0, 1], [0, 0])
        assert m.recall is None and m.fnr is None
        assert m.fpr == 50.0

    def test_no_negatives(self):
        assert detection_metrics([1, 1], [1, 1]).fpr is None

    @pytest.mark.parametrize("pred,truth", [([], []), ([1], [1, 0])])
    def test_bad_lengths(self, pred, truth):
        with pytest.raises(DomainError):
            detection_metrics(pred, truth)


class TestClassification:
    """Fault-class accuracy and confusion table"""

    def test_accuracy(self):
        assert classification_accuracy(["a", "b", "c", "c"], ["a", "b", "b", "c"]) == 75.0

    def test_confusion_table(self):
        table = confusion_table(["congestion", "normal", "normal"], ["congestion", "congestion", "normal"],
                                ["normal", "congestion"])

        assert table.loc["true:congestion", "pred:normal"] == 1
        assert table.loc["true:normal", "pred:normal"] == 1
        assert int(table.values.sum()) == 3


class TestRoc:
    """ROC points from a threshold sweep"""

    def test_hand_case(self):
        scores = [0.1, 0.4, 0.35, 0.8]
        truth = np.array([False, False, True, True])
        assert roc_points(scores, truth) == brute_force_roc(scores, truth)

    def test_random_cases_match_sweep(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            truth = rng.integers(0, 2, 12).astype(bool)
            truth[:2] = [True, False]
            scores = np.round(rng.uniform(size=12), 1)
            assert roc_points(scores, truth) == brute_force_roc(scores, truth)

    def test_single_class_truth(self):
        assert roc_points([0.2, 0.3], [1, 1]) == []

    def test_non_finite_scores(self):
        with pytest.raises(DomainError):
            roc_points([np.nan, 0.3], [1, 0])


class TestRouge:
    """ROUGE-1 and ROUGE-L"""

    def test_half_overlap(self):
        scores = rouge("a b", "a c")
        assert scores["rouge1"]["f1"] == pytest.approx(50.0)
        assert scores["rougeL"]["f1"] == pytest.approx(50.0)

    def test_identical(self):
        scores = rouge("Reroute traffic now.", "reroute traffic now")
        assert scores["rouge1"]["f1"] == 100.0
        assert scores["rougeL"]["recall"] == 100.0

    def test_order_matters_only_for_lcs(self):
        scores = rouge("c b a", "a b c")
        assert scores["rouge1"]["f1"] == 100.0
        assert scores["rougeL"]["f1"] == pytest.approx(100.0 / 3)

    def test_properties_on_random_pairs(self):
        rng = np.random.default_rng(2)
        vocabulary = list("abcdefgh")
        for _ in range(1000):
            cand = " ".join(rng.choice(vocabulary, int(rng.integers(1, 10))))
            ref = " ".join(rng.choice(vocabulary, int(rng.integers(1, 10))))
            scores = rouge(cand, ref)
            for name in ("rouge1", "rougeL"):
                for value in scores[name].values():
                    assert 0.0 <= value <= 100.0
            assert scores["rougeL"]["f1"] <= scores["rouge1"]["f1"] + 1e-9
            assert scores["rougeL"]["recall"] <= scores["rouge1"]["recall"] + 1e-9
            swapped = rouge(ref, cand)
            assert swapped["rouge1"]["f1"] == pytest.approx(scores["rouge1"]["f1"])
            assert swapped["rougeL"]["recall"] == pytest.approx(scores["rougeL"]["precision"])

    def test_empty_text(self):
        with pytest.raises(DomainError):
            rouge("...", "a")

    def test_tokenize(self):
        assert tokenize("Delay, jitter & LOSS!") == ["delay", "jitter", "loss"]


class TestOutput:
    """Metric files and tables"""

    def test_table_and_files(self, tmp_path):
        table = format_metrics_table({"detection": DetectionMetrics(95.0, 90.0, 10.0, None)})
        assert "95.00" in table and "n/a" in table

        write_metrics_json({"detection": {"accuracy": 95.0}}, tmp_path / "m.json")
        assert json.loads((tmp_path / "m.json").read_text()) == {"detection": {"accuracy": 95.0}}

        write_roc_csv([(0.0, 0.0), (1.0, 1.0)], tmp_path / "roc.csv")
        assert (tmp_path / "roc.csv").read_text().splitlines()[0] == "fpr,tpr"
