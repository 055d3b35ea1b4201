"""Evaluation metrics cross-checked against scikit-learn."""

import json

import numpy as np
import pytest
from sklearn.metrics import (
    accuracy_score,
    confusion_matrix as sk_confusion,
    precision_recall_fscore_support,
)

from surgline.metrics import (
    ConfusionMatrix,
    confusion,
    evaluate,
    write_confusion_csv,
    write_report_csv,
    write_report_json,
)
from surgline.zeroshot import Prediction

CLASSES = ("P1", "P2", "P3", "P4", "P5")


def random_predictions(rng, classes=CLASSES, n=200, accuracy=0.6, k=5):
    """Prediction stream whose top-1 hits the truth with ~the given rate."""
    preds = []
    for i in range(n):
        truth = classes[rng.integers(len(classes))]
        others = [c for c in classes if c != truth]
        rng.shuffle(others)
        if rng.random() < accuracy:
            ranking = [truth] + others
        else:
            ranking = [others[0], truth] + others[1:]
        ranking = ranking[:k]
        scores = sorted(rng.random(len(ranking)), reverse=True)
        preds.append(
            Prediction("v0", i, i / 5.0, truth, tuple(ranking), tuple(scores))
        )
    return preds


def truths(preds):
    return [p.true_label for p in preds]


def top1s(preds):
    return [p.top1 for p in preds]


# ---------------------------------------------------------------------------
# Agreement with scikit-learn
# ---------------------------------------------------------------------------


class TestAgainstSklearn:
    @pytest.mark.parametrize("seed", range(8))
    def test_overall_and_weighted_metrics_match(self, seed):
        rng = np.random.default_rng(seed)
        preds = random_predictions(rng, accuracy=float(rng.uniform(0.2, 0.9)))
        report = evaluate(preds, CLASSES)
        y_true, y_pred = truths(preds), top1s(preds)

        assert report.overall_top1 == pytest.approx(accuracy_score(y_true, y_pred))
        p, r, f, _ = precision_recall_fscore_support(
            y_true, y_pred, labels=list(CLASSES), average="weighted", zero_division=0
        )
        assert report.precision_weighted == pytest.approx(p)
        assert report.recall_weighted == pytest.approx(r)
        assert report.f1_weighted == pytest.approx(f)

    def test_per_class_metrics_match(self):
        rng = np.random.default_rng(3)
        preds = random_predictions(rng, accuracy=0.5)
        report = evaluate(preds, CLASSES)
        p, r, f, s = precision_recall_fscore_support(
            truths(preds), top1s(preds), labels=list(CLASSES), zero_division=0
        )
        for i, c in enumerate(CLASSES):
            assert report.per_class_precision[c] == pytest.approx(p[i])
            assert report.per_class_recall[c] == pytest.approx(r[i])
            assert report.per_class_f1[c] == pytest.approx(f[i])
            assert report.support[c] == s[i]

    def test_macro_metrics_match_on_present_classes(self):
        rng = np.random.default_rng(4)
        preds = random_predictions(rng, accuracy=0.5)
        present = sorted(set(truths(preds)))
        report = evaluate(preds, CLASSES)
        p, r, f, _ = precision_recall_fscore_support(
            truths(preds), top1s(preds), labels=present, average="macro", zero_division=0
        )
        assert report.precision_macro == pytest.approx(p)
        assert report.recall_macro == pytest.approx(r)
        assert report.f1_macro == pytest.approx(f)

    def test_confusion_matches(self):
        rng = np.random.default_rng(5)
        preds = random_predictions(rng, accuracy=0.4)
        matrix = confusion(preds, CLASSES)
        expected = sk_confusion(truths(preds), top1s(preds), labels=list(CLASSES))
        assert np.array_equal(matrix.counts, expected)


# ---------------------------------------------------------------------------
# Identities required of every evaluation
# ---------------------------------------------------------------------------


class TestIdentities:
    @pytest.mark.parametrize("seed", range(6))
    def test_topk_and_trace_identities(self, seed):
        rng = np.random.default_rng(seed)
        preds = random_predictions(rng, accuracy=float(rng.uniform(0.1, 0.95)))
        report = evaluate(preds, CLASSES, k_set=(1, 2, 4))
        matrix = confusion(preds, CLASSES)

        assert 0.0 <= report.overall_top1 <= 1.0
        assert report.overall_topk[2] >= report.overall_top1
        assert report.overall_topk[4] >= report.overall_topk[2]
        assert report.recall_weighted == pytest.approx(report.overall_top1, abs=1e-12)
        assert matrix.counts.sum() == len(preds)
        assert np.trace(matrix.counts) / len(preds) == pytest.approx(
            report.overall_top1
        )

    def test_evaluate_is_order_invariant(self):
        rng = np.random.default_rng(9)
        preds = random_predictions(rng)
        report_a = evaluate(preds, CLASSES)
        shuffled = list(preds)
        rng.shuffle(shuffled)
        report_b = evaluate(shuffled, CLASSES)
        assert report_a.overall_topk == report_b.overall_topk
        assert report_a.per_class_f1 == report_b.per_class_f1

    def test_topk_counts_truth_anywhere_in_window(self):
        preds = [
            Prediction("v", 0, 0.0, "P2", ("P1", "P2", "P3"), (0.5, 0.3, 0.2)),
            Prediction("v", 1, 0.2, "P3", ("P1", "P2", "P3"), (0.5, 0.3, 0.2)),
        ]
        report = evaluate(preds, CLASSES[:3], k_set=(1, 2, 3))
        assert report.overall_top1 == 0.0
        assert report.overall_topk[2] == 0.5
        assert report.overall_topk[3] == 1.0

    def test_perfect_predictions(self):
        preds = [
            Prediction("v", i, 0.0, c, (c,), (1.0,))
            for i, c in enumerate(CLASSES)
        ]
        report = evaluate(preds, CLASSES, k_set=(1,))
        assert report.overall_top1 == 1.0
        assert report.precision_weighted == 1.0
        assert report.f1_macro == 1.0


# ---------------------------------------------------------------------------
# Edge conventions
# ---------------------------------------------------------------------------


class TestEdgeCases:
    def test_absent_class_reports_none_not_zero(self):
        preds = [Prediction("v", 0, 0.0, "P1", ("P1", "P2"), (0.9, 0.1))]
        report = evaluate(preds, CLASSES, k_set=(1,))
        assert report.support["P3"] == 0
        assert report.per_class_recall["P3"] is None
        assert report.per_class_f1["P3"] is None
        assert report.per_class_topk[1]["P3"] is None

    def test_predicted_but_absent_class_gets_zero_precision(self):
        # P2 predicted once, never true: precision 0, recall undefined
        preds = [
            Prediction("v", 0, 0.0, "P1", ("P2", "P1"), (0.9, 0.1)),
            Prediction("v", 1, 0.2, "P1", ("P1", "P2"), (0.8, 0.2)),
        ]
        report = evaluate(preds, CLASSES, k_set=(1,))
        assert report.per_class_precision["P2"] == 0.0
        assert report.per_class_recall["P2"] is None

    def test_empty_predictions_rejected(self):
        with pytest.raises(ValueError):
            evaluate([], CLASSES)

    def test_unknown_truth_rejected(self):
        preds = [Prediction("v", 0, 0.0, "P9", ("P1",), (1.0,))]
        with pytest.raises(ValueError, match="P9"):
            evaluate(preds, CLASSES)

    def test_unknown_predicted_label_rejected(self):
        preds = [Prediction("v", 0, 0.0, "P1", ("P8",), (1.0,))]
        with pytest.raises(ValueError, match="P8"):
            evaluate(preds, CLASSES)

    def test_k_beyond_ranking_length_rejected(self):
        preds = [Prediction("v", 0, 0.0, "P1", ("P1", "P2"), (0.9, 0.1))]
        with pytest.raises(ValueError):
            evaluate(preds, CLASSES, k_set=(1, 3))

    def test_zero_support_rows_stay_zero_in_normalized_confusion(self):
        preds = [Prediction("v", 0, 0.0, "P1", ("P1",), (1.0,))]
        matrix = confusion(preds, CLASSES)
        assert matrix.zero_support_classes == ("P2", "P3", "P4", "P5")
        normalized = matrix.normalized
        assert normalized[0].sum() == pytest.approx(1.0)
        assert normalized[1:].sum() == 0.0


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


class TestSerialization:
    def make_report(self):
        rng = np.random.default_rng(11)
        return evaluate(random_predictions(rng), CLASSES)

    def test_json_round_trip_fields(self, tmp_path):
        report = self.make_report()
        path = tmp_path / "report.json"
        write_report_json(report, path)
        raw = json.loads(path.read_text())
        assert raw["n_frames"] == 200
        assert raw["overall_topk"]["1"] == pytest.approx(report.overall_top1)
        assert raw["per_class_precision"]["P1"] == pytest.approx(
            report.per_class_precision["P1"]
        )

    def test_csv_has_class_rows_and_overall(self, tmp_path):
        report = self.make_report()
        path = tmp_path / "report.csv"
        write_report_csv(report, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("class_id,")
        ids = [line.split(",")[0] for line in lines[1:]]
        assert ids == ["P1", "P2", "P3", "P4", "P5", "OVERALL"]

    def test_confusion_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        matrix = confusion(random_predictions(rng), CLASSES)
        path = tmp_path / "confusion.csv"
        write_confusion_csv(matrix, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "true_class," + ",".join(CLASSES)
        parsed = np.array(
            [[int(x) for x in line.split(",")[1:]] for line in lines[1:]]
        )
        assert np.array_equal(parsed, matrix.counts)

    def test_normalized_confusion_csv(self, tmp_path):
        rng = np.random.default_rng(13)
        matrix = confusion(random_predictions(rng), CLASSES)
        path = tmp_path / "confnorm.csv"
        write_confusion_csv(matrix, path, normalized=True)
        rows = path.read_text().splitlines()[1:]
        values = np.array([[float(x) for x in r.split(",")[1:]] for r in rows])
        assert np.allclose(values.sum(axis=1), 1.0, atol=1e-5)
