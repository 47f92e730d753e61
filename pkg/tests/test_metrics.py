import numpy as np
import pytest

from stncell.errors import ContractError
from stncell.metrics import (
    MetricsReport,
    confusion_matrix,
    metrics_csv,
    predict_labels,
    recount,
    render_table,
)

HAND = np.array([[8, 2, 0], [1, 9, 0], [0, 0, 10]])


def _pairs(cm):
    return [(t, p) for t in range(3) for p in range(3) for _ in range(cm[t, p])]


def test_hand_case():
    r = MetricsReport.from_confusion(HAND)
    assert r.precision[0] == pytest.approx(8 / 9, abs=1e-12)
    assert r.recall[0] == pytest.approx(0.8, abs=1e-12)
    assert r.accuracy == pytest.approx(0.9, abs=1e-12)
    assert r.support.tolist() == [10, 10, 10] and r.total == 30


def test_all_correct():
    r = MetricsReport.from_predictions([0, 1, 2, 2], [0, 1, 2, 2])
    assert np.all(r.precision == 1) and np.all(r.recall == 1) and np.all(r.f1 == 1) and r.accuracy == 1


def test_no_predicted_positives_gives_zero_precision():
    r = MetricsReport.from_predictions([0, 1, 2], [0, 0, 0])
    assert r.precision[1] == 0 and r.precision[2] == 0 and r.f1[1] == 0


def test_confusion_rows_are_truth():
    cm = confusion_matrix([0, 0, 1, 2], [1, 0, 1, 0])
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 0]]
    assert cm.sum(axis=1).tolist() == [2, 1, 1]


def test_argmax_tie_lowest_index():
    assert predict_labels(np.array([[0.4, 0.4, 0.2], [0.2, 0.4, 0.4], [1 / 3] * 3])).tolist() == [0, 1, 0]


def test_matches_recount_on_random_confusions():
    rng = np.random.default_rng(0)
    for _ in range(50):
        cm = rng.integers(0, 20, size=(3, 3))
        cm[rng.integers(0, 3), :] *= rng.integers(0, 2)  # sometimes an empty class
        if cm.sum() == 0:
            cm[0, 0] = 1
        pairs = _pairs(cm)
        rng.shuffle(pairs)
        report = MetricsReport.from_predictions([t for t, _ in pairs], [p for _, p in pairs])
        oracle = recount(pairs)
        assert np.array_equal(report.confusion, cm)
        for key in ("precision", "recall", "f1"):
            assert np.max(np.abs(getattr(report, key) - oracle[key])) <= 1e-12
        assert abs(report.accuracy - oracle["accuracy"]) <= 1e-12


def test_averages():
    r = MetricsReport.from_confusion([[5, 0, 0], [5, 0, 0], [0, 0, 10]])
    w = np.array([5, 5, 10]) / 20
    assert r.weighted["precision"] == pytest.approx(r.precision @ w)
    assert r.macro["recall"] == pytest.approx((1 + 0 + 1) / 3)


@pytest.mark.parametrize("cm", [np.zeros((3, 3), int), np.ones((2, 3), int), [[1, -1, 0], [0, 1, 0], [0, 0, 1]]])
def test_invalid_confusions(cm):
    with pytest.raises(ContractError):
        MetricsReport.from_confusion(cm)


def test_empty_predictions():
    with pytest.raises(ContractError):
        MetricsReport.from_predictions([], [])


def test_table_layout():
    reports = {"CNN baseline": MetricsReport.from_confusion(HAND), "CNN-STN": MetricsReport.from_confusion(np.diag([10, 10, 10]))}
    text = render_table(reports)
    lines = text.splitlines()
    assert "precision" in lines[1] and "f1-score" in lines[1]
    assert text.index("CNN baseline") < text.index("CNN-STN")
    assert text.count("avg / total") == 2
    for name in ("granulocytes", "mitotic figures", "normal t. cells"):
        assert text.count(name) == 2


def test_metrics_csv():
    text = metrics_csv({"CNN-STN": MetricsReport.from_confusion(HAND)})
    rows = text.splitlines()
    assert rows[0] == "model,class,precision,recall,f1,support"
    assert rows[1] == "CNN-STN,granulocyte,0.888889,0.800000,0.842105,10"
    assert rows[-1].startswith("CNN-STN,avg/total,") and rows[-1].endswith(",30")
    assert len(rows) == 5 and text.endswith("\n")
