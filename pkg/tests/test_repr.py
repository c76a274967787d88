from pathlib import Path
import pytest

from tbdmnet import _repr_text
from tbdmnet.metrics import FoldMetrics, MetricsReport
from tbdmnet.util import ConfusionMatrix


class PrintAssert:
    data = ""

    def __init__(self, expected):
        self.expected = expected

    def __enter__(self):
        return self

    def __exit__(self, *args):
        assert self.data == self.expected

    def text(self, arg):
        self.data += arg


def ref(fn):
    with open(Path(__file__).parent / f"{fn}.txt", encoding="utf-8") as f:
        return f.read()[:-1]  # strip trailing newline


@pytest.fixture
def confusion():
    cm = ConfusionMatrix(("angry", "calm", "sad"))
    cm[:] = ((3, 1, 0), (0, 2, 10), (1, 0, 4))
    return cm


@pytest.fixture
def report():
    folds = [FoldMetrics(0, 50.0, 60.0, 55.0, None), FoldMetrics(1, 100.0, 80.0, 75.0, None)]
    return MetricsReport("ravdess", "abc123", "BT", ("a", "b"), folds)


def test_text_confusion(confusion):
    assert _repr_text.confusion(confusion) == ref("confusion")
    assert str(confusion) == ref("confusion")


def test_text_confusion_empty():
    assert _repr_text.confusion(ConfusionMatrix(())) == "<empty confusion matrix>"


def test_text_report(report):
    assert str(report) == ref("report")


def test_text_report_without_folds():
    r = MetricsReport(None, "abc", "FINAL", ("a",), tag="relu")
    lines = str(r).split("\n")
    assert "unnamed relu (FINAL)" in lines[1]
    assert lines[-3].startswith("│ Fold")
    assert "Mean" not in str(r)


def test_text_results():
    rows = [
        ("ravdess", "tbdm::BT", 75.0, 70.0, 65.0),
        ("ravdess", "tbdm::BT (reference)", 85.29, 84.30, 84.40),
        ("toy", "relu::FINAL", None, None, None),
    ]
    assert _repr_text.results(rows) == ref("results")


def test_format_row():
    assert _repr_text.format_row((5, -5), "a", "b") == "│  a  │ b   │"
    assert _repr_text.format_line((2, 3), "┌┬┐") == "┌──┬───┐"
    assert _repr_text.score(None) == ""
    assert _repr_text.score(1 / 3) == "0.33"


def test_pretty(confusion, report):
    with PrintAssert(ref("confusion")) as pr:
        confusion._repr_pretty_(pr, False)

    with PrintAssert("<ConfusionMatrix ...>") as pr:
        confusion._repr_pretty_(pr, True)

    with PrintAssert(ref("report")) as pr:
        report._repr_pretty_(pr, False)

    with PrintAssert("<MetricsReport ...>") as pr:
        report._repr_pretty_(pr, True)
