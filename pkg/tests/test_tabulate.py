import pytest

from tbdmnet.metrics import FoldMetrics, MetricsReport
from tbdmnet.util import ConfusionMatrix

tab = pytest.importorskip("tabulate")


def framed(s):
    return "\n" + str(s) + "\n"


def test_confusion():
    cm = ConfusionMatrix.from_predictions(("a", "b"), [0, 0, 1], [0, 1, 1])
    assert (
        framed(tab.tabulate(*cm.to_table()))
        == """
      a    b
--  ---  ---
a     1    1
b     0    1
"""
    )


def test_report():
    folds = [FoldMetrics(0, 50.5, 60.0, 55.0, None), FoldMetrics(1, 100.0, 80.0, 75.0, None)]
    r = MetricsReport("toy", "h", "FINAL", ("a", "b"), folds)
    rows, header = r.to_table()
    text = tab.tabulate(rows, header)
    lines = text.split("\n")
    assert lines[0].split() == ["fold", "UAR", "WAR", "F1"]
    assert len(lines) == 5
    assert lines[-1].split() == ["mean", "75.25", "70", "65"]
