"""Classification scores and cross-validation reports."""
import json
from pathlib import Path
import numpy as np
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from . import _repr_text, reference
from .util import ConfusionMatrix, DataError

CHECKPOINT_KINDS = ("BT", "FINAL")
CSV_HEADER = "dataset,tag,checkpoint_kind,model_config_hash,folds,uar,war,f1"


class Metrics:
    """
    Scores of one set of predictions, in percent.

    Attributes
    ----------
    uar : float
        Unweighted average recall over the classes present in the truth.
    war : float
        Support-weighted average recall, identical to the accuracy.
    f1 : float
        Support-weighted F1 score.
    confusion : ConfusionMatrix
        Rows are true labels, columns predictions.
    """

    __slots__ = ("uar", "war", "f1", "confusion")

    def __init__(self, uar: float, war: float, f1: float, confusion: ConfusionMatrix):
        self.uar = uar
        self.war = war
        self.f1 = f1
        self.confusion = confusion

    def __repr__(self) -> str:
        return f"Metrics(uar={self.uar:.4g}, war={self.war:.4g}, f1={self.f1:.4g})"


def compute_metrics(
    preds: Any,
    labels: Any,
    n_classes: int,
    label_set: Optional[Sequence[str]] = None,
) -> Metrics:
    """
    Score integer predictions against integer labels.

    Classes without true samples are left out of the UAR and contribute zero weight to
    WAR and F1. A class that is never predicted has precision 0.

    Parameters
    ----------
    preds, labels : array-like of int, shape (N,)
    n_classes : int
    label_set : sequence of str, optional
        Names used in the confusion matrix, default "0", "1", ...
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(
            f"predictions {preds.shape} and labels {labels.shape} must be equal-length 1-d"
        )
    n = len(labels)
    if n == 0:
        raise ValueError("cannot compute metrics of zero predictions")
    for what, v in (("prediction", preds), ("label", labels)):
        bad = v[(v < 0) | (v >= n_classes)]
        if bad.size:
            raise ValueError(f"{what} {bad[0]} out of range [0, {n_classes})")
    if label_set is None:
        label_set = [str(i) for i in range(n_classes)]
    cm = ConfusionMatrix.from_predictions(label_set, labels, preds)
    c = np.asarray(cm, dtype=np.float64)
    tp = np.diag(c)
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    present = support > 0
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=present)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    weights = support / n
    uar = float(recall[present].mean()) * 100.0
    # support-weighted recall reduces to the accuracy
    war = float(tp.sum() / n) * 100.0
    f1w = float((weights * f1).sum()) * 100.0
    return Metrics(uar, war, f1w, cm)


class FoldMetrics:
    """Scores of one cross-validation fold."""

    __slots__ = ("fold", "uar", "war", "f1", "confusion")

    def __init__(self, fold: int, uar: float, war: float, f1: float, confusion: Any):
        self.fold = fold
        self.uar = uar
        self.war = war
        self.f1 = f1
        self.confusion = confusion

    @classmethod
    def from_metrics(cls, fold: int, m: Metrics) -> "FoldMetrics":
        return cls(fold, m.uar, m.war, m.f1, m.confusion)

    def to_dict(self) -> Dict[str, Any]:
        cm = self.confusion
        return {
            "fold": self.fold,
            "uar": self.uar,
            "war": self.war,
            "f1": self.f1,
            "confusion": cm.to_list() if isinstance(cm, ConfusionMatrix) else cm,
        }

    def __eq__(self, other: Any) -> bool:
        return isinstance(other, FoldMetrics) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return (
            f"FoldMetrics(fold={self.fold}, uar={self.uar:.4g}, "
            f"war={self.war:.4g}, f1={self.f1:.4g})"
        )


class MetricsReport:
    """
    Per-fold scores of one model configuration and checkpoint kind.

    Serializes to JSON deterministically, so identical runs produce identical files.
    """

    __slots__ = (
        "dataset",
        "model_config_hash",
        "checkpoint_kind",
        "label_set",
        "folds",
        "tag",
    )

    def __init__(
        self,
        dataset: Optional[str],
        model_config_hash: str,
        checkpoint_kind: str,
        label_set: Sequence[str],
        folds: Sequence[FoldMetrics] = (),
        tag: str = "",
    ):
        if checkpoint_kind not in CHECKPOINT_KINDS:
            raise ValueError(
                f"checkpoint kind {checkpoint_kind!r} must be one of {CHECKPOINT_KINDS}"
            )
        self.dataset = dataset
        self.model_config_hash = model_config_hash
        self.checkpoint_kind = checkpoint_kind
        self.label_set = tuple(label_set)
        self.folds: List[FoldMetrics] = list(folds)
        self.tag = tag

    @property
    def mean(self) -> Dict[str, Optional[float]]:
        """Get unweighted mean of the fold scores."""
        if not self.folds:
            return {"uar": None, "war": None, "f1": None}
        return {
            k: float(np.mean([getattr(f, k) for f in self.folds]))
            for k in ("uar", "war", "f1")
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dataset": self.dataset,
            "tag": self.tag,
            "model_config_hash": self.model_config_hash,
            "checkpoint_kind": self.checkpoint_kind,
            "label_set": list(self.label_set),
            "folds": [f.to_dict() for f in self.folds],
            "mean": self.mean,
        }

    def to_json(self) -> str:
        """Return the report as JSON text."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "MetricsReport":
        try:
            label_set = d["label_set"]
            folds = []
            for f in d["folds"]:
                cm = ConfusionMatrix(tuple(label_set))
                cm[:] = np.asarray(f["confusion"], dtype=np.int64)
                folds.append(FoldMetrics(f["fold"], f["uar"], f["war"], f["f1"], cm))
            return cls(
                d["dataset"],
                d["model_config_hash"],
                d["checkpoint_kind"],
                label_set,
                folds,
                d.get("tag", ""),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"invalid metrics report: {e}") from e

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        try:
            d = json.loads(text)
        except ValueError as e:
            raise DataError(f"invalid metrics report: {e}") from e
        return cls.from_dict(d)

    def save(self, path: Union[str, Path]) -> None:
        """Write JSON to path."""
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MetricsReport":
        """Read JSON from path."""
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise DataError(f"cannot read report {path}: {e}") from e
        return cls.from_json(text)

    def csv_row(self) -> str:
        """Return the one-line summary matching :data:`CSV_HEADER`."""
        m = self.mean
        scores = ["" if m[k] is None else f"{m[k]:.4f}" for k in ("uar", "war", "f1")]
        return ",".join(
            [
                self.dataset or "",
                self.tag,
                self.checkpoint_kind,
                self.model_config_hash,
                str(len(self.folds)),
            ]
            + scores
        )

    def to_table(self) -> Tuple[List[List[Any]], Tuple[str, ...]]:
        """
        Convert per-fold scores to tabular format.

        The output is consumable by the external
        `tabulate <https://pypi.org/project/tabulate>`_ module.
        """
        header = ("fold", "UAR", "WAR", "F1")
        tab: List[List[Any]] = [[f.fold, f.uar, f.war, f.f1] for f in self.folds]
        if self.folds:
            m = self.mean
            tab.append(["mean", m["uar"], m["war"], m["f1"]])
        return tab, header

    def __eq__(self, other: Any) -> bool:
        return isinstance(other, MetricsReport) and self.to_dict() == other.to_dict()

    def __str__(self) -> str:
        """Get user-friendly text representation."""
        ref = reference.lookup(self.dataset, self.tag, self.checkpoint_kind)
        return _repr_text.report(self, ref)

    def __repr__(self) -> str:
        return (
            f"<MetricsReport {self.dataset} {self.tag or 'tbdm'} {self.checkpoint_kind} "
            f"folds={len(self.folds)}>"
        )

    def _repr_pretty_(self, p, cycle):
        if cycle:
            p.text("<MetricsReport ...>")
        else:
            p.text(str(self))
