"""
Published ten-fold cross-validation scores of the network, in percent (UAR, WAR, F1).

These are the numbers full-scale training is expected to approach. They are shown next to
measured results by ``tbdmnet summary`` and are never used as test oracles.
"""
from typing import Optional, Tuple

Scores = Tuple[float, float, float]

RESULTS = {
    "casia": {"BT": (86.54, 85.66, 85.77), "FINAL": (91.01, 90.50, 90.54)},
    "emodb": {"BT": (90.01, 88.23, 88.30), "FINAL": (92.94, 91.40, 91.55)},
    "emovo": {"BT": (84.20, 82.12, 82.05), "FINAL": (88.10, 87.06, 87.19)},
    "iemocap": {"BT": (71.78, 70.05, 70.19), "FINAL": (73.28, 71.88, 71.94)},
    "ravdess": {"BT": (85.29, 84.30, 84.40), "FINAL": (91.60, 90.97, 91.02)},
    "savee": {"BT": (78.47, 77.49, 77.90), "FINAL": (81.21, 80.41, 80.60)},
}

ABLATIONS = {
    "ravdess": {
        "relu": (90.76, 90.34, 90.42),
        "no_bd": (90.09, 89.99, 90.06),
        "no_ms": (90.81, 90.69, 90.80),
        "tabs5": (91.08, 90.90, 90.84),
    }
}

GENDER_SYSTEMS = {
    "ravdess": {
        "baseline_full": (91.60, 90.97, 91.02),
        "baseline_M_eval": (87.02, 85.00, 84.91),
        "baseline_F_eval": (91.23, 90.13, 90.31),
        "split_M": (90.86, 89.44, 89.24),
        "split_F": (90.71, 90.41, 90.71),
        "posthoc_golden": (90.75, 90.41, 90.44),
        "posthoc_binary": (89.83, 89.37, 89.38),
        "posthoc_probabilities": (90.04, 89.51, 89.50),
        "prehoc_golden": (91.34, 91.18, 91.22),
        "prehoc_binary": (91.07, 90.90, 90.88),
        "prehoc_probabilities": (91.70, 91.31, 91.33),
    },
    "iemocap": {
        "baseline_full": (73.28, 71.88, 71.94),
        "baseline_M_eval": (72.72, 70.53, 70.75),
        "baseline_F_eval": (73.73, 72.61, 72.59),
        "split_M": (72.62, 70.05, 70.23),
        "split_F": (72.58, 71.40, 71.65),
        "posthoc_golden": (72.03, 70.72, 70.88),
        "posthoc_binary": (71.45, 70.18, 70.33),
        "posthoc_probabilities": (71.69, 70.43, 70.60),
        "prehoc_golden": (73.68, 71.94, 71.97),
        "prehoc_binary": (73.47, 71.77, 71.84),
        "prehoc_probabilities": (73.69, 72.22, 72.26),
    },
}


def lookup(dataset: Optional[str], tag: str = "", kind: str = "FINAL") -> Optional[Scores]:
    """
    Return published scores or None.

    ``tag`` selects an ablation variant or gender system; ablation and gender numbers
    exist for the final checkpoint only.
    """
    if not dataset:
        return None
    name = dataset.lower()
    if not tag:
        return RESULTS.get(name, {}).get(kind)
    if kind != "FINAL":
        return None
    for table in (ABLATIONS, GENDER_SYSTEMS):
        scores = table.get(name, {}).get(tag)
        if scores is not None:
            return scores
    return None
