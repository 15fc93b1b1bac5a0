"""
Detection, classification and text metrics.

All rates are percentages in [0, 100]. Recall/FNR are absent (None) when the
truth has no positives and FPR is absent when it has no negatives.
"""

import json
import logging
import string
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix, roc_curve

from errors import DomainError

logger = logging.getLogger(__name__)

_PUNCTUATION = str.maketrans("", "", string.punctuation)


@dataclass(frozen=True)
class DetectionMetrics:
    accuracy: float
    recall: float = None
    fnr: float = None
    fpr: float = None

    def to_dict(self):
        return asdict(self)


def _pair(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if len(pred) != len(truth):
        raise DomainError(f"{len(pred)} predictions but {len(truth)} truth labels")
    if len(truth) == 0:
        raise DomainError("need at least one label")
    return pred, truth


def detection_metrics(pred, truth, positive_class=1):
    """Accuracy, recall, FNR and FPR for one positive class."""
    pred, truth = _pair(pred, truth)
    tn, fp, fn, tp = confusion_matrix(truth == positive_class, pred == positive_class, labels=[False, True]).ravel()

    accuracy = 100.0 * (tp + tn) / len(truth)
    recall = fnr = fpr = None
    if tp + fn > 0:
        recall = float(100.0 * tp / (tp + fn))
        fnr = 100.0 - recall
    else:
        logger.warning("no positives in truth; recall and FNR are undefined")
    if fp + tn > 0:
        fpr = float(100.0 * fp / (fp + tn))
    return DetectionMetrics(float(accuracy), recall, fnr, fpr)


def classification_accuracy(pred, truth):
    pred, truth = _pair(pred, truth)
    return float(100.0 * np.mean(pred == truth))


def confusion_table(pred, truth, labels):
    """Confusion matrix as a DataFrame (rows truth, columns prediction)."""
    pred, truth = _pair(pred, truth)
    matrix = confusion_matrix(truth, pred, labels=list(labels))
    return pd.DataFrame(matrix, index=[f"true:{l}" for l in labels], columns=[f"pred:{l}" for l in labels])


def roc_points(scores, truth):
    """
    (fpr, tpr) pairs, one per distinct threshold, from (0, 0) to (1, 1).

    A sample is predicted positive when its score is >= the threshold.
    Returns [] when the truth lacks positives or negatives.
    """
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth).astype(bool)
    if len(scores) != len(truth):
        raise DomainError(f"{len(scores)} scores but {len(truth)} labels")
    if not np.all(np.isfinite(scores)):
        raise DomainError("scores must be finite")
    if truth.all() or not truth.any():
        logger.warning("ROC undefined without both positive and negative samples")
        return []

    fpr, tpr, _ = roc_curve(truth, scores, drop_intermediate=False)
    return [(float(f), float(t)) for f, t in zip(fpr, tpr)]


def tokenize(text):
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return [t for t in text.lower().translate(_PUNCTUATION).split() if t]


def _lcs_length(a, b):
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, start=1):
            current.append(previous[j - 1] + 1 if x == y else max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def _scores(hits, n_candidate, n_reference):
    recall = 100.0 * hits / n_reference
    precision = 100.0 * hits / n_candidate
    f1 = 2 * recall * precision / (recall + precision) if hits else 0.0
    return {"recall": recall, "precision": precision, "f1": f1}


def rouge(candidate, reference):
    """ROUGE-1 (clipped unigram overlap) and ROUGE-L (LCS), scaled 0-100."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        raise DomainError("candidate and reference must both contain tokens")

    overlap = sum((Counter(cand) & Counter(ref)).values())
    return {
        "rouge1": _scores(overlap, len(cand), len(ref)),
        "rougeL": _scores(_lcs_length(cand, ref), len(cand), len(ref)),
    }


def format_metrics_table(rows):
    """
    Aligned plain-text table.

    Args:
        rows: {row name: DetectionMetrics or dict of metric → value}
    """
    records = {name: (m.to_dict() if isinstance(m, DetectionMetrics) else dict(m)) for name, m in rows.items()}
    df = pd.DataFrame.from_dict(records, orient="index")
    return df.to_string(float_format=lambda v: f"{v:.2f}", na_rep="n/a")


def write_metrics_json(metrics, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")


def write_roc_csv(points, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(points, columns=["fpr", "tpr"]).to_csv(path, index=False)
