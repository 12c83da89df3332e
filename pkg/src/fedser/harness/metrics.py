"""Utterance-level evaluation: confusion matrix, per-class recall, unweighted accuracy."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..data import Dataset
from ..model import ParamSet, predict_proba

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    class_names: tuple[str, ...] = ()
    segment_accuracy: float | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    @property
    def recalls(self) -> np.ndarray:
        """Per-class recall; NaN for classes absent from the test set."""
        support = self.support
        diag = np.diag(self.confusion).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, diag / np.maximum(support, 1), np.nan)

    @property
    def ua(self) -> float:
        r = self.recalls
        present = ~np.isnan(r)
        return float(r[present].mean()) if present.any() else 0.0

    @property
    def wa(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    def to_dict(self) -> dict:
        return {
            "ua": self.ua,
            "wa": self.wa,
            "recalls": [None if math.isnan(x) else float(x) for x in self.recalls],
            "confusion": self.confusion.tolist(),
            "class_names": list(self.class_names),
            "segment_accuracy": self.segment_accuracy,
            "warnings": self.warnings,
        }


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def report_from_predictions(y_true, y_pred, num_classes: int, class_names=()) -> MetricsReport:
    rep = MetricsReport(confusion_matrix(y_true, y_pred, num_classes), tuple(class_names))
    missing = [i for i, s in enumerate(rep.support) if s == 0]
    if missing:
        msg = f"classes {missing} absent from the test set; UA averaged over the rest"
        rep.warnings.append(msg)
        log.warning(msg)
    return rep


def evaluate(params: ParamSet, ds: Dataset, test_ids) -> MetricsReport:
    """Utterance predictions are the mean of per-segment softmax outputs."""
    test_ids = np.asarray(test_ids, dtype=np.int64)
    if len(test_ids) == 0:
        raise ValueError("empty test set")
    x, seg_y = ds.stack(test_ids)
    probs = predict_proba(params, x).astype(np.float64)
    lengths = [len(ds.segments[i]) for i in test_ids]
    bounds = np.cumsum([0] + lengths)
    utt = np.stack([probs[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])])
    rep = report_from_predictions(ds.labels[test_ids], utt.argmax(axis=1), ds.num_classes, ds.class_names)
    rep.segment_accuracy = float((probs.argmax(axis=1) == seg_y).mean())
    return rep


# ---------------------------------------------------------------- run comparison

def sign_test(deltas) -> float:
    """Two-sided exact sign test p-value; zero deltas are dropped."""
    d = [x for x in deltas if x != 0]
    n = len(d)
    if n == 0:
        return 1.0
    k = min(sum(x > 0 for x in d), sum(x < 0 for x in d))
    p = 2.0 * sum(math.comb(n, i) for i in range(k + 1)) / 2.0**n
    return min(1.0, p)


def compare_runs(a: dict, b: dict) -> dict:
    """UA deltas (a - b) per fold and trial, with a sign test across trials."""
    if a.get("num_classes") != b.get("num_classes"):
        raise ValueError("runs have different class counts")
    folds_a = [f["fold"] for f in a["folds"]]
    folds_b = [f["fold"] for f in b["folds"]]
    if folds_a != folds_b:
        raise ValueError(f"fold structure differs: {folds_a} vs {folds_b}")
    per_fold, trial_deltas = [], []
    for fa, fb in zip(a["folds"], b["folds"]):
        ta = {t["trial"]: t["ua"] for t in fa["trials"] if t.get("ua") is not None}
        tb = {t["trial"]: t["ua"] for t in fb["trials"] if t.get("ua") is not None}
        common = sorted(set(ta) & set(tb))
        deltas = [ta[t] - tb[t] for t in common]
        trial_deltas.extend(deltas)
        per_fold.append({
            "fold": fa["fold"],
            "ua_a": fa.get("mean_ua"),
            "ua_b": fb.get("mean_ua"),
            "delta": (fa["mean_ua"] - fb["mean_ua"]) if fa.get("mean_ua") is not None and fb.get("mean_ua") is not None else None,
            "trial_deltas": deltas,
        })
    mean_delta = float(np.mean(trial_deltas)) if trial_deltas else 0.0
    return {
        "mean_delta": mean_delta,
        "ua_a": a.get("ua_mean"),
        "ua_b": b.get("ua_mean"),
        "folds": per_fold,
        "wins": sum(d > 0 for d in trial_deltas),
        "losses": sum(d < 0 for d in trial_deltas),
        "sign_test_p": sign_test(trial_deltas),
    }
