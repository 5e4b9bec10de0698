"""Classification and calibration metrics against human labels.

Two confidence readings coexist here, both emitted in report metadata:

* Brier and ECE measure decision-confidence against decision correctness
  (was the stated confidence warranted, whatever the verdict was).
* AUC ranks records by an include score: the stated confidence when the
  verdict was include, else one minus it.

Zero denominators surface as None ("undefined" in serialized reports),
never as a coerced 0 or 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .adjudicate import FinalDecision
from .corpus import LabelSet


class EvaluationError(Exception):
    pass


class NoLabeledRecords(EvaluationError):
    pass


class DegenerateLabels(EvaluationError):
    pass


class EmptyTargetSet(EvaluationError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ScoredPrediction:
    """One record's verdict, confidence, include score, and ground truth."""

    record_id: str
    decision: str
    confidence: float
    truth: bool

    @property
    def p_include(self) -> float:
        return self.confidence if self.decision == "include" else 1.0 - self.confidence

    @property
    def correct(self) -> bool:
        return (self.decision == "include") == self.truth


@dataclass(frozen=True)
class EvaluationReport:
    level: str
    confusion: ConfusionMatrix
    sensitivity: Optional[float]
    specificity: Optional[float]
    accuracy: Optional[float]
    precision: Optional[float]
    auc: Optional[float]
    brier: float
    ece: float
    target_recall: float
    target_precision: Optional[float]
    overlap: int
    n_evaluated: int
    n_unlabeled: int

    def to_dict(self) -> dict:
        def disp_pct(x: Optional[float]) -> str:
            return "undefined" if x is None else f"{100.0 * x:.2f}%"

        def disp_num(x: Optional[float]) -> str:
            return "undefined" if x is None else f"{x:.2f}"

        return {
            "level": self.level,
            "confusion": {"tp": self.confusion.tp, "fp": self.confusion.fp,
                          "fn": self.confusion.fn, "tn": self.confusion.tn},
            "metrics": {
                "sensitivity": self.sensitivity,
                "specificity": self.specificity,
                "accuracy": self.accuracy,
                "precision": self.precision,
                "auc": self.auc,
                "brier": self.brier,
                "ece": self.ece,
                "target_recall": self.target_recall,
                "target_precision": self.target_precision,
                "overlap": self.overlap,
            },
            "display": {
                "sensitivity": disp_pct(self.sensitivity),
                "specificity": disp_pct(self.specificity),
                "accuracy": disp_pct(self.accuracy),
                "precision": disp_pct(self.precision),
                "auc": disp_num(self.auc),
                "brier": disp_num(self.brier),
                "ece": disp_num(self.ece),
                "target_recall": disp_pct(self.target_recall),
                "target_precision": disp_pct(self.target_precision),
                "overlap": str(self.overlap),
            },
            "n_evaluated": self.n_evaluated,
            "n_unlabeled": self.n_unlabeled,
            "definitions": {
                "brier_ece": "decision confidence vs decision correctness",
                "auc": "include score = confidence if include else 1 - confidence",
            },
        }


def confusion(finals: Sequence[FinalDecision], labels: LabelSet) -> ConfusionMatrix:
    """Record-level confusion counts over labeled records only."""
    tp = fp = fn = tn = 0
    any_labeled = False
    for f in finals:
        truth = labels.truth_of(f.record_id)
        if truth is None:
            continue
        any_labeled = True
        ai_include = f.decision == "include"
        if ai_include and truth:
            tp += 1
        elif ai_include and not truth:
            fp += 1
        elif not ai_include and truth:
            fn += 1
        else:
            tn += 1
    if not any_labeled:
        raise NoLabeledRecords("no evaluated record carries a label")
    return ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn)


def classification_metrics(cm: ConfusionMatrix) -> dict[str, Optional[float]]:
    def ratio(num: int, den: int) -> Optional[float]:
        return num / den if den else None

    return {
        "sensitivity": ratio(cm.tp, cm.tp + cm.fn),
        "specificity": ratio(cm.tn, cm.tn + cm.fp),
        "accuracy": ratio(cm.tp + cm.tn, cm.total),
        "precision": ratio(cm.tp, cm.tp + cm.fp),
    }


def target_set_metrics(ai_includes: set[str], human_includes: set[str]) -> dict:
    """Set-level recall/precision/overlap between AI includes and the human target set."""
    if not human_includes:
        raise EmptyTargetSet("human include set is empty")
    overlap = len(ai_includes & human_includes)
    return {
        "recall": overlap / len(human_includes),
        "precision": overlap / len(ai_includes) if ai_includes else None,
        "overlap": overlap,
    }


def roc_auc(preds: Sequence[ScoredPrediction]) -> float:
    """Tie-aware ROC-AUC via the rank-sum formulation.

    Equals (concordant + 0.5 * tied) / (positives * negatives) over all
    positive-negative pairs ranked by the include score.
    """
    n_pos = sum(1 for p in preds if p.truth)
    n_neg = len(preds) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs at least one positive and one negative label")
    order = sorted(range(len(preds)), key=lambda i: preds[i].p_include)
    ranks = [0.0] * len(preds)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and preds[order[j + 1]].p_include == preds[order[i]].p_include:
            j += 1
        avg = (i + j) / 2.0 + 1.0  # 1-based average rank across the tie run
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    rank_sum_pos = sum(ranks[i] for i, p in enumerate(preds) if p.truth)
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def brier(preds: Sequence[ScoredPrediction]) -> float:
    """Mean squared gap between stated confidence and decision correctness."""
    if not preds:
        raise EvaluationError("no predictions")
    return sum((p.confidence - (1.0 if p.correct else 0.0)) ** 2 for p in preds) / len(preds)


def bin_index(confidence: float, n_bins: int) -> int:
    """Equal-width bin over [0, 1]; bins are right-closed, the first also left-closed."""
    idx = min(n_bins - 1, max(0, math.ceil(confidence * n_bins) - 1))
    # Correct float rounding against the actual edges.
    while idx < n_bins - 1 and confidence > (idx + 1) / n_bins:
        idx += 1
    while idx > 0 and confidence <= idx / n_bins:
        idx -= 1
    return idx


def ece(preds: Sequence[ScoredPrediction], n_bins: int = 10) -> float:
    """Expected calibration error with equal-width confidence bins."""
    if not preds:
        raise EvaluationError("no predictions")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    conf_sum = [0.0] * n_bins
    correct = [0] * n_bins
    count = [0] * n_bins
    for p in preds:
        b = bin_index(p.confidence, n_bins)
        conf_sum[b] += p.confidence
        correct[b] += 1 if p.correct else 0
        count[b] += 1
    total = len(preds)
    out = 0.0
    for b in range(n_bins):
        if count[b] == 0:
            continue
        acc = correct[b] / count[b]
        mean_conf = conf_sum[b] / count[b]
        out += (count[b] / total) * abs(acc - mean_conf)
    return out


def reliability_bins(preds: Sequence[ScoredPrediction], n_bins: int = 10) -> list[dict]:
    """Per-bin rows for a reliability diagram (empty bins keep count 0)."""
    conf_sum = [0.0] * n_bins
    correct = [0] * n_bins
    count = [0] * n_bins
    for p in preds:
        b = bin_index(p.confidence, n_bins)
        conf_sum[b] += p.confidence
        correct[b] += 1 if p.correct else 0
        count[b] += 1
    rows = []
    for b in range(n_bins):
        rows.append(
            {
                "bin_center": (b + 0.5) / n_bins,
                "mean_confidence": conf_sum[b] / count[b] if count[b] else None,
                "accuracy": correct[b] / count[b] if count[b] else None,
                "count": count[b],
            }
        )
    return rows


def roc_points(preds: Sequence[ScoredPrediction]) -> list[dict]:
    """(FPR, TPR) per distinct include-score threshold, from (0,0) to (1,1)."""
    n_pos = sum(1 for p in preds if p.truth)
    n_neg = len(preds) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("ROC needs at least one positive and one negative label")
    ordered = sorted(preds, key=lambda p: -p.p_include)
    points = [{"threshold": None, "fpr": 0.0, "tpr": 0.0}]
    tp = fp = 0
    i = 0
    while i < len(ordered):
        threshold = ordered[i].p_include
        while i < len(ordered) and ordered[i].p_include == threshold:
            if ordered[i].truth:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append({"threshold": threshold, "fpr": fp / n_neg, "tpr": tp / n_pos})
    return points


def scored_predictions(finals: Sequence[FinalDecision], labels: LabelSet) -> list[ScoredPrediction]:
    """Pair labeled finals with ground truth; unlabeled records are skipped."""
    preds = []
    for f in finals:
        truth = labels.truth_of(f.record_id)
        if truth is None:
            continue
        preds.append(
            ScoredPrediction(
                record_id=f.record_id,
                decision=f.decision,
                confidence=f.aggregated_confidence,
                truth=truth,
            )
        )
    return preds


def evaluate(finals: Sequence[FinalDecision], labels: LabelSet, level: str, n_bins: int = 10) -> EvaluationReport:
    """Assemble the full report at one ground-truth level."""
    if labels.level != level:
        raise EvaluationError(f"labels are {labels.level!r}, requested {level!r}")
    cm = confusion(finals, labels)
    metrics = classification_metrics(cm)
    preds = scored_predictions(finals, labels)
    ai_includes = {f.record_id for f in finals if f.decision == "include"}
    evaluated_ids = {p.record_id for p in preds}
    target = target_set_metrics(ai_includes & evaluated_ids, set(labels.includes) & evaluated_ids)
    return EvaluationReport(
        level=level,
        confusion=cm,
        sensitivity=metrics["sensitivity"],
        specificity=metrics["specificity"],
        accuracy=metrics["accuracy"],
        precision=metrics["precision"],
        auc=roc_auc(preds),
        brier=brier(preds),
        ece=ece(preds, n_bins=n_bins),
        target_recall=target["recall"],
        target_precision=target["precision"],
        overlap=target["overlap"],
        n_evaluated=len(preds),
        n_unlabeled=len(finals) - len(preds),
    )


def write_report(report: EvaluationReport, preds: Sequence[ScoredPrediction], out_dir: str | Path,
                 n_bins: int = 10) -> None:
    """Serialize the report plus the two plot-data files the UI consumes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"report_{report.level}.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out / f"roc_points_{report.level}.json").write_text(
        json.dumps(roc_points(preds), indent=2) + "\n", encoding="utf-8"
    )
    (out / f"reliability_bins_{report.level}.json").write_text(
        json.dumps(reliability_bins(preds, n_bins=n_bins), indent=2) + "\n", encoding="utf-8"
    )
