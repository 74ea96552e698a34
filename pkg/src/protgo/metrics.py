"""Evaluation suite: micro-averaged confusion metrics, ROC/AUC, subset
accuracy, and the sequence-length accuracy breakdown."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class RocCurve:
    fpr: list
    tpr: list
    thresholds: list  # aligned with points; inf for the (0,0) anchor
    auc: float


@dataclass
class LengthBucketReport:
    edges: list  # bucket lower bounds; final bucket is [overflow, inf)
    counts: list
    accuracies: list  # None where count == 0


def _check_shapes(scores, targets):
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape:
        raise MetricsError(f"scores shape {scores.shape} does not match targets {targets.shape}")
    return scores, targets.astype(bool)


def confusion(scores, targets, threshold: float = 0.5) -> ConfusionCounts:
    scores, targets = _check_shapes(scores, targets)
    predicted = scores >= threshold
    return ConfusionCounts(
        tp=int(np.sum(predicted & targets)),
        fp=int(np.sum(predicted & ~targets)),
        fn=int(np.sum(~predicted & targets)),
        tn=int(np.sum(~predicted & ~targets)),
    )


def prf1(counts: ConfusionCounts) -> tuple:
    """(precision, recall, f1); every 0/0 evaluates to 0."""
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def micro_accuracy(counts: ConfusionCounts) -> float:
    return (counts.tp + counts.tn) / counts.total if counts.total else 0.0


def subset_accuracy(scores, targets, threshold: float = 0.5) -> float:
    scores, targets = _check_shapes(scores, targets)
    predicted = scores >= threshold
    return float(np.mean(np.all(predicted == targets, axis=-1)))


def micro_roc(scores, targets) -> RocCurve:
    """Micro-averaged ROC: pool every (sample, label) cell, sweep thresholds
    at each distinct score (ties collapse to one step), trapezoidal AUC."""
    scores, targets = _check_shapes(scores, targets)
    flat_scores = scores.ravel()
    flat_bits = targets.ravel()
    n_pos = int(flat_bits.sum())
    n_neg = flat_bits.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC undefined: targets are all-positive or all-negative")
    order = np.argsort(-flat_scores, kind="stable")
    sorted_scores = flat_scores[order]
    sorted_bits = flat_bits[order]
    fpr = [0.0]
    tpr = [0.0]
    thresholds = [float("inf")]
    tp = fp = 0
    i = 0
    n = flat_bits.size
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(sorted_bits[i:j].sum())
        fp += (j - i) - int(sorted_bits[i:j].sum())
        fpr.append(fp / n_neg)
        tpr.append(tp / n_pos)
        thresholds.append(float(sorted_scores[i]))
        i = j
    trapezoid = getattr(np, "trapezoid", np.trapz)
    auc = float(trapezoid(tpr, fpr))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=auc)


def length_analysis(original_lengths, scores, targets, threshold: float = 0.5,
                    bucket_width: int = 100, overflow_at: int = 2000) -> LengthBucketReport:
    """Per-length-bucket subset accuracy; records bucketed by their
    pre-truncation residue count."""
    scores, targets = _check_shapes(scores, targets)
    lengths = list(original_lengths)
    if len(lengths) != scores.shape[0]:
        raise MetricsError(f"{len(lengths)} lengths for {scores.shape[0]} score rows")
    predicted = scores >= threshold
    correct = np.all(predicted == targets, axis=-1)
    edges = list(range(0, overflow_at, bucket_width)) + [overflow_at]
    counts = [0] * len(edges)
    hits = [0] * len(edges)
    for length, ok in zip(lengths, correct):
        idx = min(length // bucket_width, len(edges) - 1)
        counts[idx] += 1
        hits[idx] += int(ok)
    accuracies = [hits[i] / counts[i] if counts[i] else None for i in range(len(edges))]
    return LengthBucketReport(edges=edges, counts=counts, accuracies=accuracies)


def aspect_report(scores, targets, original_lengths=None, threshold: float = 0.5,
                  bucket_width: int = 100) -> dict:
    """All headline metrics for one aspect, JSON-ready."""
    counts = confusion(scores, targets, threshold)
    p, r, f1 = prf1(counts)
    report = {
        "threshold": threshold,
        "subset_accuracy": subset_accuracy(scores, targets, threshold),
        "micro_accuracy": micro_accuracy(counts),
        "precision": p,
        "recall": r,
        "f1": f1,
        "confusion": {"tp": counts.tp, "fp": counts.fp, "fn": counts.fn, "tn": counts.tn},
    }
    try:
        report["auc"] = micro_roc(scores, targets).auc
    except MetricsError:
        report["auc"] = None
    if original_lengths is not None:
        sla = length_analysis(original_lengths, scores, targets, threshold, bucket_width)
        report["length_buckets"] = [
            {"lo": sla.edges[i],
             "hi": (sla.edges[i + 1] if i + 1 < len(sla.edges) else None),
             "count": sla.counts[i],
             "accuracy": sla.accuracies[i]}
            for i in range(len(sla.edges))
        ]
    return report


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fpr,tpr,threshold\n")
        for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            fh.write(f"{f:.10g},{t:.10g},{th:.10g}\n")


def write_sla_csv(report: LengthBucketReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bucket_lo,bucket_hi,count,accuracy\n")
        for i, lo in enumerate(report.edges):
            hi = report.edges[i + 1] if i + 1 < len(report.edges) else ""
            acc = "" if report.accuracies[i] is None else f"{report.accuracies[i]:.10g}"
            fh.write(f"{lo},{hi},{report.counts[i]},{acc}\n")


def write_report_json(per_aspect: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(per_aspect, fh, indent=2, sort_keys=True)
        fh.write("\n")
