"""Pixel-level localization metrics.

All metrics operate on flattened score / truth arrays. Scores from several
images are pooled (micro-averaged) before computing the headline numbers;
per-image values are kept alongside in :class:`EvalReport`.

Thresholding convention: a pixel is predicted anomalous iff ``score >= threshold``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

# AUROC at or above this value together with F1 below OPTIMISTIC_F1 is flagged.
OPTIMISTIC_AUROC = 0.95
OPTIMISTIC_F1 = 0.5


class DegenerateTruthError(ValueError):
    """Ground truth contains a single class, so the metric is undefined."""


def _check_pair(scores, truth):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel()
    if scores.shape != truth.shape:
        raise ValueError(f"length mismatch: {scores.size} scores vs {truth.size} labels")
    if truth.size and not np.isin(truth, (0, 1)).all():
        raise ValueError("truth must be binary (0/1)")
    return scores, truth.astype(bool)


def _require_both_classes(truth: np.ndarray) -> None:
    n_pos = int(truth.sum())
    if n_pos == 0 or n_pos == truth.size:
        raise DegenerateTruthError(
            f"need both classes, got {n_pos} positives out of {truth.size} pixels"
        )


def f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Return ``(f1, precision, recall)``; empty denominators give 0."""
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0:
        return 0.0, precision, recall
    return 2 * (precision * recall) / (precision + recall), precision, recall


def pixel_f1(scores, truth, threshold: float) -> dict:
    scores, truth = _check_pair(scores, truth)
    pred = scores >= threshold
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    f1, precision, recall = f1_from_counts(tp, fp, fn)
    return {"f1": f1, "precision": precision, "recall": recall, "tp": tp, "fp": fp, "fn": fn}


def optimal_f1_sweep(scores, truth) -> dict:
    """Exact F1 maximum over every distinct score used as a threshold.

    ``+inf`` (predict nothing) is also a candidate. Among thresholds reaching
    the maximum the lowest one is returned.
    """
    scores, truth = _check_pair(scores, truth)
    _require_both_classes(truth)

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = truth[order]
    tp_cum = np.cumsum(t)
    fp_cum = np.cumsum(~t)
    # last index of each run of equal scores = cutoff for threshold == that score
    run_end = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    n_pos = int(truth.sum())

    best_f1, best_thr = 0.0, np.inf
    best_counts = (0, 0, n_pos)
    for idx in run_end:
        tp = int(tp_cum[idx])
        fp = int(fp_cum[idx])
        fn = n_pos - tp
        f1, _, _ = f1_from_counts(tp, fp, fn)
        if f1 >= best_f1:
            best_f1, best_thr, best_counts = f1, float(s[idx]), (tp, fp, fn)
    f1, precision, recall = f1_from_counts(*best_counts)
    tp, fp, fn = best_counts
    return {
        "f1_max": best_f1,
        "threshold": best_thr,
        "precision": precision,
        "recall": recall,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": truth.size - tp - fp - fn,
    }


def pixel_auroc(scores, truth) -> float:
    """Mann-Whitney AUROC; tied scores count one half."""
    scores, truth = _check_pair(scores, truth)
    _require_both_classes(truth)
    ranks = rankdata(scores)  # average ranks resolve ties
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    pixel_f1: float
    pixel_auroc: float
    optimal_threshold: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int
    anomalous_fraction: float
    per_image_f1: list[float] = field(default_factory=list)
    image_refs: list[str] = field(default_factory=list)

    @property
    def mean_image_f1(self) -> float:
        return float(np.mean(self.per_image_f1)) if self.per_image_f1 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_image_f1"] = self.mean_image_f1
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = {k: v for k, v in d.items() if k != "mean_image_f1"}
        return cls(**d)


def evaluate_maps(
    score_maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    image_refs: Sequence[str] | None = None,
) -> EvalReport:
    """Pool per-image score maps and masks into one report."""
    if len(score_maps) != len(masks):
        raise ValueError("need one mask per score map")
    if not score_maps:
        raise ValueError("no images to evaluate")
    for s, m in zip(score_maps, masks):
        if np.shape(s) != np.shape(m):
            raise ValueError(f"score map shape {np.shape(s)} != mask shape {np.shape(m)}")
    scores = np.concatenate([np.ravel(s) for s in score_maps]).astype(np.float64)
    truth = np.concatenate([np.ravel(m) for m in masks]).astype(np.uint8)

    sweep = optimal_f1_sweep(scores, truth)
    auroc = pixel_auroc(scores, truth)
    thr = sweep["threshold"]
    per_image = [pixel_f1(s, m, thr)["f1"] for s, m in zip(score_maps, masks)]
    return EvalReport(
        pixel_f1=sweep["f1_max"],
        pixel_auroc=auroc,
        optimal_threshold=thr,
        precision=sweep["precision"],
        recall=sweep["recall"],
        tp=sweep["tp"],
        fp=sweep["fp"],
        fn=sweep["fn"],
        tn=sweep["tn"],
        anomalous_fraction=float(truth.mean()),
        per_image_f1=per_image,
        image_refs=list(image_refs) if image_refs is not None else [],
    )


def imbalance_demo(report: EvalReport) -> dict:
    """Contrast F1/AUROC with what an all-negative predictor would score.

    Accuracy of labelling every pixel normal equals the negative fraction,
    which is close to 1 under heavy imbalance while its F1 is 0.
    """
    total = report.tp + report.fp + report.fn + report.tn
    positives = report.tp + report.fn
    frac = positives / total
    flags = []
    if report.pixel_auroc >= OPTIMISTIC_AUROC and report.pixel_f1 < OPTIMISTIC_F1:
        flags.append("optimistic-AUROC")
    return {
        "anomalous_fraction": frac,
        "all_negative_accuracy": (total - positives) / total,
        "all_negative_f1": 0.0,
        "pixel_f1": report.pixel_f1,
        "pixel_auroc": report.pixel_auroc,
        "flags": flags,
    }
