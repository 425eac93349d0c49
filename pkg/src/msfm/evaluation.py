"""Miss rate vs false positives per image, and the log-average miss rate.

Ground truths outside the evaluated subset (or flagged ignore) act as
ignore regions: a detection that matches no target but overlaps one of
them is neither a true nor a false positive.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from msfm.geometry import boxes_to_array, descending_order, iou_matrix
from msfm.synthdata import Annotation, SubsetSpec, subset_filter

TP, FP, IGNORED = "tp", "fp", "ignored"
REFERENCE_FPPI = np.logspace(-2.0, 0.0, 9)


class NoTargetsError(ValueError):
    pass


@dataclass
class MatchResult:
    det_flags: list[str]
    gt_matched: list[bool]  # one per target
    n_gt: int
    n_tp: int
    n_fp: int
    n_ignored: int


@dataclass
class EvalCurve:
    """Operating points ordered from the highest threshold to the lowest.

    The first point is the empty operating point (threshold +inf, no detections).
    """

    thresholds: np.ndarray
    fppi: np.ndarray
    miss_rate: np.ndarray
    n_images: int
    n_targets: int


def _split_gts(annotations: Sequence[Annotation], subset: SubsetSpec) -> tuple[np.ndarray, np.ndarray]:
    targets = [a.full for a in annotations if not a.ignore and subset_filter(a, subset)]
    ignores = [a.full for a in annotations if a.ignore or not subset_filter(a, subset)]
    return boxes_to_array(targets), boxes_to_array(ignores)


def _det_arrays(dets) -> tuple[np.ndarray, np.ndarray]:
    boxes = boxes_to_array(d.box for d in dets)
    scores = np.array([_score(d) for d in dets], dtype=np.float64)
    return boxes, scores


def _score(d) -> float:
    return float(d.final_score if hasattr(d, "final_score") else d.score)


def match(dets, annotations: Sequence[Annotation], subset: SubsetSpec, iou_thr: float = 0.5) -> MatchResult:
    """Greedily match detections (highest score first) to subset targets.

    ``dets`` items need ``.box`` and ``.final_score`` (or ``.score``).
    """
    boxes, scores = _det_arrays(dets)
    targets, ignores = _split_gts(annotations, subset)
    order = descending_order(scores)
    iou_t = iou_matrix(boxes, targets)
    iou_i = iou_matrix(boxes, ignores)
    matched = np.zeros(len(targets), dtype=bool)
    flags = [FP] * len(boxes)
    for i in order:
        cand = np.where(matched, -1.0, iou_t[i]) if len(targets) else np.zeros(0)
        if cand.size and cand.max() >= iou_thr:
            matched[int(np.argmax(cand))] = True
            flags[i] = TP
        elif iou_i.shape[1] and iou_i[i].max() >= iou_thr:
            flags[i] = IGNORED
    n_tp = flags.count(TP)
    return MatchResult(flags, matched.tolist(), len(targets), n_tp, flags.count(FP), flags.count(IGNORED))


def curve(per_image: Sequence[tuple[Sequence, Sequence[Annotation]]], subset: SubsetSpec, iou_thr: float = 0.5) -> EvalCurve:
    """Sweep the score threshold over every distinct detection score.

    Greedy matching in score order means the matches at threshold ``t`` are
    exactly the matches of the detections scoring ``>= t``, so one matching
    pass per image suffices.
    """
    if len(per_image) == 0:
        raise NoTargetsError("no images to evaluate")
    scores, is_tp, is_fp = [], [], []
    n_targets = 0
    for dets, anns in per_image:
        res = match(dets, anns, subset, iou_thr)
        n_targets += res.n_gt
        for d, flag in zip(dets, res.det_flags):
            scores.append(_score(d))
            is_tp.append(flag == TP)
            is_fp.append(flag == FP)
    if n_targets == 0:
        raise NoTargetsError(f"no {subset.name} targets across {len(per_image)} images")
    scores_a = np.array(scores, dtype=np.float64)
    order = np.argsort(-scores_a, kind="stable")
    s_sorted = scores_a[order]
    tp_cum = np.cumsum(np.array(is_tp, dtype=np.int64)[order])
    fp_cum = np.cumsum(np.array(is_fp, dtype=np.int64)[order])
    # last index of each run of equal scores
    last = np.flatnonzero(np.append(s_sorted[1:] != s_sorted[:-1], True)) if len(s_sorted) else np.zeros(0, int)
    n_img = len(per_image)
    thresholds = np.concatenate([[np.inf], s_sorted[last]])
    fppi = np.concatenate([[0.0], fp_cum[last] / n_img])
    mr = np.concatenate([[1.0], 1.0 - tp_cum[last] / n_targets])
    return EvalCurve(thresholds, fppi, mr, n_img, n_targets)


def log_avg_mr(c: EvalCurve, floor: float = 1e-12) -> float:
    """Geometric mean of the miss rate at 9 log-spaced FPPI points in [1e-2, 1]."""
    samples = []
    for ref in REFERENCE_FPPI:
        ok = np.flatnonzero(c.fppi <= ref)
        samples.append(c.miss_rate[ok[-1]] if ok.size else c.miss_rate[0])
    return float(np.exp(np.mean(np.log(np.maximum(np.array(samples), floor)))))


def evaluate(per_image, subset: SubsetSpec, iou_thr: float = 0.5) -> tuple[float, EvalCurve]:
    c = curve(per_image, subset, iou_thr)
    return log_avg_mr(c), c


METRIC_COLUMNS = ("config_name", "subset", "log_avg_mr_percent", "n_images", "n_targets")


def write_metric_report(path: str | Path, rows: Sequence[tuple[str, str, float, int, int]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for name, subset, mr, n_img, n_tgt in rows:
            w.writerow([name, subset, f"{100.0 * mr:.4f}", n_img, n_tgt])


def format_mr(subset_name: str, mr: float) -> str:
    return f"{subset_name} log-avg MR: {100.0 * mr:.2f}%"
