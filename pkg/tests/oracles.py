"""Independent reference implementations used as test oracles.

These are deliberately naive (pure Python, quadratic, exhaustive) and share
no code with the package beyond the plain data types.
"""

from __future__ import annotations

import math


def iou_py(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def nms_quadratic(boxes, scores, thr):
    """Textbook greedy suppression: visit boxes by score, keep if no kept box overlaps > thr."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou_py(boxes[i], boxes[k]) <= thr for k in keep):
            keep.append(i)
    return keep


def _match_image(dets, targets, ignores, thr):
    """dets: list of (box, score). Returns per-det flags in the given order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    used = [False] * len(targets)
    flags = ["fp"] * len(dets)
    for i in order:
        best, best_j = -1.0, -1
        for j, t in enumerate(targets):
            if used[j]:
                continue
            o = iou_py(dets[i][0], t)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= thr:
            used[best_j] = True
            flags[i] = "tp"
        elif any(iou_py(dets[i][0], g) >= thr for g in ignores):
            flags[i] = "ignored"
    return flags


def brute_force_log_avg_mr(images, thr=0.5):
    """images: list of (dets, targets, ignores); dets are (box, score).

    Every distinct score is tried as a threshold and each image is re-matched
    from scratch using only the detections at or above it.
    """
    n_img = len(images)
    n_tgt = sum(len(t) for _, t, _ in images)
    thresholds = sorted({s for dets, _, _ in images for _, s in dets}, reverse=True)
    points = [(0.0, 1.0)]
    for t in thresholds:
        tp = fp = 0
        for dets, targets, ignores in images:
            kept = [d for d in dets if d[1] >= t]
            flags = _match_image(kept, targets, ignores, thr)
            tp += flags.count("tp")
            fp += flags.count("fp")
        points.append((fp / n_img, 1.0 - tp / n_tgt))
    refs = [10 ** (-2 + 2 * k / 8) for k in range(9)]
    logs = []
    for r in refs:
        ok = [mr for f, mr in points if f <= r]
        # points run from the highest threshold down, so the last admissible one
        mr = ok[-1] if ok else points[0][1]
        logs.append(math.log(max(mr, 1e-12)))
    return math.exp(sum(logs) / len(logs)), points
