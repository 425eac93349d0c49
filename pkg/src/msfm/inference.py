"""Test-time path: both heads score each proposal, scores are multiplied,
full-body regressions are decoded, and NMS picks the survivors."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from msfm.geometry import Box, clip_array, descending_order, nms_array, valid_mask
from msfm.losses import decode_deltas_array, softmax
from msfm.model import ModelParams, ProposalConfig, fb_forward, roi_pool_many, rpn_propose, vb_forward
from msfm.synthdata import Scene

PEDESTRIAN = 1


@dataclass(frozen=True)
class Detection:
    box: Box
    final_score: float
    fb_prob: float
    vb_prob: float


@dataclass(frozen=True)
class InferenceConfig:
    proposals: ProposalConfig = ProposalConfig()
    nms_threshold: float = 0.5
    score_floor: float = 0.01
    use_vb: bool = True
    max_detections: int = 100


def fuse_scores(fb_logits: np.ndarray, vb_logits: np.ndarray, pedestrian_class: int = PEDESTRIAN) -> float:
    """Product of the two branches' pedestrian-class softmax probabilities."""
    return float(softmax(np.asarray(fb_logits, float))[pedestrian_class] * softmax(np.asarray(vb_logits, float))[pedestrian_class])


def detect(scene: Scene, p: ModelParams, cfg: InferenceConfig = InferenceConfig()) -> list[Detection]:
    """Run the full inference path on one scene.

    The visible-body head sees the same pooled feature of the full proposal
    box as the full-body head; with ``cfg.use_vb`` off the final score is the
    full-body probability alone.
    """
    props = rpn_propose(p, scene, cfg.proposals)
    if len(props) == 0:
        return []
    pooled = roi_pool_many(scene, props.boxes, p.config.pool_grid)
    fb = fb_forward(p, pooled)
    fb_prob = softmax(fb.cls_logits)[:, PEDESTRIAN]
    if cfg.use_vb:
        vb_prob = softmax(vb_forward(p, pooled).cls_logits)[:, PEDESTRIAN]
        final = fb_prob * vb_prob
    else:
        vb_prob = np.ones_like(fb_prob)
        final = fb_prob.copy()
    boxes = clip_array(decode_deltas_array(props.boxes, fb.reg_deltas), scene.bounds)
    keep = np.flatnonzero(valid_mask(boxes) & (final >= cfg.score_floor) & (final > 0.0) & (final < 1.0))
    if keep.size == 0:
        return []
    kept = keep[nms_array(boxes[keep], final[keep], cfg.nms_threshold)][: cfg.max_detections]
    kept = kept[descending_order(final[kept])]
    return [
        Detection(Box.from_array(boxes[i]), float(final[i]), float(fb_prob[i]), float(vb_prob[i])) for i in kept
    ]


DETECTION_COLUMNS = ("scene_id", "x1", "y1", "x2", "y2", "final_score", "fb_prob", "vb_prob")


def write_detections_csv(path: str | Path, results: Iterable[tuple[str, Sequence[Detection]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DETECTION_COLUMNS)
        for scene_id, dets in results:
            for d in dets:
                w.writerow([scene_id, *(repr(v) for v in d.box.as_list()), repr(d.final_score), repr(d.fb_prob), repr(d.vb_prob)])


def read_detections_csv(path: str | Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            box = Box(float(row["x1"]), float(row["y1"]), float(row["x2"]), float(row["y2"]))
            out.setdefault(row["scene_id"], []).append(
                Detection(box, float(row["final_score"]), float(row["fb_prob"]), float(row["vb_prob"]))
            )
    return out
