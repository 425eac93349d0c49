"""Per-branch proposal labelling, subsampling and per-pedestrian grouping.

The full-body branch labels proposals against full boxes, the visible-body
branch against visible boxes; a proposal is positive when its best IoU is
strictly above 0.5. The two branches never share labels, so one box can be
positive for one branch and negative for the other.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from msfm.geometry import Box, iou_matrix
from msfm.synthdata import Annotation, training_filter

FB = "fb"
VB = "vb"
POS_IOU = 0.5


@dataclass(frozen=True)
class AssignedProposal:
    box: Box
    branch: str
    positive: bool
    gt_index: int | None
    max_iou: float


@dataclass
class Assignment:
    """Struct-of-arrays view of a list of :class:`AssignedProposal`.

    ``gt_index`` is -1 for negatives.
    """

    branch: str
    boxes: np.ndarray
    positive: np.ndarray
    gt_index: np.ndarray
    max_iou: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self) -> Iterator[AssignedProposal]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> AssignedProposal:
        g = int(self.gt_index[i])
        return AssignedProposal(
            Box.from_array(self.boxes[i]), self.branch, bool(self.positive[i]), g if g >= 0 else None, float(self.max_iou[i])
        )

    def take(self, idx: np.ndarray) -> "Assignment":
        idx = np.asarray(idx, dtype=np.int64)
        return Assignment(self.branch, self.boxes[idx], self.positive[idx], self.gt_index[idx], self.max_iou[idx])

    @property
    def n_positive(self) -> int:
        return int(self.positive.sum())


@dataclass
class SampleSet:
    fb: Assignment
    vb: Assignment
    seed: int


@dataclass
class PositiveGroups:
    """Per-pedestrian FB and VB member indices into the sampled lists."""

    groups: dict[int, tuple[list[int], list[int]]] = field(default_factory=dict)

    @property
    def P(self) -> int:
        return len(self.groups)

    def pedestrians(self) -> list[int]:
        return sorted(self.groups)

    def fb_members(self, ped: int) -> list[int]:
        return self.groups[ped][0]

    def vb_members(self, ped: int) -> list[int]:
        return self.groups[ped][1]


def training_gts(annotations: Sequence[Annotation]) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Full and visible GT arrays for annotations that pass the training filter.

    Returns the two ``(K, 4)`` arrays and the original annotation indices.
    """
    keep = [i for i, a in enumerate(annotations) if not a.ignore and training_filter(a)]
    full = np.array([annotations[i].full.as_list() for i in keep]).reshape(-1, 4)
    vis = np.array([annotations[i].visible.as_list() for i in keep]).reshape(-1, 4)
    return full, vis, keep


def assign(proposals: np.ndarray, gts: np.ndarray, branch: str, threshold: float = POS_IOU) -> Assignment:
    """Label each proposal by its best-overlapping GT (lowest index on ties)."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    n = len(proposals)
    if len(gts) == 0:
        return Assignment(branch, proposals, np.zeros(n, dtype=bool), np.full(n, -1), np.zeros(n))
    ious = iou_matrix(proposals, gts)
    arg = np.argmax(ious, axis=1)  # first maximum, i.e. lowest index
    best = ious[np.arange(n), arg]
    positive = best > threshold
    return Assignment(branch, proposals, positive, np.where(positive, arg, -1), best)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def selection_keys(boxes: np.ndarray, seed: int) -> np.ndarray:
    """Pseudo-random 64-bit key per box, a function of (seed, box coordinates) only."""
    bits = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4).view(np.uint64)
    h = np.full(len(bits), np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    for j in range(4):
        h = _splitmix64(h ^ bits[:, j])
    return h


def _select(idx: np.ndarray, keys: np.ndarray, k: int) -> np.ndarray:
    # smallest keys first; stable so equal keys (identical boxes) keep input order
    order = np.argsort(keys[idx], kind="stable")
    return idx[order[:k]]


def sample_indices(assigned: Assignment, cap: int = 512, pos_fraction: float = 0.25, seed: int = 0) -> np.ndarray:
    """Indices chosen by :func:`sample`, positives first."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    keys = selection_keys(assigned.boxes, seed)
    pos = np.flatnonzero(assigned.positive)
    neg = np.flatnonzero(~assigned.positive)
    n_pos = min(len(pos), int(round(cap * pos_fraction)))
    n_neg = min(len(neg), cap - n_pos)
    n_pos = min(len(pos), cap - n_neg)
    return np.concatenate([_select(pos, keys, n_pos), _select(neg, keys, n_neg)])


def sample(assigned: Assignment, cap: int = 512, pos_fraction: float = 0.25, seed: int = 0) -> Assignment:
    """Subsample to at most ``cap`` proposals at ``pos_fraction`` positives.

    A short class is taken whole and the other fills up to ``cap``. Selection
    is uniform without replacement: proposals are ranked by a seeded hash of
    their coordinates, which makes the selected multiset independent of input
    order. Output: positives then negatives, each in selection order.
    """
    return assigned.take(sample_indices(assigned, cap, pos_fraction, seed))


def branch_seed(global_seed: int, scene_id: str, branch: str, step: int = 0) -> int:
    """Sampler seed keyed by (global seed, scene, branch, step)."""
    tag = zlib.crc32(f"{scene_id}|{branch}".encode())
    ss = np.random.SeedSequence([global_seed & 0xFFFFFFFF, tag, step])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_scene(
    proposals: np.ndarray,
    annotations: Sequence[Annotation],
    global_seed: int,
    scene_id: str,
    cap: int = 512,
    pos_fraction: float = 0.25,
    step: int = 0,
    with_vb: bool = True,
) -> SampleSet:
    full, vis, _ = training_gts(annotations)
    fb = sample(assign(proposals, full, FB), cap, pos_fraction, branch_seed(global_seed, scene_id, FB, step))
    if with_vb:
        vb = sample(assign(proposals, vis, VB), cap, pos_fraction, branch_seed(global_seed, scene_id, VB, step))
    else:
        vb = assign(np.zeros((0, 4)), vis, VB)
    return SampleSet(fb, vb, global_seed)


def group_positives(sample_fb: Assignment, sample_vb: Assignment) -> PositiveGroups:
    """Group positives of both branches by pedestrian, keeping those present in both."""
    fb: dict[int, list[int]] = {}
    vb: dict[int, list[int]] = {}
    for i in np.flatnonzero(sample_fb.positive):
        fb.setdefault(int(sample_fb.gt_index[i]), []).append(int(i))
    for i in np.flatnonzero(sample_vb.positive):
        vb.setdefault(int(sample_vb.gt_index[i]), []).append(int(i))
    return PositiveGroups({ped: (fb[ped], vb[ped]) for ped in sorted(fb) if ped in vb})
