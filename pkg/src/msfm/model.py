"""Toy two-branch detector with hand-written forward and backward passes.

Shapes: ``F = C * G * G`` pooled features per proposal, ``D`` hidden width.
Both heads are ``relu(fc1) -> relu(fc2)`` stacks over the same pooled
feature; the full-body head adds a 2-way classifier and a 4-way box
regressor, the visible-body head a 2-way classifier (and an optional
regressor used only by the ``cls_plus_reg`` ablation). The proposal stage
is a linear scorer over pooled anchor features, one weight set per anchor
shape.

Every forward returns a :class:`Tape` that :func:`backward` consumes.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from msfm.geometry import Box, ScoredBox, clip, clip_array, descending_order, iou_matrix, jitter, valid_mask
from msfm.losses import decode_deltas_array, softmax
from msfm.synthdata import Scene

FB = "fb"
VB = "vb"
RPN = "rpn"


class DegenerateBoxError(ValueError):
    pass


class TapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    hidden_dim: int = 64
    pool_grid: int = 3
    rpn_pool_grid: int = 2
    anchor_heights: tuple[float, ...] = (56.0, 80.0, 112.0)
    anchor_aspect: float = 0.41
    anchor_stride: float = 8.0
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden_dim < 1 or self.pool_grid < 1 or self.rpn_pool_grid < 1:
            raise ValueError("hidden_dim, pool_grid and rpn_pool_grid must be positive")

    @property
    def pooled_dim(self) -> int:
        return self.channels * self.pool_grid * self.pool_grid

    @property
    def rpn_dim(self) -> int:
        return self.channels * self.rpn_pool_grid * self.rpn_pool_grid

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["anchor_heights"] = list(self.anchor_heights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "anchor_heights" in d:
            d["anchor_heights"] = tuple(d["anchor_heights"])
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, s, r = cfg.hidden_dim, cfg.pooled_dim, len(cfg.anchor_heights), cfg.rpn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "rpn_cls_w": (s, 2, r),
        "rpn_cls_b": (s, 2),
        "rpn_reg_w": (s, 4, r),
        "rpn_reg_b": (s, 4),
    }
    for br in (FB, VB):
        shapes[f"{br}_fc1_w"] = (d, f)
        shapes[f"{br}_fc1_b"] = (d,)
        shapes[f"{br}_fc2_w"] = (d, d)
        shapes[f"{br}_fc2_b"] = (d,)
        shapes[f"{br}_cls_w"] = (2, d)
        shapes[f"{br}_cls_b"] = (2,)
        shapes[f"{br}_reg_w"] = (4, d)
        shapes[f"{br}_reg_b"] = (4,)
    return shapes


class ModelParams:
    """Named float64 arrays plus the :class:`ModelConfig` they were built for."""

    def __init__(self, arrays: dict[str, np.ndarray], config: ModelConfig):
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            raise ValueError(f"parameter names {sorted(arrays)} do not match {sorted(expected)}")
        for k, shape in expected.items():
            if arrays[k].shape != shape:
                raise ValueError(f"{k}: shape {arrays[k].shape}, expected {shape}")
        self.arrays = {k: np.asarray(arrays[k], dtype=np.float64) for k in expected}
        self.config = config

    @classmethod
    def init(cls, config: ModelConfig, seed: int | None = None) -> "ModelParams":
        rng = np.random.default_rng(config.init_seed if seed is None else seed)
        arrays = {}
        for k, shape in param_shapes(config).items():
            if k.endswith("_b"):
                arrays[k] = np.zeros(shape)
            elif "_fc" in k:
                arrays[k] = rng.normal(0.0, math.sqrt(2.0 / shape[-1]), size=shape)
            elif "_reg_" in k:
                arrays[k] = rng.normal(0.0, 0.001, size=shape)
            else:
                arrays[k] = rng.normal(0.0, 0.01, size=shape)
        return cls(arrays, config)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls({k: np.zeros(s) for k, s in param_shapes(config).items()}, config)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def keys(self):
        return self.arrays.keys()

    def items(self):
        return self.arrays.items()

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    def copy(self) -> "ModelParams":
        return type(self)({k: v.copy() for k, v in self.arrays.items()}, self.config)

    def zeros_like(self) -> "GradientSet":
        return GradientSet({k: np.zeros_like(v) for k, v in self.arrays.items()}, self.config)

    def n_coords(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def equals(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()
        )


class GradientSet(ModelParams):
    def add_(self, other: "GradientSet", scale: float = 1.0) -> "GradientSet":
        for k, v in other.arrays.items():
            self.arrays[k] += scale * v
        return self

    def scale_(self, factor: float) -> "GradientSet":
        for v in self.arrays.values():
            v *= factor
        return self

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(v))) if v.size else 0.0 for v in self.arrays.values())


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    meta = np.frombuffer(json.dumps(params.config.to_dict()).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __config__=meta, **params.arrays)


def load_checkpoint(path: str | Path) -> ModelParams:
    with np.load(path, allow_pickle=False) as z:
        config = ModelConfig.from_dict(json.loads(z["__config__"].tobytes().decode()))
        arrays = {k: z[k].copy() for k in z.files if k != "__config__"}
    return ModelParams(arrays, config)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def integral_image(scene: Scene) -> np.ndarray:
    ii = scene.cache.get("integral")
    if ii is None:
        g = scene.feature_grid
        ii = np.zeros((g.shape[0], g.shape[1] + 1, g.shape[2] + 1))
        ii[:, 1:, 1:] = g.cumsum(axis=1).cumsum(axis=2)
        scene.cache["integral"] = ii
    return ii


def roi_pool_many(scene: Scene, boxes: np.ndarray, grid: int) -> np.ndarray:
    """Average-pool ``grid x grid`` sub-cells of every box.

    A feature cell contributes to a sub-cell when its centre lies in the
    half-open sub-cell ``[x0, x1) x [y0, y1)``; empty sub-cells pool to 0.
    Boxes are clipped to the scene first and must keep positive area.

    Returns:
        ``(N, C * grid * grid)`` array, channel-major.
    """
    boxes = clip_array(np.asarray(boxes, dtype=np.float64).reshape(-1, 4), scene.bounds)
    if not np.all(valid_mask(boxes)):
        bad = boxes[~valid_mask(boxes)][0]
        raise DegenerateBoxError(f"box {bad.tolist()} has zero area after clipping")
    ii = integral_image(scene)
    c, h1, w1 = ii.shape
    s = scene.stride
    n = len(boxes)
    frac = np.arange(grid + 1) / grid
    xs = boxes[:, 0:1] + (boxes[:, 2:3] - boxes[:, 0:1]) * frac  # (N, G+1)
    ys = boxes[:, 1:2] + (boxes[:, 3:4] - boxes[:, 1:2]) * frac
    ci = np.clip(np.ceil(xs / s - 0.5), 0, w1 - 1).astype(np.int64)
    ri = np.clip(np.ceil(ys / s - 0.5), 0, h1 - 1).astype(np.int64)
    r0, r1 = ri[:, :-1, None], ri[:, 1:, None]  # (N, G, 1)
    c0, c1 = ci[:, None, :-1], ci[:, None, 1:]  # (N, 1, G)
    total = ii[:, r1, c1] - ii[:, r0, c1] - ii[:, r1, c0] + ii[:, r0, c0]  # (C, N, G, G)
    count = (r1 - r0) * (c1 - c0)
    out = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return out.transpose(1, 0, 2, 3).reshape(n, c * grid * grid)


def roi_pool(scene: Scene, b: Box, grid: int) -> np.ndarray:
    if grid < 1:
        raise ValueError("grid must be >= 1")
    if clip(b, scene.bounds) is None:
        raise DegenerateBoxError(f"{b} does not overlap the scene")
    return roi_pool_many(scene, b.as_array()[None], grid)[0]


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Forward intermediates for one batch through one head."""

    branch: str
    inputs: np.ndarray
    h1: np.ndarray | None = None
    h2: np.ndarray | None = None
    shape_index: np.ndarray | None = None
    with_reg: bool = False


@dataclass
class HeadOutput:
    cls_logits: np.ndarray  # (N, 2)
    fc2_out: np.ndarray  # (N, D)
    reg_deltas: np.ndarray | None  # (N, 4)
    tape: Tape


def _head_forward(p: ModelParams, pooled: np.ndarray, branch: str, with_reg: bool) -> HeadOutput:
    x = np.atleast_2d(np.asarray(pooled, dtype=np.float64))
    if x.shape[1] != p[f"{branch}_fc1_w"].shape[1]:
        raise ValueError(f"pooled width {x.shape[1]} does not match {branch}_fc1_w")
    h1 = np.maximum(x @ p[f"{branch}_fc1_w"].T + p[f"{branch}_fc1_b"], 0.0)
    h2 = np.maximum(h1 @ p[f"{branch}_fc2_w"].T + p[f"{branch}_fc2_b"], 0.0)
    logits = h2 @ p[f"{branch}_cls_w"].T + p[f"{branch}_cls_b"]
    deltas = h2 @ p[f"{branch}_reg_w"].T + p[f"{branch}_reg_b"] if with_reg else None
    return HeadOutput(logits, h2, deltas, Tape(branch, x, h1, h2, with_reg=with_reg))


def fb_forward(p: ModelParams, pooled: np.ndarray) -> HeadOutput:
    """Full-body head (FC11 -> FC12 -> cls + reg)."""
    return _head_forward(p, pooled, FB, with_reg=True)


def vb_forward(p: ModelParams, pooled: np.ndarray, with_reg: bool = False) -> HeadOutput:
    """Visible-body head (FC21 -> FC22 -> cls); ``reg_deltas`` is None unless ``with_reg``."""
    return _head_forward(p, pooled, VB, with_reg=with_reg)


@dataclass
class RPNOutput:
    cls_logits: np.ndarray  # (A, 2)
    reg_deltas: np.ndarray  # (A, 4)
    tape: Tape


def rpn_forward(p: ModelParams, anchor_feats: np.ndarray, shape_index: np.ndarray) -> RPNOutput:
    x = np.atleast_2d(anchor_feats)
    logits = np.empty((len(x), 2))
    deltas = np.empty((len(x), 4))
    for s in range(p["rpn_cls_w"].shape[0]):
        m = shape_index == s
        logits[m] = x[m] @ p["rpn_cls_w"][s].T + p["rpn_cls_b"][s]
        deltas[m] = x[m] @ p["rpn_reg_w"][s].T + p["rpn_reg_b"][s]
    return RPNOutput(logits, deltas, Tape(RPN, x, shape_index=np.asarray(shape_index)))


def backward(
    p: ModelParams,
    tape: Tape,
    d_cls: np.ndarray | None = None,
    d_reg: np.ndarray | None = None,
    d_feat: np.ndarray | None = None,
    grads: GradientSet | None = None,
) -> GradientSet:
    """Reverse pass for one :class:`Tape`, accumulated into ``grads``.

    ``d_feat`` is the upstream gradient on the FC12/FC22 activation (from the
    feature-modulation loss). relu'(0) is taken as 0.
    """
    if grads is None:
        grads = p.zeros_like()
    n = len(tape.inputs)
    for name, arr, width in (("d_cls", d_cls, 2), ("d_reg", d_reg, 4)):
        if arr is not None and arr.shape != (n, width):
            raise TapeMismatchError(f"{name} shape {arr.shape} does not match tape batch ({n}, {width})")

    if tape.branch == RPN:
        if tape.shape_index is None:
            raise TapeMismatchError("RPN tape without anchor shape index")
        for s in range(p["rpn_cls_w"].shape[0]):
            m = tape.shape_index == s
            xs = tape.inputs[m]
            if d_cls is not None:
                grads.arrays["rpn_cls_w"][s] += d_cls[m].T @ xs
                grads.arrays["rpn_cls_b"][s] += d_cls[m].sum(axis=0)
            if d_reg is not None:
                grads.arrays["rpn_reg_w"][s] += d_reg[m].T @ xs
                grads.arrays["rpn_reg_b"][s] += d_reg[m].sum(axis=0)
        return grads

    if tape.branch not in (FB, VB) or tape.h1 is None or tape.h2 is None:
        raise TapeMismatchError(f"unknown or incomplete tape for branch {tape.branch!r}")
    br = tape.branch
    if tape.h2.shape[1] != p[f"{br}_fc2_w"].shape[0] or tape.inputs.shape[1] != p[f"{br}_fc1_w"].shape[1]:
        raise TapeMismatchError("tape widths do not match parameters")
    if d_reg is not None and not tape.with_reg:
        raise TapeMismatchError("regression gradient given for a forward pass without regression")
    if d_feat is not None and d_feat.shape != tape.h2.shape:
        raise TapeMismatchError(f"d_feat shape {d_feat.shape} does not match {tape.h2.shape}")

    g = grads.arrays
    dh2 = np.zeros_like(tape.h2)
    if d_cls is not None:
        g[f"{br}_cls_w"] += d_cls.T @ tape.h2
        g[f"{br}_cls_b"] += d_cls.sum(axis=0)
        dh2 += d_cls @ p[f"{br}_cls_w"]
    if d_reg is not None:
        g[f"{br}_reg_w"] += d_reg.T @ tape.h2
        g[f"{br}_reg_b"] += d_reg.sum(axis=0)
        dh2 += d_reg @ p[f"{br}_reg_w"]
    if d_feat is not None:
        dh2 += d_feat
    dz2 = dh2 * (tape.h2 > 0)
    g[f"{br}_fc2_w"] += dz2.T @ tape.h1
    g[f"{br}_fc2_b"] += dz2.sum(axis=0)
    dz1 = (dz2 @ p[f"{br}_fc2_w"]) * (tape.h1 > 0)
    g[f"{br}_fc1_w"] += dz1.T @ tape.inputs
    g[f"{br}_fc1_b"] += dz1.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Box deltas and proposals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProposalConfig:
    top_k: int = 150
    pre_nms_top_k: int = 300
    nms_threshold: float = 0.7
    min_size: float = 8.0
    oracle_jitter: bool = False
    jitter_per_gt: int = 8
    jitter_amplitude: float = 0.25


@dataclass
class Anchors:
    boxes: np.ndarray  # (A, 4), clipped to the scene
    shape_index: np.ndarray  # (A,)
    features: np.ndarray  # (A, rpn_dim)


def scene_anchors(scene: Scene, cfg: ModelConfig) -> Anchors:
    """Anchors on a regular grid, one per configured height; cached on the scene."""
    key = ("anchors", cfg.anchor_heights, cfg.anchor_aspect, cfg.anchor_stride, cfg.rpn_pool_grid)
    cached = scene.cache.get(key)
    if cached is not None:
        return cached
    b = scene.bounds
    cx = np.arange(b.x1 + cfg.anchor_stride / 2, b.x2, cfg.anchor_stride)
    cy = np.arange(b.y1 + cfg.anchor_stride / 2, b.y2, cfg.anchor_stride)
    gy, gx = np.meshgrid(cy, cx, indexing="ij")
    gx, gy = gx.ravel(), gy.ravel()
    boxes, idx = [], []
    for s, h in enumerate(cfg.anchor_heights):
        w = h * cfg.anchor_aspect
        boxes.append(np.stack([gx - w / 2, gy - h / 2, gx + w / 2, gy + h / 2], axis=1))
        idx.append(np.full(len(gx), s))
    raw = np.concatenate(boxes)
    shape_index = np.concatenate(idx)
    clipped = clip_array(raw, b)
    keep = valid_mask(clipped, min_size=1.0)
    anchors = Anchors(clipped[keep], shape_index[keep], roi_pool_many(scene, clipped[keep], cfg.rpn_pool_grid))
    scene.cache[key] = anchors
    return anchors


@dataclass
class ProposalSet:
    boxes: np.ndarray  # (N, 4)
    scores: np.ndarray  # (N,) proposal-stage foreground probability
    from_jitter: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return len(self.boxes)

    def scored_boxes(self) -> list[ScoredBox]:
        eps = 1e-12
        return [
            ScoredBox(Box.from_array(b), float(np.clip(s, eps, 1 - eps))) for b, s in zip(self.boxes, self.scores)
        ]


def rpn_propose(
    p: ModelParams,
    scene: Scene,
    cfg: ProposalConfig,
    gt_boxes: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    rpn_out: RPNOutput | None = None,
) -> ProposalSet:
    """Score every anchor, decode, clip, NMS, keep the top ``cfg.top_k``.

    With ``cfg.oracle_jitter`` the result is extended by ``jitter_per_gt``
    perturbed copies of each row of ``gt_boxes``; the first copy uses a small
    amplitude (IoU > 0.5 with its source), the rest use ``jitter_amplitude``.
    Jittered proposals carry score 0.5 and ``from_jitter`` set.
    """
    anchors = scene_anchors(scene, p.config)
    if rpn_out is None:
        rpn_out = rpn_forward(p, anchors.features, anchors.shape_index)
    scores = softmax(rpn_out.cls_logits)[:, 1]
    boxes = clip_array(decode_deltas_array(anchors.boxes, rpn_out.reg_deltas), scene.bounds)
    ok = np.flatnonzero(valid_mask(boxes, cfg.min_size))
    order = ok[descending_order(scores[ok])][: cfg.pre_nms_top_k]
    keep = _nms_matrix(boxes[order], cfg.nms_threshold)[: cfg.top_k]
    sel = order[keep]
    out_boxes = [boxes[sel]]
    out_scores = [scores[sel]]
    flags = [np.zeros(len(sel), dtype=bool)]

    if cfg.oracle_jitter and gt_boxes is not None and len(gt_boxes):
        if rng is None:
            raise ValueError("oracle jitter needs an rng")
        jittered = []
        for g in np.asarray(gt_boxes).reshape(-1, 4):
            gb = Box.from_array(g)
            for k in range(cfg.jitter_per_gt):
                amp = 0.05 if k == 0 else cfg.jitter_amplitude
                for _ in range(10):
                    jb = clip(jitter(gb, rng, amp), scene.bounds)
                    if jb is not None and jb.width > 1.0 and jb.height > 1.0:
                        jittered.append(jb.as_list())
                        break
        j = np.array(jittered).reshape(-1, 4)
        out_boxes.append(j)
        out_scores.append(np.full(len(j), 0.5))
        flags.append(np.ones(len(j), dtype=bool))
    return ProposalSet(np.concatenate(out_boxes), np.concatenate(out_scores), np.concatenate(flags))


def _nms_matrix(sorted_boxes: np.ndarray, thr: float) -> np.ndarray:
    # greedy NMS over boxes already sorted by descending score
    n = len(sorted_boxes)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    over = iou_matrix(sorted_boxes, sorted_boxes) > thr
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in range(n):
        if alive[i]:
            keep.append(i)
            alive &= ~over[i]
    return np.array(keep, dtype=np.int64)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    loss_fn: Callable[[ModelParams], tuple[float, GradientSet]],
    p: ModelParams,
    tolerance: float = 1e-4,
    eps: float = 1e-4,
    max_coords: int = 10_000,
    keys: list[str] | None = None,
    seed: int = 0,
    value_fn: Callable[[ModelParams], float] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Every coordinate of ``keys`` (default: all parameters) is perturbed,
    unless there are more than ``max_coords``, in which case a seeded random
    subsample of that size is checked. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-6)``. ``value_fn``, when given, is a
    cheaper value-only version of ``loss_fn`` used for the perturbed evaluations.
    """
    _, analytic = loss_fn(p)
    keys = list(p.keys()) if keys is None else keys
    coords = [(k, idx) for k in keys for idx in np.ndindex(p[k].shape)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]
    if value_fn is None:
        value_fn = lambda q: loss_fn(q)[0]  # noqa: E731
    work = p.copy()
    worst = (0.0, "", ())
    for k, idx in coords:
        arr = work.arrays[k]
        orig = arr[idx]
        arr[idx] = orig + eps
        fp = value_fn(work)
        arr[idx] = orig - eps
        fm = value_fn(work)
        arr[idx] = orig
        num = (fp - fm) / (2 * eps)
        err = relative_error(float(analytic[k][idx]), num)
        if err > worst[0]:
            worst = (err, k, idx)
    return GradCheckReport(worst[0], worst[1], worst[2], len(coords), tolerance)
