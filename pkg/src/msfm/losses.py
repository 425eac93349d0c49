"""Loss terms of the composite objective, each returning its analytic gradient.

Classification uses 2-way softmax cross-entropy (class 1 = pedestrian),
box regression smooth-L1 on centre/size deltas, and the feature-modulation
term compares per-pedestrian mean features of the two branches.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from msfm.geometry import Box

# log(1000 / 16), the usual clamp on decoded size deltas
MAX_LOG_SCALE = math.log(1000.0 / 16.0)
ZERO_NORM = 1e-12


class ZeroVectorError(ValueError):
    pass


class SimilarityKind(str, enum.Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"
    MANHATTAN = "manhattan"


class MSFMMode(str, enum.Enum):
    POS = "pos"
    POS_PLUS_NEG = "pos_plus_neg"


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    return logits - m - np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """``-log softmax(logits)[label]`` and its gradient ``softmax - onehot``."""
    logits = np.asarray(logits, dtype=np.float64)
    loss = -float(log_softmax(logits)[label])
    grad = softmax(logits)
    grad[label] -= 1.0
    return loss, grad


def cross_entropy_mean(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch; gradient has the same ``(N, 2)`` shape."""
    n = len(logits)
    if n == 0:
        return 0.0, np.zeros((0, 2))
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(n)
    loss = -float(np.mean(log_softmax(logits)[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def smooth_l1(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed smooth-L1 (transition at 1) and its gradient with respect to ``pred``."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    ad = np.abs(d)
    quad = ad < 1.0
    loss = float(np.sum(np.where(quad, 0.5 * d * d, ad - 0.5)))
    grad = np.where(quad, d, np.sign(d))
    return loss, grad


def _centre_form(b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode_deltas_array(proposals: np.ndarray, gts: np.ndarray) -> np.ndarray:
    px, py, pw, ph = _centre_form(np.asarray(proposals, dtype=np.float64).reshape(-1, 4))
    gx, gy, gw, gh = _centre_form(np.asarray(gts, dtype=np.float64).reshape(-1, 4))
    return np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=1)


def decode_deltas_array(proposals: np.ndarray, deltas: np.ndarray, clamp: bool = True) -> np.ndarray:
    px, py, pw, ph = _centre_form(np.asarray(proposals, dtype=np.float64).reshape(-1, 4))
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    dw, dh = d[:, 2], d[:, 3]
    if clamp:
        dw = np.minimum(dw, MAX_LOG_SCALE)
        dh = np.minimum(dh, MAX_LOG_SCALE)
    cx = px + d[:, 0] * pw
    cy = py + d[:, 1] * ph
    w = pw * np.exp(dw)
    h = ph * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_deltas(proposal: Box, gt: Box) -> np.ndarray:
    """Regression target ``(dx, dy, log dw, log dh)`` taking ``proposal`` onto ``gt``."""
    return encode_deltas_array(proposal.as_array(), gt.as_array())[0]


def decode_deltas(proposal: Box, deltas: np.ndarray) -> Box:
    return Box.from_array(decode_deltas_array(proposal.as_array(), deltas, clamp=False)[0])


# ---------------------------------------------------------------------------
# Feature modulation
# ---------------------------------------------------------------------------


def _unit(v: np.ndarray) -> tuple[np.ndarray, float]:
    n = float(np.linalg.norm(v))
    if n < ZERO_NORM:
        raise ZeroVectorError("group mean feature has (near-)zero norm")
    return v / n, n


def _unit_backward(g: np.ndarray, unit: np.ndarray, norm: float) -> np.ndarray:
    return (g - unit * float(unit @ g)) / norm


def pair_term(u: np.ndarray, w: np.ndarray, kind: SimilarityKind) -> tuple[float, np.ndarray, np.ndarray]:
    """Dissimilarity of two mean vectors and its gradients w.r.t. each."""
    uh, nu = _unit(u)
    wh, nw = _unit(w)
    kind = SimilarityKind(kind)
    if kind is SimilarityKind.COSINE:
        c = float(uh @ wh)
        # d(1 - c)/du = -(w_hat - c u_hat) / |u|
        return 1.0 - c, -(wh - c * uh) / nu, -(uh - c * wh) / nw
    diff = uh - wh
    if kind is SimilarityKind.EUCLIDEAN:
        dist = float(np.linalg.norm(diff))
        g = diff / dist if dist > 0 else np.zeros_like(diff)
    else:
        dist = float(np.sum(np.abs(diff)))
        g = np.sign(diff)
    return dist, _unit_backward(g, uh, nu), _unit_backward(-g, wh, nw)


def msfm_loss(
    groups,
    fb_feats: np.ndarray,
    vb_feats: np.ndarray,
    kind: SimilarityKind | str = SimilarityKind.COSINE,
    mode: MSFMMode | str = MSFMMode.POS,
    negatives: tuple[Sequence[int], Sequence[int]] | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Feature-modulation loss over per-pedestrian groups.

    For each pedestrian the FB member features and the VB member features are
    averaged, and the loss is the mean over pedestrians of the dissimilarity
    between the two means (``1 - cos`` for the cosine kind; L2 or L1 distance
    between unit-normalised means otherwise).

    In ``pos_plus_neg`` mode, ``negatives`` gives the FB and VB negative
    indices; their means form one extra group, so the denominator is P + 1.

    Args:
        groups: :class:`~msfm.sampling.PositiveGroups`.
        fb_feats: ``(N_fb, D)`` FC12 activations of the sampled FB proposals.
        vb_feats: ``(N_vb, D)`` FC22 activations of the sampled VB proposals.

    Returns:
        ``(loss, d_fb_feats, d_vb_feats)``.

    Raises:
        ZeroVectorError: a group mean has norm below 1e-12.
        ValueError: no group to average over.
    """
    mode = MSFMMode(mode)
    pairs = [(groups.fb_members(p), groups.vb_members(p)) for p in groups.pedestrians()]
    if mode is MSFMMode.POS_PLUS_NEG and negatives is not None:
        fneg, vneg = negatives
        if len(fneg) and len(vneg):
            pairs.append((list(fneg), list(vneg)))
    if not pairs:
        raise ValueError("msfm_loss needs at least one group")
    if fb_feats.shape[1] != vb_feats.shape[1]:
        raise ValueError("FB and VB feature widths differ")

    d_fb = np.zeros_like(fb_feats, dtype=np.float64)
    d_vb = np.zeros_like(vb_feats, dtype=np.float64)
    total = 0.0
    scale = 1.0 / len(pairs)
    for fidx, vidx in pairs:
        u = fb_feats[fidx].mean(axis=0)
        w = vb_feats[vidx].mean(axis=0)
        t, gu, gw = pair_term(u, w, kind)
        total += t
        # each member receives the mean's gradient divided by the group size
        np.add.at(d_fb, fidx, scale * gu / len(fidx))
        np.add.at(d_vb, vidx, scale * gw / len(vidx))
    return total * scale, d_fb, d_vb


# ---------------------------------------------------------------------------
# Composite
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    rpn_cls: float = 0.0
    rpn_reg: float = 0.0
    fb_cls: float = 0.0
    fb_reg: float = 0.0
    vb_cls: float = 0.0
    msfmm: float = 0.0
    # only the cls_plus_reg ablation fills this
    vb_reg: float = 0.0

    @property
    def total(self) -> float:
        return (
            self.rpn_cls + self.rpn_reg + self.fb_cls + self.fb_reg + self.vb_cls + self.msfmm + self.vb_reg
        )

    def as_dict(self) -> dict[str, float]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["total"] = self.total
        return d

    def scaled(self, factor: float) -> "LossBreakdown":
        return LossBreakdown(**{f.name: getattr(self, f.name) * factor for f in fields(self)})

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})


TERMS = tuple(f.name for f in fields(LossBreakdown))


def total_loss(parts: LossBreakdown | Sequence[float], weights: dict[str, float] | None = None) -> LossBreakdown:
    """Combine loss terms by plain summation; ``weights`` (default all 1) is an opt-in extension."""
    if not isinstance(parts, LossBreakdown):
        parts = LossBreakdown(*[float(x) for x in parts])
    if weights:
        parts = LossBreakdown(**{k: getattr(parts, k) * weights.get(k, 1.0) for k in TERMS})
    return parts
