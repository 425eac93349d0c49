"""Finite-difference check of every composite-loss term on small random problems.

Each problem is a synthetic :class:`~msfm.trainer.SceneBatch` (random pooled
features, labels, regression targets and positive groups) so the check runs
through the same ``scene_loss`` code the trainer uses. One term at a time is
isolated with one-hot loss weights. Inputs are resampled until every ReLU
pre-activation, smooth-L1 residual and Manhattan coordinate difference sits
at least ``MARGIN`` away from its kink, since a finite difference straddling
a kink is meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from msfm.losses import TERMS, MSFMMode, SimilarityKind
from msfm.model import (
    FB,
    RPN,
    VB,
    GradCheckReport,
    ModelConfig,
    ModelParams,
    fb_forward,
    grad_check,
    rpn_forward,
    vb_forward,
)
from msfm.sampling import PositiveGroups
from msfm.trainer import BranchBatch, SceneBatch, TrainConfig, scene_loss

TOLERANCE = 1e-4
EPS = 1e-4
MARGIN = 2e-2
# unit-mean coordinates move by about eps per perturbation, so a smaller margin suffices
SIGN_MARGIN = 5e-3

N_ROWS = 8
N_POS = 4
N_ANCHORS = 12


@dataclass(frozen=True)
class TermSpec:
    name: str
    term: str
    vb_branch: str = "cls"
    msfmm: str = "off"
    similarity: str = "cosine"
    prefixes: tuple[str, ...] = ()


def term_specs() -> list[TermSpec]:
    specs = [
        TermSpec("rpn_cls", "rpn_cls", prefixes=(RPN,)),
        TermSpec("rpn_reg", "rpn_reg", prefixes=(RPN,)),
        TermSpec("fb_cls", "fb_cls", prefixes=(FB,)),
        TermSpec("fb_reg", "fb_reg", prefixes=(FB,)),
        TermSpec("vb_cls", "vb_cls", prefixes=(VB,)),
        TermSpec("vb_reg", "vb_reg", vb_branch="cls_plus_reg", prefixes=(VB,)),
    ]
    for mode in MSFMMode:
        for kind in SimilarityKind:
            specs.append(
                TermSpec(f"msfmm_{kind.value}_{mode.value}", "msfmm", msfmm=mode.value, similarity=kind.value, prefixes=(f"{FB}_fc", f"{VB}_fc"))
            )
    return specs


def _away_from_kinks(x: np.ndarray, p: ModelParams, branch: str) -> np.ndarray:
    """Mask of rows whose pre-activations all clear the ReLU kink."""
    z1 = x @ p[f"{branch}_fc1_w"].T + p[f"{branch}_fc1_b"]
    z2 = np.maximum(z1, 0.0) @ p[f"{branch}_fc2_w"].T + p[f"{branch}_fc2_b"]
    return (np.abs(z1).min(axis=1) > MARGIN) & (np.abs(z2).min(axis=1) > MARGIN)


def _rows(rng: np.random.Generator, p: ModelParams, branch: str, n: int) -> np.ndarray:
    f = p.config.pooled_dim
    out = np.zeros((0, f))
    while len(out) < n:
        cand = rng.uniform(0.0, 1.0, size=(4 * n, f))
        out = np.concatenate([out, cand[_away_from_kinks(cand, p, branch)]])
    return out[:n]


def _targets(rng: np.random.Generator, pred: np.ndarray) -> np.ndarray:
    """Regression targets whose residuals avoid the smooth-L1 transition at 1."""
    t = pred + rng.normal(0.0, 1.0, size=pred.shape)
    bad = np.abs(np.abs(pred - t) - 1.0) < MARGIN
    while bad.any():
        t[bad] = pred[bad] + rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(np.abs(pred - t) - 1.0) < MARGIN
    return t


def _manhattan_safe(p: ModelParams, batch: SceneBatch) -> bool:
    f = fb_forward(p, batch.fb.pooled).fc2_out
    v = vb_forward(p, batch.vb.pooled).fc2_out
    pairs = [(batch.groups.fb_members(i), batch.groups.vb_members(i)) for i in batch.groups.pedestrians()]
    pairs.append((batch.fb_negatives, batch.vb_negatives))
    for fi, vi in pairs:
        u = f[fi].mean(0)
        w = v[vi].mean(0)
        diff = u / np.linalg.norm(u) - w / np.linalg.norm(w)
        # coordinates dead in both means stay exactly zero under perturbation
        live = (u != 0) | (w != 0)
        if np.abs(diff[live]).min() < SIGN_MARGIN:
            return False
    return True


def make_problem(dim: int, seed: int) -> tuple[ModelParams, SceneBatch]:
    """Random parameters at hidden width ``dim`` and a matching synthetic batch."""
    rng = np.random.default_rng([seed, dim, 5])
    cfg = ModelConfig(channels=2, hidden_dim=dim, pool_grid=2, init_seed=seed)
    base = ModelParams.init(cfg, seed)
    arrays = {k: v.copy() for k, v in base.items()}
    for k in arrays:
        # larger head weights than the training init so every term has sizeable gradients
        if k.endswith("_b"):
            arrays[k] = rng.normal(0.0, 0.1, size=arrays[k].shape)
        elif "_cls_w" in k or "_reg_w" in k:
            arrays[k] = rng.normal(0.0, 0.5, size=arrays[k].shape)
    p = ModelParams(arrays, cfg)

    groups = PositiveGroups({0: ([0, 1], [0]), 1: ([2, 3], [1, 2, 3])})
    for _ in range(100):
        fb_x = _rows(rng, p, FB, N_ROWS)
        vb_x = _rows(rng, p, VB, N_ROWS)
        labels = np.array([1] * N_POS + [0] * (N_ROWS - N_POS))
        pos = np.arange(N_POS)
        rpn_feats = rng.uniform(0.0, 1.0, size=(N_ANCHORS, cfg.rpn_dim))
        shape_index = np.arange(N_ANCHORS) % len(cfg.anchor_heights)
        batch = SceneBatch(
            rpn_feats=rpn_feats,
            rpn_shape_index=shape_index,
            rpn_labels=(np.arange(N_ANCHORS) % 2).astype(np.int64),
            rpn_targets=np.zeros((N_ANCHORS // 2, 4)),
            rpn_pos_index=np.flatnonzero(np.arange(N_ANCHORS) % 2),
            fb=BranchBatch(fb_x, labels, np.zeros((N_POS, 4)), pos),
            vb=BranchBatch(vb_x, labels.copy(), np.zeros((N_POS, 4)), pos.copy()),
            vb_reg_targets=np.zeros((N_POS, 4)),
            groups=groups,
            fb_negatives=np.arange(N_POS, N_ROWS),
            vb_negatives=np.arange(N_POS, N_ROWS),
        )
        _fill_targets(rng, p, batch)
        if _manhattan_safe(p, batch):
            return p, batch
    raise RuntimeError(f"could not build a kink-free problem for seed {seed}")


def _fill_targets(rng: np.random.Generator, p: ModelParams, batch: SceneBatch) -> None:
    rpn = rpn_forward(p, batch.rpn_feats, batch.rpn_shape_index)
    batch.rpn_targets = _targets(rng, rpn.reg_deltas[batch.rpn_pos_index])
    fb = fb_forward(p, batch.fb.pooled)
    batch.fb.reg_targets = _targets(rng, fb.reg_deltas[batch.fb.pos_index])
    vb = vb_forward(p, batch.vb.pooled, with_reg=True)
    batch.vb_reg_targets = _targets(rng, vb.reg_deltas[batch.vb.pos_index])
    batch.vb.reg_targets = batch.vb_reg_targets


def check_term(spec: TermSpec, p: ModelParams, batch: SceneBatch, tolerance: float = TOLERANCE) -> GradCheckReport:
    cfg = TrainConfig(
        vb_branch=spec.vb_branch,
        msfmm=spec.msfmm,
        similarity=spec.similarity,
        hidden_dim=p.hidden_dim,
        loss_weights={t: float(t == spec.term) for t in TERMS},
    )

    def loss_fn(q: ModelParams):
        grads = q.zeros_like()
        parts = scene_loss(q, batch, cfg, grads)
        return parts.total, grads

    def value_fn(q: ModelParams) -> float:
        return scene_loss(q, batch, cfg).total

    keys = [k for k in p.keys() if k.startswith(spec.prefixes)]
    return grad_check(loss_fn, p, tolerance=tolerance, eps=EPS, keys=keys, value_fn=value_fn)


def run_gradcheck(dim: int = 16, seeds=(0,), tolerance: float = TOLERANCE) -> dict[str, float]:
    """Worst relative error per term over all ``seeds``."""
    worst = {s.name: 0.0 for s in term_specs()}
    for seed in seeds:
        p, batch = make_problem(dim, seed)
        for spec in term_specs():
            rep = check_term(spec, p, batch, tolerance)
            worst[spec.name] = max(worst[spec.name], rep.max_rel_error)
    return worst
