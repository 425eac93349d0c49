"""SGD-with-momentum training of the composite loss and the ablation harness.

One step draws ``images_per_step`` scenes. For each scene the proposal
stage runs with ground-truth jitter, both branches label and subsample the
proposals independently, and :func:`composite_loss` evaluates every enabled
term with its gradient. Labels, samples and pooled features are fixed data
for the step, so ``composite_loss`` is a pure function of the parameters
(which is what the gradient checker relies on).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Sequence

import numpy as np

from msfm import evaluation
from msfm.inference import InferenceConfig, detect
from msfm.losses import (
    LossBreakdown,
    MSFMMode,
    SimilarityKind,
    ZeroVectorError,
    cross_entropy_mean,
    encode_deltas_array,
    msfm_loss,
    pair_term,
    smooth_l1,
    total_loss,
)
from msfm.model import (
    GradientSet,
    ModelConfig,
    ModelParams,
    ProposalConfig,
    backward,
    fb_forward,
    roi_pool_many,
    rpn_forward,
    rpn_propose,
    scene_anchors,
    vb_forward,
)
from msfm.sampling import (
    FB,
    VB,
    PositiveGroups,
    assign,
    branch_seed,
    group_positives,
    sample,
    sample_indices,
    training_gts,
)
from msfm.synthdata import HO, R, Annotation, Scene, SubsetSpec, subset_filter

logger = logging.getLogger(__name__)

VB_MODES = ("off", "cls", "cls_plus_reg")
MSFM_MODES = ("off", "pos", "pos_plus_neg")


class DivergenceError(RuntimeError):
    pass


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    base_lr: float = 0.01
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (8, 11)
    images_per_step: int = 2
    seed: int = 0
    hidden_dim: int = 64
    pool_grid: int = 3
    vb_branch: str = "cls"
    msfmm: str = "pos"
    similarity: str = "cosine"
    sample_cap: int = 512
    pos_fraction: float = 0.25
    rpn_sample_cap: int = 256
    rpn_pos_fraction: float = 0.5
    proposal_top_k: int = 150
    jitter_per_gt: int = 8
    jitter_amplitude: float = 0.25
    nms_threshold: float = 0.5
    score_floor: float = 0.01
    eval_every_epoch: bool = True
    loss_weights: dict[str, float] | None = None

    def validate(self) -> None:
        if self.epochs < 0:
            raise TrainConfigError("epochs must be >= 0")
        if not self.base_lr > 0:
            raise TrainConfigError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise TrainConfigError("momentum must lie in [0, 1)")
        d = list(self.decay_epochs)
        if any(b <= a for a, b in zip(d, d[1:])):
            raise TrainConfigError("decay_epochs must be strictly increasing")
        if d and (d[0] < 0 or (self.epochs > 0 and d[-1] >= self.epochs)):
            raise TrainConfigError(f"decay_epochs {d} must lie in [0, epochs={self.epochs})")
        if self.images_per_step < 1:
            raise TrainConfigError("images_per_step must be >= 1")
        if self.vb_branch not in VB_MODES:
            raise TrainConfigError(f"vb_branch must be one of {VB_MODES}")
        if self.msfmm not in MSFM_MODES:
            raise TrainConfigError(f"msfmm must be one of {MSFM_MODES}")
        if self.msfmm != "off" and self.vb_branch == "off":
            raise TrainConfigError("msfmm needs the VB branch")
        try:
            SimilarityKind(self.similarity)
        except ValueError:
            raise TrainConfigError(f"unknown similarity {self.similarity!r}") from None
        if self.hidden_dim < 8:
            raise TrainConfigError("hidden_dim must be >= 8")

    def lr_at(self, epoch: int) -> float:
        k = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.base_lr * self.lr_decay_factor**k

    def model_config(self, channels: int) -> ModelConfig:
        return ModelConfig(channels=channels, hidden_dim=self.hidden_dim, pool_grid=self.pool_grid, init_seed=self.seed)

    def proposal_config(self, oracle_jitter: bool) -> ProposalConfig:
        return ProposalConfig(
            top_k=self.proposal_top_k,
            oracle_jitter=oracle_jitter,
            jitter_per_gt=self.jitter_per_gt,
            jitter_amplitude=self.jitter_amplitude,
        )

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(
            proposals=self.proposal_config(False),
            nms_threshold=self.nms_threshold,
            score_floor=self.score_floor,
            use_vb=self.vb_branch != "off",
        )

    def replace(self, **kw: Any) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise TrainConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "decay_epochs" in kw:
            kw["decay_epochs"] = tuple(int(x) for x in kw["decay_epochs"])
        return cls(**kw)


def _coerce(raw: str, default: Any) -> Any:
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise TrainConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw


def load_train_config(path: str | Path) -> TrainConfig:
    """Read a config file: a JSON object, or ``key = value`` lines (``#`` comments)."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return TrainConfig.from_dict(json.loads(text))
    defaults = TrainConfig()
    kw: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TrainConfigError(f"{path}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not hasattr(defaults, key):
            raise TrainConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key == "loss_weights":
            kw[key] = json.loads(raw)
        else:
            kw[key] = _coerce(raw, getattr(defaults, key))
    return defaults.replace(**kw)


# ---------------------------------------------------------------------------
# Per-scene training data
# ---------------------------------------------------------------------------


@dataclass
class BranchBatch:
    pooled: np.ndarray  # (N, F)
    labels: np.ndarray  # (N,) 1 = pedestrian
    reg_targets: np.ndarray  # (N_pos, 4) for the positive rows, in order
    pos_index: np.ndarray  # (N_pos,)


@dataclass
class SceneBatch:
    rpn_feats: np.ndarray
    rpn_shape_index: np.ndarray
    rpn_labels: np.ndarray
    rpn_targets: np.ndarray
    rpn_pos_index: np.ndarray
    fb: BranchBatch
    vb: BranchBatch | None
    vb_reg_targets: np.ndarray | None
    groups: PositiveGroups
    fb_negatives: np.ndarray
    vb_negatives: np.ndarray


def _branch_batch(scene: Scene, sampled, gts: np.ndarray, grid: int) -> BranchBatch:
    pos = np.flatnonzero(sampled.positive)
    targets = encode_deltas_array(sampled.boxes[pos], gts[sampled.gt_index[pos]]) if len(pos) else np.zeros((0, 4))
    pooled = roi_pool_many(scene, sampled.boxes, grid) if len(sampled) else np.zeros((0, scene.channels * grid * grid))
    return BranchBatch(pooled, sampled.positive.astype(np.int64), targets, pos)


def _rpn_assignment(scene: Scene, params: ModelParams, full: np.ndarray):
    key = ("rpn_assign", params.config.anchor_heights, params.config.anchor_stride)
    cached = scene.cache.get(key)
    if cached is None:
        cached = assign(scene_anchors(scene, params.config).boxes, full, "rpn")
        scene.cache[key] = cached
    return cached


def prepare_scene(
    params: ModelParams, scene: Scene, cfg: TrainConfig, step_key: int, rng: np.random.Generator
) -> SceneBatch:
    """Run the proposal stage and both samplers for one scene."""
    full, vis, _ = training_gts(scene.annotations)
    anchors = scene_anchors(scene, params.config)
    rpn_out = rpn_forward(params, anchors.features, anchors.shape_index)

    rpn_assigned = _rpn_assignment(scene, params, full)
    rseed = branch_seed(cfg.seed, scene.id, "rpn", step_key)
    rpn_keep = sample_indices(rpn_assigned, cfg.rpn_sample_cap, cfg.rpn_pos_fraction, rseed)
    rs = rpn_assigned.take(rpn_keep)
    rpn_pos = np.flatnonzero(rs.positive)
    rpn_targets = (
        encode_deltas_array(rs.boxes[rpn_pos], full[rs.gt_index[rpn_pos]]) if len(rpn_pos) else np.zeros((0, 4))
    )

    gt_boxes = np.concatenate([full, vis]) if cfg.vb_branch != "off" else full
    props = rpn_propose(params, scene, cfg.proposal_config(True), gt_boxes=gt_boxes, rng=rng, rpn_out=rpn_out)

    fb_s = sample(assign(props.boxes, full, FB), cfg.sample_cap, cfg.pos_fraction, branch_seed(cfg.seed, scene.id, FB, step_key))
    fb = _branch_batch(scene, fb_s, full, params.config.pool_grid)
    vb = None
    vb_targets = None
    groups = PositiveGroups()
    vb_neg = np.zeros(0, dtype=np.int64)
    if cfg.vb_branch != "off":
        vb_s = sample(assign(props.boxes, vis, VB), cfg.sample_cap, cfg.pos_fraction, branch_seed(cfg.seed, scene.id, VB, step_key))
        vb = _branch_batch(scene, vb_s, vis, params.config.pool_grid)
        vb_targets = vb.reg_targets
        groups = group_positives(fb_s, vb_s)
        vb_neg = np.flatnonzero(~vb_s.positive)
    return SceneBatch(
        rpn_feats=anchors.features[rpn_keep],
        rpn_shape_index=anchors.shape_index[rpn_keep],
        rpn_labels=rs.positive.astype(np.int64),
        rpn_targets=rpn_targets,
        rpn_pos_index=rpn_pos,
        fb=fb,
        vb=vb,
        vb_reg_targets=vb_targets,
        groups=groups,
        fb_negatives=np.flatnonzero(~fb_s.positive),
        vb_negatives=vb_neg,
    )


# ---------------------------------------------------------------------------
# Composite loss
# ---------------------------------------------------------------------------


def _reg_term(deltas: np.ndarray, pos_index: np.ndarray, targets: np.ndarray, n: int) -> tuple[float, np.ndarray]:
    d = np.zeros_like(deltas)
    if len(pos_index) == 0 or n == 0:
        return 0.0, d
    loss, g = smooth_l1(deltas[pos_index], targets)
    d[pos_index] = g / n
    return loss / n, d


def scene_loss(
    params: ModelParams,
    batch: SceneBatch,
    cfg: TrainConfig,
    grads: GradientSet | None = None,
    weight: float = 1.0,
) -> LossBreakdown:
    """Evaluate every enabled term on one scene and accumulate ``weight * grad``.

    Terms whose loss weight is 0 are skipped; with ``grads`` None only the
    value is computed.
    """
    parts = LossBreakdown()
    w = cfg.loss_weights or {}

    def on(term: str) -> bool:
        return w.get(term, 1.0) != 0.0

    def scaled(g: np.ndarray | None, term: str) -> np.ndarray | None:
        return None if g is None else weight * w.get(term, 1.0) * g

    n_rpn = len(batch.rpn_labels)
    if n_rpn and (on("rpn_cls") or on("rpn_reg")):
        rpn = rpn_forward(params, batch.rpn_feats, batch.rpn_shape_index)
        d_cls = d_reg = None
        if on("rpn_cls"):
            parts.rpn_cls, d_cls = cross_entropy_mean(rpn.cls_logits, batch.rpn_labels)
        if on("rpn_reg"):
            parts.rpn_reg, d_reg = _reg_term(rpn.reg_deltas, batch.rpn_pos_index, batch.rpn_targets, n_rpn)
        if grads is not None:
            backward(params, rpn.tape, d_cls=scaled(d_cls, "rpn_cls"), d_reg=scaled(d_reg, "rpn_reg"), grads=grads)

    use_msfm = cfg.msfmm != "off" and on("msfmm")
    n_fb = len(batch.fb.labels)
    fb_out = fb_forward(params, batch.fb.pooled) if n_fb and (on("fb_cls") or on("fb_reg") or use_msfm) else None
    d_fb_cls = d_fb_reg = None
    if fb_out is not None and on("fb_cls"):
        parts.fb_cls, d_fb_cls = cross_entropy_mean(fb_out.cls_logits, batch.fb.labels)
    if fb_out is not None and on("fb_reg"):
        parts.fb_reg, d_fb_reg = _reg_term(fb_out.reg_deltas, batch.fb.pos_index, batch.fb.reg_targets, n_fb)

    vb_out = None
    d_vb_cls = d_vb_reg = None
    with_vb_reg = cfg.vb_branch == "cls_plus_reg"
    if batch.vb is not None and len(batch.vb.labels) and (on("vb_cls") or (with_vb_reg and on("vb_reg")) or use_msfm):
        vb_out = vb_forward(params, batch.vb.pooled, with_reg=with_vb_reg)
        n_vb = len(batch.vb.labels)
        if on("vb_cls"):
            parts.vb_cls, d_vb_cls = cross_entropy_mean(vb_out.cls_logits, batch.vb.labels)
        if with_vb_reg and on("vb_reg"):
            parts.vb_reg, d_vb_reg = _reg_term(vb_out.reg_deltas, batch.vb.pos_index, batch.vb_reg_targets, n_vb)

    d_fb_feat = d_vb_feat = None
    if use_msfm and fb_out is not None and vb_out is not None:
        groups = _usable_groups(batch.groups, fb_out.fc2_out, vb_out.fc2_out)
        negatives = None
        if cfg.msfmm == "pos_plus_neg":
            fneg, vneg = batch.fb_negatives, batch.vb_negatives
            if len(fneg) and len(vneg) and _norm_ok(fb_out.fc2_out[fneg]) and _norm_ok(vb_out.fc2_out[vneg]):
                negatives = (fneg, vneg)
        if groups.P or negatives is not None:
            parts.msfmm, d_fb_feat, d_vb_feat = msfm_loss(
                groups, fb_out.fc2_out, vb_out.fc2_out, cfg.similarity, MSFMMode(cfg.msfmm), negatives
            )

    if grads is not None and fb_out is not None:
        backward(
            params,
            fb_out.tape,
            d_cls=scaled(d_fb_cls, "fb_cls"),
            d_reg=scaled(d_fb_reg, "fb_reg"),
            d_feat=scaled(d_fb_feat, "msfmm"),
            grads=grads,
        )
    if grads is not None and vb_out is not None:
        backward(
            params,
            vb_out.tape,
            d_cls=scaled(d_vb_cls, "vb_cls"),
            d_reg=scaled(d_vb_reg, "vb_reg"),
            d_feat=scaled(d_vb_feat, "msfmm"),
            grads=grads,
        )
    return total_loss(parts, w or None)


def _norm_ok(feats: np.ndarray) -> bool:
    return float(np.linalg.norm(feats.mean(axis=0))) >= 1e-12


def _usable_groups(groups: PositiveGroups, fb_feats: np.ndarray, vb_feats: np.ndarray) -> PositiveGroups:
    # groups whose mean feature is exactly zero (all-dead relu) carry no direction
    keep = {
        ped: members
        for ped, members in groups.groups.items()
        if _norm_ok(fb_feats[members[0]]) and _norm_ok(vb_feats[members[1]])
    }
    return PositiveGroups(keep)


def composite_loss(
    params: ModelParams, batches: Sequence[SceneBatch], cfg: TrainConfig
) -> tuple[LossBreakdown, GradientSet]:
    """Mean over scenes of the summed loss terms, with its full gradient."""
    grads = params.zeros_like()
    total = LossBreakdown()
    weight = 1.0 / max(1, len(batches))
    for b in batches:
        total = total + scene_loss(params, b, cfg, grads, weight)
    return total.scaled(weight), grads


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


def sgd_step(
    p: ModelParams, g: GradientSet, velocity: GradientSet, lr: float, momentum: float
) -> tuple[ModelParams, GradientSet]:
    """Heavy-ball update ``v <- momentum * v + g; p <- p - lr * v`` (returns new objects)."""
    new_v = {k: momentum * velocity[k] + g[k] for k in p.keys()}
    new_p = {k: p[k] - lr * new_v[k] for k in p.keys()}
    return ModelParams(new_p, p.config), GradientSet(new_v, p.config)


@dataclass
class TrainHistory:
    steps: list[LossBreakdown] = field(default_factory=list)
    epoch_lr: list[float] = field(default_factory=list)
    epoch_mr: list[dict[str, float]] = field(default_factory=list)
    steps_per_epoch: int = 0
    params: ModelParams | None = None
    config: TrainConfig | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict() if self.config else None,
            "steps_per_epoch": self.steps_per_epoch,
            "epoch_lr": self.epoch_lr,
            "epoch_mr": self.epoch_mr,
            "steps": [s.as_dict() for s in self.steps],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "TrainHistory":
        d = json.loads(Path(path).read_text())
        steps = [LossBreakdown(**{k: v for k, v in s.items() if k != "total"}) for s in d["steps"]]
        cfg = TrainConfig.from_dict(d["config"]) if d.get("config") else None
        return cls(steps, d["epoch_lr"], d["epoch_mr"], d["steps_per_epoch"], None, cfg)


def evaluate_params(
    params: ModelParams, scenes: Sequence[Scene], cfg: TrainConfig, subsets: Sequence[SubsetSpec] = (R, HO)
) -> dict[str, float]:
    per_image = [(detect(s, params, cfg.inference_config()), s.annotations) for s in scenes]
    out = {}
    for sub in subsets:
        try:
            out[sub.name] = evaluation.log_avg_mr(evaluation.curve(per_image, sub))
        except evaluation.NoTargetsError:
            out[sub.name] = float("nan")
    return out


def train(
    dataset: Sequence[Scene],
    cfg: TrainConfig,
    val: Sequence[Scene] | None = None,
    init: ModelParams | None = None,
) -> TrainHistory:
    """Train from ``init`` (default: seeded initialisation) and return the history.

    Raises:
        TrainConfigError: invalid configuration or empty dataset.
        DivergenceError: a step produced a non-finite loss.
    """
    cfg.validate()
    if not dataset:
        raise TrainConfigError("dataset is empty")
    params = init.copy() if init is not None else ModelParams.init(cfg.model_config(dataset[0].channels), cfg.seed)
    history = TrainHistory(params=params, config=cfg)
    steps_per_epoch = (len(dataset) + cfg.images_per_step - 1) // cfg.images_per_step
    history.steps_per_epoch = steps_per_epoch if cfg.epochs else 0
    velocity = params.zeros_like()
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        history.epoch_lr.append(lr)
        order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(len(dataset))
        t0 = time.perf_counter()
        for k in range(steps_per_epoch):
            idx = order[k * cfg.images_per_step : (k + 1) * cfg.images_per_step]
            rng = np.random.default_rng([cfg.seed, step, 11])
            batches = [prepare_scene(params, dataset[i], cfg, step, rng) for i in idx]
            parts, grads = composite_loss(params, batches, cfg)
            if not np.isfinite(parts.total) or not grads.all_finite():
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}: {parts.as_dict()}")
            params, velocity = sgd_step(params, grads, velocity, lr, cfg.momentum)
            history.steps.append(parts)
            step += 1
        if val is not None and (cfg.eval_every_epoch or epoch == cfg.epochs - 1):
            history.epoch_mr.append(evaluate_params(params, val, cfg))
        logger.info(
            "epoch %d lr %.4g loss %.4f (%.1fs)",
            epoch,
            lr,
            float(np.mean([s.total for s in history.steps[-steps_per_epoch:]])),
            time.perf_counter() - t0,
        )
    history.params = params
    return history


# ---------------------------------------------------------------------------
# Feature similarity and ablations
# ---------------------------------------------------------------------------


class NoGroupsError(ValueError):
    pass


def feature_similarity_report(
    params: ModelParams, scenes: Sequence[Scene], subset: SubsetSpec = HO, cfg: TrainConfig | None = None, seed: int = 0
) -> float:
    """Mean cosine between FB-group and VB-group mean FC features.

    Groups are built per pedestrian of ``subset`` from jittered ground-truth
    proposals (no subsampling), exactly as in training.
    """
    cfg = cfg or TrainConfig()
    sims = []
    pcfg = cfg.proposal_config(True)
    for n, scene in enumerate(scenes):
        anns: list[Annotation] = [a for a in scene.annotations if not a.ignore and subset_filter(a, subset)]
        if not anns:
            continue
        full = np.array([a.full.as_list() for a in anns])
        vis = np.array([a.visible.as_list() for a in anns])
        rng = np.random.default_rng([seed, n, 13])
        props = rpn_propose(params, scene, pcfg, gt_boxes=np.concatenate([full, vis]), rng=rng)
        fb_a = assign(props.boxes, full, FB)
        vb_a = assign(props.boxes, vis, VB)
        groups = group_positives(fb_a, vb_a)
        if not groups.P:
            continue
        pooled = roi_pool_many(scene, props.boxes, params.config.pool_grid)
        f = fb_forward(params, pooled).fc2_out
        v = vb_forward(params, pooled).fc2_out
        for ped in groups.pedestrians():
            try:
                t, _, _ = pair_term(f[groups.fb_members(ped)].mean(0), v[groups.vb_members(ped)].mean(0), SimilarityKind.COSINE)
            except ZeroVectorError:
                continue
            sims.append(1.0 - t)
    if not sims:
        raise NoGroupsError(f"no {subset.name} pedestrian has proposals in both branches")
    return float(np.mean(sims))


TABLE1_GRID: list[tuple[str, dict[str, Any]]] = [
    ("baseline", {"vb_branch": "off", "msfmm": "off"}),
    ("vb_cls_reg", {"vb_branch": "cls_plus_reg", "msfmm": "off"}),
    ("vb_cls", {"vb_branch": "cls", "msfmm": "off"}),
    ("msfmm_pos_neg", {"vb_branch": "cls", "msfmm": "pos_plus_neg", "similarity": "cosine"}),
    ("msfmm_pos", {"vb_branch": "cls", "msfmm": "pos", "similarity": "cosine"}),
]

TABLE2_GRID: list[tuple[str, dict[str, Any]]] = [
    ("manhattan", {"vb_branch": "cls", "msfmm": "pos", "similarity": "manhattan"}),
    ("euclidean", {"vb_branch": "cls", "msfmm": "pos", "similarity": "euclidean"}),
    ("cosine", {"vb_branch": "cls", "msfmm": "pos", "similarity": "cosine"}),
]

GRIDS = {"table1": TABLE1_GRID, "table2": TABLE2_GRID}


@dataclass
class AblationCell:
    config: str
    subset: str
    values: list[float]
    seeds: list[int]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


@dataclass
class AblationResult:
    cells: list[AblationCell]
    similarity: dict[str, list[float]]
    histories: dict[tuple[str, int], TrainHistory] = field(default_factory=dict)

    def cell(self, config: str, subset: str) -> AblationCell:
        for c in self.cells:
            if c.config == config and c.subset == subset:
                return c
        raise KeyError((config, subset))

    def write_csv(self, dest: str | Path | IO[str]) -> None:
        """Write ``config, subset, mean_mr, stddev, seeds`` rows (MR in percent)."""
        if isinstance(dest, (str, Path)):
            with open(dest, "w", newline="") as fh:
                self.write_csv(fh)
            return
        w = csv.writer(dest)
        w.writerow(["config", "subset", "mean_mr", "stddev", "seeds"])
        for c in self.cells:
            w.writerow([c.config, c.subset, f"{100 * c.mean:.4f}", f"{100 * c.std:.4f}", " ".join(map(str, c.seeds))])


def ablate(
    train_scenes: Sequence[Scene],
    val_scenes: Sequence[Scene],
    base_cfg: TrainConfig,
    grid: Sequence[tuple[str, dict[str, Any]]],
    seeds: Sequence[int],
    subsets: Sequence[SubsetSpec] = (R, HO),
    keep_histories: bool = False,
) -> AblationResult:
    """Train every grid configuration under every seed and tabulate validation MR.

    Configurations with a VB branch also record the held-out feature similarity
    on the HO subset.
    """
    cells: list[AblationCell] = []
    similarity: dict[str, list[float]] = {}
    histories = {}
    # rows that resolve to the same configuration (the table2 cosine row is table1's
    # msfmm_pos) are trained once
    done: dict[str, tuple[dict[str, float], float | None, TrainHistory]] = {}
    for name, overrides in grid:
        per_subset: dict[str, list[float]] = {s.name: [] for s in subsets}
        for seed in seeds:
            cfg = base_cfg.replace(seed=seed, eval_every_epoch=False, **overrides)
            key = json.dumps(cfg.to_dict(), sort_keys=True)
            if key not in done:
                hist = train(train_scenes, cfg, None)
                mr = evaluate_params(hist.params, val_scenes, cfg, subsets)
                sim = feature_similarity_report(hist.params, val_scenes, HO, cfg, seed) if cfg.vb_branch != "off" else None
                done[key] = (mr, sim, hist)
                logger.info("ablation %s seed %d: %s", name, seed, mr)
            mr, sim, hist = done[key]
            for s in subsets:
                per_subset[s.name].append(mr[s.name])
            if sim is not None:
                similarity.setdefault(name, []).append(sim)
            if keep_histories:
                histories[(name, seed)] = hist
        for s in subsets:
            cells.append(AblationCell(name, s.name, per_subset[s.name], list(seeds)))
    return AblationResult(cells, similarity, histories)
