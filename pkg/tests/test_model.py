import numpy as np
import pytest

from msfm.geometry import Box, iou_matrix
from msfm.losses import cross_entropy_mean
from msfm.model import (
    FB,
    VB,
    DegenerateBoxError,
    GradientSet,
    ModelConfig,
    ModelParams,
    ProposalConfig,
    TapeMismatchError,
    backward,
    fb_forward,
    grad_check,
    load_checkpoint,
    roi_pool,
    roi_pool_many,
    rpn_propose,
    save_checkpoint,
    scene_anchors,
    vb_forward,
)
from msfm.synthdata import GeneratorConfig, Scene, generate_scene


def grid_scene(grid, stride=1.0):
    c, h, w = grid.shape
    return Scene("t", Box(0, 0, w * stride, h * stride), grid.astype(float), [], 0, stride)


class TestRoIPool:
    def test_constant_field(self):
        s = grid_scene(np.full((3, 10, 10), 2.5))
        np.testing.assert_array_equal(roi_pool(s, Box(1.2, 0.7, 8.9, 9.1), 3), np.full(27, 2.5))

    def test_single_cell(self):
        g = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
        out = roi_pool(grid_scene(g), Box(1, 2, 2, 3), 1)
        np.testing.assert_array_equal(out, g[:, 2, 1])

    def test_two_by_two_mean(self):
        g = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        assert roi_pool(grid_scene(g), Box(0, 0, 2, 2), 1).tolist() == [2.5]

    def test_channel_major_layout(self):
        g = np.array([[[1.0, 2.0], [3.0, 4.0]], [[10.0, 20.0], [30.0, 40.0]]])
        out = roi_pool(grid_scene(g), Box(0, 0, 2, 2), 2)
        assert out.tolist() == [1, 2, 3, 4, 10, 20, 30, 40]

    def test_empty_subcell_is_zero(self):
        g = np.ones((1, 4, 4))
        # a 1x1 box split 3x3: only the sub-cell holding the centre is populated
        out = roi_pool(grid_scene(g), Box(0, 0, 1, 1), 3)
        assert out.sum() == 1.0 and np.count_nonzero(out) == 1

    def test_matches_direct_average(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(2, 12, 16))
        s = grid_scene(g, stride=4.0)
        for _ in range(30):
            x1, y1 = rng.uniform(0, 40), rng.uniform(0, 30)
            b = Box(x1, y1, x1 + rng.uniform(6, 24), y1 + rng.uniform(6, 18))
            out = roi_pool(s, b, 2).reshape(2, 2, 2)
            xs, ys = np.linspace(b.x1, b.x2, 3), np.linspace(b.y1, b.y2, 3)
            cy, cx = (np.arange(12) + 0.5) * 4, (np.arange(16) + 0.5) * 4
            for i in range(2):
                for j in range(2):
                    rows = (cy >= ys[i]) & (cy < ys[i + 1])
                    cols = (cx >= xs[j]) & (cx < xs[j + 1])
                    cells = g[:, rows][:, :, cols]
                    ref = cells.mean(axis=(1, 2)) if cells.size else np.zeros(2)
                    np.testing.assert_allclose(out[:, i, j], ref, atol=1e-12)

    def test_degenerate(self):
        s = grid_scene(np.ones((1, 4, 4)))
        with pytest.raises(DegenerateBoxError):
            roi_pool(s, Box(10, 10, 12, 12), 2)


def tiny_config(d=1):
    return ModelConfig(channels=1, hidden_dim=d, pool_grid=1)


class TestHeads:
    def test_zero_network(self):
        p = ModelParams.zeros(ModelConfig(hidden_dim=8))
        x = np.ones((3, p.config.pooled_dim))
        out = fb_forward(p, x)
        assert np.all(out.cls_logits == 0) and np.all(out.reg_deltas == 0) and np.all(out.fc2_out == 0)
        assert np.all(vb_forward(p, x).cls_logits == 0)

    def test_hand_trace_d1(self):
        # fc1: relu(3*2 - 1) = 5; fc2: relu(-0.5*5 + 4) = 1.5; logits (2*1.5, -1*1.5 + 0.25)
        p = ModelParams.zeros(tiny_config())
        for br in (FB, VB):
            p.arrays[f"{br}_fc1_w"][:] = 3.0
            p.arrays[f"{br}_fc1_b"][:] = -1.0
            p.arrays[f"{br}_fc2_w"][:] = -0.5
            p.arrays[f"{br}_fc2_b"][:] = 4.0
            p.arrays[f"{br}_cls_w"][:] = [[2.0], [-1.0]]
            p.arrays[f"{br}_cls_b"][:] = [0.0, 0.25]
        p.arrays["fb_reg_w"][:] = [[1.0], [0.0], [-2.0], [0.5]]
        fb = fb_forward(p, np.array([[2.0]]))
        np.testing.assert_allclose(fb.tape.h1, [[5.0]])
        np.testing.assert_allclose(fb.fc2_out, [[1.5]])
        np.testing.assert_allclose(fb.cls_logits, [[3.0, -1.25]])
        np.testing.assert_allclose(fb.reg_deltas, [[1.5, 0.0, -3.0, 0.75]])
        vb = vb_forward(p, np.array([[2.0]]))
        np.testing.assert_allclose(vb.cls_logits, [[3.0, -1.25]])
        assert vb.reg_deltas is None

    def test_feature_width(self):
        p = ModelParams.init(ModelConfig(hidden_dim=16), 0)
        x = np.random.default_rng(0).random((4, p.config.pooled_dim))
        assert fb_forward(p, x).fc2_out.shape == (4, 16)

    def test_hidden_width_validated(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden_dim=0)


class TestBackward:
    def setup_method(self):
        self.p = ModelParams.init(ModelConfig(hidden_dim=8), 1)
        self.x = np.random.default_rng(2).random((5, self.p.config.pooled_dim))

    def test_zero_upstream(self):
        out = fb_forward(self.p, self.x)
        g = backward(self.p, out.tape, d_cls=np.zeros((5, 2)), d_reg=np.zeros((5, 4)))
        assert g.max_abs() == 0.0

    def test_branch_separation(self):
        out = fb_forward(self.p, self.x)
        _, d = cross_entropy_mean(out.cls_logits, np.array([1, 0, 1, 0, 0]))
        g = backward(self.p, out.tape, d_cls=d)
        assert all(np.all(g[k] == 0) for k in g.keys() if k.startswith(VB) or k.startswith("rpn"))
        assert np.any(g["fb_fc1_w"] != 0)

    def test_tape_mismatch(self):
        out = vb_forward(self.p, self.x)
        with pytest.raises(TapeMismatchError):
            backward(self.p, out.tape, d_cls=np.zeros((4, 2)))
        with pytest.raises(TapeMismatchError):
            backward(self.p, out.tape, d_reg=np.zeros((5, 4)))
        with pytest.raises(TapeMismatchError):
            backward(self.p, out.tape, d_feat=np.zeros((5, 3)))

    def test_fc2_out_feeds_head(self):
        out = fb_forward(self.p, self.x)
        np.testing.assert_array_equal(out.fc2_out, out.tape.h2)
        np.testing.assert_allclose(out.cls_logits, out.fc2_out @ self.p["fb_cls_w"].T + self.p["fb_cls_b"])


class TestGradCheck:
    def test_quadratic(self):
        cfg = ModelConfig(hidden_dim=8)
        p = ModelParams.init(cfg, 0)
        target = {k: np.full(v.shape, 0.3) for k, v in p.items()}

        def loss(q):
            val = sum(float(np.sum((q[k] - target[k]) ** 2)) for k in q.keys())
            return val, GradientSet({k: 2 * (q[k] - target[k]) for k in q.keys()}, cfg)

        rep = grad_check(loss, p, max_coords=500)
        assert rep.max_rel_error < 1e-8 and rep.passed and rep.n_checked == 500

    def test_detects_wrong_gradient(self):
        cfg = ModelConfig(hidden_dim=8)
        p = ModelParams.init(cfg, 0)

        def loss(q):
            return float(np.sum(q["fb_cls_b"] ** 2)), GradientSet({k: np.zeros_like(v) for k, v in q.items()}, cfg)

        p.arrays["fb_cls_b"][:] = 1.0
        assert not grad_check(loss, p, keys=["fb_cls_b"]).passed


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = ModelParams.init(ModelConfig(hidden_dim=16), 5)
        save_checkpoint(p, tmp_path / "c.npz")
        q = load_checkpoint(tmp_path / "c.npz")
        assert q.config == p.config and q.equals(p)
        for k in p.keys():
            assert q[k].tobytes() == p[k].tobytes()


class TestProposals:
    def setup_method(self):
        self.scene = generate_scene(GeneratorConfig(), 11)
        self.p = ModelParams.init(ModelConfig(hidden_dim=8), 0)

    def test_zero_deltas_keep_anchors(self):
        p = ModelParams.zeros(self.p.config)
        props = rpn_propose(p, self.scene, ProposalConfig(top_k=10_000, pre_nms_top_k=10_000, nms_threshold=0.99))
        anchors = scene_anchors(self.scene, p.config).boxes
        ious = iou_matrix(props.boxes, anchors)
        np.testing.assert_allclose(ious.max(axis=1), 1.0, atol=1e-9)

    def test_descending_scores(self):
        props = rpn_propose(self.p, self.scene, ProposalConfig())
        assert np.all(np.diff(props.scores) <= 0) and len(props) <= 150

    def test_jitter_covers_every_gt(self):
        gts = np.array([a.full.as_list() for a in self.scene.annotations])
        cfg = ProposalConfig(oracle_jitter=True)
        props = rpn_propose(self.p, self.scene, cfg, gt_boxes=gts, rng=np.random.default_rng(0))
        assert np.all(iou_matrix(props.boxes, gts).max(axis=0) > 0.5)
        assert props.from_jitter.sum() == cfg.jitter_per_gt * len(gts)

    def test_jitter_needs_rng(self):
        with pytest.raises(ValueError):
            rpn_propose(self.p, self.scene, ProposalConfig(oracle_jitter=True), gt_boxes=np.array([[0, 0, 20, 50.0]]))

    def test_pool_many_matches_single(self):
        props = rpn_propose(self.p, self.scene, ProposalConfig(top_k=20))
        many = roi_pool_many(self.scene, props.boxes, 3)
        for i in range(5):
            np.testing.assert_array_equal(many[i], roi_pool(self.scene, Box.from_array(props.boxes[i]), 3))
