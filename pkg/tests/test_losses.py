import math

import numpy as np
import pytest

from msfm.geometry import Box
from msfm.losses import (
    LossBreakdown,
    MSFMMode,
    SimilarityKind,
    ZeroVectorError,
    cross_entropy,
    cross_entropy_mean,
    decode_deltas,
    encode_deltas,
    msfm_loss,
    smooth_l1,
    total_loss,
)
from msfm.sampling import PositiveGroups


def fd_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


class TestCrossEntropy:
    def test_uniform(self):
        loss, _ = cross_entropy(np.array([0.0, 0.0]), 1)
        assert loss == pytest.approx(math.log(2))

    def test_confident(self):
        loss, _ = cross_entropy(np.array([10.0, -10.0]), 0)
        # log(1 + e^-20)
        assert loss == pytest.approx(2.0611536e-9, rel=1e-6)

    def test_large_logits_stable(self):
        loss, g = cross_entropy(np.array([1000.0, -1000.0]), 1)
        assert loss == pytest.approx(2000.0)
        assert np.all(np.isfinite(g))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            z = rng.normal(0, 3, 2)
            y = int(rng.integers(2))
            _, g = cross_entropy(z, y)
            np.testing.assert_allclose(g, fd_grad(lambda v: cross_entropy(v, y)[0], z), atol=1e-6)

    def test_batch_mean(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(5, 2))
        y = rng.integers(0, 2, 5)
        loss, g = cross_entropy_mean(z, y)
        assert loss == pytest.approx(np.mean([cross_entropy(z[i], y[i])[0] for i in range(5)]))
        np.testing.assert_allclose(g, fd_grad(lambda v: cross_entropy_mean(v, y)[0], z), atol=1e-7)


class TestSmoothL1:
    def test_examples(self):
        z = np.zeros(4)
        assert smooth_l1(z, z)[0] == 0.0
        assert smooth_l1(np.array([0.5, 0, 0, 0]), z)[0] == 0.125
        assert smooth_l1(np.array([2.0, 0, 0, 0]), z)[0] == 1.5

    def test_gradient(self):
        d = np.array([0.3, -0.7, 1.8, -2.5])
        _, g = smooth_l1(d, np.zeros(4))
        np.testing.assert_allclose(g, [0.3, -0.7, 1.0, -1.0])


class TestDeltas:
    def test_identity(self):
        b = Box(3, 4, 13, 40)
        np.testing.assert_array_equal(encode_deltas(b, b), np.zeros(4))

    def test_hand_example(self):
        np.testing.assert_allclose(encode_deltas(Box(0, 0, 10, 10), Box(5, 5, 15, 15)), [0.5, 0.5, 0, 0])

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            p = Box(*_rand(rng))
            g = Box(*_rand(rng))
            back = decode_deltas(p, encode_deltas(p, g))
            np.testing.assert_allclose(back.as_array(), g.as_array(), atol=1e-9)


def _rand(rng):
    x, y = rng.uniform(-50, 50, 2)
    w, h = rng.uniform(1, 80, 2)
    return x, y, x + w, y + h


def one_group(m, n):
    return PositiveGroups({0: (list(range(m)), list(range(n)))})


class TestMSFM:
    def test_parallel_means(self):
        fb = np.array([[1.0, 0.0], [0.0, 1.0]])
        vb = np.array([[1.0, 1.0]])
        loss, _, _ = msfm_loss(one_group(2, 1), fb, vb)
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal_and_antipodal(self):
        u = np.array([[1.0, 0.0]])
        assert msfm_loss(one_group(1, 1), u, np.array([[0.0, 2.0]]))[0] == pytest.approx(1.0)
        assert msfm_loss(one_group(1, 1), u, -3 * u)[0] == pytest.approx(2.0)

    def test_zero_mean_rejected(self):
        with pytest.raises(ZeroVectorError):
            msfm_loss(one_group(2, 1), np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([[1.0, 1.0]]))

    def test_empty_groups_rejected(self):
        with pytest.raises(ValueError):
            msfm_loss(PositiveGroups(), np.ones((1, 2)), np.ones((1, 2)))

    def test_average_over_groups(self):
        fb = np.array([[1.0, 0.0], [1.0, 0.0]])
        vb = np.array([[1.0, 0.0], [0.0, 1.0]])
        groups = PositiveGroups({0: ([0], [0]), 1: ([1], [1])})
        assert msfm_loss(groups, fb, vb)[0] == pytest.approx(0.5)

    def test_pos_plus_neg_adds_one_group(self):
        fb = np.array([[1.0, 0.0], [1.0, 0.0]])
        vb = np.array([[1.0, 0.0], [0.0, 1.0]])
        g = PositiveGroups({0: ([0], [0])})
        loss, _, _ = msfm_loss(g, fb, vb, mode=MSFMMode.POS_PLUS_NEG, negatives=([1], [1]))
        assert loss == pytest.approx(0.5)  # (0 + 1) / 2

    def test_distance_variants_on_unit_means(self):
        u, w = np.array([[2.0, 0.0]]), np.array([[0.0, 5.0]])
        assert msfm_loss(one_group(1, 1), u, w, SimilarityKind.EUCLIDEAN)[0] == pytest.approx(math.sqrt(2))
        assert msfm_loss(one_group(1, 1), u, w, SimilarityKind.MANHATTAN)[0] == pytest.approx(2.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        fb, vb = rng.normal(size=(5, 16)), rng.normal(size=(4, 16))
        groups = PositiveGroups({0: ([0, 1, 2], [0, 1]), 1: ([3, 4], [2, 3])})
        base = msfm_loss(groups, fb, vb)[0]
        scaled = fb.copy()
        scaled[[0, 1, 2]] *= 7.5
        assert msfm_loss(groups, scaled, vb)[0] == pytest.approx(base, abs=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            fb, vb = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
            loss = msfm_loss(PositiveGroups({0: ([0, 1], [0]), 1: ([2], [1, 2])}), fb, vb)[0]
            assert 0.0 <= loss <= 2.0

    @pytest.mark.parametrize("kind", list(SimilarityKind))
    @pytest.mark.parametrize("mode", list(MSFMMode))
    def test_gradient_fd(self, kind, mode):
        rng = np.random.default_rng(5)
        fb, vb = rng.normal(size=(6, 16)), rng.normal(size=(6, 16))
        groups = PositiveGroups({0: ([0, 1], [0]), 1: ([2], [1, 2, 3])})
        neg = ([3, 4, 5], [4, 5])
        _, gf, gv = msfm_loss(groups, fb, vb, kind, mode, neg)
        num_f = fd_grad(lambda x: msfm_loss(groups, x, vb, kind, mode, neg)[0], fb)
        num_v = fd_grad(lambda x: msfm_loss(groups, fb, x, kind, mode, neg)[0], vb)
        np.testing.assert_allclose(gf, num_f, atol=1e-7)
        np.testing.assert_allclose(gv, num_v, atol=1e-7)

    def test_non_members_get_no_gradient(self):
        rng = np.random.default_rng(6)
        fb, vb = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
        _, gf, gv = msfm_loss(PositiveGroups({0: ([0], [1])}), fb, vb)
        assert np.all(gf[1:] == 0) and np.all(gv[[0, 2, 3]] == 0)


class TestTotal:
    def test_sum(self):
        assert total_loss((1, 2, 3, 4, 5, 6)).total == 21
        assert total_loss(LossBreakdown()).total == 0

    def test_linearity(self):
        parts = LossBreakdown(0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
        assert parts.scaled(2.0).total == pytest.approx(2 * parts.total)

    def test_weights_extension(self):
        parts = LossBreakdown(1, 1, 1, 1, 1, 1)
        assert total_loss(parts, {"msfmm": 0.5}).total == 5.5
