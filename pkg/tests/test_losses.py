import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tadfkd import autodiff as ad
from tadfkd import losses as L
from tadfkd.autodiff import Graph, finite_diff_check
from tadfkd.errors import EmptySelection, GridMismatch, LayerCountMismatch
from tadfkd.nn import BnObservation, make_classifier, make_generator


def probs_rows(rng, n, c):
    p = rng.uniform(0.05, 1.0, size=(n, c))
    return p / p.sum(axis=1, keepdims=True)


def kl(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def direct_jsd(p, q):
    m = [(a + b) / 2 for a, b in zip(p, q)]
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def direct_softmax(row):
    e = [math.exp(v - max(row)) for v in row]
    return [v / sum(e) for v in e]


class TestCrossEntropy:
    def test_own_onehot_is_zero(self):
        g = Graph()
        p = np.eye(3)
        assert np.all(L.cross_entropy(g.const(p), p).data == 0.0)

    def test_uniform(self):
        g = Graph()
        out = L.cross_entropy(g.const(np.full((2, 4), 0.25)), np.eye(4)[[0, 3]])
        np.testing.assert_allclose(out.data, math.log(4), atol=1e-12)

    def test_matches_direct(self):
        rng = np.random.default_rng(0)
        p = probs_rows(rng, 5, 4)
        y = np.eye(4)[rng.integers(0, 4, size=5)]
        g = Graph()
        direct = -(y * np.log(p)).sum(axis=1)
        np.testing.assert_allclose(L.cross_entropy(g.const(p), y).data, direct, atol=1e-12)


class TestClassPrior:
    def test_confident_is_near_zero(self):
        g = Graph()
        logits = np.array([[50.0, 0.0, 0.0], [0.0, 0.0, 60.0]])
        assert L.class_prior_loss(g.const(logits)).data < 1e-20

    def test_uniform_ten_classes(self):
        g = Graph()
        assert abs(L.class_prior_loss(g.const(np.zeros((3, 10)))).data - math.log(10)) < 1e-12

    def test_tie_break_lowest_index(self):
        logits = np.array([[1.0, 3.0, 3.0, 0.0], [2.0, 2.0, -1.0, 0.5]])
        g = Graph()
        got = float(L.class_prior_loss(g.const(logits)).data)
        # labels by lowest-index rule: row 0 -> 1, row 1 -> 0
        direct = -(math.log(direct_softmax(logits[0])[1]) + math.log(direct_softmax(logits[1])[0])) / 2
        assert abs(got - direct) < 1e-12
        np.testing.assert_array_equal(L.argmax_lowest(logits), [1, 0])


class TestJsd:
    def test_identical(self):
        g = Graph()
        p = g.const(probs_rows(np.random.default_rng(1), 4, 3))
        np.testing.assert_allclose(L.jsd(p, p).data, 0.0, atol=1e-15)

    def test_disjoint_onehots(self):
        g = Graph()
        out = L.jsd(g.const([[1.0, 0.0]]), g.const([[0.0, 1.0]])).data[0]
        assert abs(out - math.log(2)) < 1e-12

    def test_half_vs_onehot(self):
        g = Graph()
        out = L.jsd(g.const([[0.5, 0.5]]), g.const([[1.0, 0.0]])).data[0]
        assert abs(out - direct_jsd([0.5, 0.5], [1.0, 0.0])) < 1e-12
        assert abs(out - 0.2158) < 5e-5

    @given(st.integers(0, 10_000))
    @settings(max_examples=50)
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        p, q = probs_rows(rng, 3, 4), probs_rows(rng, 3, 4)
        if seed % 3 == 0:
            p = np.eye(4)[rng.integers(0, 4, size=3)]
        g = Graph()
        a = L.jsd(g.const(p), g.const(q)).data
        b = L.jsd(g.const(q), g.const(p)).data
        np.testing.assert_allclose(a, b, atol=1e-15)
        assert np.all(a >= -1e-15) and np.all(a <= math.log(2) + 1e-12)


class TestAdversarial:
    def test_identical_logits(self):
        g = Graph()
        t = g.const(np.random.default_rng(0).normal(size=(5, 3)))
        assert float(L.adversarial_loss(t, t).data) == 1.0

    def test_disjoint_outputs(self):
        g = Graph()
        t = g.const([[1000.0, 0.0], [0.0, 1000.0]])
        s = g.const([[0.0, 1000.0], [1000.0, 0.0]])
        assert abs(float(L.adversarial_loss(t, s).data) - (1 - math.log(2))) < 1e-12

    def test_subset_mean(self):
        rng = np.random.default_rng(2)
        t, s = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        mask = np.array([True, False, True, False, False, True])
        g = Graph()
        got = float(L.adversarial_loss(g.const(t), g.const(s), mask).data)
        manual = np.mean([1 - direct_jsd(direct_softmax(t[i]), direct_softmax(s[i])) for i in np.flatnonzero(mask)])
        assert abs(got - manual) < 1e-12

    def test_empty_selection(self):
        g = Graph()
        t = g.const(np.zeros((3, 2)))
        with pytest.raises(EmptySelection):
            L.adversarial_loss(t, t, np.zeros(3, dtype=bool))

    @given(arrays(np.float64, (4,), elements=st.floats(-20, 20)))
    @settings(max_examples=30)
    def test_row_shift_invariance(self, shifts):
        rng = np.random.default_rng(5)
        t, s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        g = Graph()
        base = float(L.adversarial_loss(g.const(t), g.const(s)).data)
        moved = float(L.adversarial_loss(g.const(t + shifts[:, None]), g.const(s)).data)
        assert abs(base - moved) < 1e-12


class TestKd:
    def test_identical_is_zero(self):
        g = Graph()
        t = g.const(np.ones((3, 4)))
        assert float(L.kd_loss_l1(t, t).data) == 0.0

    def test_analytic(self):
        g = Graph()
        assert float(L.kd_loss_l1(g.const([[1.0, 2.0]]), g.const([[0.0, 0.0]]), [True]).data) == 3.0

    def test_subset_mean(self):
        rng = np.random.default_rng(3)
        t, s = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        mask = np.array([False, True, True, False, True, False])
        g = Graph()
        got = float(L.kd_loss_l1(g.const(t), g.const(s), mask).data)
        manual = np.mean([np.abs(t[i] - s[i]).sum() for i in np.flatnonzero(mask)])
        assert abs(got - manual) < 1e-12

    def test_empty(self):
        g = Graph()
        with pytest.raises(EmptySelection):
            L.kd_loss_l1(g.const(np.zeros((2, 2))), g.const(np.zeros((2, 2))), [False, False])


def _teacher_with_stats(seed=0, hidden=(4, 3), d_in=4):
    net = make_classifier(d_in, hidden, 3, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    for layer in net.bn_layers:
        layer.running_mean[:] = rng.normal(size=layer.dim)
        layer.running_var[:] = rng.uniform(0.5, 2.0, size=layer.dim)
    return net


class TestBns:
    def test_equal_stats_zero(self):
        net = _teacher_with_stats()
        g = Graph()
        obs = BnObservation(
            [g.const(l.running_mean) for l in net.bn_layers], [g.const(l.running_var) for l in net.bn_layers]
        )
        assert float(L.bns_loss(obs, net).data) == 0.0

    def test_single_layer_unit_mean_shift(self):
        net = make_classifier(1, (1,), 2, np.random.default_rng(0))
        bn = net.bn_layers[0]
        bn.running_mean[:] = 0.0
        bn.running_var[:] = 1.0
        g = Graph()
        obs = BnObservation([g.const([1.0])], [g.const([1.0])])
        assert float(L.bns_loss(obs, net).data) == 1.0

    def test_two_layers_direct(self):
        net = _teacher_with_stats(1)
        rng = np.random.default_rng(9)
        means = [rng.normal(size=l.dim) for l in net.bn_layers]
        vars_ = [rng.uniform(0.1, 3, size=l.dim) for l in net.bn_layers]
        g = Graph()
        obs = BnObservation([g.const(m) for m in means], [g.const(v) for v in vars_])
        direct = sum(
            np.linalg.norm(m - l.running_mean) + np.linalg.norm(v - l.running_var)
            for m, v, l in zip(means, vars_, net.bn_layers)
        )
        assert abs(float(L.bns_loss(obs, net).data) - direct) < 1e-12

    def test_layer_count_mismatch(self):
        net = _teacher_with_stats()
        g = Graph()
        with pytest.raises(LayerCountMismatch):
            L.bns_loss(BnObservation([g.const([0.0])], [g.const([1.0])]), net)


class TestRegularizers:
    def test_tv_constant(self):
        g = Graph()
        assert float(L.total_variation(g.const(np.full((2, 6), 0.3)), (2, 3)).data) == 0.0

    def test_tv_hand_example(self):
        g = Graph()
        assert float(L.total_variation(g.const([[0.0, 1.0, 0.0, 1.0]]), (2, 2)).data) == 0.5

    def test_tv_1d_fallback(self):
        x = np.random.default_rng(0).normal(size=(3, 7))
        loop = 0.0
        for row in x:
            loop += sum((row[i + 1] - row[i]) ** 2 for i in range(6)) / 7
        g = Graph()
        assert abs(float(L.total_variation(g.const(x)).data) - loop / 3) < 1e-12

    def test_tv_grid_loop(self):
        x = np.random.default_rng(1).normal(size=(2, 12))
        h, w = 3, 4
        total = 0.0
        for row in x:
            img = row.reshape(h, w)
            s = 0.0
            for r in range(h):
                for c in range(w):
                    if c + 1 < w:
                        s += (img[r, c + 1] - img[r, c]) ** 2
                    if r + 1 < h:
                        s += (img[r + 1, c] - img[r, c]) ** 2
            total += s / 12
        g = Graph()
        assert abs(float(L.total_variation(g.const(x), (h, w)).data) - total / 2) < 1e-12

    def test_tv_grid_mismatch(self):
        g = Graph()
        with pytest.raises(GridMismatch):
            L.total_variation(g.const(np.zeros((1, 5))), (2, 2))

    def test_l2(self):
        g = Graph()
        assert float(L.l2_reg(g.const(np.zeros((3, 2)))).data) == 0.0
        assert float(L.l2_reg(g.const([[3.0, 4.0]])).data) == 5.0
        x = np.random.default_rng(2).normal(size=(5, 3))
        direct = np.mean([math.sqrt(sum(v * v for v in row)) for row in x])
        assert abs(float(L.l2_reg(g.const(x)).data) - direct) < 1e-12


def _observed(seed=0):
    teacher = _teacher_with_stats(seed)
    g = Graph()
    x = g.const(np.random.default_rng(seed + 7).uniform(-1, 1, size=(6, 4)))
    _, obs = teacher.forward(x, "observe")
    return teacher, g, x, obs


class TestRepresentation:
    def test_lambda_one(self):
        teacher, g, x, obs = _observed()
        rep = L.representation_loss(obs, teacher, x, (2, 2), 1.0).data
        expected = L.bns_loss(obs, teacher).data + L.total_variation(x, (2, 2)).data
        assert rep == expected

    def test_lambda_zero(self):
        teacher, g, x, obs = _observed()
        rep = L.representation_loss(obs, teacher, x, (2, 2), 0.0).data
        assert rep == L.bns_loss(obs, teacher).data + L.l2_reg(x).data

    def test_component_sum(self):
        teacher, g, x, obs = _observed(3)
        rep = float(L.representation_loss(obs, teacher, x, None, 0.5).data)
        parts = (
            float(L.bns_loss(obs, teacher).data)
            + 0.5 * float(L.total_variation(x).data)
            + 0.5 * float(L.l2_reg(x).data)
        )
        assert abs(rep - parts) < 1e-12


class TestGeneratorLoss:
    def setup_method(self):
        g = Graph()
        self.cls, self.adv, self.rep = g.const(0.7), g.const(0.9), g.const(0.3)

    def test_ta_default(self):
        w = L.LossWeights(0.0, 1.0, 10.0)
        assert float(L.generator_loss(w, None, self.adv, self.rep).data) == 0.9 + 10 * 0.3

    def test_cls_only(self):
        w = L.LossWeights(1.0, 0.0, 0.0)
        assert float(L.generator_loss(w, self.cls, None, None).data) == 0.7

    def test_baseline_sum(self):
        w = L.LossWeights(1.0, 1.0, 10.0)
        assert abs(float(L.generator_loss(w, self.cls, self.adv, self.rep).data) - (0.7 + 0.9 + 3.0)) < 1e-12

    def test_alpha_zero_never_evaluates_cls(self):
        def boom():
            raise AssertionError("class-prior evaluated")

        w = L.LossWeights(0.0, 1.0, 10.0)
        L.generator_loss(w, boom, self.adv, self.rep)


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(-2, 2, size=(5, 3))
    s = rng.uniform(-2, 2, size=(5, 3))
    mask = np.array([True, True, False, True, False])
    x = rng.uniform(-0.9, 0.9, size=(5, 4))

    assert finite_diff_check(lambda g, p: L.class_prior_loss(p["t"]), {"t": t}) < 1e-4
    assert finite_diff_check(lambda g, p: L.adversarial_loss(p["t"], p["s"], mask), {"t": t, "s": s}) < 1e-4
    assert finite_diff_check(lambda g, p: L.kd_loss_l1(g.const(t), p["s"], mask), {"s": s}) < 1e-4
    assert finite_diff_check(lambda g, p: L.total_variation(p["x"], (2, 2)), {"x": x}) < 1e-4
    assert finite_diff_check(lambda g, p: L.l2_reg(p["x"]), {"x": x}) < 1e-4

    teacher = _teacher_with_stats(seed)

    def bns(g, p):
        _, obs = teacher.forward(p["x"], "observe")
        return L.bns_loss(obs, teacher)

    assert finite_diff_check(bns, {"x": x}) < 1e-4
