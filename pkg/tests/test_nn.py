import math

import numpy as np
import pytest

from sleepstage import nn
from sleepstage.errors import (
    IndexOutOfRange,
    InvalidSpec,
    NoForwardCache,
    ShapeMismatch,
)
from sleepstage.nn import (
    Activation,
    ConvLayer,
    DenseLayer,
    Network,
    NetworkConfig,
    SeBlock,
    conv_forward,
    cross_entropy,
    leaky_relu,
    orthogonal_init,
    orthogonal_regularization,
    relu,
    se_forward,
    sigmoid,
    softmax,
)

ACTIVATIONS = [
    Activation("sigmoid"),
    Activation("relu"),
    Activation("leaky_relu", 0.1),
]


def finite_diff(f, arr, index, h=1e-5):
    old = arr.flat[index]
    arr.flat[index] = old + h
    fp = f()
    arr.flat[index] = old - h
    fm = f()
    arr.flat[index] = old
    return (fp - fm) / (2 * h)


def check_grads(f, arrs_and_grads, rng, per_array=5, tol=1e-4):
    worst = 0.0
    for arr, grad in arrs_and_grads:
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_array, flat.size), replace=False)
        for k in picks:
            fd = finite_diff(f, arr, k)
            an = grad.flat[k]
            if abs(fd) < 1e-9 and abs(an) < 1e-9:
                continue
            rel = abs(fd - an) / max(abs(fd), abs(an))
            worst = max(worst, rel)
    assert worst <= tol, f"worst relative gradient error {worst:.3e}"


class TestActivations:
    def test_sigmoid_values(self):
        assert sigmoid(0.0) == 0.5
        assert abs(sigmoid(100.0) - 1.0) <= 1e-9
        assert sigmoid(-1.7) == pytest.approx(1.0 - sigmoid(1.7), abs=1e-15)

    def test_relu_values(self):
        assert relu(5.0) == 5.0
        assert relu(-5.0) == 0.0
        assert relu(0.0) == 0.0

    def test_leaky_relu_values(self):
        assert leaky_relu(2.0, 0.1) == 2.0
        assert leaky_relu(-1.0, 0.1) == -0.1
        assert leaky_relu(0.0, 0.3) == 0.0

    def test_leaky_slope_validated(self):
        with pytest.raises(InvalidSpec):
            leaky_relu(1.0, 1.5)

    def test_relu_equals_leaky_on_positives(self):
        xs = np.linspace(0.0, 10.0, 50)
        assert np.array_equal(relu(xs), leaky_relu(xs, 0.2))

    def test_continuity_at_zero(self):
        for alpha in (0.1, 0.2, 0.3):
            assert leaky_relu(1e-12, alpha) == pytest.approx(0.0, abs=1e-11)
            assert leaky_relu(-1e-12, alpha) == pytest.approx(0.0, abs=1e-11)

    def test_sigmoid_derivative_identity(self):
        act = Activation("sigmoid")
        z = np.linspace(-4, 4, 41)
        out = act.f(z)
        h = 1e-6
        numeric = (act.f(z + h) - act.f(z - h)) / (2 * h)
        assert np.abs(act.df(z, out) - numeric).max() <= 1e-6


class TestOrthogonalInit:
    def test_1x1_sign_corrected(self):
        for seed in range(5):
            assert orthogonal_init(1, 1, seed)[0, 0] == 1.0

    def test_square_gram_identity(self):
        m = orthogonal_init(4, 4, 11)
        assert np.abs(m @ m.T - np.eye(4)).max() <= 1e-6

    def test_wide_gram_identity(self):
        m = orthogonal_init(3, 8, 13)
        assert np.abs(m @ m.T - np.eye(3)).max() <= 1e-6

    def test_tall_gram_identity(self):
        m = orthogonal_init(8, 3, 13)
        assert np.abs(m.T @ m - np.eye(3)).max() <= 1e-6

    def test_deterministic(self):
        assert np.array_equal(orthogonal_init(6, 6, 4), orthogonal_init(6, 6, 4))


class TestOrthogonalRegularization:
    def test_orthogonal_matrix_zero_penalty(self):
        m = orthogonal_init(5, 9, 0)
        penalty, grad = orthogonal_regularization(m, 2.0)
        assert penalty <= 1e-10
        assert np.abs(grad).max() <= 1e-7

    def test_disabled_when_lambda_zero(self):
        penalty, grad = orthogonal_regularization(np.full((3, 3), 7.0), 0.0)
        assert penalty == 0.0
        assert np.all(grad == 0.0)

    def test_scalar_case(self):
        penalty, grad = orthogonal_regularization(np.array([[2.0]]), 1.0)
        assert penalty == pytest.approx(9.0)
        assert grad[0, 0] == pytest.approx(24.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((4, 6))
        lam = 0.7
        _, grad = orthogonal_regularization(w, lam)

        def f():
            return orthogonal_regularization(w, lam)[0]

        check_grads(f, [(w, grad)], rng, per_array=8)


class TestConvLayer:
    def test_identity_kernel(self):
        layer = ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1), act=Activation("leaky_relu", 0.1))
        x = np.abs(np.random.default_rng(0).random((1, 4, 4))) + 0.1
        assert np.allclose(conv_forward(layer, x), x)

    def test_bias_only(self):
        layer = ConvLayer(np.zeros((1, 1, 3, 3)), np.array([0.5]), pad=1,
                          act=Activation("leaky_relu", 0.1))
        out = conv_forward(layer, np.zeros((1, 5, 5)))
        assert np.allclose(out, 0.5)

    def test_brute_force_sum(self):
        layer = ConvLayer(np.ones((1, 1, 2, 2)), np.zeros(1))
        out = conv_forward(layer, np.ones((1, 3, 3)))
        assert out.shape == (1, 2, 2)
        assert np.allclose(out, 4.0)

    def test_matches_direct_convolution(self):
        # brute-force direct-sum oracle on a random case
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 6, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        layer = ConvLayer(w, rng.standard_normal(3), stride=2, pad=1)
        out = conv_forward(layer, x)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for f in range(3):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    patch = xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    want = (patch * w[f]).sum() + layer.b[f]
                    assert out[f, i, j] == pytest.approx(want, rel=1e-12, abs=1e-12)

    def test_output_dims_formula(self):
        layer = ConvLayer(np.zeros((4, 1, 3, 3)), np.zeros(4), stride=2, pad=1)
        out = conv_forward(layer, np.zeros((1, 9, 7)))
        assert out.shape == (4, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_channel_mismatch(self):
        layer = ConvLayer(np.zeros((1, 2, 3, 3)), np.zeros(1))
        with pytest.raises(ShapeMismatch):
            conv_forward(layer, np.zeros((1, 5, 5)))

    @pytest.mark.parametrize("act", ACTIVATIONS, ids=lambda a: a.kind)
    def test_gradients(self, act):
        rng = np.random.default_rng(7)
        for _ in range(4):
            x = rng.standard_normal((2, 2, 5, 5))
            layer = ConvLayer(
                0.5 * rng.standard_normal((3, 2, 3, 3)),
                rng.standard_normal(3),
                stride=1,
                pad=1,
                act=act,
            )
            proj = rng.standard_normal((2, 3, 5, 5))

            def f():
                return float((layer.forward(x) * proj).sum())

            out = layer.forward(x)
            if act.kind != "sigmoid" and np.abs(layer._cache[2]).min() < 1e-4:
                continue  # too close to a kink for finite differences
            dx = layer.backward(proj)
            check_grads(f, [(layer.w, layer.dw), (layer.b, layer.db), (x, dx)], rng)


class TestSeBlock:
    def make_block(self, channels=2, gate="sigmoid", seed=0):
        rng = np.random.default_rng(seed)
        return SeBlock.init(channels, 2, Activation("leaky_relu", 0.1), gate, rng)

    def test_identity_gate(self):
        block = self.make_block(channels=3, gate="leaky_clamp")
        block.fc2.w[:] = 0.0
        block.fc2.b[:] = 1.0  # leaky(1) = 1 clamps to exactly 1
        x = np.random.default_rng(1).random((3, 4, 4))
        assert np.allclose(se_forward(block, x), x)

    def test_null_gate(self):
        block = self.make_block(channels=3, gate="leaky_clamp")
        block.fc2.w[:] = 0.0
        block.fc2.b[:] = -5.0  # leaky(-5) < 0 clamps to 0
        x = np.random.default_rng(2).random((3, 4, 4))
        assert np.all(se_forward(block, x) == 0.0)

    def test_hand_computed_scalar_case(self):
        block = self.make_block(channels=2, gate="sigmoid")
        block.fc1.w[:] = np.array([[0.5, -0.25]])
        block.fc1.b[:] = 0.1
        block.fc2.w[:] = np.array([[2.0], [-1.0]])
        block.fc2.b[:] = np.array([0.0, 0.2])
        x = np.array([[[0.8]], [[0.4]]])
        s1, s2 = 0.8, 0.4
        pre = 0.5 * s1 - 0.25 * s2 + 0.1
        hidden = pre if pre > 0 else 0.1 * pre
        g1 = 1.0 / (1.0 + math.exp(-(2.0 * hidden)))
        g2 = 1.0 / (1.0 + math.exp(-(-1.0 * hidden + 0.2)))
        out = se_forward(block, x)
        assert out[0, 0, 0] == pytest.approx(s1 * g1, rel=1e-12)
        assert out[1, 0, 0] == pytest.approx(s2 * g2, rel=1e-12)

    def test_channel_mismatch(self):
        block = self.make_block(channels=4)
        with pytest.raises(ShapeMismatch):
            se_forward(block, np.zeros((3, 2, 2)))

    @pytest.mark.parametrize("gate", ["sigmoid", "leaky_clamp"])
    def test_gradients(self, gate):
        rng = np.random.default_rng(9)
        tried = 0
        for seed in range(20):
            block = self.make_block(channels=4, gate=gate, seed=seed)
            x = rng.random((2, 4, 3, 3)) + 0.1
            proj = rng.standard_normal((2, 4, 3, 3))

            def f():
                return float((block.forward(x) * proj).sum())

            block.forward(x)
            _, u, g = block._cache
            if gate == "leaky_clamp" and (
                np.abs(u).min() < 1e-3 or np.abs(u - 1.0).min() < 1e-3
            ):
                continue  # gate sitting on a clamp edge
            dx = block.backward(proj)
            check_grads(
                f,
                [
                    (block.fc1.w, block.fc1.dw),
                    (block.fc1.b, block.fc1.db),
                    (block.fc2.w, block.fc2.dw),
                    (block.fc2.b, block.fc2.db),
                    (x, dx),
                ],
                rng,
            )
            tried += 1
            if tried >= 4:
                break
        assert tried >= 2


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        assert np.allclose(softmax(np.zeros(5)), 0.2)

    def test_shift_invariance_extreme(self):
        p = softmax(np.array([3.0, 1003.0]))
        assert np.all(np.isfinite(p))
        assert p[1] == pytest.approx(1.0)
        base = softmax(np.array([0.3, -1.2, 2.0]))
        shifted = softmax(np.array([0.3, -1.2, 2.0]) + 123.456)
        assert np.abs(base - shifted).max() <= 1e-12

    def test_sums_to_one(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            p = softmax(rng.standard_normal(5) * 10)
            assert abs(p.sum() - 1.0) <= 1e-12
            assert np.all(p > 0)

    def test_against_high_precision(self):
        import mpmath

        logits = [1.0, 2.0, 3.0]
        with mpmath.workdps(50):
            exps = [mpmath.e ** v for v in logits]
            total = sum(exps)
            expected = [float(v / total) for v in exps]
        assert np.abs(softmax(np.array(logits)) - expected).max() <= 1e-15

    def test_cross_entropy_values(self):
        assert cross_entropy(np.array([0.0, 1.0, 0.0]), 1) == pytest.approx(0.0, abs=1e-9)
        assert cross_entropy(np.full(5, 0.2), 3) == pytest.approx(math.log(5), abs=1e-9)

    def test_cross_entropy_label_range(self):
        with pytest.raises(IndexOutOfRange):
            cross_entropy(np.full(5, 0.2), 7)


class TestDenseLayer:
    def test_hand_computed_2x2(self):
        layer = DenseLayer(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.5, -0.5]), None)
        x = np.array([[1.0, -1.0]])
        out = layer.forward(x)
        assert np.allclose(out, [[1 - 2 + 0.5, 3 - 4 - 0.5]])
        dout = np.array([[1.0, 2.0]])
        dx = layer.backward(dout)
        # dw = dout^T x, db = dout, dx = dout W
        assert np.allclose(layer.dw, [[1.0, -1.0], [2.0, -2.0]])
        assert np.allclose(layer.db, [1.0, 2.0])
        assert np.allclose(dx, [[1 * 1 + 2 * 3, 1 * 2 + 2 * 4]])

    @pytest.mark.parametrize("act", ACTIVATIONS, ids=lambda a: a.kind)
    def test_gradients(self, act):
        rng = np.random.default_rng(17)
        for _ in range(4):
            layer = DenseLayer(rng.standard_normal((4, 6)), rng.standard_normal(4), act)
            x = rng.standard_normal((3, 6))
            proj = rng.standard_normal((3, 4))

            def f():
                return float((layer.forward(x) * proj).sum())

            layer.forward(x)
            if act.kind != "sigmoid" and np.abs(layer._cache[1]).min() < 1e-4:
                continue
            dx = layer.backward(proj)
            check_grads(f, [(layer.w, layer.dw), (layer.b, layer.db), (x, dx)], rng)

    def test_backward_requires_forward(self):
        layer = DenseLayer(np.eye(2), np.zeros(2), None)
        with pytest.raises(NoForwardCache):
            layer.backward(np.ones((1, 2)))


def small_network(activation="leaky_relu", gate="leaky_clamp", seed=3):
    cfg = NetworkConfig(
        channel_plan=(4, 6),
        strides=(1, 2),
        activation=activation,
        alpha=0.1,
        se_ratio=2,
        gate=gate,
    )
    return Network.build((1, 8, 8), cfg, seed=seed)


class TestNetwork:
    def test_structure_default(self):
        net = Network.build((1, 16, 16), NetworkConfig(), seed=0)
        assert len(net.conv_layers) == 7
        assert net.dense.w.shape[0] == 5
        assert all(se is not None for se in net.se_blocks)
        probs = net.forward(np.random.default_rng(0).random((2, 1, 16, 16)))
        assert probs.shape == (2, 5)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_init_weights_orthogonal(self):
        net = Network.build((1, 16, 16), NetworkConfig(), seed=1)
        for conv in net.conv_layers:
            m = conv.w_matrix
            gram = m @ m.T if m.shape[0] <= m.shape[1] else m.T @ m
            assert np.abs(gram - np.eye(gram.shape[0])).max() <= 1e-6

    def test_zero_upstream_gives_zero_grads(self):
        net = small_network()
        x = np.random.default_rng(1).random((2, 1, 8, 8))
        net.forward(x)
        net.backward(np.zeros((2, 5)), ortho_lambda=0.0)
        for g in net.gradients():
            assert np.all(g == 0.0)

    def test_backward_requires_forward(self):
        net = small_network()
        with pytest.raises(NoForwardCache):
            net.backward(np.zeros((1, 5)))

    def test_every_parameter_has_gradient(self):
        net = small_network()
        x = np.random.default_rng(2).random((2, 1, 8, 8))
        net.loss_and_grad(x, [0, 1], ortho_lambda=1e-3)
        grads = net.gradients()
        assert len(grads) == len(net.parameters())
        assert all(g is not None and g.shape == p.shape
                   for g, p in zip(grads, net.parameters()))

    def test_full_network_gradcheck(self):
        rng = np.random.default_rng(0)
        net = small_network()
        x = rng.random((2, 1, 8, 8))
        labels = np.array([1, 3])
        lam = 1e-3

        def f():
            probs = net.forward(x)
            picked = probs[np.arange(2), labels]
            return float(-np.log(picked + 1e-12).mean()) + net.ortho_penalty(lam)

        net.loss_and_grad(x, labels, lam)
        pairs = list(zip(net.parameters(), [g.copy() for g in net.gradients()]))
        check_grads(f, pairs, rng, per_array=4)

    def test_forward_shape_guard(self):
        net = small_network()
        with pytest.raises(ShapeMismatch):
            net.forward(np.zeros((1, 1, 9, 9)))

    def test_set_parameters_roundtrip(self):
        net1 = small_network(seed=4)
        net2 = small_network(seed=5)
        net2.set_parameters([p.copy() for p in net1.parameters()])
        x = np.random.default_rng(3).random((1, 1, 8, 8))
        assert np.array_equal(net1.forward(x), net2.forward(x))


class TestSaturationContrast:
    def test_leaky_first_layer_gradients_beat_sigmoid(self):
        rng = np.random.default_rng(42)
        imgs = rng.random((6, 1, 16, 16))
        labels = rng.integers(0, 5, 6)
        wins = 0
        seeds = range(6)
        for seed in seeds:
            means = {}
            for act, gate in (("leaky_relu", "leaky_clamp"), ("sigmoid", "sigmoid")):
                cfg = NetworkConfig(activation=act, alpha=0.1, gate=gate)
                net = Network.build((1, 16, 16), cfg, seed=seed)
                net.loss_and_grad(imgs, labels, 0.0)
                means[act] = float(np.abs(net.conv_layers[0].dw).mean())
            if means["leaky_relu"] > means["sigmoid"]:
                wins += 1
        assert wins >= len(list(seeds)) - 1
